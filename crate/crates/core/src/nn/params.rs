use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable parameters, iterated in name order.
///
/// Initialization draws from the caller's seeded stream so that two stores
/// built from the same seed hold identical values.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self {
            device,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter '{name}' registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// `U(-1/√fan_in, 1/√fan_in)`, the default for conv and linear weights.
    pub fn uniform_fan_in(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter, keyed by name.
    pub fn tensors(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameter values in place; every name must be present and
    /// shapes must agree.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter '{name}'")))?;
            if t.dims() != var.dims() {
                return Err(Error::Dimension(format!(
                    "parameter '{name}' has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut s = ParamStore::new(Device::Cpu, DType::F32);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            s.uniform_fan_in("a", &[3, 4], 3, &mut rng).unwrap();
            s.constant("b", &[4], 0.0).unwrap();
            s
        };
        assert_eq!(build().digest().unwrap(), build().digest().unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(Device::Cpu, DType::F32);
        s.constant("a", &[1], 0.0).unwrap();
        assert!(s.constant("a", &[1], 0.0).is_err());
    }

    #[test]
    fn load_overwrites_in_place() {
        let mut s = ParamStore::new(Device::Cpu, DType::F32);
        let handle = s.constant("w", &[2], 1.0).unwrap();
        let mut snap = s.tensors().unwrap();
        snap.insert("w".into(), Tensor::new(&[5f32, 6.], &Device::Cpu).unwrap());
        s.load(&snap).unwrap();
        assert_eq!(handle.to_vec1::<f32>().unwrap(), vec![5.0, 6.0]);
    }
}
