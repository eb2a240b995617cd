//! Safetensors checkpoints with a JSON-in-metadata header.
//!
//! Every file carries a `format` tag; loaders refuse files whose tag does not
//! match. Writes go to a sibling temporary file that is renamed into place.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::corruption::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::unet::{UNet, UNetConfig};

pub const FORMAT_TAG: &str = "mdm-checkpoint/1";

const MODEL_PREFIX: &str = "model.";
const EXTRA_PREFIX: &str = "extra.";
const META_PREFIX: &str = "meta.";

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `tensors` and string `metadata` to `path` atomically.
pub fn save_tensors(path: &Path, tensors: &HashMap<String, Tensor>, metadata: BTreeMap<String, String>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut info: HashMap<String, String> = metadata.into_iter().collect();
    info.insert("format".into(), FORMAT_TAG.into());
    // safetensors wants contiguous data
    let contiguous: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    let tmp = temp_sibling(path);
    safetensors::serialize_to_file(contiguous.iter().map(|(k, t)| (k.as_str(), t)), Some(info), &tmp)
        .map_err(|e| Error::format(&tmp, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_tensors`].
pub fn load_tensors(path: &Path) -> Result<(HashMap<String, Tensor>, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let metadata: BTreeMap<String, String> = header.metadata().clone().unwrap_or_default().into_iter().collect();
    match metadata.get("format") {
        Some(tag) if tag == FORMAT_TAG => {}
        Some(tag) => return Err(Error::format(path, format!("unsupported checkpoint format '{tag}', expected '{FORMAT_TAG}'"))),
        None => return Err(Error::format(path, "missing checkpoint format tag")),
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((tensors, metadata))
}

pub(crate) fn meta_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::Config(format!("cannot serialize metadata: {e}")))
}

pub(crate) fn parse_meta<T: DeserializeOwned>(path: &Path, meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::format(path, format!("checkpoint metadata lacks '{key}'")))?;
    serde_json::from_str(raw).map_err(|e| Error::format(path, format!("bad '{key}' metadata: {e}")))
}

/// A U-Net with its diffusion schedule, plus optional extra tensors (e.g.
/// optimizer moments) and free-form string metadata.
#[derive(Debug, Clone)]
pub struct UNetCheckpoint {
    pub config: UNetConfig,
    pub schedule: DiffusionSchedule,
    pub params: HashMap<String, Tensor>,
    pub extra: HashMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl UNetCheckpoint {
    pub fn from_model(model: &UNet, schedule: &DiffusionSchedule) -> Result<Self> {
        Ok(Self {
            config: model.config().clone(),
            schedule: schedule.clone(),
            params: model.params().tensors()?,
            extra: HashMap::new(),
            meta: BTreeMap::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = HashMap::with_capacity(self.params.len() + self.extra.len());
        for (k, t) in &self.params {
            tensors.insert(format!("{MODEL_PREFIX}{k}"), t.clone());
        }
        for (k, t) in &self.extra {
            tensors.insert(format!("{EXTRA_PREFIX}{k}"), t.clone());
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "unet".to_string());
        meta.insert("unet_config".to_string(), meta_json(&self.config)?);
        meta.insert("schedule".to_string(), meta_json(&self.schedule)?);
        for (k, v) in &self.meta {
            meta.insert(format!("{META_PREFIX}{k}"), v.clone());
        }
        save_tensors(path, &tensors, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = load_tensors(path)?;
        if meta.get("kind").map(String::as_str) != Some("unet") {
            return Err(Error::format(path, "not a U-Net checkpoint"));
        }
        let config: UNetConfig = parse_meta(path, &meta, "unet_config")?;
        let schedule: DiffusionSchedule = parse_meta(path, &meta, "schedule")?;
        let mut params = HashMap::new();
        let mut extra = HashMap::new();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(MODEL_PREFIX) {
                params.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix(EXTRA_PREFIX) {
                extra.insert(name.to_string(), t);
            }
        }
        let meta = meta
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(META_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        Ok(Self {
            config,
            schedule,
            params,
            extra,
            meta,
        })
    }

    /// Instantiates the model and overwrites its parameters with the stored ones.
    pub fn build_model(&self) -> Result<UNet> {
        let model = UNet::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params().load(&self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{make_beta_schedule, ScheduleKind};

    fn micro() -> UNetConfig {
        UNetConfig {
            image_size: 16,
            in_channels: 3,
            out_channels: 3,
            base_width: 8,
            channel_mult: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![8],
            head_channels: 8,
            norm_groups: 4,
            time_embed_dim: 16,
        }
    }

    #[test]
    fn round_trip_preserves_parameters_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/ck.safetensors");
        let model = UNet::new(micro(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let schedule = make_beta_schedule(10, ScheduleKind::default()).unwrap();
        let mut ck = UNetCheckpoint::from_model(&model, &schedule).unwrap();
        ck.meta.insert("step".into(), "7".into());
        ck.extra.insert("adam.m.x".into(), Tensor::new(&[1f32, 2.], &Device::Cpu).unwrap());
        ck.save(&path).unwrap();

        let back = UNetCheckpoint::load(&path).unwrap();
        assert_eq!(back.config, micro());
        assert_eq!(back.schedule, schedule);
        assert_eq!(back.meta.get("step").map(String::as_str), Some("7"));
        assert_eq!(back.extra.len(), 1);
        let rebuilt = back.build_model().unwrap();
        assert_eq!(rebuilt.params().digest().unwrap(), model.params().digest().unwrap());
        assert!(!dir.path().join("nested").read_dir().unwrap().any(|e| e
            .unwrap()
            .file_name()
            .to_string_lossy()
            .contains(".tmp")));
    }

    #[test]
    fn rejects_foreign_format_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let t = Tensor::new(&[1f32], &Device::Cpu).unwrap();
        let mut info = HashMap::new();
        info.insert("format".to_string(), "something-else".to_string());
        safetensors::serialize_to_file([("a", &t)], Some(info), &path).unwrap();
        assert!(matches!(load_tensors(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_tensors(Path::new("/nonexistent/ck.safetensors")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.safetensors"));
    }
}
