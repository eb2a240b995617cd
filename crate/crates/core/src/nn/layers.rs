//! NHWC building blocks expressed with differentiable tensor ops.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{bias_add, conv2d_nhwc, group_norm_nhwc, upsample2_nhwc, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.uniform_fan_in(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Dimension("linear on scalar".into()))?;
        if last != self.in_dim() {
            return Err(Error::Dimension(format!(
                "linear expects last dim {}, got {last}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / last;
        let y = x
            .reshape((rows, last))?
            .matmul(&self.weight)?;
        let y = bias_add(&y, &self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_ch;
        let weight = store.uniform_fan_in(&format!("{name}.weight"), &[fan_in, out_ch], fan_in, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            kernel,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_nhwc(x, &self.weight, Some(&self.bias), self.kernel)
    }
}

/// Group normalization over NHWC activations with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{groups} norm groups do not divide {channels} channels"
            )));
        }
        Ok(Self {
            groups,
            gamma: store.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    fn apply(&self, x: &Tensor, silu: bool) -> Result<Tensor> {
        let (b, _, _, c) = x.dims4()?;
        let a = self.gamma.broadcast_as((b, c))?;
        let s = self.beta.broadcast_as((b, c))?;
        Ok(group_norm_nhwc(x, &a, &s, self.groups, self.eps, silu)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }

    /// `silu(norm(x))` as a single kernel.
    pub fn forward_silu(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }

    /// `silu((x̂·γ + β)·(1 + scale) + shift)`, with `scale` and `shift` of
    /// shape `(B, C)`.
    pub fn forward_modulated_silu(&self, x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
        let one_plus = (scale + 1.0)?;
        let a = one_plus.broadcast_mul(&self.gamma)?;
        let s = one_plus.broadcast_mul(&self.beta)?.add(shift)?;
        Ok(group_norm_nhwc(x, &a, &s, self.groups, self.eps, true)?)
    }
}

/// 2×2 average pooling.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("cannot halve a {h}x{w} activation")));
    }
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?.mean((2, 4))?)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    Ok(upsample2_nhwc(x)?)
}

/// Softmax over the last dimension, shifted by the (detached) row maximum.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Multi-head self-attention over spatial positions with a residual path.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm: GroupNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        head_channels: usize,
        norm_groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let heads = (channels / head_channels.max(1)).max(1);
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {heads} heads"
            )));
        }
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, norm_groups)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, rng)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let n = h * w;
        let d = c / self.heads;
        let qkv = self
            .qkv
            .forward(&self.norm.forward(x)?.reshape((b, n, c))?)?
            .reshape((b, n, 3, self.heads, d))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i, 1)?
                .squeeze(2)?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scale = 1.0 / (d as f64).sqrt();
        let attn = softmax_last(&(q.matmul(&k.t()?)? * scale)?)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        let out = self.proj.forward(&out)?.reshape((b, h, w, c))?;
        Ok((x + out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Tensor::arange(0f32, 16., &Device::Cpu).unwrap().reshape((1, 4, 4, 1)).unwrap();
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.dims(), &[1, 2, 2, 1]);
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(&p).unwrap();
        assert_eq!(u.dims(), &[1, 4, 4, 1]);
        let v = u.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..4], &[2.5, 2.5, 4.5, 4.5]);
        assert_eq!(&v[4..8], &[2.5, 2.5, 4.5, 4.5]);
    }

    #[test]
    fn group_norm_standardizes_groups() {
        let mut store = ParamStore::new(Device::Cpu, DType::F64);
        let gn = GroupNorm::new(&mut store, "gn", 4, 2).unwrap();
        let x = Tensor::randn(3f64, 2.0, (2, 3, 3, 4), &Device::Cpu).unwrap();
        let y = gn.forward(&x).unwrap();
        let g = y.reshape((2, 9, 2, 2)).unwrap();
        let m = g.mean_keepdim((1, 3)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-10));
        assert!(GroupNorm::new(&mut store, "bad", 6, 4).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000f64, 1001., 1002.], [0., 0., 0.]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let l = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!((l[1][0] + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_preserves_shape() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AttentionBlock::new(&mut store, "a", 8, 4, 2, &mut rng).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 4, 4, 8), &Device::Cpu).unwrap();
        assert_eq!(a.forward(&x).unwrap().dims(), &[2, 4, 4, 8]);
    }
}
