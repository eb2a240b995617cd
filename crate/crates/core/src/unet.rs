//! Time-conditioned U-Net.
//!
//! The layout follows the guided-diffusion U-Net: an input convolution, a
//! down path of residual blocks per resolution level with residual
//! downsampling between levels, a middle block (res, attention, res), and an
//! up path with `num_res_blocks + 1` blocks per level, each consuming one skip
//! activation. Residual blocks are BigGAN style: the timestep embedding is
//! projected to a per-channel scale and shift applied after the second group
//! norm, and resampling happens inside the block.
//!
//! Decoder blocks are numbered from `0` at the deepest block (right after the
//! middle block) to `num_decoder_blocks() - 1` next to the output.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{avg_pool2, upsample2, AttentionBlock, Conv2d, GroupNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Side length of the (square) training images.
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    /// Spatial sizes (in pixels) at which self-attention is inserted.
    pub attention_resolutions: Vec<usize>,
    pub head_channels: usize,
    pub norm_groups: usize,
    pub time_embed_dim: usize,
}

impl UNetConfig {
    /// Guided-diffusion 256×256 layout: six levels, 18 decoder blocks.
    pub fn reference() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            out_channels: 3,
            base_width: 256,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            num_res_blocks: 2,
            attention_resolutions: vec![32, 16, 8],
            head_channels: 64,
            norm_groups: 32,
            time_embed_dim: 1024,
        }
    }

    /// 64×64 layout with four levels (64, 32, 16, 8) and 12 decoder blocks.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            out_channels: 3,
            base_width: 64,
            channel_mult: vec![1, 2, 2, 2],
            num_res_blocks: 2,
            attention_resolutions: vec![16, 8],
            head_channels: 64,
            norm_groups: 32,
            time_embed_dim: 256,
        }
    }

    /// Narrow variant of [`UNetConfig::desk`] sized for single-core CPU
    /// training: width 16, one residual block per level, 8 decoder blocks.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            out_channels: 3,
            base_width: 16,
            channel_mult: vec![1, 2, 2, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![16, 8],
            head_channels: 32,
            norm_groups: 8,
            time_embed_dim: 64,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown U-Net preset '{other}'"))),
        }
    }

    /// Spatial sizes produced by the down path, finest first.
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channel_mult.len())
            .map(|level| self.image_size >> level)
            .collect()
    }

    pub fn num_decoder_blocks(&self) -> usize {
        self.channel_mult.len() * (self.num_res_blocks + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels != self.in_channels {
            return bad(format!(
                "out_channels ({}) must equal in_channels ({}) and be non-zero",
                self.out_channels, self.in_channels
            ));
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult must be non-empty with positive entries".into());
        }
        if self.base_width == 0 || self.num_res_blocks == 0 {
            return bad("base_width and num_res_blocks must be positive".into());
        }
        let levels = self.channel_mult.len();
        if self.image_size == 0 || self.image_size % (1 << (levels - 1)) != 0 {
            return bad(format!(
                "image_size {} cannot be halved {} times",
                self.image_size,
                levels - 1
            ));
        }
        let produced = self.resolutions();
        for r in &self.attention_resolutions {
            if !produced.contains(r) {
                return bad(format!(
                    "attention at {r}x{r} requested but the down path only produces {produced:?}"
                ));
            }
        }
        if self.time_embed_dim == 0 || self.base_width % 2 != 0 {
            return bad("time_embed_dim must be positive and base_width even".into());
        }
        Ok(())
    }
}

/// Architecture entry for one decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderTap {
    pub block_index: usize,
    pub channels: usize,
    /// Spatial side of the block's output for an `image_size` input.
    pub resolution: usize,
}

/// Sinusoidal embedding: first half `sin(t·ω_i)`, second half `cos(t·ω_i)`,
/// with `ω_i = 10000^{-i/(dim/2)}`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dimension {dim} must be even and positive")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resample {
    None,
    Up,
    Down,
}

#[derive(Debug, Clone)]
struct ResBlock {
    in_norm: GroupNorm,
    in_conv: Conv2d,
    emb_proj: Linear,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    skip: Option<Conv2d>,
    resample: Resample,
    out_ch: usize,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
        groups: usize,
        resample: Resample,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            in_norm: GroupNorm::new(store, &format!("{name}.in_norm"), in_ch, groups)?,
            in_conv: Conv2d::new(store, &format!("{name}.in_conv"), in_ch, out_ch, 3, rng)?,
            emb_proj: Linear::new(store, &format!("{name}.emb"), emb_dim, 2 * out_ch, rng)?,
            out_norm: GroupNorm::new(store, &format!("{name}.out_norm"), out_ch, groups)?,
            out_conv: Conv2d::new(store, &format!("{name}.out_conv"), out_ch, out_ch, 3, rng)?,
            skip: if in_ch == out_ch {
                None
            } else {
                Some(Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, rng)?)
            },
            resample,
            out_ch,
        })
    }

    /// `emb` is the already-activated embedding, shape `(B, emb_dim)`.
    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.in_norm.forward_silu(x)?;
        let (h, x) = match self.resample {
            Resample::None => (h, x.clone()),
            Resample::Up => (upsample2(&h)?, upsample2(x)?),
            Resample::Down => (avg_pool2(&h)?, avg_pool2(x)?),
        };
        let h = self.in_conv.forward(&h)?;
        let e = self.emb_proj.forward(emb)?;
        let scale = e.narrow(1, 0, self.out_ch)?;
        let shift = e.narrow(1, self.out_ch, self.out_ch)?;
        let h = self.out_norm.forward_modulated_silu(&h, &scale, &shift)?;
        let h = self.out_conv.forward(&h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(&x)?,
            None => x,
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Res(ResBlock),
    Attn(AttentionBlock),
}

#[derive(Debug, Clone, Default)]
struct Stage {
    layers: Vec<Layer>,
}

impl Stage {
    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Res(r) => r.forward(&h, emb)?,
                Layer::Attn(a) => a.forward(&h)?,
            };
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    encoder: Vec<Stage>,
    middle: Stage,
    decoder: Vec<Stage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    decoder_table: Vec<DecoderTap>,
}

/// Builds a U-Net whose parameters are drawn from `rng`.
pub fn build_unet(config: &UNetConfig, rng: &mut ChaCha8Rng) -> Result<UNet> {
    UNet::new(config.clone(), rng)
}

impl UNet {
    pub fn new(config: UNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let s = &mut store;
        let base = config.base_width;
        let emb_dim = config.time_embed_dim;
        let groups = config.norm_groups;
        let attn_at: BTreeSet<usize> = config.attention_resolutions.iter().copied().collect();
        let attn = |s: &mut ParamStore, name: String, ch: usize, rng: &mut ChaCha8Rng| {
            AttentionBlock::new(s, &name, ch, config.head_channels, groups, rng)
        };

        let time_in = Linear::new(s, "time.0", base, emb_dim, rng)?;
        let time_out = Linear::new(s, "time.1", emb_dim, emb_dim, rng)?;
        let mut ch = base * config.channel_mult[0];
        let conv_in = Conv2d::new(s, "conv_in", config.in_channels, ch, 3, rng)?;

        let mut skip_channels = vec![ch];
        let mut encoder = Vec::new();
        let mut res = config.image_size;
        let levels = config.channel_mult.len();
        for (level, mult) in config.channel_mult.iter().enumerate() {
            for i in 0..config.num_res_blocks {
                let name = format!("enc.{level}.{i}");
                let out = base * mult;
                let mut layers = vec![Layer::Res(ResBlock::new(
                    s,
                    &format!("{name}.res"),
                    ch,
                    out,
                    emb_dim,
                    groups,
                    Resample::None,
                    rng,
                )?)];
                ch = out;
                if attn_at.contains(&res) {
                    layers.push(Layer::Attn(attn(s, format!("{name}.attn"), ch, rng)?));
                }
                encoder.push(Stage { layers });
                skip_channels.push(ch);
            }
            if level + 1 != levels {
                let block = ResBlock::new(
                    s,
                    &format!("enc.{level}.down"),
                    ch,
                    ch,
                    emb_dim,
                    groups,
                    Resample::Down,
                    rng,
                )?;
                encoder.push(Stage {
                    layers: vec![Layer::Res(block)],
                });
                skip_channels.push(ch);
                res /= 2;
            }
        }

        let middle = Stage {
            layers: vec![
                Layer::Res(ResBlock::new(s, "mid.0", ch, ch, emb_dim, groups, Resample::None, rng)?),
                Layer::Attn(attn(s, "mid.attn".into(), ch, rng)?),
                Layer::Res(ResBlock::new(s, "mid.1", ch, ch, emb_dim, groups, Resample::None, rng)?),
            ],
        };

        let mut decoder = Vec::new();
        let mut decoder_table = Vec::new();
        for (level, mult) in config.channel_mult.iter().enumerate().rev() {
            for i in 0..=config.num_res_blocks {
                let name = format!("dec.{level}.{i}");
                let skip = skip_channels.pop().expect("one skip per decoder block");
                let out = base * mult;
                let mut layers = vec![Layer::Res(ResBlock::new(
                    s,
                    &format!("{name}.res"),
                    ch + skip,
                    out,
                    emb_dim,
                    groups,
                    Resample::None,
                    rng,
                )?)];
                ch = out;
                if attn_at.contains(&res) {
                    layers.push(Layer::Attn(attn(s, format!("{name}.attn"), ch, rng)?));
                }
                if level > 0 && i == config.num_res_blocks {
                    layers.push(Layer::Res(ResBlock::new(
                        s,
                        &format!("{name}.up"),
                        ch,
                        ch,
                        emb_dim,
                        groups,
                        Resample::Up,
                        rng,
                    )?));
                    res *= 2;
                }
                decoder_table.push(DecoderTap {
                    block_index: decoder.len(),
                    channels: ch,
                    resolution: res,
                });
                decoder.push(Stage { layers });
            }
        }

        let out_norm = GroupNorm::new(s, "out_norm", ch, groups)?;
        let out_conv = Conv2d::new(s, "out_conv", ch, config.out_channels, 3, rng)?;

        Ok(Self {
            config,
            params: store,
            time_in,
            time_out,
            conv_in,
            encoder,
            middle,
            decoder,
            out_norm,
            out_conv,
            decoder_table,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Channel count and output resolution of every decoder block.
    pub fn architecture(&self) -> &[DecoderTap] {
        &self.decoder_table
    }

    pub fn num_decoder_blocks(&self) -> usize {
        self.decoder.len()
    }

    fn embed(&self, timesteps: &[usize]) -> Result<Tensor> {
        let dim = self.config.base_width;
        let mut flat = Vec::with_capacity(timesteps.len() * dim);
        for &t in timesteps {
            flat.extend(timestep_embedding(t as f64, dim)?.into_iter().map(|v| v as f32));
        }
        let raw = Tensor::from_vec(flat, (timesteps.len(), dim), self.params.device())?;
        let e = self.time_out.forward(&self.time_in.forward(&raw)?.silu()?)?;
        Ok(e.silu()?)
    }

    fn check_input(&self, x: &Tensor, timesteps: &[usize]) -> Result<()> {
        let (b, h, w, c) = x.dims4()?;
        let size = 1usize << (self.config.channel_mult.len() - 1);
        if c != self.config.in_channels || h % size != 0 || w % size != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w}x{c} incompatible with a {}-channel U-Net that halves {} times",
                self.config.in_channels,
                self.config.channel_mult.len() - 1
            )));
        }
        if timesteps.len() != b {
            return Err(Error::Dimension(format!(
                "{} timesteps for a batch of {b}",
                timesteps.len()
            )));
        }
        Ok(())
    }

    /// Maps an NHWC batch and per-sample timesteps to an image-shaped
    /// prediction.
    pub fn forward(&self, x: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        Ok(self.forward_with_activations(x, timesteps, &BTreeSet::new())?.0)
    }

    /// Image-level convenience wrapper around [`UNet::forward`].
    pub fn predict(&self, images: &[&ImageTensor], timesteps: &[usize]) -> Result<Vec<ImageTensor>> {
        let x = ImageTensor::batch_to_tensor(images, self.params.device())?;
        ImageTensor::batch_from_tensor(&self.forward(&x, timesteps)?)
    }

    /// Like [`UNet::forward`], additionally returning the output of each
    /// requested decoder block at its native resolution.
    pub fn forward_with_activations(
        &self,
        x: &Tensor,
        timesteps: &[usize],
        taps: &BTreeSet<usize>,
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        if let Some(&bad) = taps.iter().find(|&&i| i >= self.decoder.len()) {
            return Err(Error::Range(format!(
                "decoder block {bad} requested but the model has {} decoder blocks",
                self.decoder.len()
            )));
        }
        self.check_input(x, timesteps)?;
        let emb = self.embed(timesteps)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for stage in &self.encoder {
            h = stage.forward(&h, &emb)?;
            skips.push(h.clone());
        }
        h = self.middle.forward(&h, &emb)?;

        let mut acts = BTreeMap::new();
        for (i, stage) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per decoder block");
            h = stage.forward(&Tensor::cat(&[&h, &skip], 3)?, &emb)?;
            if taps.contains(&i) {
                acts.insert(i, h.clone());
            }
        }
        let out = self.out_conv.forward(&self.out_norm.forward_silu(&h)?)?;
        Ok((out, acts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn micro() -> UNetConfig {
        UNetConfig {
            image_size: 16,
            in_channels: 1,
            out_channels: 1,
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
    fn embedding_at_zero() {
        let e = timestep_embedding(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(matches!(timestep_embedding(3.0, 7), Err(Error::Config(_))));
    }

    #[test]
    fn embeddings_distinct_over_all_timesteps() {
        let embs: Vec<Vec<f64>> = (1..=1000).map(|t| timestep_embedding(t as f64, 128).unwrap()).collect();
        for i in 0..embs.len() {
            assert_eq!(embs[i].len(), 128);
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "t={} and t={} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn reference_layout_has_18_decoder_blocks() {
        let c = UNetConfig::reference();
        c.validate().unwrap();
        assert_eq!(c.num_decoder_blocks(), 18);
        assert_eq!(c.resolutions(), vec![256, 128, 64, 32, 16, 8]);
    }

    #[test]
    fn attention_at_missing_resolution_rejected() {
        let mut c = micro();
        c.attention_resolutions = vec![4];
        let err = build_unet(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut c = micro();
        c.out_channels = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn table_matches_layout() {
        let net = build_unet(&micro(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let table: Vec<(usize, usize)> = net.architecture().iter().map(|t| (t.channels, t.resolution)).collect();
        assert_eq!(table, vec![(16, 8), (16, 16), (8, 16), (8, 16)]);
    }

    #[test]
    fn invalid_tap_is_range_error() {
        let net = build_unet(&micro(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros((1, 16, 16, 1), DType::F32, &Device::Cpu).unwrap();
        let taps: BTreeSet<usize> = [4].into();
        assert!(matches!(net.forward_with_activations(&x, &[1], &taps), Err(Error::Range(_))));
    }

    #[test]
    fn rejects_mismatched_input() {
        let net = build_unet(&micro(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros((2, 16, 16, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, &[1, 2]), Err(Error::Dimension(_))));
        let x = Tensor::zeros((2, 16, 16, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, &[1]), Err(Error::Dimension(_))));
    }
}
