//! Pixel-level features from a frozen U-Net's decoder, and k-means
//! diagnostics over them.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{parse_meta, UNetCheckpoint};
use crate::corruption::{diffuse, make_beta_schedule, mask_image, DiffusionSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};
use crate::pretrain::{Method, PretrainConfig};
use crate::rng;
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Timesteps to extract at; several are concatenated in order.
    pub timesteps: Vec<usize>,
    /// Decoder block indices (0 = deepest).
    pub blocks: Vec<usize>,
    pub upsample: Upsample,
    /// Feed the uncorrupted image while still conditioning on `t`.
    pub clean_input: bool,
    /// Keys the per-image corruption stream.
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![50],
            blocks: vec![8, 9, 10, 11, 12],
            upsample: Upsample::Bilinear,
            clean_input: false,
            seed: 0,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub timesteps: Vec<usize>,
    pub blocks: Vec<usize>,
}

/// `H×W×C_f` per-pixel features, channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub provenance: Provenance,
}

impl FeatureStack {
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// `(H·W, C_f)` tensor of pixel feature rows.
    pub fn to_tensor(&self, device: &candle_core::Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.height * self.width, self.channels), device)?)
    }

    /// Channel-wise concatenation of same-sized stacks, in order.
    pub fn concat(stacks: &[FeatureStack]) -> Result<FeatureStack> {
        let first = stacks.first().ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        if stacks.iter().any(|s| (s.height, s.width) != (h, w)) {
            return Err(Error::Dimension("feature stacks differ in size".into()));
        }
        let channels: usize = stacks.iter().map(|s| s.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h * w {
            for s in stacks {
                data.extend_from_slice(&s.data[p * s.channels..(p + 1) * s.channels]);
            }
        }
        Ok(FeatureStack {
            height: h,
            width: w,
            channels,
            data,
            provenance: Provenance {
                checkpoint: first.provenance.checkpoint.clone(),
                timesteps: stacks.iter().flat_map(|s| s.provenance.timesteps.iter().copied()).collect(),
                blocks: first.provenance.blocks.clone(),
            },
        })
    }
}

/// Resizes an `h×w×c` map (channels fastest) to `oh×ow`. Bilinear uses
/// half-pixel centers with edge clamping.
pub fn resize(data: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize, mode: Upsample) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    let mut out = vec![0f32; oh * ow * c];
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    for y in 0..oh {
        for x in 0..ow {
            let o = &mut out[(y * ow + x) * c..(y * ow + x + 1) * c];
            match mode {
                Upsample::Nearest => {
                    let sy = (y * h / oh).min(h - 1);
                    let sx = (x * w / ow).min(w - 1);
                    o.copy_from_slice(&data[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
                }
                Upsample::Bilinear => {
                    let (y0, y1, ly) = coord(y, h, oh);
                    let (x0, x1, lx) = coord(x, w, ow);
                    let at = |yy: usize, xx: usize| &data[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                    let (a, b, cc, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                    for k in 0..c {
                        let top = a[k] + (b[k] - a[k]) * lx;
                        let bot = cc[k] + (d[k] - cc[k]) * lx;
                        o[k] = top + (bot - top) * ly;
                    }
                }
            }
        }
    }
    out
}

/// A frozen model plus the corruption it was pre-trained with.
pub struct FeatureExtractor {
    model: UNet,
    method: Method,
    schedule: DiffusionSchedule,
    patch: usize,
    id: String,
}

impl FeatureExtractor {
    pub fn new(model: UNet, method: Method, schedule: DiffusionSchedule, patch: usize, id: String) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch must be positive".into()));
        }
        Ok(Self {
            model,
            method,
            schedule,
            patch,
            id,
        })
    }

    /// Reads the corruption settings from the checkpoint's training config;
    /// checkpoints without one are treated as MDM with the default patch.
    pub fn from_checkpoint(ck: &UNetCheckpoint, path: &Path) -> Result<Self> {
        let model = ck.build_model()?;
        let (method, patch) = if ck.meta.contains_key("pretrain_config") {
            let cfg: PretrainConfig = parse_meta(path, &ck.meta, "pretrain_config")?;
            (cfg.method, cfg.patch)
        } else {
            (Method::Mdm, PretrainConfig::default().patch)
        };
        let id = model.params().digest()?;
        Self::new(model, method, ck.schedule.clone(), patch, id)
    }

    /// Untrained baseline with a seeded initialization.
    pub fn random_init(config: crate::unet::UNetConfig, seed: u64, max_t: usize, patch: usize) -> Result<Self> {
        let model = UNet::new(config, &mut rng::stream(seed, "init", 0))?;
        let schedule = make_beta_schedule(max_t, ScheduleKind::default())?;
        let id = model.params().digest()?;
        Self::new(model, Method::Mdm, schedule, patch, id)
    }

    pub fn model(&self) -> &UNet {
        &self.model
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn max_t(&self) -> usize {
        self.schedule.max_t()
    }

    /// Channel count of the stack for `blocks` at one timestep.
    pub fn feature_channels(&self, blocks: &[usize]) -> Result<usize> {
        let arch = self.model.architecture();
        let unique: BTreeSet<usize> = blocks.iter().copied().collect();
        unique
            .into_iter()
            .map(|b| {
                arch.get(b).map(|tap| tap.channels).ok_or_else(|| {
                    Error::Range(format!("decoder block {b} requested but the model has {} decoder blocks", arch.len()))
                })
            })
            .sum()
    }

    fn corrupt(&self, image: &ImageTensor, t: usize, clean: bool, seed: u64) -> Result<ImageTensor> {
        if t > self.max_t() {
            return Err(Error::Range(format!("t = {t} outside [0, {}]", self.max_t())));
        }
        if t == 0 || clean {
            return Ok(image.clone());
        }
        let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let key = rng::hash64(&[&bytes, &(t as u64).to_le_bytes()]);
        let mut r = rng::stream(seed, "extract", key);
        match self.method {
            Method::Mdm => Ok(mask_image(image, t, self.max_t(), self.patch, &mut r)?.0),
            Method::Ddpm => Ok(diffuse(image, t, &self.schedule, &mut r)?.0),
        }
    }

    /// Features of every image at a single timestep.
    pub fn extract_batch(&self, images: &[ImageTensor], t: usize, config: &FeatureConfig) -> Result<Vec<FeatureStack>> {
        let blocks: BTreeSet<usize> = config.blocks.iter().copied().collect();
        if blocks.is_empty() {
            return Err(Error::Config("at least one decoder block is required".into()));
        }
        self.feature_channels(&config.blocks)?;
        let arch = self.model.architecture();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(config.batch_size.max(1)) {
            let corrupted = chunk
                .iter()
                .map(|img| self.corrupt(img, t, config.clean_input, config.seed))
                .collect::<Result<Vec<_>>>()?;
            let x = ImageTensor::batch_to_tensor(&corrupted.iter().collect::<Vec<_>>(), self.model.params().device())?;
            let (_, acts) = self.model.forward_with_activations(&x, &vec![t; chunk.len()], &blocks)?;
            let (h, w) = (chunk[0].height(), chunk[0].width());
            let mut per_block = Vec::with_capacity(blocks.len());
            for b in &blocks {
                let a = acts[b].to_dtype(DType::F32)?;
                let (_, ah, aw, ac) = a.dims4()?;
                debug_assert_eq!(ac, arch[*b].channels);
                per_block.push((a.flatten_all()?.to_vec1::<f32>()?, ah, aw, ac));
            }
            for i in 0..chunk.len() {
                let mut parts = Vec::with_capacity(per_block.len());
                for (flat, ah, aw, ac) in &per_block {
                    let n = ah * aw * ac;
                    parts.push(FeatureStack {
                        height: h,
                        width: w,
                        channels: *ac,
                        data: resize(&flat[i * n..(i + 1) * n], *ah, *aw, *ac, h, w, config.upsample),
                        provenance: Provenance {
                            checkpoint: self.id.clone(),
                            timesteps: vec![t],
                            blocks: blocks.iter().copied().collect(),
                        },
                    });
                }
                let mut stack = FeatureStack::concat(&parts)?;
                stack.provenance.timesteps = vec![t];
                out.push(stack);
            }
        }
        Ok(out)
    }

    pub fn extract_features(&self, image: &ImageTensor, t: usize, config: &FeatureConfig) -> Result<FeatureStack> {
        Ok(self.extract_batch(std::slice::from_ref(image), t, config)?.remove(0))
    }

    /// Concatenation of the stacks for each of `ts`, in order.
    pub fn extract_features_multi_t(&self, image: &ImageTensor, ts: &[usize], config: &FeatureConfig) -> Result<FeatureStack> {
        Ok(self.extract_multi_t_batch(std::slice::from_ref(image), ts, config)?.remove(0))
    }

    pub fn extract_multi_t_batch(
        &self,
        images: &[ImageTensor],
        ts: &[usize],
        config: &FeatureConfig,
    ) -> Result<Vec<FeatureStack>> {
        if ts.is_empty() {
            return Err(Error::Config("at least one timestep is required".into()));
        }
        if ts.len() == 1 {
            return self.extract_batch(images, ts[0], config);
        }
        let per_t = ts
            .iter()
            .map(|&t| self.extract_batch(images, t, config))
            .collect::<Result<Vec<_>>>()?;
        (0..images.len())
            .map(|i| FeatureStack::concat(&per_t.iter().map(|v| v[i].clone()).collect::<Vec<_>>()))
            .collect()
    }

    /// Extracts with `config.timesteps`, reading and filling `cache` if given.
    pub fn extract_all(
        &self,
        images: &[(String, ImageTensor)],
        config: &FeatureConfig,
        cache: Option<&FeatureCache>,
    ) -> Result<Vec<FeatureStack>> {
        let Some(cache) = cache else {
            let imgs: Vec<ImageTensor> = images.iter().map(|(_, i)| i.clone()).collect();
            return self.extract_multi_t_batch(&imgs, &config.timesteps, config);
        };
        let mut out = Vec::with_capacity(images.len());
        for (id, img) in images {
            let key = cache.key(&self.id, id, config);
            match cache.load(&key)? {
                Some(stack) => out.push(stack),
                None => {
                    let stack = self.extract_features_multi_t(img, &config.timesteps, config)?;
                    cache.store(&key, &stack)?;
                    out.push(stack);
                }
            }
        }
        Ok(out)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"MDMFEAT1";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    shape: [usize; 3],
    dtype: String,
    provenance: Provenance,
}

/// On-disk cache of feature stacks: an 8-byte magic, a little-endian `u32`
/// header length, a JSON header and raw little-endian `f32` data.
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(&self, checkpoint: &str, image_id: &str, config: &FeatureConfig) -> PathBuf {
        let settings = serde_json::to_string(config).expect("feature config serializes");
        let h = rng::hash64(&[checkpoint.as_bytes(), image_id.as_bytes(), settings.as_bytes()]);
        self.dir.join(format!("{h:016x}.feat"))
    }

    pub fn store(&self, path: &Path, stack: &FeatureStack) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let header = serde_json::to_vec(&CacheHeader {
            shape: [stack.height, stack.width, stack.channels],
            dtype: "f32".into(),
            provenance: stack.provenance.clone(),
        })
        .map_err(|e| Error::format(path, e))?;
        let mut buf = Vec::with_capacity(12 + header.len() + stack.data.len() * 4);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in &stack.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("feat.tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(&self, path: &Path) -> Result<Option<FeatureStack>> {
        if !path.is_file() {
            return Ok(None);
        }
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 12 || &buf[..8] != CACHE_MAGIC {
            return Err(Error::format(path, "not a feature cache file"));
        }
        let hlen = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        let header: CacheHeader =
            serde_json::from_slice(buf.get(12..12 + hlen).ok_or_else(|| Error::format(path, "truncated header"))?)
                .map_err(|e| Error::format(path, e))?;
        let [h, w, c] = header.shape;
        let body = &buf[12 + hlen..];
        if header.dtype != "f32" || body.len() != h * w * c * 4 {
            return Err(Error::format(path, "feature payload does not match its header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Some(FeatureStack {
            height: h,
            width: w,
            channels: c,
            data,
            provenance: header.provenance,
        }))
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn kmeans_once<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut R) -> KMeans {
    // k-means++ seeding
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centroids.last().expect("just pushed")));
        }
    }

    let dim = points[0].len();
    let mut labels = vec![0usize; points.len()];
    for iter in 0..max_iter {
        let mut changed = iter == 0;
        for (l, p) in labels.iter_mut().zip(points) {
            let (j, _) = nearest(p, &centroids);
            changed |= *l != j;
            *l = j;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (l, p) in labels.iter().zip(points) {
            counts[*l] += 1;
            for (s, v) in sums[*l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // re-seed an empty cluster at the worst-fit point
                let (far, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[labels[i]])))
                    .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
                centroids[j] = points[far].clone();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut inertia = 0.0;
    for (l, p) in labels.iter_mut().zip(points) {
        let (j, d) = nearest(p, &centroids);
        *l = j;
        inertia += d;
    }
    KMeans {
        centroids,
        labels,
        inertia,
    }
}

/// k-means with k-means++ seeding, keeping the lowest-inertia of `restarts`
/// runs.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut R) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    let distinct: HashSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < k {
        return Err(Error::Degenerate(format!(
            "{} distinct feature vectors cannot form {k} clusters",
            distinct.len()
        )));
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(points, k, 100, rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Per-pixel cluster ids from k-means (10 restarts) on the stack's pixel
/// feature vectors.
pub fn kmeans_feature_clusters<R: Rng + ?Sized>(stack: &FeatureStack, k: usize, rng: &mut R) -> Result<LabelMap> {
    let points: Vec<Vec<f64>> = stack
        .data
        .chunks(stack.channels)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect();
    let km = kmeans(&points, k, 10, rng)?;
    LabelMap::new(stack.height, stack.width, km.labels.into_iter().map(|l| l as u32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

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

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::random_init(micro(), 1, 100, 4).unwrap()
    }

    fn image(seed: usize) -> ImageTensor {
        ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y * 5 + x * 3 + c + seed) % 9) as f64 / 4.0 - 1.0)
    }

    fn cfg(blocks: Vec<usize>) -> FeatureConfig {
        FeatureConfig {
            timesteps: vec![20],
            blocks,
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn channel_bookkeeping() {
        let ex = extractor();
        let arch = ex.model().architecture().to_vec();
        let blocks = vec![1, 3];
        let s = ex.extract_features(&image(0), 20, &cfg(blocks.clone())).unwrap();
        assert_eq!((s.height, s.width), (16, 16));
        assert_eq!(s.channels, arch[1].channels + arch[3].channels);
        assert_eq!(s.channels, ex.feature_channels(&blocks).unwrap());
        assert_eq!(s.data.len(), 16 * 16 * s.channels);
        let multi = ex.extract_features_multi_t(&image(0), &[10, 20, 30], &cfg(blocks)).unwrap();
        assert_eq!(multi.channels, 3 * s.channels);
        assert_eq!(multi.provenance.timesteps, vec![10, 20, 30]);
    }

    #[test]
    fn full_resolution_block_is_not_resampled() {
        let ex = extractor();
        let last = ex.model().num_decoder_blocks() - 1;
        assert_eq!(ex.model().architecture()[last].resolution, 16);
        let s = ex.extract_features(&image(0), 0, &cfg(vec![last])).unwrap();
        let x = image(0).to_tensor(ex.model().params().device()).unwrap();
        let taps: BTreeSet<usize> = [last].into();
        let (_, acts) = ex.model().forward_with_activations(&x, &[0], &taps).unwrap();
        let raw: Vec<f32> = acts[&last].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(s.data, raw);
        assert_eq!(s.channels, ex.model().architecture()[last].channels);
    }

    #[test]
    fn invalid_block_and_empty_timesteps() {
        let ex = extractor();
        let n = ex.model().num_decoder_blocks();
        assert!(matches!(ex.extract_features(&image(0), 5, &cfg(vec![n])), Err(Error::Range(_))));
        assert!(matches!(ex.extract_features_multi_t(&image(0), &[], &cfg(vec![0])), Err(Error::Config(_))));
        assert!(matches!(ex.extract_features(&image(0), 101, &cfg(vec![0])), Err(Error::Range(_))));
    }

    #[test]
    fn extraction_is_deterministic_and_read_only() {
        let ex = extractor();
        let before = ex.model().params().digest().unwrap();
        let c = cfg(vec![0, 2]);
        let a = ex.extract_features(&image(1), 60, &c).unwrap();
        let b = ex.extract_features(&image(1), 60, &c).unwrap();
        assert_eq!(a, b);
        let single = ex.extract_features_multi_t(&image(1), &[60], &c).unwrap();
        assert_eq!(a, single);
        // batching does not change per-image results
        let batch = ex.extract_batch(&[image(2), image(1)], 60, &c).unwrap();
        assert_eq!(batch[1], a);
        assert_eq!(ex.model().params().digest().unwrap(), before);
        // the corruption is in effect: a clean-input extraction differs
        let clean = ex
            .extract_features(&image(1), 60, &FeatureConfig { clean_input: true, ..c })
            .unwrap();
        assert_ne!(clean, a);
    }

    #[test]
    fn bilinear_resize_matches_hand_values() {
        // 2x2 -> 4x4, half-pixel centers
        let src = [0.0f32, 1.0, 2.0, 3.0];
        let out = resize(&src, 2, 2, 1, 4, 4, Upsample::Bilinear);
        assert_eq!(&out[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&out[4..8], &[0.5, 0.75, 1.25, 1.5]);
        let near = resize(&src, 2, 2, 1, 4, 4, Upsample::Nearest);
        assert_eq!(&near[..4], &[0.0, 0.0, 1.0, 1.0]);
        let constant = resize(&[2.5f32; 2 * 3 * 2], 2, 3, 2, 8, 12, Upsample::Bilinear);
        assert!(constant.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let blob = i % 2;
            let centre = if blob == 0 { -10.0 } else { 10.0 };
            data.extend((0..3).map(|_| centre + rng.random_range(-0.5f32..0.5)));
            truth.push(blob as u32);
        }
        let stack = FeatureStack {
            height: 10,
            width: 20,
            channels: 3,
            data,
            provenance: Provenance {
                checkpoint: String::new(),
                timesteps: vec![],
                blocks: vec![],
            },
        };
        let labels = kmeans_feature_clusters(&stack, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let flip = labels.data()[0] != truth[0];
        for (l, t) in labels.data().iter().zip(&truth) {
            assert_eq!(*l, if flip { 1 - t } else { *t });
        }
        let again = kmeans_feature_clusters(&stack, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(labels, again);
    }

    #[test]
    fn kmeans_rejects_constant_features() {
        let stack = FeatureStack {
            height: 4,
            width: 4,
            channels: 2,
            data: vec![1.0; 32],
            provenance: Provenance {
                checkpoint: String::new(),
                timesteps: vec![],
                blocks: vec![],
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(kmeans_feature_clusters(&stack, 2, &mut rng), Err(Error::Degenerate(_))));
        assert!(matches!(kmeans_feature_clusters(&stack, 1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let ex = extractor();
        let c = cfg(vec![1]);
        let imgs = vec![("a".to_string(), image(0)), ("b".to_string(), image(1))];
        let fresh = ex.extract_all(&imgs, &c, Some(&cache)).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
        let cached = ex.extract_all(&imgs, &c, Some(&cache)).unwrap();
        assert_eq!(fresh, cached);
        assert_eq!(fresh, ex.extract_all(&imgs, &c, None).unwrap());
        let key = cache.key(ex.id(), "a", &c);
        fs::write(&key, b"garbage").unwrap();
        assert!(cache.load(&key).is_err());
    }
}
