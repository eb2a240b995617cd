//! Pixel-wise MLP segmentation head trained on frozen features.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tensors, meta_json, parse_meta, save_tensors};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, FeatureStack};
use crate::image::{ImageTensor, LabelMap};
use crate::losses::{argmax_rows, cross_entropy_tensor};
use crate::nn::{Adam, AdamConfig, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegHeadConfig {
    /// Feature dimension `C_f`; `0` means "take it from the training data".
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub lr: f64,
    /// Pixels per optimizer step.
    pub batch_size: usize,
    /// Stop after this many steps without a new minimum of the smoothed loss.
    pub patience: usize,
    pub max_steps: usize,
    /// EMA factor for the smoothed loss.
    pub smoothing: f64,
    pub ignore_label: Option<u32>,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden: vec![128, 128],
            num_classes: 2,
            lr: 1e-3,
            batch_size: 65_536,
            patience: 1000,
            max_steps: 100_000,
            smoothing: 0.99,
            ignore_label: None,
        }
    }
}

impl SegHeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.batch_size == 0 {
            return bad("pixel batch size must be >= 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing must be in [0, 1), got {}", self.smoothing));
        }
        Ok(())
    }
}

/// MLP `C_f → hidden… → K` with ReLU between layers.
pub struct SegHead {
    config: SegHeadConfig,
    params: ParamStore,
    layers: Vec<Linear>,
}

impl SegHead {
    pub fn new(config: SegHeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if config.input_dim == 0 {
            return Err(Error::Config("input_dim must be set before building the head".into()));
        }
        let mut params = ParamStore::new(Device::Cpu, DType::F32);
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden);
        dims.push(config.num_classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(&mut params, &format!("layer{i}"), d[0], d[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params, layers })
    }

    pub fn config(&self) -> &SegHeadConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits `(N, K)` for feature rows `(N, C_f)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    fn check_dim(&self, stack: &FeatureStack) -> Result<()> {
        if stack.channels != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "head expects {} feature channels, stack has {}",
                self.config.input_dim, stack.channels
            )));
        }
        Ok(())
    }

    /// Per-pixel logits as an `H×W×K` image.
    pub fn logits(&self, stack: &FeatureStack) -> Result<ImageTensor> {
        self.check_dim(stack)?;
        let x = stack.to_tensor(self.params.device())?;
        let logits = self.forward(&x)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        ImageTensor::new(stack.height, stack.width, self.config.num_classes, logits)
    }

    /// Per-pixel argmax, ties going to the smaller class index.
    pub fn predict(&self, stack: &FeatureStack) -> Result<LabelMap> {
        self.check_dim(stack)?;
        let x = stack.to_tensor(self.params.device())?;
        LabelMap::new(stack.height, stack.width, argmax_rows(&self.forward(&x)?)?)
    }

    /// Writes weights, config and `provenance` (e.g. the feature settings).
    pub fn save(&self, path: &Path, provenance: &HeadProvenance) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "seghead".to_string());
        meta.insert("seghead_config".to_string(), meta_json(&self.config)?);
        meta.insert("provenance".to_string(), meta_json(provenance)?);
        save_tensors(path, &self.params.tensors()?, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, HeadProvenance)> {
        let (tensors, meta) = load_tensors(path)?;
        if meta.get("kind").map(String::as_str) != Some("seghead") {
            return Err(Error::format(path, "not a segmentation head checkpoint"));
        }
        let config: SegHeadConfig = parse_meta(path, &meta, "seghead_config")?;
        let provenance: HeadProvenance = parse_meta(path, &meta, "provenance")?;
        let head = Self::new(config, &mut ChaCha8Rng::from_seed([0; 32]))?;
        head.params.load(&tensors)?;
        Ok((head, provenance))
    }
}

/// Where a head's training features came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProvenance {
    pub checkpoint: String,
    pub features: FeatureConfig,
}

#[derive(Debug, Clone)]
pub struct HeadTrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub smoothed_min: f64,
    /// True when training stopped on patience rather than the step cap.
    pub converged: bool,
}

/// Trains a head on pooled per-pixel samples from `pairs`.
pub fn train_head(
    pairs: &[(FeatureStack, LabelMap)],
    config: &SegHeadConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SegHead, HeadTrainReport)> {
    config.validate()?;
    let first = pairs.first().ok_or_else(|| Error::Data("no labelled feature maps".into()))?;
    let dim = first.0.channels;
    if config.input_dim != 0 && config.input_dim != dim {
        return Err(Error::Dimension(format!("config input_dim {} but features have {dim}", config.input_dim)));
    }
    let mut features: Vec<f32> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (stack, label) in pairs {
        if stack.channels != dim {
            return Err(Error::Dimension("feature maps differ in channel count".into()));
        }
        if (stack.height, stack.width) != (label.height(), label.width()) {
            return Err(Error::Dimension(format!(
                "features are {}x{} but labels are {}x{}",
                stack.height,
                stack.width,
                label.height(),
                label.width()
            )));
        }
        for (p, &l) in label.data().iter().enumerate() {
            if Some(l) == config.ignore_label {
                continue;
            }
            if l as usize >= config.num_classes {
                return Err(Error::Data(format!("label {l} outside [0, {})", config.num_classes)));
            }
            features.extend_from_slice(&stack.data[p * dim..(p + 1) * dim]);
            labels.push(l);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("no labelled pixels".into()));
    }
    let mut present = vec![false; config.num_classes];
    labels.iter().for_each(|&l| present[l as usize] = true);
    for (k, _) in present.iter().enumerate().filter(|(_, p)| !**p) {
        log::warn!("class {k} never appears in the training labels; it stays in the output space");
    }

    let config = SegHeadConfig {
        input_dim: dim,
        ..config.clone()
    };
    let head = SegHead::new(config.clone(), rng)?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr), head.params())?;
    let n = labels.len();
    let batch = config.batch_size.min(n);
    let device = head.params.device().clone();
    let all = Tensor::from_vec(features, (n, dim), &device)?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut losses = Vec::new();
    let mut smoothed: Option<f64> = None;
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut converged = false;
    for _ in 0..config.max_steps {
        let (x, y) = if batch == n {
            (all.clone(), labels.clone())
        } else {
            if cursor + batch > n {
                order.shuffle(rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + batch];
            cursor += batch;
            let idx_t = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), batch, &device)?;
            (all.index_select(&idx_t, 0)?, idx.iter().map(|&i| labels[i]).collect())
        };
        let loss = cross_entropy_tensor(&head.forward(&x)?, &y, None)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: losses.len() + 1,
                detail: format!("segmentation head loss became {value}"),
            });
        }
        opt.step(head.params(), &loss.backward()?)?;
        losses.push(value);
        let s = match smoothed {
            None => value,
            Some(prev) => config.smoothing * prev + (1.0 - config.smoothing) * value,
        };
        smoothed = Some(s);
        if s < best {
            best = s;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                converged = true;
                break;
            }
        }
    }
    let report = HeadTrainReport {
        steps: losses.len(),
        losses,
        smoothed_min: best,
        converged,
    };
    Ok((head, report))
}

/// Window origins along one axis: stride `window`, with the last window
/// aligned to the far edge.
pub fn window_origins(size: usize, window: usize) -> Result<Vec<usize>> {
    if window == 0 || window > size {
        return Err(Error::Config(format!("window {window} does not fit an axis of {size} pixels")));
    }
    let mut origins: Vec<usize> = (0..).map(|i| i * window).take_while(|&o| o + window < size).collect();
    origins.push(size - window);
    Ok(origins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stitch {
    /// Overlapping pixels take the label of the window visited last.
    #[default]
    LaterWins,
    /// Overlapping pixels take the argmax of the summed logits.
    AverageLogits,
}

/// Tiles `image` with `window×window` crops (row-major), predicts each and
/// stitches the labels.
pub fn predict_sliding(
    extractor: &FeatureExtractor,
    head: &SegHead,
    image: &ImageTensor,
    window: usize,
    features: &FeatureConfig,
    stitch: Stitch,
) -> Result<LabelMap> {
    let (h, w) = (image.height(), image.width());
    let ys = window_origins(h, window)?;
    let xs = window_origins(w, window)?;
    let k = head.config().num_classes;
    let mut out = LabelMap::filled(h, w, 0);
    let mut sums = match stitch {
        Stitch::AverageLogits => Some(vec![0.0f64; h * w * k]),
        Stitch::LaterWins => None,
    };
    for &oy in &ys {
        for &ox in &xs {
            let crop = image.crop(oy, ox, window, window)?;
            let stack = extractor.extract_features_multi_t(&crop, &features.timesteps, features)?;
            match sums.as_mut() {
                None => {
                    let labels = head.predict(&stack)?;
                    for y in 0..window {
                        for x in 0..window {
                            out.set(oy + y, ox + x, labels.get(y, x));
                        }
                    }
                }
                Some(acc) => {
                    let logits = head.logits(&stack)?;
                    for y in 0..window {
                        for x in 0..window {
                            let base = ((oy + y) * w + ox + x) * k;
                            for c in 0..k {
                                acc[base + c] += logits.get(y, x, c);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(acc) = sums {
        for (p, row) in acc.chunks(k).enumerate() {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.data_mut()[p] = best as u32;
        }
    }
    Ok(out)
}

/// Predicts whole images whose size the U-Net accepts directly.
pub fn predict_images(
    extractor: &FeatureExtractor,
    head: &SegHead,
    images: &[ImageTensor],
    features: &FeatureConfig,
) -> Result<Vec<LabelMap>> {
    extractor
        .extract_multi_t_batch(images, &features.timesteps, features)?
        .iter()
        .map(|s| head.predict(s))
        .collect()
}

/// Fraction of pixels whose predicted label equals the target.
pub fn pixel_accuracy(pred: &LabelMap, target: &LabelMap) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::Dimension("prediction and target differ in size".into()));
    }
    let hits = pred.data().iter().zip(target.data()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.data().len() as f64)
}

/// Head weights keyed by name, for tests that set weights by hand.
pub fn head_weights(head: &SegHead) -> Result<HashMap<String, Tensor>> {
    head.params.tensors()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Provenance;
    use rand::Rng;
    use crate::unet::UNetConfig;

    fn stack_from(h: usize, w: usize, c: usize, data: Vec<f32>) -> FeatureStack {
        FeatureStack {
            height: h,
            width: w,
            channels: c,
            data,
            provenance: Provenance {
                checkpoint: "test".into(),
                timesteps: vec![0],
                blocks: vec![0],
            },
        }
    }

    #[test]
    fn separable_features_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, w, c) = (16, 16, 4);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..h * w {
            let f: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            labels.push(u32::from(f[0] > 0.0));
            data.extend(f);
        }
        let stack = stack_from(h, w, c, data);
        let label = LabelMap::new(h, w, labels).unwrap();
        let cfg = SegHeadConfig {
            hidden: vec![16],
            batch_size: 64,
            patience: 200,
            max_steps: 3000,
            lr: 1e-2,
            ..SegHeadConfig::default()
        };
        let (head, report) = train_head(&[(stack.clone(), label.clone())], &cfg, &mut rng).unwrap();
        let acc = pixel_accuracy(&head.predict(&stack).unwrap(), &label).unwrap();
        assert!(acc > 0.99, "accuracy {acc} after {} steps", report.steps);
    }

    #[test]
    fn constant_features_give_constant_map_and_prediction_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = SegHead::new(
            SegHeadConfig {
                input_dim: 3,
                num_classes: 4,
                ..SegHeadConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let stack = stack_from(5, 6, 3, [0.3f32, -1.0, 2.0].repeat(30));
        let pred = head.predict(&stack).unwrap();
        assert!(pred.data().iter().all(|&v| v == pred.data()[0]));
        assert_eq!(pred, head.predict(&stack).unwrap());
        assert!(head.predict(&stack_from(5, 6, 2, vec![0.0; 60])).is_err());
    }

    #[test]
    fn identity_weights_recover_one_hot_classes() {
        let head = SegHead::new(
            SegHeadConfig {
                input_dim: 3,
                hidden: vec![3],
                num_classes: 3,
                ..SegHeadConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let eye = Tensor::eye(3, DType::F32, &Device::Cpu).unwrap();
        let zero = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        let mut w = HashMap::new();
        for l in ["layer0", "layer1"] {
            w.insert(format!("{l}.weight"), eye.clone());
            w.insert(format!("{l}.bias"), zero.clone());
        }
        head.params().load(&w).unwrap();
        let classes = [2u32, 0, 1, 1, 0, 2];
        let data: Vec<f32> = classes
            .iter()
            .flat_map(|&k| (0..3).map(move |i| if i == k { 1.0 } else { 0.0 }))
            .collect();
        let pred = head.predict(&stack_from(2, 3, 3, data)).unwrap();
        assert_eq!(pred.data(), &classes);
        // all-zero features tie everywhere: the smallest class wins
        let tie = head.predict(&stack_from(1, 2, 3, vec![0.0; 6])).unwrap();
        assert_eq!(tie.data(), &[0, 0]);
    }

    #[test]
    fn window_origin_enumeration() {
        assert_eq!(window_origins(256, 256).unwrap(), vec![0]);
        assert_eq!(window_origins(512, 256).unwrap(), vec![0, 256]);
        assert_eq!(window_origins(300, 256).unwrap(), vec![0, 44]);
        assert_eq!(window_origins(600, 256).unwrap(), vec![0, 256, 344]);
        assert!(matches!(window_origins(200, 256), Err(Error::Config(_))));
        // every pixel of a 300 axis is covered
        let mut hits = vec![0; 300];
        for o in window_origins(300, 256).unwrap() {
            hits[o..o + 256].iter_mut().for_each(|h| *h += 1);
        }
        assert!(hits.iter().all(|&h| h >= 1));
    }

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
    fn sliding_prediction_matches_direct_on_one_window() {
        let ex = FeatureExtractor::random_init(micro(), 0, 100, 4).unwrap();
        let fc = FeatureConfig {
            timesteps: vec![10],
            blocks: vec![2, 3],
            ..FeatureConfig::default()
        };
        let dim = ex.feature_channels(&fc.blocks).unwrap();
        let head = SegHead::new(
            SegHeadConfig {
                input_dim: dim,
                num_classes: 3,
                ..SegHeadConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let img = ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y + 2 * x + c) % 7) as f64 / 3.0 - 1.0);
        let direct = head.predict(&ex.extract_features(&img, 10, &fc).unwrap()).unwrap();
        let slid = predict_sliding(&ex, &head, &img, 16, &fc, Stitch::LaterWins).unwrap();
        assert_eq!(direct, slid);
        let avg = predict_sliding(&ex, &head, &img, 16, &fc, Stitch::AverageLogits).unwrap();
        assert_eq!(direct, avg);

        // 24x24 with window 16: origins {0, 8}, later window wins on overlap
        let big = ImageTensor::from_fn(24, 24, 3, |y, x, c| ((3 * y + x + c) % 5) as f64 / 2.0 - 1.0);
        let slid = predict_sliding(&ex, &head, &big, 16, &fc, Stitch::LaterWins).unwrap();
        let last = head
            .predict(&ex.extract_features(&big.crop(8, 8, 16, 16).unwrap(), 10, &fc).unwrap())
            .unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(slid.get(8 + y, 8 + x), last.get(y, x));
            }
        }
        assert!(slid.data().iter().all(|&v| v < 3));
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.safetensors");
        let head = SegHead::new(
            SegHeadConfig {
                input_dim: 5,
                num_classes: 3,
                hidden: vec![7, 6],
                ..SegHeadConfig::default()
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let prov = HeadProvenance {
            checkpoint: "abc".into(),
            features: FeatureConfig::default(),
        };
        head.save(&path, &prov).unwrap();
        let (back, p) = SegHead::load(&path).unwrap();
        assert_eq!(p, prov);
        assert_eq!(back.config(), head.config());
        assert_eq!(back.params().digest().unwrap(), head.params().digest().unwrap());
    }

    #[test]
    fn bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = stack_from(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let label = LabelMap::new(2, 2, vec![0, 1, 5, 1]).unwrap();
        let cfg = SegHeadConfig::default();
        assert!(matches!(train_head(&[(stack.clone(), label)], &cfg, &mut rng), Err(Error::Data(_))));
        let small = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        assert!(train_head(&[(stack, small)], &cfg, &mut rng).is_err());
        assert!(SegHeadConfig { num_classes: 1, ..cfg.clone() }.validate().is_err());
        assert!(SegHeadConfig { batch_size: 0, ..cfg }.validate().is_err());
    }
}
