//! Synthetic circles-and-rectangles segmentation data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{save_image, save_label};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};
use crate::rng;

pub const BACKGROUND: u32 = 0;
pub const CIRCLE: u32 = 1;
pub const RECTANGLE: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
    pub max_shapes_per_class: usize,
    pub circle_radius: (usize, usize),
    pub rect_side: (usize, usize),
    pub noise_sigma: f64,
    /// Every class must cover a fraction of the image within these bounds.
    pub min_class_fraction: f64,
    pub max_class_fraction: f64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 3,
            max_shapes_per_class: 2,
            circle_radius: (5, 12),
            rect_side: (8, 22),
            noise_sigma: 0.06,
            min_class_fraction: 0.02,
            max_class_fraction: 0.9,
            max_attempts: 200,
        }
    }
}

impl SynthConfig {
    /// Defaults with shape sizes scaled from the 64-pixel layout.
    pub fn for_size(image_size: usize) -> Self {
        let scale = |v: usize, min: usize| (v * image_size / 64).max(min);
        Self {
            image_size,
            circle_radius: (scale(5, 2), scale(12, 3)),
            rect_side: (scale(8, 4), scale(22, 5)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 16 {
            return Err(Error::Config(format!("image_size must be >= 16, got {s}")));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.max_shapes_per_class == 0 {
            return Err(Error::Config("max_shapes_per_class must be >= 1".into()));
        }
        let (r0, r1) = self.circle_radius;
        let (a0, a1) = self.rect_side;
        if r0 == 0 || r0 > r1 || 2 * r1 + 1 > s || a0 == 0 || a0 > a1 || a1 > s {
            return Err(Error::Config("shape size ranges do not fit the image".into()));
        }
        if !(0.0..1.0).contains(&self.min_class_fraction) || self.max_class_fraction <= self.min_class_fraction {
            return Err(Error::Config("class fraction bounds are inconsistent".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Rect {
    y0: isize,
    x0: isize,
    y1: isize,
    x1: isize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, gap: isize) -> bool {
        self.y0 - gap < o.y1 && o.y0 - gap < self.y1 && self.x0 - gap < o.x1 && o.x0 - gap < self.x1
    }
}

fn tint<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], jitter: f64) -> [f64; 3] {
    base.map(|b| (b + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0))
}

fn draw_one<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> (ImageTensor, LabelMap) {
    let s = cfg.image_size;
    let c = cfg.channels;
    let mut label = LabelMap::filled(s, s, BACKGROUND);

    // background: mid-gray gradient with a random tint
    let bg = tint(rng, [0.45, 0.45, 0.45], 0.1);
    let (gy, gx) = (rng.random_range(-0.15..=0.15), rng.random_range(-0.15..=0.15));
    let mut unit = ImageTensor::from_fn(s, s, c, |y, x, ch| {
        bg[ch] + gy * (y as f64 / s as f64 - 0.5) + gx * (x as f64 / s as f64 - 0.5)
    });

    let n_circles = rng.random_range(1..=cfg.max_shapes_per_class);
    let n_rects = rng.random_range(1..=cfg.max_shapes_per_class);
    let mut placed: Vec<Rect> = Vec::new();
    // alternate so a crowded image still gets one of each
    let mut order = Vec::new();
    for i in 0..n_circles.max(n_rects) {
        if i < n_circles {
            order.push(CIRCLE);
        }
        if i < n_rects {
            order.push(RECTANGLE);
        }
    }

    for kind in order {
        for _ in 0..50 {
            let (h, w) = if kind == CIRCLE {
                let r = rng.random_range(cfg.circle_radius.0..=cfg.circle_radius.1);
                (2 * r + 1, 2 * r + 1)
            } else {
                (
                    rng.random_range(cfg.rect_side.0..=cfg.rect_side.1),
                    rng.random_range(cfg.rect_side.0..=cfg.rect_side.1),
                )
            };
            let y0 = rng.random_range(0..=s - h) as isize;
            let x0 = rng.random_range(0..=s - w) as isize;
            let rect = Rect {
                y0,
                x0,
                y1: y0 + h as isize,
                x1: x0 + w as isize,
            };
            if placed.iter().any(|p| p.overlaps(&rect, 2)) {
                continue;
            }
            placed.push(rect);
            if kind == CIRCLE {
                // bright, finely striped
                let col = tint(rng, [0.78, 0.6, 0.55], 0.12);
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let (ca, sa) = (angle.cos(), angle.sin());
                let r = (h / 2) as f64;
                let (cy, cx) = (y0 as f64 + r, x0 as f64 + r);
                for y in rect.y0..rect.y1 {
                    for x in rect.x0..rect.x1 {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dy * dy + dx * dx <= r * r + 0.5 {
                            let stripe = 0.12 * ((dx * ca + dy * sa) * std::f64::consts::PI / 2.0).sin();
                            label.set(y as usize, x as usize, CIRCLE);
                            for ch in 0..c {
                                unit.set(y as usize, x as usize, ch, col[ch] + stripe);
                            }
                        }
                    }
                }
            } else {
                // dark, coarse checkerboard
                let col = tint(rng, [0.3, 0.35, 0.55], 0.12);
                let phase = rng.random_range(0..6);
                for y in rect.y0..rect.y1 {
                    for x in rect.x0..rect.x1 {
                        let check = if ((y as usize + phase) / 3 + (x as usize + phase) / 3) % 2 == 0 { 0.08 } else { -0.08 };
                        label.set(y as usize, x as usize, RECTANGLE);
                        for ch in 0..c {
                            unit.set(y as usize, x as usize, ch, col[ch] + check);
                        }
                    }
                }
            }
            break;
        }
    }

    if cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("non-negative sigma");
        unit = unit.map(|v| v + n.sample(rng));
    }
    (unit.map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0), label)
}

fn fractions_ok(cfg: &SynthConfig, label: &LabelMap) -> bool {
    let total = label.data().len() as f64;
    label
        .histogram(3)
        .iter()
        .all(|&n| (cfg.min_class_fraction..=cfg.max_class_fraction).contains(&(n as f64 / total)))
}

/// Generates image `index` of the dataset keyed by `seed`. Draws are redone
/// until every class fraction lies within the configured bounds.
pub fn synth_sample(cfg: &SynthConfig, seed: u64, index: u64) -> Result<(ImageTensor, LabelMap)> {
    let mut rng = rng::stream(seed, "synth", index);
    for _ in 0..cfg.max_attempts {
        let (img, label) = draw_one(cfg, &mut rng);
        if fractions_ok(cfg, &label) {
            return Ok((img, label));
        }
    }
    Err(Error::Degenerate(format!(
        "could not satisfy class fraction bounds for image {index} in {} attempts",
        cfg.max_attempts
    )))
}

/// `n` samples with [`SynthConfig::for_size`] settings.
pub fn synth_shapes(n: usize, image_size: usize, seed: u64) -> Result<Vec<(ImageTensor, LabelMap)>> {
    let cfg = SynthConfig::for_size(image_size);
    synth_shapes_with(&cfg, n, seed)
}

pub fn synth_shapes_with(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<(ImageTensor, LabelMap)>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    (0..n as u64).map(|i| synth_sample(cfg, seed, i)).collect()
}

/// Writes `n` PNG image/label pairs under `dir` plus a `manifest.toml`.
/// The last `n_test` images form the test split, the first `n_labeled` the
/// labelled training split, and every non-test image the pre-training split.
pub fn write_synth_dataset(
    dir: &Path,
    cfg: &SynthConfig,
    n: usize,
    n_labeled: usize,
    n_test: usize,
    seed: u64,
) -> Result<PathBuf> {
    if n_test >= n || n_labeled == 0 || n_labeled + n_test > n {
        return Err(Error::Config(format!(
            "cannot split {n} images into {n_labeled} labelled and {n_test} test"
        )));
    }
    let samples = synth_shapes_with(cfg, n, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut pretrain = String::new();
    let mut seg_train = String::new();
    let mut seg_test = String::new();
    for (i, (img, label)) in samples.iter().enumerate() {
        let img_rel = format!("images/{i:04}.png");
        let lab_rel = format!("labels/{i:04}.png");
        save_image(&dir.join(&img_rel), img)?;
        save_label(&dir.join(&lab_rel), label)?;
        if i >= n - n_test {
            seg_test.push_str(&format!("  {{ image = \"{img_rel}\", label = \"{lab_rel}\" }},\n"));
        } else {
            pretrain.push_str(&format!("  {{ image = \"{img_rel}\" }},\n"));
            if i < n_labeled {
                seg_train.push_str(&format!("  {{ image = \"{img_rel}\", label = \"{lab_rel}\" }},\n"));
            }
        }
    }
    let manifest = format!(
        "# synthetic shapes: background=0 circle=1 rectangle=2\n\
         # seed = {seed}, image_size = {}\n\
         num_classes = 3\n\
         channels = {}\n\
         pretrain = [\n{pretrain}]\n\
         seg_train = [\n{seg_train}]\n\
         seg_test = [\n{seg_test}]\n",
        cfg.image_size, cfg.channels
    );
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
