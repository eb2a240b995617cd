//! Corruption processes applied before the U-Net sees an image.
//!
//! Two families live here: timestep-indexed patch masking (the masked
//! diffusion corruption) and the closed-form Gaussian forward process of a
//! DDPM. Every randomized function takes its random stream explicitly and is
//! otherwise pure.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Value written into masked patches. Zero in normalized space is mid-gray.
pub const MASK_FILL: f64 = 0.0;

/// Square-patch tiling of an `H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    height: usize,
    width: usize,
    patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "patch size {patch} does not tile a {height}x{width} image"
            )));
        }
        Ok(Self {
            height,
            width,
            patch,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn cols(&self) -> usize {
        self.width / self.patch
    }

    /// `N = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Top-left pixel of patch `i` in raster order.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / self.cols()) * self.patch, (i % self.cols()) * self.patch)
    }
}

/// Which patches were replaced by [`mask_image`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    pub flags: Vec<bool>,
    pub t: usize,
    pub max_t: usize,
}

impl PatchMask {
    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Splits an image into `N` flattened patches of length `P²·C`, raster order
/// over patches and `(row, col, channel)` order within a patch.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Vec<Vec<f64>>> {
    let grid = PatchGrid::new(image.height(), image.width(), patch)?;
    let c = image.channels();
    let mut out = Vec::with_capacity(grid.num_patches());
    for i in 0..grid.num_patches() {
        let (y0, x0) = grid.origin(i);
        let mut v = Vec::with_capacity(patch * patch * c);
        for y in y0..y0 + patch {
            let start = image.index(y, x0, 0);
            v.extend_from_slice(&image.data()[start..start + patch * c]);
        }
        out.push(v);
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &[Vec<f64>],
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ImageTensor> {
    let grid = PatchGrid::new(height, width, patch)?;
    if patches.len() != grid.num_patches() {
        return Err(Error::Dimension(format!(
            "{} patches of side {patch} cannot tile {height}x{width}",
            patches.len()
        )));
    }
    let per_pixel = patch * patch;
    let plen = patches[0].len();
    if plen == 0 || plen % per_pixel != 0 {
        return Err(Error::Dimension(format!(
            "patch length {plen} is not a multiple of {per_pixel}"
        )));
    }
    let c = plen / per_pixel;
    let mut img = ImageTensor::zeros(height, width, c);
    for (i, p) in patches.iter().enumerate() {
        if p.len() != plen {
            return Err(Error::Dimension(format!(
                "patch {i} has length {} (expected {plen})",
                p.len()
            )));
        }
        let (y0, x0) = grid.origin(i);
        for (row, chunk) in p.chunks(patch * c).enumerate() {
            let start = img.index(y0 + row, x0, 0);
            img.data_mut()[start..start + patch * c].copy_from_slice(chunk);
        }
    }
    Ok(img)
}

fn check_timestep(t: usize, max_t: usize) -> Result<()> {
    if max_t == 0 {
        return Err(Error::Range("maximum timestep T must be at least 1".into()));
    }
    if t > max_t {
        return Err(Error::Range(format!("timestep {t} outside [0, {max_t}]")));
    }
    Ok(())
}

/// Masking ratio `t / (T + 1)`.
pub fn mask_ratio(t: usize, max_t: usize) -> Result<f64> {
    check_timestep(t, max_t)?;
    Ok(t as f64 / (max_t as f64 + 1.0))
}

/// Number of patches masked at timestep `t`: `⌊t·N / (T+1)⌋`, in exact
/// integer arithmetic.
pub fn masked_patch_count(t: usize, max_t: usize, num_patches: usize) -> Result<usize> {
    check_timestep(t, max_t)?;
    Ok(t * num_patches / (max_t + 1))
}

/// Masks `⌊R_m·N⌋` patches chosen uniformly at random.
///
/// Patch indices are Fisher–Yates shuffled and the last `⌊R_m·N⌋` of the
/// shuffled list are filled with [`MASK_FILL`]; the image keeps its original
/// patch order. Unmasked pixels are copied bit for bit.
pub fn mask_image<R: Rng + ?Sized>(
    image: &ImageTensor,
    t: usize,
    max_t: usize,
    patch: usize,
    rng: &mut R,
) -> Result<(ImageTensor, PatchMask)> {
    let grid = PatchGrid::new(image.height(), image.width(), patch)?;
    let n = grid.num_patches();
    let k = masked_patch_count(t, max_t, n)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut flags = vec![false; n];
    for &i in &order[n - k..] {
        flags[i] = true;
    }

    let mut out = image.clone();
    let c = image.channels();
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let (y0, x0) = grid.origin(i);
        for y in y0..y0 + patch {
            let start = out.index(y, x0, 0);
            out.data_mut()[start..start + patch * c].fill(MASK_FILL);
        }
    }
    Ok((out, PatchMask { flags, t, max_t }))
}

/// Per-pixel boolean view of a patch mask (`true` = masked), `H×W`.
pub fn pixel_mask(mask: &PatchMask, grid: &PatchGrid) -> Vec<bool> {
    let mut px = vec![false; grid.height() * grid.width()];
    for (i, _) in mask.flags.iter().enumerate().filter(|(_, &f)| f) {
        let (y0, x0) = grid.origin(i);
        for y in y0..y0 + grid.patch() {
            px[y * grid.width() + x0..y * grid.width() + x0 + grid.patch()].fill(true);
        }
    }
    px
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
}

impl ScheduleKind {
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 2e-2;

    /// Parses a schedule name; endpoints take their defaults.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(ScheduleKind::Linear {
                beta_start: Self::DEFAULT_BETA_START,
                beta_end: Self::DEFAULT_BETA_END,
            }),
            other => Err(Error::Config(format!("unknown beta schedule '{other}'"))),
        }
    }
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_start: Self::DEFAULT_BETA_START,
            beta_end: Self::DEFAULT_BETA_END,
        }
    }
}

/// Variance schedule `β_1..β_T` with `α_t = 1 − β_t` and `ᾱ_t = ∏_{s≤t} α_s`.
///
/// Vectors are stored zero-based: entry `t − 1` belongs to timestep `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// `recover_x0` refuses timesteps whose `ᾱ_t` falls below this.
    pub alpha_bar_floor: f64,
}

pub fn make_beta_schedule(max_t: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if max_t == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        } => {
            if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
                return Err(Error::Config(format!(
                    "linear schedule endpoints must satisfy 0 < {beta_start} <= {beta_end} < 1"
                )));
            }
            if max_t == 1 {
                vec![beta_start]
            } else {
                let step = (beta_end - beta_start) / (max_t - 1) as f64;
                (0..max_t).map(|i| beta_start + step * i as f64).collect()
            }
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(DiffusionSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
        alpha_bar_floor: 1e-12,
    })
}

impl DiffusionSchedule {
    pub fn max_t(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.max_t() {
            return Err(Error::Range(format!(
                "diffusion timestep {t} outside [1, {}]",
                self.max_t()
            )));
        }
        Ok(self.alpha_bars[t - 1])
    }
}

/// Samples `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, returning `(x_t, ε)`.
pub fn diffuse<R: Rng + ?Sized>(
    image: &ImageTensor,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    // validate before drawing so a bad t does not consume randomness
    schedule.alpha_bar(t)?;
    let eps = image.map(|_| rng.sample::<f64, _>(StandardNormal));
    let noisy = diffuse_with_noise(image, t, schedule, &eps)?;
    Ok((noisy, eps))
}

/// Deterministic forward process with caller-supplied noise.
pub fn diffuse_with_noise(
    image: &ImageTensor,
    t: usize,
    schedule: &DiffusionSchedule,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    if !image.same_shape(eps) {
        return Err(Error::Dimension(format!(
            "noise shape {:?} differs from image shape {:?}",
            eps.shape(),
            image.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = image
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    ImageTensor::new(image.height(), image.width(), image.channels(), data)
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn recover_x0(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<ImageTensor> {
    if !x_t.same_shape(eps_hat) {
        return Err(Error::Dimension(format!(
            "noise estimate shape {:?} differs from x_t shape {:?}",
            eps_hat.shape(),
            x_t.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    if ab < schedule.alpha_bar_floor {
        return Err(Error::NumericalDomain(format!(
            "alpha_bar({t}) = {ab:e} is below the floor {:e}",
            schedule.alpha_bar_floor
        )));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (x - b * e) / a)
        .collect();
    ImageTensor::new(x_t.height(), x_t.width(), x_t.channels(), data)
}
