//! Reconstruction and pixel-classification objectives.
//!
//! SSIM uses separable Gaussian filtering over "valid" window positions,
//! expressed as two banded-matrix products so the whole computation stays
//! differentiable through ordinary tensor ops.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabelMap};
use crate::nn::log_softmax_last;

/// Value range of the images handed to [`ssim`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRange {
    /// Pixels already in `[0, 1]`.
    Unit,
    /// Pixels in `[-1, 1]`, remapped to `[0, 1]` by `(v + 1) / 2` first.
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` after remapping.
    pub data_range: f64,
    /// Side of the square Gaussian window; odd.
    pub window_size: usize,
    pub window_sigma: f64,
    pub input_range: InputRange,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            window_size: 11,
            window_sigma: 1.5,
            input_range: InputRange::Symmetric,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::Config(format!("ssim constants must be positive, got k1={} k2={}", self.k1, self.k2)));
        }
        if !(self.data_range > 0.0) {
            return Err(Error::Config(format!("ssim data range must be positive, got {}", self.data_range)));
        }
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!("ssim window size {} must be odd", self.window_size)));
        }
        if !(self.window_sigma > 0.0) {
            return Err(Error::Config(format!("ssim window sigma must be positive, got {}", self.window_sigma)));
        }
        Ok(())
    }

    /// Window side actually used on an `h×w` image: the configured size,
    /// shrunk to the largest odd size that fits.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        let fit = h.min(w);
        let fit = if fit % 2 == 0 { fit.saturating_sub(1) } else { fit };
        self.window_size.min(fit)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// `(n − k + 1) × n` matrix applying the window at every valid offset.
fn band_matrix(n: usize, taps: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    let k = taps.len();
    let rows = n + 1 - k;
    let mut m = vec![0.0; rows * n];
    for r in 0..rows {
        m[r * n + r..r * n + r + k].copy_from_slice(taps);
    }
    Ok(Tensor::from_vec(m, (rows, n), device)?.to_dtype(dtype)?)
}

/// Valid separable filtering of a `(B, H, W, C)` tensor; returns `(B, C, W', H')`.
fn filter(x: &Tensor, fw: &Tensor, fh: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (wv, hv) = (fw.dim(0)?, fh.dim(0)?);
    // along W: (B, H, C, W) · Fwᵀ
    let xw = x.permute((0, 1, 3, 2))?.contiguous()?.reshape((b * h * c, w))?;
    let yw = xw.matmul(&fw.t()?)?.reshape((b, h, c, wv))?;
    // along H: (B, C, W', H) · Fhᵀ
    let xh = yw.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * c * wv, h))?;
    Ok(xh.matmul(&fh.t()?)?.reshape((b, c, wv, hv))?)
}

/// Mean local SSIM of two `(B, H, W, C)` tensors as a scalar tensor.
/// Differentiable in both arguments.
pub fn ssim_tensor(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<Tensor> {
    params.validate()?;
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!("ssim inputs differ in shape: {:?} vs {:?}", x.dims(), y.dims())));
    }
    let (_, h, w, _) = x.dims4()?;
    let k = params.effective_window(h, w);
    if k == 0 {
        return Err(Error::Dimension(format!("ssim needs a non-empty image, got {h}x{w}")));
    }
    let (x, y) = match params.input_range {
        InputRange::Unit => (x.clone(), y.clone()),
        InputRange::Symmetric => (x.affine(0.5, 0.5)?, y.affine(0.5, 0.5)?),
    };
    let taps = gaussian_window(k, params.window_sigma);
    let fw = band_matrix(w, &taps, x.dtype(), x.device())?;
    let fh = band_matrix(h, &taps, x.dtype(), x.device())?;

    let mu_x = filter(&x, &fw, &fh)?;
    let mu_y = filter(&y, &fw, &fh)?;
    let xx = filter(&x.sqr()?, &fw, &fh)?;
    let yy = filter(&y.sqr()?, &fw, &fh)?;
    let xy = filter(&(&x * &y)?, &fw, &fh)?;

    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (xx - &mu_xx)?;
    let var_y = (yy - &mu_yy)?;
    let cov = (xy - &mu_xy)?;

    let (c1, c2) = (params.c1(), params.c2());
    let num = (mu_xy.affine(2.0, c1)? * cov.affine(2.0, c2)?)?;
    let den = ((mu_xx + mu_yy)?.affine(1.0, c1)? * (var_x + var_y)?.affine(1.0, c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// `(1 − ssim) / 2` as a scalar tensor.
pub fn ssim_loss_tensor(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<Tensor> {
    Ok(ssim_tensor(x, y, params)?.affine(-0.5, 0.5)?)
}

fn check_same(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::Dimension(format!("images differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

fn to_f64_tensor(img: &ImageTensor) -> Result<Tensor> {
    let (h, w, c) = img.shape();
    Ok(Tensor::from_slice(img.data(), (1, h, w, c), &Device::Cpu)?)
}

/// Mean local SSIM, evaluated in double precision.
pub fn ssim(x: &ImageTensor, y: &ImageTensor, params: &SsimParams) -> Result<f64> {
    check_same(x, y)?;
    Ok(ssim_tensor(&to_f64_tensor(x)?, &to_f64_tensor(y)?, params)?.to_scalar::<f64>()?)
}

pub fn ssim_loss(x: &ImageTensor, y: &ImageTensor, params: &SsimParams) -> Result<f64> {
    Ok((1.0 - ssim(x, y, params)?) / 2.0)
}

pub fn mse_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("mse inputs differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn mse_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same(a, b)?;
    let total: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(total / a.len().max(1) as f64)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (shape `(N, K)`), skipping pixels equal to `ignore_label`.
pub fn cross_entropy_tensor(logits: &Tensor, labels: &[u32], ignore_label: Option<u32>) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut weights = vec![0f32; n * k];
    let mut kept = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if Some(l) == ignore_label {
            continue;
        }
        if l as usize >= k {
            return Err(Error::Data(format!("label {l} outside [0, {k})")));
        }
        weights[i * k + l as usize] = 1.0;
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::Data("cross entropy over zero labeled pixels".into()));
    }
    let onehot = Tensor::from_vec(weights, (n, k), logits.device())?.to_dtype(logits.dtype())?;
    let logp = log_softmax_last(logits)?;
    Ok((logp * onehot)?.sum_all()?.affine(-1.0 / kept as f64, 0.0)?)
}

/// Cross entropy of an `H×W×K` logit image against a label map.
pub fn cross_entropy(logits: &ImageTensor, labels: &LabelMap, ignore_label: Option<u32>) -> Result<f64> {
    let (h, w, k) = logits.shape();
    if (h, w) != (labels.height(), labels.width()) {
        return Err(Error::Dimension(format!(
            "logits are {h}x{w} but labels are {}x{}",
            labels.height(),
            labels.width()
        )));
    }
    let t = Tensor::from_slice(logits.data(), (h * w, k), &Device::Cpu)?;
    let loss = cross_entropy_tensor(&t, labels.data(), ignore_label)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Row-wise argmax; ties go to the smaller index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<u32>> {
    let (_, k) = scores.dims2()?;
    let flat = scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(flat
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}
