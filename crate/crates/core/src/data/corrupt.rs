//! Test-time image corruptions with five severity levels each.
//!
//! Severity tables follow the common ImageNet-C conventions. Pixel math runs
//! in `[0, 1]`; inputs and outputs are `[-1, 1]` images.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::reflect;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const MAX_SEVERITY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    DefocusBlur,
    Brightness,
    Contrast,
    Jpeg,
    // Recognized names without an implementation.
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    ElasticTransform,
    Pixelate,
}

impl CorruptionKind {
    pub const IMPLEMENTED: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Jpeg,
    ];

    pub const ALL: [CorruptionKind; 16] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Jpeg,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::ElasticTransform,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Jpeg => "jpeg",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::ElasticTransform => "elastic_transform",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn is_implemented(self) -> bool {
        Self::IMPLEMENTED.contains(&self)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind '{s}'")))
    }
}

const GAUSSIAN_NOISE: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];
const SHOT_NOISE: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_NOISE: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
const GAUSSIAN_BLUR: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 6.0];
const DEFOCUS_BLUR: [(usize, f64); 5] = [(3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5)];
const BRIGHTNESS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const CONTRAST: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];
const JPEG_QUALITY: [u8; 5] = [25, 18, 15, 10, 7];

fn check(kind: CorruptionKind, severity: usize) -> Result<usize> {
    if !kind.is_implemented() {
        return Err(Error::Config(format!("corruption '{kind}' is not implemented")));
    }
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(Error::Range(format!("severity must be in 1..={MAX_SEVERITY}, got {severity}")));
    }
    Ok(severity - 1)
}

/// Scalar strength of `kind` at `severity`, oriented so larger means harsher.
pub fn distortion_parameter(kind: CorruptionKind, severity: usize) -> Result<f64> {
    let i = check(kind, severity)?;
    Ok(match kind {
        CorruptionKind::GaussianNoise => GAUSSIAN_NOISE[i],
        CorruptionKind::ShotNoise => 1.0 / SHOT_NOISE[i],
        CorruptionKind::ImpulseNoise => IMPULSE_NOISE[i],
        CorruptionKind::GaussianBlur => GAUSSIAN_BLUR[i],
        CorruptionKind::DefocusBlur => DEFOCUS_BLUR[i].0 as f64,
        CorruptionKind::Brightness => BRIGHTNESS[i],
        CorruptionKind::Contrast => 1.0 - CONTRAST[i],
        CorruptionKind::Jpeg => 100.0 - JPEG_QUALITY[i] as f64,
        _ => unreachable!("checked above"),
    })
}

/// Applies `kind` at `severity` (1..=5) to a `[-1, 1]` image.
pub fn corrupt_test<R: Rng + ?Sized>(
    image: &ImageTensor,
    kind: CorruptionKind,
    severity: usize,
    rng: &mut R,
) -> Result<ImageTensor> {
    let i = check(kind, severity)?;
    let unit = image.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    let out = match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, GAUSSIAN_NOISE[i]).expect("positive sigma");
            unit.map(|v| (v + n.sample(rng)).clamp(0.0, 1.0))
        }
        CorruptionKind::ShotNoise => {
            let c = SHOT_NOISE[i];
            unit.map(|v| {
                let lambda = v * c;
                let k = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(rng)
                } else {
                    0.0
                };
                (k / c).clamp(0.0, 1.0)
            })
        }
        CorruptionKind::ImpulseNoise => {
            let amount = IMPULSE_NOISE[i];
            unit.map(|v| {
                if rng.random_bool(amount) {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
        }
        CorruptionKind::GaussianBlur => gaussian_blur(&unit, GAUSSIAN_BLUR[i]),
        CorruptionKind::DefocusBlur => {
            let (radius, alias) = DEFOCUS_BLUR[i];
            let disk = convolve(&unit, &disk_kernel(radius, alias));
            disk.map(|v| v.clamp(0.0, 1.0))
        }
        CorruptionKind::Brightness => return adjust_brightness(image, BRIGHTNESS[i]),
        CorruptionKind::Contrast => {
            let c = CONTRAST[i];
            let (h, w, ch) = unit.shape();
            let mut means = vec![0.0; ch];
            for (k, v) in unit.data().iter().enumerate() {
                means[k % ch] += v;
            }
            for m in &mut means {
                *m /= (h * w) as f64;
            }
            ImageTensor::from_fn(h, w, ch, |y, x, k| ((unit.get(y, x, k) - means[k]) * c + means[k]).clamp(0.0, 1.0))
        }
        CorruptionKind::Jpeg => return jpeg_round_trip(image, JPEG_QUALITY[i]),
        _ => unreachable!("checked above"),
    };
    Ok(out.map(|v| v * 2.0 - 1.0))
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let k = gaussian_kernel_1d(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = img.shape();
    let rows = ImageTensor::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * img.get(y, reflect(x as isize + j as isize - r, w), ch))
            .sum()
    });
    ImageTensor::from_fn(h, w, c, |y, x, ch| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows.get(reflect(y as isize + i as isize - r, h), x, ch))
            .sum()
    })
}

/// Disk of the given radius, softened by a small Gaussian to reduce aliasing.
fn disk_kernel(radius: usize, alias_sigma: f64) -> Vec<Vec<f64>> {
    let r = radius as isize;
    let n = 2 * radius + 1;
    let mut disk = vec![vec![0.0; n]; n];
    for (i, row) in disk.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as isize - r, j as isize - r);
            if dy * dy + dx * dx <= r * r {
                *v = 1.0;
            }
        }
    }
    let ksize: isize = if radius <= 8 { 1 } else { 2 };
    let g: Vec<f64> = (-ksize..=ksize).map(|i| (-(i * i) as f64 / (2.0 * alias_sigma * alias_sigma)).exp()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (a, ga) in g.iter().enumerate() {
                for (b, gb) in g.iter().enumerate() {
                    let (y, x) = (i as isize + a as isize - ksize, j as isize + b as isize - ksize);
                    if (0..n as isize).contains(&y) && (0..n as isize).contains(&x) {
                        acc += ga * gb * disk[y as usize][x as usize];
                    }
                }
            }
            out[i][j] = acc;
        }
    }
    let s: f64 = out.iter().flatten().sum();
    out.iter_mut().flatten().for_each(|v| *v /= s);
    out
}

fn convolve(img: &ImageTensor, kernel: &[Vec<f64>]) -> ImageTensor {
    let r = (kernel.len() / 2) as isize;
    let (h, w, c) = img.shape();
    ImageTensor::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        for (i, row) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + i as isize - r, h);
            for (j, kv) in row.iter().enumerate() {
                acc += kv * img.get(sy, reflect(x as isize + j as isize - r, w), ch);
            }
        }
        acc
    })
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Adds `delta` to the HSV value channel (the luminance for grayscale),
/// clipping to the valid range.
pub fn adjust_brightness(image: &ImageTensor, delta: f64) -> Result<ImageTensor> {
    let (h, w, c) = image.shape();
    let unit = |v: f64| ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    let mut out = ImageTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            match c {
                1 => out.set(y, x, 0, (unit(image.get(y, x, 0)) + delta).clamp(0.0, 1.0) * 2.0 - 1.0),
                3 => {
                    let (hh, s, v) = rgb_to_hsv(unit(image.get(y, x, 0)), unit(image.get(y, x, 1)), unit(image.get(y, x, 2)));
                    let (r, g, b) = hsv_to_rgb(hh, s, (v + delta).clamp(0.0, 1.0));
                    out.set(y, x, 0, r * 2.0 - 1.0);
                    out.set(y, x, 1, g * 2.0 - 1.0);
                    out.set(y, x, 2, b * 2.0 - 1.0);
                }
                _ => return Err(Error::Dimension(format!("brightness needs 1 or 3 channels, got {c}"))),
            }
        }
    }
    Ok(out)
}

/// Encodes at `quality` with a real JPEG encoder and decodes the result.
fn jpeg_round_trip(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    use image::codecs::jpeg::JpegEncoder;
    use image::ImageDecoder;

    let (h, w, c) = image.shape();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Dimension(format!("jpeg needs 1 or 3 channels, got {c}"))),
    };
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(&image.to_u8(), w as u32, h as u32, color)
        .map_err(|e| Error::Data(format!("jpeg encode failed: {e}")))?;
    let decoder = image::codecs::jpeg::JpegDecoder::new(std::io::Cursor::new(buf))
        .map_err(|e| Error::Data(format!("jpeg decode failed: {e}")))?;
    let mut pixels = vec![0u8; decoder.total_bytes() as usize];
    decoder
        .read_image(&mut pixels)
        .map_err(|e| Error::Data(format!("jpeg decode failed: {e}")))?;
    ImageTensor::from_u8(h, w, c, &pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            (((y * 7 + x * 3 + c * 11) % 17) as f64 / 16.0 * 1.6 - 0.8) * if (x / 4 + y / 4) % 2 == 0 { 1.0 } else { 0.5 }
        })
    }

    fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) / 2.0).powi(2)).sum::<f64>() / a.len() as f64;
        -10.0 * mse.log10()
    }

    #[test]
    fn parameters_are_monotone_in_severity() {
        for kind in CorruptionKind::IMPLEMENTED {
            let p: Vec<f64> = (1..=5).map(|s| distortion_parameter(kind, s).unwrap()).collect();
            assert!(p.windows(2).all(|w| w[1] >= w[0]), "{kind}: {p:?}");
        }
        let sigmas: Vec<f64> = (1..=5).map(|s| distortion_parameter(CorruptionKind::GaussianNoise, s).unwrap()).collect();
        assert!(sigmas.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn unknown_and_stub_kinds_are_config_errors() {
        assert!(matches!("rain".parse::<CorruptionKind>(), Err(Error::Config(_))));
        let img = textured(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fog: CorruptionKind = "fog".parse().unwrap();
        assert!(matches!(corrupt_test(&img, fog, 1, &mut rng), Err(Error::Config(_))));
        assert!(matches!(corrupt_test(&img, CorruptionKind::Jpeg, 0, &mut rng), Err(Error::Range(_))));
        assert!(matches!(corrupt_test(&img, CorruptionKind::Jpeg, 6, &mut rng), Err(Error::Range(_))));
        for k in CorruptionKind::ALL {
            assert_eq!(k.name().parse::<CorruptionKind>().unwrap(), k);
        }
    }

    #[test]
    fn brightness_shift_inverts_without_clipping() {
        // values low enough that +0.5 never clips
        let img = ImageTensor::from_fn(6, 6, 3, |y, x, c| -0.9 + 0.1 * ((y + x + c) % 4) as f64);
        for s in 1..=5 {
            let d = BRIGHTNESS[s - 1];
            let up = adjust_brightness(&img, d).unwrap();
            let back = adjust_brightness(&up, -d).unwrap();
            for (a, b) in back.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hsv_round_trip() {
        for (r, g, b) in [(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1), (0.1, 0.7, 0.4)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() + (g - g2).abs() + (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn jpeg_quality_lowers_psnr() {
        let images = crate::data::synth_shapes(4, 64, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores: Vec<f64> = (1..=5)
            .map(|s| {
                images
                    .iter()
                    .map(|(img, _)| {
                        let out = corrupt_test(img, CorruptionKind::Jpeg, s, &mut rng).unwrap();
                        assert_ne!(&out, img);
                        psnr(img, &out)
                    })
                    .sum::<f64>()
                    / images.len() as f64
            })
            .collect();
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
    }

    #[test]
    fn every_kind_keeps_shape_and_range_and_is_seeded() {
        let img = textured(16, 16);
        for kind in CorruptionKind::IMPLEMENTED {
            for s in 1..=5 {
                let a = corrupt_test(&img, kind, s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
                let b = corrupt_test(&img, kind, s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.shape(), img.shape());
                assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)), "{kind} {s}");
            }
        }
    }

    #[test]
    fn noise_and_blur_distortion_grows_with_severity() {
        let img = textured(32, 32);
        for kind in [
            CorruptionKind::GaussianNoise,
            CorruptionKind::GaussianBlur,
            CorruptionKind::Contrast,
            CorruptionKind::ImpulseNoise,
        ] {
            let p: Vec<f64> = (1..=5)
                .map(|s| psnr(&img, &corrupt_test(&img, kind, s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()))
                .collect();
            assert!(p.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{kind}: {p:?}");
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ImageTensor::filled(12, 12, 3, 0.2);
        for kind in [CorruptionKind::GaussianBlur, CorruptionKind::DefocusBlur] {
            let out = corrupt_test(&img, kind, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.2).abs() < 1e-12));
        }
    }
}
