//! Dense image and label containers shared by every stage of the pipeline.
//!
//! Images are stored height-major, channels interleaved (`H×W×C`), as `f64`
//! so that the Gaussian forward process and its inverse round-trip without
//! single-precision loss. Conversion to the model's `f32` NHWC batches happens
//! at the tensor boundary.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "buffer of {} values cannot hold a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Maps 8-bit samples into `[-1, 1]` via `v / 127.5 - 1`.
    pub fn from_u8(height: usize, width: usize, channels: usize, pixels: &[u8]) -> Result<Self> {
        let data = pixels.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        Self::new(height, width, channels, data)
    }

    /// Inverse of [`ImageTensor::from_u8`], clamping out-of-range values.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Copies the `h×w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = self.index(y, x0, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    /// Stacks same-shaped images into an `f32` NHWC tensor.
    pub fn batch_to_tensor(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dimension("empty image batch".into()))?;
        let (h, w, c) = first.shape();
        let mut buf = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.shape() != (h, w, c) {
                return Err(Error::Dimension(format!(
                    "batch mixes shapes {:?} and {:?}",
                    (h, w, c),
                    img.shape()
                )));
            }
            buf.extend(img.data.iter().map(|&v| v as f32));
        }
        Ok(Tensor::from_vec(buf, (images.len(), h, w, c), device)?)
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Self::batch_to_tensor(&[self], device)
    }

    /// Splits an NHWC tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, h, w, c) = t.dims4()?;
        let flat: Vec<f64> = t
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(flat
            .chunks(h * w * c)
            .take(b)
            .map(|chunk| ImageTensor {
                height: h,
                width: w,
                channels: c,
                data: chunk.to_vec(),
            })
            .collect())
    }
}

/// Per-pixel integer class map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "buffer of {} labels cannot hold a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{} label map",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            let start = y * self.width + x0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Binary foreground map: `true` where the label equals `class`.
    pub fn mask_of(&self, class: u32) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    pub fn max_label(&self) -> Option<u32> {
        self.data.iter().copied().max()
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0; num_classes];
        for &v in &self.data {
            if (v as usize) < num_classes {
                hist[v as usize] += 1;
            }
        }
        hist
    }
}
