//! Same-padded, stride-1 convolution over NHWC tensors.
//!
//! The convolution is lowered to an im2col gather followed by a single
//! matmul. The gather is a custom op whose backward is the matching col2im
//! scatter-add, so gradients flow through the matmul and the gather without
//! materialising transposed-convolution kernels.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};
use crate::nn::bias_add;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
}

impl Geometry {
    fn from_dims(dims: &[usize], kernel: usize) -> candle_core::Result<Self> {
        match *dims {
            [batch, height, width, channels] => Ok(Self {
                batch,
                height,
                width,
                channels,
                kernel,
            }),
            _ => candle_core::bail!("im2col expects a rank-4 NHWC tensor, got {dims:?}"),
        }
    }

    fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col requires contiguous input"),
    }
}

fn gather<T: WithDType>(src: &[T], g: Geometry) -> Vec<T> {
    let (h, w, c, k) = (g.height, g.width, g.channels, g.kernel);
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); g.rows() * g.cols()];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &src[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let dst = &mut out[row * g.cols()..(row + 1) * g.cols()];
                for ky in 0..k as isize {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k as isize {
                        let sx = x + kx - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = ((ky * k as isize + kx) as usize) * c;
                        let s = (sy as usize * w + sx as usize) * c;
                        dst[d..d + c].copy_from_slice(&img[s..s + c]);
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn scatter<T: WithDType>(cols: &[T], g: Geometry) -> Vec<T> {
    let (h, w, c, k) = (g.height, g.width, g.channels, g.kernel);
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); g.batch * h * w * c];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &mut out[b * h * w * c..(b + 1) * h * w * c];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for ky in 0..k as isize {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k as isize {
                        let sx = x + kx - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = ((ky * k as isize + kx) as usize) * c;
                        let s = (sy as usize * w + sx as usize) * c;
                        for (o, v) in img[s..s + c].iter_mut().zip(&src[d..d + c]) {
                            *o += *v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

struct Im2Col {
    kernel: usize,
}

struct Col2Im {
    geometry: Geometry,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::from_dims(layout.dims(), self.kernel)?;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, layout)?, g)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let geometry = Geometry::from_dims(arg.dims(), self.kernel)?;
        let grad = grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im { geometry })?;
        Ok(Some(grad))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        if layout.dims() != [g.rows(), g.cols()] {
            candle_core::bail!("col2im: unexpected column shape {:?}", layout.dims());
        }
        let shape = Shape::from((g.batch, g.height, g.width, g.channels));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, layout)?, g)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }
}

/// Gathers `k×k` neighbourhoods (zero padded) into rows of a
/// `(B·H·W, k·k·C)` matrix. Differentiable.
pub fn im2col(x: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("kernel size {kernel} must be odd")));
    }
    Ok(x.contiguous()?.apply_op1(Im2Col { kernel })?)
}

/// `weight` has shape `(k·k·C_in, C_out)`, `bias` shape `(C_out)`.
pub fn conv2d_nhwc(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, kernel: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let (rows, cout) = weight.dims2()?;
    if rows != kernel * kernel * c {
        return Err(Error::Dimension(format!(
            "conv weight has {rows} rows, expected {} for {c} input channels",
            kernel * kernel * c
        )));
    }
    let cols = if kernel == 1 {
        x.reshape((b * h * w, c))?
    } else {
        im2col(x, kernel)?
    };
    let mut y = cols.matmul(weight)?;
    if let Some(bias) = bias {
        y = bias_add(&y, bias)?;
    }
    Ok(y.reshape((b, h, w, cout))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &[f64], dims: (usize, usize, usize, usize), wt: &[f64], k: usize, cout: usize) -> Vec<f64> {
        let (b, h, w, c) = dims;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; b * h * w * cout];
        for n in 0..b {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                for i in 0..c {
                                    let xv = x[((n * h + sy as usize) * w + sx as usize) * c + i];
                                    let row = ((ky * k as isize + kx) as usize) * c + i;
                                    acc += xv * wt[row * cout + o];
                                }
                            }
                        }
                        out[((n * h + y as usize) * w + xx as usize) * cout + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let dev = Device::Cpu;
        let dims = (2, 5, 4, 3);
        let x = Tensor::randn(0f64, 1.0, dims, &dev).unwrap();
        let wt = Tensor::randn(0f64, 1.0, (27, 4), &dev).unwrap();
        let y = conv2d_nhwc(&x, &wt, None, 3).unwrap();
        let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ws = wt.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let reference = naive_conv(&xs, dims, &ws, 3, 4);
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (1, 4, 3, 2), &dev).unwrap();
        let wt = Tensor::randn(0f64, 1.0, (18, 3), &dev).unwrap();
        let target = Tensor::randn(0f64, 1.0, (1, 4, 3, 3), &dev).unwrap();
        let loss = |x: &Tensor| -> Tensor {
            conv2d_nhwc(x, &wt, None, 3).unwrap().sub(&target).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        let grads = loss(x.as_tensor()).backward().unwrap();
        let g = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let hstep = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += hstep;
            let mut m = base.clone();
            m[i] -= hstep;
            let lp = loss(&Tensor::from_vec(p, (1, 4, 3, 2), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let lm = loss(&Tensor::from_vec(m, (1, 4, 3, 2), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (lp - lm) / (2.0 * hstep);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_even_kernel() {
        let x = Tensor::zeros((1, 2, 2, 1), DType::F32, &Device::Cpu).unwrap();
        assert!(im2col(&x, 2).is_err());
    }
}
