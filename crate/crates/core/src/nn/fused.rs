//! Hand-fused kernels for the hot NHWC ops of the U-Net.
//!
//! Each op computes its forward in one pass over contiguous storage and
//! supplies an analytic backward, avoiding the chain of broadcast and
//! reduction nodes the composed versions would record.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} requires contiguous input"),
    }
}

#[derive(Debug, Clone, Copy)]
struct GnShape {
    batch: usize,
    pixels: usize,
    channels: usize,
    groups: usize,
}

impl GnShape {
    fn from_dims(dims: &[usize], groups: usize) -> candle_core::Result<Self> {
        match *dims {
            [b, h, w, c] if groups > 0 && c % groups == 0 => Ok(Self {
                batch: b,
                pixels: h * w,
                channels: c,
                groups,
            }),
            _ => candle_core::bail!("group norm: bad input {dims:?} for {groups} groups"),
        }
    }

    fn span(&self) -> usize {
        self.pixels * self.channels
    }

    fn group_size(&self) -> usize {
        self.channels / self.groups
    }
}

/// Per-(sample, group) mean and inverse standard deviation, accumulated in f64.
fn group_stats<T: WithDType>(x: &[T], s: GnShape, eps: f64) -> Vec<(f64, f64)> {
    let cg = s.group_size();
    let count = (s.pixels * cg) as f64;
    let mut stats = Vec::with_capacity(s.batch * s.groups);
    for img in x.chunks_exact(s.span()) {
        let mut sum = vec![0f64; s.groups];
        let mut sq = vec![0f64; s.groups];
        for px in img.chunks_exact(s.channels) {
            for (g, chunk) in px.chunks_exact(cg).enumerate() {
                for &v in chunk {
                    let v = v.to_f64();
                    sum[g] += v;
                    sq[g] += v * v;
                }
            }
        }
        for g in 0..s.groups {
            let mean = sum[g] / count;
            let var = (sq[g] / count - mean * mean).max(0.0);
            stats.push((mean, 1.0 / (var + eps).sqrt()));
        }
    }
    stats
}

/// Per-channel `(m, k)` such that the affine output is `m·x + k`.
fn affine_coefs<T: WithDType>(stats: &[(f64, f64)], a: &[T], b: &[T], cg: usize) -> Vec<(f64, f64)> {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(c, (&a, &b))| {
            let (mean, inv) = stats[c / cg];
            let m = inv * a.to_f64();
            (m, b.to_f64() - mean * m)
        })
        .collect()
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn gn_forward<T: WithDType>(x: &[T], a: &[T], b: &[T], s: GnShape, eps: f64, silu: bool) -> Vec<T> {
    let stats = group_stats(x, s, eps);
    let mut out = Vec::with_capacity(x.len());
    for (n, img) in x.chunks_exact(s.span()).enumerate() {
        let rows = n * s.channels..(n + 1) * s.channels;
        let coef = affine_coefs(&stats[n * s.groups..(n + 1) * s.groups], &a[rows.clone()], &b[rows], s.group_size());
        for px in img.chunks_exact(s.channels) {
            for (&v, &(m, k)) in px.iter().zip(&coef) {
                let y = v.to_f64() * m + k;
                out.push(T::from_f64(if silu { y * sigmoid(y) } else { y }));
            }
        }
    }
    out
}

/// Returns `dx` followed by `da` and `db` (each `B×C`) in one buffer.
///
/// With `x̂` the normalized input and `u = a·g`, the input gradient per group is
/// `inv · (u − mean(u) − x̂ · mean(u·x̂))`. When the op ends in SiLU, `b` is
/// needed to rebuild the pre-activation and `g` is first multiplied by the
/// SiLU derivative.
fn gn_backward<T: WithDType>(x: &[T], a: &[T], b: &[T], grad: &[T], s: GnShape, eps: f64, silu: bool) -> Vec<T> {
    let cg = s.group_size();
    let count = (s.pixels * cg) as f64;
    let stats = group_stats(x, s, eps);
    let mut out = vec![T::zero(); x.len() + 2 * s.batch * s.channels];
    let (dx, dab) = out.split_at_mut(x.len());
    let (da, db) = dab.split_at_mut(s.batch * s.channels);
    let mut g_act: Vec<f64> = Vec::with_capacity(s.span());
    for n in 0..s.batch {
        let range = n * s.span()..(n + 1) * s.span();
        let rows = n * s.channels..(n + 1) * s.channels;
        let (xi, gi) = (&x[range.clone()], &grad[range.clone()]);
        let st = &stats[n * s.groups..(n + 1) * s.groups];
        let coef = affine_coefs(st, &a[rows.clone()], &b[rows.clone()], cg);

        g_act.clear();
        for (px, gp) in xi.chunks_exact(s.channels).zip(gi.chunks_exact(s.channels)) {
            for c in 0..s.channels {
                let g = gp[c].to_f64();
                g_act.push(if silu {
                    let y = px[c].to_f64() * coef[c].0 + coef[c].1;
                    let sg = sigmoid(y);
                    g * sg * (1.0 + y * (1.0 - sg))
                } else {
                    g
                });
            }
        }
        // Σg and Σg·x per channel; Σg·x̂ = inv·(Σg·x − mean·Σg).
        let mut g_sum = vec![0f64; s.channels];
        let mut gx_raw = vec![0f64; s.channels];
        for (px, gp) in xi.chunks_exact(s.channels).zip(g_act.chunks_exact(s.channels)) {
            for c in 0..s.channels {
                g_sum[c] += gp[c];
                gx_raw[c] += gp[c] * px[c].to_f64();
            }
        }
        let mut u_mean = vec![0f64; s.groups];
        let mut ux_mean = vec![0f64; s.groups];
        for c in 0..s.channels {
            let (mean, inv) = st[c / cg];
            let gx = inv * (gx_raw[c] - mean * g_sum[c]);
            let ac = a[rows.start + c].to_f64();
            da[rows.start + c] = T::from_f64(gx);
            db[rows.start + c] = T::from_f64(g_sum[c]);
            u_mean[c / cg] += ac * g_sum[c] / count;
            ux_mean[c / cg] += ac * gx / count;
        }
        // dx = p·g + q·x + r per channel
        let lin: Vec<(f64, f64, f64)> = (0..s.channels)
            .map(|c| {
                let g = c / cg;
                let (mean, inv) = st[g];
                let q = -inv * inv * ux_mean[g];
                (inv * a[rows.start + c].to_f64(), q, -inv * u_mean[g] - mean * q)
            })
            .collect();
        for ((px, gp), op) in xi
            .chunks_exact(s.channels)
            .zip(g_act.chunks_exact(s.channels))
            .zip(dx[range].chunks_exact_mut(s.channels))
        {
            for c in 0..s.channels {
                let (p, q, r) = lin[c];
                op[c] = T::from_f64(p * gp[c] + q * px[c].to_f64() + r);
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
    silu: bool,
}

struct GroupNormGrad(GroupNormOp);

fn check_affine(s: GnShape, l: &Layout) -> candle_core::Result<()> {
    if l.dims() != [s.batch, s.channels] {
        candle_core::bail!("group norm: affine shape {:?}, expected {:?}", l.dims(), [s.batch, s.channels]);
    }
    Ok(())
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm-nhwc"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let s = GnShape::from_dims(l1.dims(), self.groups)?;
        check_affine(s, l2)?;
        check_affine(s, l3)?;
        let name = "group norm";
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(gn_forward(
                contiguous(x, l1, name)?,
                contiguous(a, l2, name)?,
                contiguous(b, l3, name)?,
                s,
                self.eps,
                self.silu,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(gn_forward(
                contiguous(x, l1, name)?,
                contiguous(a, l2, name)?,
                contiguous(b, l3, name)?,
                s,
                self.eps,
                self.silu,
            )),
            _ => candle_core::bail!("group norm: only matching f32 or f64 inputs are supported"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        a: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let ab = Tensor::cat(&[a, b], 1)?;
        let flat = x.apply_op3_no_bwd(&ab, &grad_res.contiguous()?, &GroupNormGrad(*self))?;
        let (n, bc) = (x.elem_count(), a.elem_count());
        let dx = flat.narrow(0, 0, n)?.reshape(x.shape())?;
        let da = flat.narrow(0, n, bc)?.reshape(a.shape())?;
        let db = flat.narrow(0, n + bc, bc)?.reshape(a.shape())?;
        Ok((Some(dx), Some(da), Some(db)))
    }
}

/// Inputs are `x`, the affine packed as `[a | b]` of shape `(B, 2C)`, and the
/// output gradient.
impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-nhwc-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = self.0;
        let s = GnShape::from_dims(l1.dims(), op.groups)?;
        if l2.dims() != [s.batch, 2 * s.channels] {
            candle_core::bail!("group norm grad: packed affine shape {:?}", l2.dims());
        }
        fn run<T: WithDType>(x: &[T], ab: &[T], g: &[T], s: GnShape, op: GroupNormOp) -> Vec<T> {
            let (mut a, mut b) = (Vec::with_capacity(ab.len() / 2), Vec::with_capacity(ab.len() / 2));
            for row in ab.chunks_exact(2 * s.channels) {
                a.extend_from_slice(&row[..s.channels]);
                b.extend_from_slice(&row[s.channels..]);
            }
            gn_backward(x, &a, &b, g, s, op.eps, op.silu)
        }
        let name = "group norm grad";
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(ab), CpuStorage::F32(g)) => CpuStorage::F32(run(
                contiguous(x, l1, name)?,
                contiguous(ab, l2, name)?,
                contiguous(g, l3, name)?,
                s,
                op,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(ab), CpuStorage::F64(g)) => CpuStorage::F64(run(
                contiguous(x, l1, name)?,
                contiguous(ab, l2, name)?,
                contiguous(g, l3, name)?,
                s,
                op,
            )),
            _ => candle_core::bail!("group norm grad: only matching f32 or f64 inputs are supported"),
        };
        let len = l1.shape().elem_count() + 2 * s.batch * s.channels;
        Ok((out, Shape::from(len)))
    }
}

/// Group normalization of an NHWC tensor followed by a per-sample,
/// per-channel affine `x̂ · scale + shift`, with `scale` and `shift` of shape
/// `(B, C)`. With `silu` the result is passed through SiLU in the same kernel.
pub fn group_norm_nhwc(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    groups: usize,
    eps: f64,
    silu: bool,
) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op3(
        &scale.contiguous()?,
        &shift.contiguous()?,
        GroupNormOp { groups, eps, silu },
    )
}

struct BiasAdd;
struct ColumnSum;

fn add_rows<T: WithDType>(y: &[T], bias: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for row in y.chunks_exact(bias.len()) {
        out.extend(row.iter().zip(bias).map(|(&a, &b)| a + b));
    }
    out
}

fn column_sum<T: WithDType>(g: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for row in g.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    acc
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let cols = l2.shape().elem_count();
        if l1.dims().last() != Some(&cols) {
            candle_core::bail!("bias add: bias of {cols} does not match {:?}", l1.dims());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(b)) => {
                CpuStorage::F32(add_rows(contiguous(y, l1, "bias add")?, contiguous(b, l2, "bias add")?))
            }
            (CpuStorage::F64(y), CpuStorage::F64(b)) => {
                CpuStorage::F64(add_rows(contiguous(y, l1, "bias add")?, contiguous(b, l2, "bias add")?))
            }
            _ => candle_core::bail!("bias add: only matching f32 or f64 inputs are supported"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        _y: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let db = grad_res.contiguous()?.apply_op1_no_bwd(&ColumnSum)?.reshape(bias.shape())?;
        Ok((Some(grad_res.clone()), Some(db)))
    }
}

impl CustomOp1 for ColumnSum {
    fn name(&self) -> &'static str {
        "column-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let cols = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(column_sum(contiguous(v, layout, "column sum")?, cols)),
            CpuStorage::F64(v) => CpuStorage::F64(column_sum(contiguous(v, layout, "column sum")?, cols)),
            _ => candle_core::bail!("column sum: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from(cols)))
    }
}

/// Adds a vector along the last dimension.
pub fn bias_add(y: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    y.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)
}

struct Upsample2Op;
struct Upsample2Grad;

fn upsample<T: Copy>(x: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len() * 4);
    for n in 0..b {
        for y in 0..h {
            let row = &x[((n * h + y) * w) * c..((n * h + y + 1) * w) * c];
            for _ in 0..2 {
                for px in row.chunks_exact(c) {
                    out.extend_from_slice(px);
                    out.extend_from_slice(px);
                }
            }
        }
    }
    out
}

fn sum_pool<T: WithDType>(g: &[T], b: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * h * w * c];
    let w2 = 2 * w;
    for n in 0..b {
        for y in 0..2 * h {
            for x in 0..w2 {
                let src = &g[((n * 2 * h + y) * w2 + x) * c..][..c];
                let dst = &mut out[((n * h + y / 2) * w + x / 2) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2Op {
    fn name(&self) -> &'static str {
        "upsample2-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = layout.shape().dims4()?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(upsample(contiguous(v, layout, "upsample")?, b, h, w, c)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample(contiguous(v, layout, "upsample")?, b, h, w, c)),
            _ => candle_core::bail!("upsample: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((b, 2 * h, 2 * w, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Upsample2Grad)?))
    }
}

impl CustomOp1 for Upsample2Grad {
    fn name(&self) -> &'static str {
        "upsample2-nhwc-grad"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h2, w2, c) = layout.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(sum_pool(contiguous(v, layout, "upsample grad")?, b, h, w, c)),
            CpuStorage::F64(v) => CpuStorage::F64(sum_pool(contiguous(v, layout, "upsample grad")?, b, h, w, c)),
            _ => candle_core::bail!("upsample grad: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((b, h, w, c))))
    }
}

/// Nearest-neighbour 2× upsampling of an NHWC tensor.
pub fn upsample2_nhwc(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Upsample2Op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    fn composed_gn(x: &Tensor, a: &Tensor, b: &Tensor, groups: usize, eps: f64) -> Tensor {
        let (n, h, w, c) = x.dims4().unwrap();
        let xg = x.reshape((n, h * w, groups, c / groups)).unwrap();
        let mean = xg.mean_keepdim((1, 3)).unwrap();
        let cen = xg.broadcast_sub(&mean).unwrap();
        let var = cen.sqr().unwrap().mean_keepdim((1, 3)).unwrap();
        let normed = cen.broadcast_div(&(var + eps).unwrap().sqrt().unwrap()).unwrap().reshape((n, h, w, c)).unwrap();
        normed
            .broadcast_mul(&a.reshape((n, 1, 1, c)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((n, 1, 1, c)).unwrap())
            .unwrap()
    }

    #[test]
    fn group_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::randn(0.5f64, 2.0, (2, 3, 4, 6), &dev).unwrap();
        let a = Var::randn(1f64, 0.5, (2, 6), &dev).unwrap();
        let b = Var::randn(0f64, 0.5, (2, 6), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 4, 6), &dev).unwrap();
        for silu in [false, true] {
            let fused = group_norm_nhwc(&x, &a, &b, 3, 1e-5, silu).unwrap();
            let mut reference = composed_gn(&x, &a, &b, 3, 1e-5);
            if silu {
                reference = reference.silu().unwrap();
            }
            assert!(max_diff(&fused, &reference) < 1e-10);

            let g1 = fused.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = reference.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &a, &b] {
                assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-10);
            }
        }
    }

    #[test]
    fn bias_add_gradients() {
        let dev = Device::Cpu;
        let y = Var::randn(0f64, 1.0, (5, 3), &dev).unwrap();
        let bias = Var::randn(0f64, 1.0, 3, &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (5, 3), &dev).unwrap();
        let fused = bias_add(&y, &bias).unwrap();
        let reference = y.broadcast_add(&bias).unwrap();
        assert!(max_diff(&fused, &reference) < 1e-12);
        let g1 = fused.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = reference.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(&bias).unwrap(), g2.get(&bias).unwrap()) < 1e-12);
        assert!(max_diff(g1.get(&y).unwrap(), g2.get(&y).unwrap()) < 1e-12);
    }

    #[test]
    fn upsample_gradient_sums_blocks() {
        let dev = Device::Cpu;
        let x = Var::new(&[[[[1f64], [2.]]]], &dev).unwrap(); // (1,1,2,1)
        let y = upsample2_nhwc(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 1]);
        assert_eq!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1., 1., 2., 2., 1., 1., 2., 2.]);
        let w = Tensor::arange(0f64, 8., &dev).unwrap().reshape((1, 2, 4, 1)).unwrap();
        let g = y.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![0. + 1. + 4. + 5., 2. + 3. + 6. + 7.]);
    }
}
