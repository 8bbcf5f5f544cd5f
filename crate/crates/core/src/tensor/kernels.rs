//! Forward kernels on plain tensors, plus the slice-level helpers the
//! backward rules reuse.
//!
//! All layouts are row-major and channels-last (`[B, H, W, C]`). Binary
//! elementwise ops accept a right operand whose shape is a trailing suffix of
//! the left operand's shape (bias and position-embedding broadcast); no other
//! broadcasting is supported.

use rayon::prelude::*;

use super::{Element, Mask, Tensor};
use crate::{Error, Result};

/// Work (multiply count) above which kernels split rows across threads.
const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m, n] = op(a)[m, k] * op(b)[k, n]` where `op` optionally transposes.
/// With `ta`, `a` is stored `[k, m]`; with `tb`, `b` is stored `[n, k]`.
pub fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let row = |i: usize, out_row: &mut [T]| match (ta, tb) {
        (false, false) => {
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        (false, true) => {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                *o = a_row.iter().zip(b_row).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            }
        }
        (true, false) => {
            for p in 0..k {
                let av = a[p * m + i];
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        (true, true) => {
            for (j, o) in out_row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[p * m + i] * b[j * k + p];
                }
                *o = acc;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    }
    out
}

/// Geometry of a (possibly batched) matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single `[K, N]` matrix shared across the batch.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {a:?} x {b:?} ({k} vs {k2})"),
        ));
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        return Ok(MatmulDims {
            batch,
            m,
            k,
            n,
            shared_rhs: true,
        });
    }
    if a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::shape("matmul", format!("batch extents differ: {a:?} x {b:?}")));
    }
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        shared_rhs: false,
    })
}

/// Matrix product over the last two axes. `b` is either `[K, N]` (shared
/// across leading axes of `a`) or has the same leading axes as `a`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(d.n);
    let data = if d.shared_rhs {
        gemm(a.data(), b.data(), d.batch * d.m, d.k, d.n, false, false)
    } else {
        let mut out = Vec::with_capacity(d.batch * d.m * d.n);
        for bi in 0..d.batch {
            let ab = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
            let bb = &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n];
            out.extend(gemm(ab, bb, d.m, d.k, d.n, false, false));
        }
        out
    };
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn check_suffix(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(Error::shape(op, format!("{rhs:?} is not a trailing suffix of {lhs:?}")));
    }
    Ok(())
}

fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    check_suffix(op, a.shape(), b.shape())?;
    let bn = b.numel();
    let bd = b.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bn])).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

/// Sums `grad` (shaped like the left operand) down to a trailing-suffix shape.
pub(crate) fn reduce_to_suffix<T: Element>(grad: &[T], suffix: &[usize]) -> Tensor<T> {
    let n: usize = suffix.iter().product();
    let mut out = vec![T::zero(); n];
    for chunk in grad.chunks(n) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::from_parts(suffix.to_vec(), out)
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if eps <= 0.0 {
        return Err(Error::domain("layer_norm", format!("eps must be > 0, got {eps}")));
    }
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "affine params {:?}/{:?} do not match last axis {d}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.numel()];
    for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..d {
            o[j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Mean and reciprocal standard deviation (biased variance) of one row.
pub(crate) fn row_stats<T: Element>(row: &[T], eps: f64) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + T::of(eps)).sqrt().recip())
}

#[inline]
pub(crate) fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Element>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Exact (erf-based) Gaussian error linear unit.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// `ln(1 + e^x)`, evaluated without overflow.
#[inline]
pub(crate) fn softplus_scalar<T: Element>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// Softmax over the last axis with max-subtraction. Masked-out entries are
/// exactly zero. The mask shape must be a trailing suffix of `x`'s shape.
pub fn softmax<T: Element>(x: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
    let t = x.last_dim();
    if let Some(m) = mask {
        check_suffix("softmax", x.shape(), m.shape())?;
    }
    let mut out = vec![T::zero(); x.numel()];
    for (r, (row, o)) in x.data().chunks(t).zip(out.chunks_mut(t)).enumerate() {
        let visible = |j: usize| match mask {
            Some(m) => m.data()[(r * t + j) % m.data().len()],
            None => true,
        };
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if visible(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::FullyMasked { row: r });
        }
        let mut total = T::zero();
        for (j, (o, &v)) in o.iter_mut().zip(row).enumerate() {
            if visible(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in o.iter_mut() {
            *o /= total;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Output extent of a strided, zero-padded window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Input row/column for output position `o` and tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

pub(crate) fn conv_geom(
    op: &'static str,
    x: &[usize],
    kernel: &[usize],
    depthwise: bool,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if x.len() != 4 {
        return Err(Error::shape(op, format!("input must be [B,H,W,C], got {x:?}")));
    }
    let expect_rank = if depthwise { 3 } else { 4 };
    if kernel.len() != expect_rank || kernel[0] != kernel[1] {
        return Err(Error::shape(
            op,
            format!("kernel must be square rank-{expect_rank}, got {kernel:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::domain(op, "stride must be >= 1"));
    }
    let (batch, h, w, cin) = (x[0], x[1], x[2], x[3]);
    if kernel[2] != cin {
        return Err(Error::shape(
            op,
            format!("kernel channels {} != input channels {cin}", kernel[2]),
        ));
    }
    let k = kernel[0];
    let cout = if depthwise { cin } else { kernel[3] };
    let (ho, wo) = match (conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(
                op,
                format!("{h}x{w} input with padding {pad} is smaller than kernel {k}"),
            ))
        }
    };
    Ok(ConvGeom {
        batch,
        h,
        w,
        cin,
        cout,
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

/// Full 2-D cross-correlation, `kernel: [k, k, Cin, Cout]`.
pub fn conv2d<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = conv_geom("conv2d", x.shape(), kernel.shape(), false, stride, padding)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![T::zero(); g.batch * g.ho * g.wo * g.cout];
    let row_len = g.wo * g.cout;
    let fill = |r: usize, orow: &mut [T]| {
        let (b, oy) = (r / g.ho, r % g.ho);
        for ky in 0..g.k {
            let Some(iy) = g.src(oy, ky, g.h) else { continue };
            for ox in 0..g.wo {
                let o = &mut orow[ox * g.cout..(ox + 1) * g.cout];
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xs = &xd[((b * g.h + iy) * g.w + ix) * g.cin..][..g.cin];
                    let ks = &kd[(ky * g.k + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &xv) in xs.iter().enumerate() {
                        for (ov, &kv) in o.iter_mut().zip(&ks[ci * g.cout..(ci + 1) * g.cout]) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    };
    if out.len() * g.k * g.k * g.cin >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len).enumerate().for_each(|(r, o)| fill(r, o));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(r, o)| fill(r, o));
    }
    Ok(Tensor::from_parts(vec![g.batch, g.ho, g.wo, g.cout], out))
}

pub(crate) fn conv2d_backward<T: Element>(g: &ConvGeom, x: &[T], kernel: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let img = g.h * g.w * g.cin;
    let mut dx = vec![T::zero(); g.batch * img];
    dx.par_chunks_mut(img).enumerate().for_each(|(b, dxb)| {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dys = &dy[((b * g.ho + oy) * g.wo + ox) * g.cout..][..g.cout];
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let dxs = &mut dxb[(iy * g.w + ix) * g.cin..][..g.cin];
                        let ks = &kernel[(ky * g.k + kx) * g.cin * g.cout..][..g.cin * g.cout];
                        for (ci, d) in dxs.iter_mut().enumerate() {
                            *d += ks[ci * g.cout..(ci + 1) * g.cout]
                                .iter()
                                .zip(dys)
                                .fold(T::zero(), |acc, (&kv, &gv)| acc + kv * gv);
                        }
                    }
                }
            }
        }
    });
    let tap = g.cin * g.cout;
    let mut dk = vec![T::zero(); g.k * g.k * tap];
    dk.par_chunks_mut(tap).enumerate().for_each(|(t, dkt)| {
        let (ky, kx) = (t / g.k, t % g.k);
        for b in 0..g.batch {
            for oy in 0..g.ho {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for ox in 0..g.wo {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xs = &x[((b * g.h + iy) * g.w + ix) * g.cin..][..g.cin];
                    let dys = &dy[((b * g.ho + oy) * g.wo + ox) * g.cout..][..g.cout];
                    for (ci, &xv) in xs.iter().enumerate() {
                        for (d, &gv) in dkt[ci * g.cout..(ci + 1) * g.cout].iter_mut().zip(dys) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    });
    (dx, dk)
}

/// Per-channel 2-D cross-correlation, `kernel: [k, k, C]`.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom("depthwise_conv2d", x.shape(), kernel.shape(), true, stride, padding)?;
    let (xd, kd, c) = (x.data(), kernel.data(), g.cin);
    let mut out = vec![T::zero(); g.batch * g.ho * g.wo * c];
    let row_len = g.wo * c;
    let fill = |r: usize, orow: &mut [T]| {
        let (b, oy) = (r / g.ho, r % g.ho);
        for ky in 0..g.k {
            let Some(iy) = g.src(oy, ky, g.h) else { continue };
            for ox in 0..g.wo {
                let o = &mut orow[ox * c..(ox + 1) * c];
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xs = &xd[((b * g.h + iy) * g.w + ix) * c..][..c];
                    let ks = &kd[(ky * g.k + kx) * c..][..c];
                    for ((ov, &xv), &kv) in o.iter_mut().zip(xs).zip(ks) {
                        *ov += xv * kv;
                    }
                }
            }
        }
    };
    if out.len() * g.k * g.k >= PAR_THRESHOLD {
        out.par_chunks_mut(row_len).enumerate().for_each(|(r, o)| fill(r, o));
    } else {
        out.chunks_mut(row_len).enumerate().for_each(|(r, o)| fill(r, o));
    }
    Ok(Tensor::from_parts(vec![g.batch, g.ho, g.wo, c], out))
}

pub(crate) fn depthwise_backward<T: Element>(g: &ConvGeom, x: &[T], kernel: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let c = g.cin;
    let img = g.h * g.w * c;
    let mut dx = vec![T::zero(); g.batch * img];
    dx.par_chunks_mut(img).enumerate().for_each(|(b, dxb)| {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dys = &dy[((b * g.ho + oy) * g.wo + ox) * c..][..c];
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let dxs = &mut dxb[(iy * g.w + ix) * c..][..c];
                        let ks = &kernel[(ky * g.k + kx) * c..][..c];
                        for ((d, &kv), &gv) in dxs.iter_mut().zip(ks).zip(dys) {
                            *d += kv * gv;
                        }
                    }
                }
            }
        }
    });
    let mut dk = vec![T::zero(); g.k * g.k * c];
    dk.par_chunks_mut(c).enumerate().for_each(|(t, dkt)| {
        let (ky, kx) = (t / g.k, t % g.k);
        for b in 0..g.batch {
            for oy in 0..g.ho {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for ox in 0..g.wo {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xs = &x[((b * g.h + iy) * g.w + ix) * c..][..c];
                    let dys = &dy[((b * g.ho + oy) * g.wo + ox) * c..][..c];
                    for ((d, &xv), &gv) in dkt.iter_mut().zip(xs).zip(dys) {
                        *d += xv * gv;
                    }
                }
            }
        }
    });
    (dx, dk)
}

/// Contiguous range `[start, start + len)` of the last axis.
pub fn slice_last<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if len == 0 || start + len > d {
        return Err(Error::shape(
            "slice_last",
            format!("range {start}..{} outside last axis of {:?}", start + len, x.shape()),
        ));
    }
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Splits the last axis into consecutive pieces of the given widths. Zero
/// widths are rejected since tensors have positive extents.
pub fn split_last<T: Element>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    if widths.iter().sum::<usize>() != x.last_dim() {
        return Err(Error::shape(
            "split_last",
            format!("widths {widths:?} do not sum to last axis of {:?}", x.shape()),
        ));
    }
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let s = slice_last(x, start, w);
            start += w;
            s
        })
        .collect()
}

/// Concatenation along the last axis; leading axes must agree.
pub fn concat_last<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_last", "no inputs"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::shape(
                "concat_last",
                format!("leading axes differ: {:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let d = p.last_dim();
            data.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(
            "permute",
            format!("{axes:?} is not a permutation of rank {r}"),
        ));
    }
    let in_strides = strides(x.shape());
    let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    let xd = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        data.push(xd[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Shape after reducing `axes`, plus a map from input offset to output offset.
pub(crate) fn reduction_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = shape.len();
    if axes.is_empty() || axes.iter().any(|&a| a >= r) {
        return Err(Error::shape(
            "mean",
            format!("axes {axes:?} invalid for shape {shape:?}"),
        ));
    }
    let keep: Vec<usize> = (0..r).filter(|a| !axes.contains(a)).collect();
    let mut out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let in_strides = strides(shape);
    let kept_extents: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&kept_extents);
    let n: usize = shape.iter().product();
    let map = (0..n)
        .map(|off| {
            keep.iter()
                .zip(&out_strides)
                .map(|(&a, &os)| (off / in_strides[a]) % shape[a] * os)
                .sum()
        })
        .collect();
    Ok((out_shape, map))
}

/// Arithmetic mean over `axes`; reduced axes are dropped from the shape.
pub fn mean_axes<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let (shape, map) = reduction_plan(x.shape(), axes)?;
    let out_n: usize = shape.iter().product();
    let count = T::of((x.numel() / out_n) as f64);
    let mut out = vec![T::zero(); out_n];
    for (&v, &o) in x.data().iter().zip(&map) {
        out[o] += v;
    }
    for o in &mut out {
        *o /= count;
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Label-smoothed cross-entropy, averaged over the batch. `logits: [B, K]`;
/// targets are `(1 - smoothing)` on the label plus `smoothing / K` everywhere.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<Tensor<T>> {
    let (b, k) = ce_dims(logits, labels, smoothing)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let logp = log_softmax_row(row);
        for (j, &lp) in logp.iter().enumerate() {
            total -= smoothed_target::<T>(j, label, k, smoothing) * lp;
        }
    }
    Ok(Tensor::scalar(total / T::of(b as f64)))
}

pub(crate) fn ce_dims<T: Element>(logits: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<(usize, usize)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::domain("cross_entropy", format!("label {bad} >= classes {k}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::domain(
            "cross_entropy",
            format!("smoothing {smoothing} outside [0, 1)"),
        ));
    }
    Ok((labels.len(), k))
}

#[inline]
pub(crate) fn smoothed_target<T: Element>(j: usize, label: usize, k: usize, smoothing: f64) -> T {
    let on = if j == label { 1.0 - smoothing } else { 0.0 };
    T::of(on + smoothing / k as f64)
}

pub(crate) fn log_softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}
