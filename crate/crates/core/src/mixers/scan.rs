//! Linear recurrence `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t · h_t`, evaluated
//! either step by step or as a work-efficient associative scan.
//!
//! Each (channel, state) pair is an independent scalar chain. The parallel
//! path composes the affine maps `h ↦ a h + b` with
//! `(a, b) ∘ (a', b') = (a' a, a' b + b')` using a Blelloch up-sweep /
//! down-sweep over a power-of-two padded tree. The tree topology depends only
//! on the sequence length, so results are reproducible run to run.

use rayon::prelude::*;

use super::ssm::{discretize, SelectiveInputs};
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub(crate) fn scan_dims<T: Element>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<ScanDims> {
    const OP: &str = "selective_scan";
    if x.rank() < 2 || delta.shape() != x.shape() {
        return Err(Error::shape(
            OP,
            format!(
                "x {:?} and delta {:?} must match with rank >= 2",
                x.shape(),
                delta.shape()
            ),
        ));
    }
    let r = x.rank();
    let (len, channels) = (x.shape()[r - 2], x.shape()[r - 1]);
    if a.rank() != 2 || a.shape()[0] != channels {
        return Err(Error::shape(OP, format!("A {:?} must be [{channels}, N]", a.shape())));
    }
    let state = a.shape()[1];
    let mut bc_shape = x.shape().to_vec();
    bc_shape[r - 1] = state;
    if b.shape() != bc_shape || c.shape() != bc_shape {
        return Err(Error::shape(
            OP,
            format!("B {:?} / C {:?} must be {bc_shape:?}", b.shape(), c.shape()),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > T::zero())) {
        return Err(Error::domain(OP, format!("delta must be positive, found {bad}")));
    }
    Ok(ScanDims {
        batch: x.numel() / (len * channels),
        len,
        channels,
        state,
    })
}

/// Views of one sequence of a batched scan.
pub(crate) struct Seq<'a, T> {
    pub x: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
}

impl<'a, T: Element> Seq<'a, T> {
    pub(crate) fn of(
        dims: &ScanDims,
        i: usize,
        x: &'a [T],
        delta: &'a [T],
        a: &'a [T],
        b: &'a [T],
        c: &'a [T],
    ) -> Self {
        let (xd, bn) = (dims.len * dims.channels, dims.len * dims.state);
        Seq {
            x: &x[i * xd..(i + 1) * xd],
            delta: &delta[i * xd..(i + 1) * xd],
            a,
            b: &b[i * bn..(i + 1) * bn],
            c: &c[i * bn..(i + 1) * bn],
        }
    }
}

/// Reference recurrence for one sequence; returns `y` as `[len, channels]`.
pub(crate) fn sequential_one<T: Element>(dims: &ScanDims, s: &Seq<'_, T>) -> Vec<T> {
    let (d, n) = (dims.channels, dims.state);
    let mut h = vec![T::zero(); d * n];
    let mut y = vec![T::zero(); dims.len * d];
    for t in 0..dims.len {
        let (bt, ct) = (&s.b[t * n..(t + 1) * n], &s.c[t * n..(t + 1) * n]);
        for ch in 0..d {
            let dt = s.delta[t * d + ch];
            let xv = s.x[t * d + ch];
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                let (abar, bbar) = discretize(dt, s.a[ch * n + k], bt[k]);
                hs[k] = abar * hs[k] + bbar * xv;
                acc += ct[k] * hs[k];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

#[inline]
fn compose<T: Element>(earlier: (T, T), later: (T, T)) -> (T, T) {
    (later.0 * earlier.0, later.0 * earlier.1 + later.1)
}

/// Inclusive scan of affine maps in place; on return `elems[t].1` is `h_t`
/// for `h_0 = 0`.
fn blelloch_inclusive<T: Element>(elems: &mut Vec<(T, T)>) {
    let len = elems.len();
    let identity = (T::one(), T::zero());
    let p = len.next_power_of_two();
    let original = elems.clone();
    elems.resize(p, identity);
    let mut stride = 1;
    while stride < p {
        let mut i = 2 * stride - 1;
        while i < p {
            elems[i] = compose(elems[i - stride], elems[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    elems[p - 1] = identity;
    stride = p / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < p {
            let left = elems[i - stride];
            elems[i - stride] = elems[i];
            elems[i] = compose(elems[i], left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    elems.truncate(len);
    for (e, o) in elems.iter_mut().zip(original) {
        *e = compose(*e, o);
    }
}

fn parallel_one<T: Element>(dims: &ScanDims, s: &Seq<'_, T>) -> Vec<T> {
    let (len, d, n) = (dims.len, dims.channels, dims.state);
    let columns: Vec<Vec<T>> = (0..d)
        .into_par_iter()
        .map(|ch| {
            let mut col = vec![T::zero(); len];
            let mut chain = Vec::with_capacity(len);
            for k in 0..n {
                chain.clear();
                chain.extend((0..len).map(|t| {
                    let (abar, bbar) = discretize(s.delta[t * d + ch], s.a[ch * n + k], s.b[t * n + k]);
                    (abar, bbar * s.x[t * d + ch])
                }));
                blelloch_inclusive(&mut chain);
                for (t, (_, h)) in chain.iter().enumerate() {
                    col[t] += s.c[t * n + k] * *h;
                }
            }
            col
        })
        .collect();
    let mut y = vec![T::zero(); len * d];
    for (ch, col) in columns.into_iter().enumerate() {
        for (t, v) in col.into_iter().enumerate() {
            y[t * d + ch] = v;
        }
    }
    y
}

fn run<T: Element>(
    x: &Tensor<T>,
    inputs: &SelectiveInputs<T>,
    a: &Tensor<T>,
    one: fn(&ScanDims, &Seq<'_, T>) -> Vec<T>,
) -> Result<Tensor<T>> {
    let dims = scan_dims(x, &inputs.delta, a, &inputs.b, &inputs.c)?;
    let mut y = Vec::with_capacity(x.numel());
    for i in 0..dims.batch {
        let s = Seq::of(
            &dims,
            i,
            x.data(),
            inputs.delta.data(),
            a.data(),
            inputs.b.data(),
            inputs.c.data(),
        );
        y.extend(one(&dims, &s));
    }
    Tensor::new(x.shape().to_vec(), y)
}

/// Step-by-step recurrence. `x: [.., T, D]`, `a: [D, N]` (negative).
pub fn scan_sequential<T: Element>(x: &Tensor<T>, inputs: &SelectiveInputs<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    run(x, inputs, a, sequential_one)
}

/// Associative-scan evaluation of the same recurrence, parallel over channels.
pub fn scan_parallel<T: Element>(x: &Tensor<T>, inputs: &SelectiveInputs<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    run(x, inputs, a, parallel_one)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blelloch_matches_fold_on_odd_lengths() {
        for len in [1usize, 2, 3, 5, 8, 13] {
            let elems: Vec<(f64, f64)> = (0..len).map(|i| (0.5 + 0.03 * i as f64, (i as f64).sin())).collect();
            let mut h = 0.0;
            let expect: Vec<f64> = elems
                .iter()
                .map(|&(a, b)| {
                    h = a * h + b;
                    h
                })
                .collect();
            let mut got = elems.clone();
            blelloch_inclusive(&mut got);
            for (g, e) in got.iter().zip(&expect) {
                assert!((g.1 - e).abs() < 1e-14, "len {len}");
            }
        }
    }
}
