//! Central finite differences as an oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Element, Tensor};
use crate::Result;

/// Entries whose gradients are both below this magnitude are compared
/// absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`. The
/// divisor is the step as actually represented, `(x_i + h) - (x_i - h)`.
pub fn finite_diff_grad<T: Element>(f: impl Fn(&Tensor<T>) -> Result<T>, x: &Tensor<T>, h: f64) -> Result<Tensor<T>> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let vals = finite_diff_at(f, x, h, &coords)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), vals))
}

/// Central differences at the listed coordinates only.
pub fn finite_diff_at<T: Element>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: f64,
    coords: &[usize],
) -> Result<Vec<T>> {
    coords
        .iter()
        .map(|&i| {
            let base = x.data()[i];
            let (hi, lo) = (base + T::of(h), base - T::of(h));
            let plus = f(&x.with_value(i, hi))?;
            let minus = f(&x.with_value(i, lo))?;
            Ok((plus - minus) / (hi - lo))
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

/// Compares `analytic` to central differences of `f` on up to `max_coords`
/// randomly chosen coordinates of `x` (all of them when `x` is smaller).
pub fn check_gradient<R: Rng + ?Sized>(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheck> {
    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut c = sample(rng, n, max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let numeric = finite_diff_at(f, x, h, &coords)?;
    let mut worst = (0.0, 0);
    for (&i, &num) in coords.iter().zip(&numeric) {
        let e = rel_error(analytic.data()[i], num);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradCheck {
        coords_checked: coords.len(),
        max_rel_error: worst.0,
        worst_index: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn([3, 4], |i| i as f64 * 0.37 - 1.0);
        // Linear f has no truncation error, so a wide step only shrinks roundoff.
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-3).unwrap();
        let worst = g.data().iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        assert!(worst < 1e-10, "{worst:e}");
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(2.0, 2.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(rel_error(0.0, 1e-6), 1e-6 / REL_FLOOR);
    }
}
