use rand::Rng;

use crate::tensor::{CustomOp, Element, Graph, Tensor, Var};
use crate::{Error, Result};
use std::sync::Arc;

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain("drop_path", format!("rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Per-sample residual-branch multipliers: `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`. `None` means the branch passes unchanged.
pub fn drop_path_scales<R: Rng + ?Sized>(
    batch: usize,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Option<Vec<f64>>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 - rate;
    Ok(Some(
        (0..batch)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect(),
    ))
}

/// Stochastic depth on a residual branch `x: [B, ..]`.
pub fn drop_path<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    match drop_path_scales(x.shape()[0], rate, training, rng)? {
        None => Ok(x.clone()),
        Some(s) => SampleScale::new(&s).forward(&[x]),
    }
}

/// Records the per-sample scaling (identity when `scales` is `None`).
pub fn drop_path_graph<T: Element>(g: &mut Graph<T>, x: Var, scales: Option<&[f64]>) -> Result<Var> {
    match scales {
        None => Ok(x),
        Some(s) => g.custom(Arc::new(SampleScale::new(s)), &[x]),
    }
}

/// `linspace(0, peak, blocks)`: the stochastic-depth rate of each block.
pub fn linear_drop_rates(blocks: usize, peak: f64) -> Vec<f64> {
    match blocks {
        0 => vec![],
        1 => vec![0.0],
        n => (0..n).map(|i| peak * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Multiplies sample `b` (leading axis) by a constant `scales[b]`.
#[derive(Clone, Debug)]
pub struct SampleScale<T> {
    scales: Vec<T>,
}

impl<T: Element> SampleScale<T> {
    pub fn new(scales: &[f64]) -> Self {
        Self {
            scales: scales.iter().map(|&s| T::of(s)).collect(),
        }
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = x.shape()[0];
        if b != self.scales.len() {
            return Err(Error::shape(
                "drop_path",
                format!("{} scales for batch {b}", self.scales.len()),
            ));
        }
        let per = x.numel() / b;
        let data: Vec<T> = x
            .data()
            .chunks(per)
            .zip(&self.scales)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

impl<T: Element> CustomOp<T> for SampleScale<T> {
    fn name(&self) -> &'static str {
        "drop_path"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.apply(inputs[0])
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(self.apply(grad)?)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn([4, 3], 1.0, &mut rng);
        assert_eq!(drop_path(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(drop_path(&x, 0.7, false, &mut rng).unwrap(), x);
        assert!(drop_path(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn linear_schedule_endpoints() {
        let r = linear_drop_rates(5, 0.2);
        assert_eq!(r[0], 0.0);
        assert!((r[4] - 0.2).abs() < 1e-15);
        assert!((r[2] - 0.1).abs() < 1e-15);
        assert_eq!(linear_drop_rates(1, 0.5), vec![0.0]);
    }
}
