//! Multi-head scaled dot-product attention in fully-visible or causal mode.

use rand::Rng;

use super::MixMode;
use crate::tensor::{Element, Graph, Mask, Tensor, Var};
use crate::{Error, Result};

/// Bias-free projections `[D, D]` and the head count.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights<H> {
    pub wq: H,
    pub wk: H,
    pub wv: H,
    pub wo: H,
    pub heads: usize,
}

impl<H> AttnWeights<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &H) -> U) -> AttnWeights<U> {
        AttnWeights {
            wq: f("wq", &self.wq),
            wk: f("wk", &self.wk),
            wv: f("wv", &self.wv),
            wo: f("wo", &self.wo),
            heads: self.heads,
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &H) -> Result<U>) -> Result<AttnWeights<U>> {
        Ok(AttnWeights {
            wq: f("wq", &self.wq)?,
            wk: f("wk", &self.wk)?,
            wv: f("wv", &self.wv)?,
            wo: f("wo", &self.wo)?,
            heads: self.heads,
        })
    }
}

impl<T: Element> AttnWeights<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(AttnWeights {
            wq: Tensor::trunc_normal([dim, dim], 0.02, rng),
            wk: Tensor::trunc_normal([dim, dim], 0.02, rng),
            wv: Tensor::trunc_normal([dim, dim], 0.02, rng),
            wo: Tensor::trunc_normal([dim, dim], 0.02, rng),
            heads,
        })
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("heads {heads} must divide width {dim}")));
    }
    Ok(())
}

/// Records attention over `x: [.., T, D]`; returns `(output, probabilities)`
/// with probabilities shaped `[B, heads, T, T]`.
fn record<T: Element>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, mode: MixMode) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    if shape.len() < 2 {
        return Err(Error::shape("attention", format!("expected [.., T, D], got {shape:?}")));
    }
    let (t, d) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    check_heads(d, w.heads)?;
    let batch = shape[..shape.len() - 2].iter().product::<usize>();
    let (h, dh) = (w.heads, d / w.heads);
    let x3 = g.reshape(x, &[batch, t, d])?;
    let heads_of = |g: &mut Graph<T>, wm: Var, axes: &[usize]| -> Result<Var> {
        let p = g.matmul(x3, wm)?;
        let p = g.reshape(p, &[batch, t, h, dh])?;
        g.permute(p, axes)
    };
    let q = heads_of(g, w.wq, &[0, 2, 1, 3])?;
    let kt = heads_of(g, w.wk, &[0, 2, 3, 1])?;
    let v = heads_of(g, w.wv, &[0, 2, 1, 3])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let mask = match mode {
        MixMode::FullyVisible => None,
        MixMode::Causal => Some(Mask::causal(t)),
    };
    let probs = g.softmax(scores, mask)?;
    let ctx = g.matmul(probs, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, t, d])?;
    let out = g.matmul(ctx, w.wo)?;
    Ok((g.reshape(out, &shape)?, probs))
}

/// Records attention over `x: [.., T, D]`.
pub fn attention_graph<T: Element>(g: &mut Graph<T>, x: Var, w: &AttnWeights<Var>, mode: MixMode) -> Result<Var> {
    record(g, x, w, mode).map(|(out, _)| out)
}

fn bind<T: Element>(g: &mut Graph<T>, w: &AttnWeights<Tensor<T>>) -> AttnWeights<Var> {
    w.map(|_, t| g.constant(t.clone()))
}

/// Attention on plain tensors, `x: [.., T, D]`.
pub fn attention<T: Element>(x: &Tensor<T>, w: &AttnWeights<Tensor<T>>, mode: MixMode) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = bind(&mut g, w);
    let y = attention_graph(&mut g, xv, &wv, mode)?;
    Ok(g.value(y).clone())
}

/// Attention probabilities `[B, heads, T, T]` for `x: [.., T, D]`.
pub fn attention_weights<T: Element>(x: &Tensor<T>, w: &AttnWeights<Tensor<T>>, mode: MixMode) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = bind(&mut g, w);
    let (_, p) = record(&mut g, xv, &wv, mode)?;
    Ok(g.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttnWeights::<Tensor<f64>>::init(6, 4, &mut rng).is_err());
        assert!(AttnWeights::<Tensor<f64>>::init(8, 4, &mut rng).is_ok());
    }

    #[test]
    fn single_token_modes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = AttnWeights::<Tensor<f64>>::init(8, 2, &mut rng).unwrap();
        let x = Tensor::randn([1, 8], 1.0, &mut rng);
        let fv = attention(&x, &w, MixMode::FullyVisible).unwrap();
        let c = attention(&x, &w, MixMode::Causal).unwrap();
        assert_eq!(fv, c);
    }
}
