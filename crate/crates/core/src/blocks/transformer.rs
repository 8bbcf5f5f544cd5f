//! Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))` with
//! a GELU MLP of ratio 4.

use rand::Rng;

use super::{drop_path_graph, join, LinearWeights, NormWeights, NORM_EPS};
use crate::mixers::{attention_graph, AttnWeights, MixMode};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights<H> {
    pub norm1: NormWeights<H>,
    pub attn: AttnWeights<H>,
    pub norm2: NormWeights<H>,
    pub fc1: LinearWeights<H>,
    pub fc2: LinearWeights<H>,
}

impl<H> TransformerWeights<H> {
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &H) -> Result<U>) -> Result<TransformerWeights<U>> {
        Ok(TransformerWeights {
            norm1: self.norm1.try_map(|n, h| f(&join("norm1", n), h))?,
            attn: self.attn.try_map(|n, h| f(&join("attn", n), h))?,
            norm2: self.norm2.try_map(|n, h| f(&join("norm2", n), h))?,
            fc1: self.fc1.try_map(|n, h| f(&join("fc1", n), h))?,
            fc2: self.fc2.try_map(|n, h| f(&join("fc2", n), h))?,
        })
    }
}

impl<T: Element> TransformerWeights<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(TransformerWeights {
            norm1: NormWeights::init(dim),
            attn: AttnWeights::init(dim, heads, rng)?,
            norm2: NormWeights::init(dim),
            fc1: LinearWeights::init(dim, MLP_RATIO * dim, rng),
            fc2: LinearWeights::init(MLP_RATIO * dim, dim, rng),
        })
    }

    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<TransformerWeights<ParamId>> {
        self.try_map(super::register(store, prefix))
    }

    pub fn constants(&self, g: &mut Graph<T>) -> TransformerWeights<Var> {
        self.try_map(|_, t| Ok(g.constant(t.clone()))).expect("infallible")
    }

    pub fn numel(&self) -> usize {
        let mut n = 0;
        self.try_map(|_, t| {
            n += t.numel();
            Ok(())
        })
        .expect("infallible");
        n
    }
}

/// Records the block on `x: [.., T, D]`. The same per-sample `drop_scales`
/// apply to both residual branches.
pub fn transformer_block_graph<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: &TransformerWeights<Var>,
    mode: MixMode,
    drop_scales: Option<&[f64]>,
) -> Result<Var> {
    if g.shape(x).len() < 2 {
        return Err(Error::shape(
            "transformer_block",
            format!("expected [.., T, D], got {:?}", g.shape(x)),
        ));
    }
    let h = g.layer_norm(x, w.norm1.gamma, w.norm1.beta, NORM_EPS)?;
    let h = attention_graph(g, h, &w.attn, mode)?;
    let h = drop_path_graph(g, h, drop_scales)?;
    let x = g.add(x, h)?;
    let h = g.layer_norm(x, w.norm2.gamma, w.norm2.beta, NORM_EPS)?;
    let h = g.linear(h, w.fc1.weight, Some(w.fc1.bias))?;
    let h = g.gelu(h)?;
    let h = g.linear(h, w.fc2.weight, Some(w.fc2.bias))?;
    let h = drop_path_graph(g, h, drop_scales)?;
    g.add(x, h)
}

/// Inference on plain tensors.
pub fn transformer_block_forward<T: Element>(
    x: &Tensor<T>,
    w: &TransformerWeights<Tensor<T>>,
    mode: MixMode,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = w.constants(&mut g);
    let y = transformer_block_graph(&mut g, xv, &wv, mode, None)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug)]
pub struct TransformerBlock<T: Element> {
    pub mode: MixMode,
    pub weights: TransformerWeights<Tensor<T>>,
}

impl<T: Element> TransformerBlock<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, mode: MixMode, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mode,
            weights: TransformerWeights::init(dim, heads, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        transformer_block_forward(x, &self.weights, self.mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_projections_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = TransformerBlock::<f64>::new(8, 2, MixMode::Causal, &mut rng).unwrap();
        b.weights.attn.wo = Tensor::zeros([8, 8]);
        b.weights.fc2.weight = Tensor::zeros([32, 8]);
        let x = Tensor::randn([2, 5, 8], 1.0, &mut rng);
        assert_eq!(b.forward(&x).unwrap(), x);
    }

    #[test]
    fn macs_are_half_the_block_flops() {
        let (d, l) = (16u64, 10u64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = TransformerWeights::<Tensor<f64>>::init(d as usize, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([1, l as usize, d as usize], 1.0, &mut rng));
        let wv = w.constants(&mut g);
        transformer_block_graph(&mut g, x, &wv, MixMode::FullyVisible, None).unwrap();
        assert_eq!(2 * g.macs(), 24 * d * d * l + 4 * d * l * l);
    }
}
