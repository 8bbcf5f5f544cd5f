use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::Model;
use crate::blocks::{
    drop_path_scales, linear_drop_rates, register, transformer_block_graph, LinearWeights, NormWeights,
    TransformerWeights, INIT_STD, NORM_EPS,
};
use crate::mixers::MixMode;
use crate::tensor::{Bound, Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub mode: MixMode,
    pub num_classes: usize,
    pub drop_path_peak: f64,
    pub pos_init: PosInit,
}

/// Initial value of the learned position embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosInit {
    /// Truncated normal with the shared init std.
    Random,
    /// 2-D sine/cosine table: half the channels encode the row, half the column.
    #[default]
    Sincos,
}

/// `[side², dim]` sine/cosine table over a `side × side` grid of patches.
pub fn sincos_2d<T: Element>(side: usize, dim: usize) -> Result<Tensor<T>> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!(
            "sin-cos position table needs dim % 4 == 0, got {dim}"
        )));
    }
    let quarter = dim / 4;
    Ok(Tensor::from_fn([side * side, dim], |i| {
        let (tok, c) = (i / dim, i % dim);
        let pos = if c < dim / 2 { tok / side } else { tok % side } as f64;
        let c = c % (dim / 2);
        let omega = 1.0 / 10_000f64.powf((c % quarter) as f64 / quarter as f64);
        T::of(if c < quarter {
            (pos * omega).sin()
        } else {
            (pos * omega).cos()
        })
    }))
}

impl IsotropicConfig {
    /// Token count `(image_size / patch)²`.
    pub fn tokens(&self) -> Result<usize> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        let side = self.image_size / self.patch;
        Ok(side * side)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokens()?;
        if self.dim == 0 || self.depth == 0 || self.num_classes == 0 {
            return Err(Error::Config("dim, depth and num_classes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_peak) {
            return Err(Error::Config(format!(
                "drop_path_peak {} outside [0, 1)",
                self.drop_path_peak
            )));
        }
        if self.pos_init == PosInit::Sincos && self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "sin-cos position init needs dim % 4 == 0, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Patch embedding, learned positions, `depth` pre-norm transformer blocks
/// in one [`MixMode`], final norm, token-mean pooling and a linear head.
///
/// Tokens are patches in raster order, so causal mode makes token `t` depend
/// only on patches `0..=t`.
#[derive(Clone, Debug)]
pub struct IsotropicTransformer<T: Element> {
    config: IsotropicConfig,
    params: ParamStore<T>,
    embed: LinearWeights<ParamId>,
    pos: ParamId,
    blocks: Vec<TransformerWeights<ParamId>>,
    norm: NormWeights<ParamId>,
    head: LinearWeights<ParamId>,
}

impl<T: Element> IsotropicTransformer<T> {
    pub fn new<R: Rng + ?Sized>(config: IsotropicConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, p, l) = (config.dim, config.patch, config.tokens()?);
        let mut params = ParamStore::new();
        let embed = LinearWeights {
            weight: Tensor::trunc_normal([p, p, 3, d], INIT_STD, rng),
            bias: Tensor::<T>::zeros([d]),
        }
        .try_map(register(&mut params, "patch_embed"))?;
        let pos_table = match config.pos_init {
            PosInit::Random => Tensor::trunc_normal([l, d], INIT_STD, rng),
            PosInit::Sincos => sincos_2d(config.image_size / p, d)?,
        };
        let pos = params.insert("pos_embed", pos_table)?;
        let blocks = (0..config.depth)
            .map(|i| {
                TransformerWeights::<Tensor<T>>::init(d, config.heads, rng)?
                    .register(&mut params, &format!("blocks.{i}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = NormWeights::<Tensor<T>>::init(d).try_map(register(&mut params, "norm"))?;
        let head =
            LinearWeights::<Tensor<T>>::init(d, config.num_classes, rng).try_map(register(&mut params, "head"))?;
        Ok(Self {
            config,
            params,
            embed,
            pos,
            blocks,
            norm,
            head,
        })
    }

    pub fn config(&self) -> &IsotropicConfig {
        &self.config
    }

    /// Records the normalized token features `[B, L, D]`.
    pub fn record_tokens(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        images: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(images).to_vec();
        if shape != [shape[0], c.image_size, c.image_size, 3] {
            return Err(Error::shape(
                "isotropic_transformer",
                format!("expected [B,{0},{0},3] images, got {shape:?}", c.image_size),
            ));
        }
        let v = |id: ParamId| bound.var(id);
        let (b, l) = (shape[0], c.tokens()?);
        let x = g.conv2d(images, v(self.embed.weight), c.patch, 0)?;
        let x = g.add(x, v(self.embed.bias))?;
        let x = g.reshape(x, &[b, l, c.dim])?;
        let mut x = g.add(x, v(self.pos))?;
        let rates = linear_drop_rates(c.depth, c.drop_path_peak);
        for (ids, &rate) in self.blocks.iter().zip(&rates) {
            let scales = match rng.as_deref_mut() {
                Some(r) => drop_path_scales(b, rate, true, r)?,
                None => None,
            };
            let w = ids.try_map(|_, &id| Ok(v(id)))?;
            x = transformer_block_graph(g, x, &w, c.mode, scales.as_deref())?;
        }
        g.layer_norm(x, v(self.norm.gamma), v(self.norm.beta), NORM_EPS)
    }

    /// Logits from the mean of the first `prefix` tokens only.
    pub fn record_prefix_logits(&self, g: &mut Graph<T>, bound: &Bound, images: Var, prefix: usize) -> Result<Var> {
        let l = self.config.tokens()?;
        if prefix == 0 || prefix > l {
            return Err(Error::domain(
                "prefix_logits",
                format!("prefix {prefix} outside 1..={l}"),
            ));
        }
        let tokens = self.record_tokens(g, bound, images, None)?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let weights = Tensor::from_fn([l, 1], |i| {
            if i < prefix {
                T::one() / T::of(prefix as f64)
            } else {
                T::zero()
            }
        });
        let pool = g.constant(weights);
        let pooled = g.matmul(tokens, pool)?;
        let b = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[b, self.config.dim])?;
        g.linear(pooled, bound.var(self.head.weight), Some(bound.var(self.head.bias)))
    }

    /// Token features on plain tensors (inference).
    pub fn forward_tokens(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.record_tokens(&mut g, &bound, x, None)?;
        Ok(g.value(y).clone())
    }

    pub fn prefix_logits(&self, images: &Tensor<T>, prefix: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.record_prefix_logits(&mut g, &bound, x, prefix)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Element> Model<T> for IsotropicTransformer<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn record(&self, g: &mut Graph<T>, bound: &Bound, images: Var, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let tokens = self.record_tokens(g, bound, images, rng)?;
        let pooled = g.mean_axes(tokens, &[1])?;
        g.linear(pooled, bound.var(self.head.weight), Some(bound.var(self.head.bias)))
    }
}
