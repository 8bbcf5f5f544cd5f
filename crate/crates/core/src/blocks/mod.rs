//! Residual blocks: the gated block `Y = (Mixer(X'W1) ⊙ σ(X'W2)) W3 + X` with
//! `X' = Norm(X)`, a pre-norm transformer block, and stochastic depth.

mod drop_path;
mod gated;
mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Element, ParamId, ParamStore, Tensor};
use crate::Result;

pub use drop_path::{drop_path, drop_path_graph, drop_path_scales, linear_drop_rates, SampleScale};
pub use gated::{
    gated_block_forward, gated_block_graph, BlockWeights, GatedBlock, GatedBlockConfig, MambaAblation, MixerWeights,
};
pub use transformer::{
    transformer_block_forward, transformer_block_graph, TransformerBlock, TransformerWeights, MLP_RATIO,
};

/// Layer-norm epsilon used by every block.
pub const NORM_EPS: f64 = 1e-6;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// Partial-channel 7×7 depthwise convolution.
    GatedConv,
    /// `SSM(σ(Conv(·)))` over the raster-flattened tokens.
    MambaSsm,
    AttentionFv,
    AttentionCausal,
    /// No token mixing (ablation baseline).
    Identity,
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixerKind::GatedConv => "gated_conv",
            MixerKind::MambaSsm => "mamba_ssm",
            MixerKind::AttentionFv => "attention_fv",
            MixerKind::AttentionCausal => "attention_causal",
            MixerKind::Identity => "identity",
        })
    }
}

/// Affine parameters of a layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights<H> {
    pub gamma: H,
    pub beta: H,
}

impl<H> NormWeights<H> {
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &H) -> Result<U>) -> Result<NormWeights<U>> {
        Ok(NormWeights {
            gamma: f("gamma", &self.gamma)?,
            beta: f("beta", &self.beta)?,
        })
    }
}

impl<T: Element> NormWeights<Tensor<T>> {
    pub fn init(dim: usize) -> Self {
        NormWeights {
            gamma: Tensor::ones([dim]),
            beta: Tensor::zeros([dim]),
        }
    }
}

/// Dense map `x @ weight + bias` with `weight: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearWeights<H> {
    pub weight: H,
    pub bias: H,
}

impl<H> LinearWeights<H> {
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &H) -> Result<U>) -> Result<LinearWeights<U>> {
        Ok(LinearWeights {
            weight: f("weight", &self.weight)?,
            bias: f("bias", &self.bias)?,
        })
    }
}

impl<T: Element> LinearWeights<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        LinearWeights {
            weight: Tensor::trunc_normal([fan_in, fan_out], INIT_STD, rng),
            bias: Tensor::zeros([fan_out]),
        }
    }
}

/// Prefixes a child name: `join("a", "b") == "a.b"`.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Inserts a tensor under `prefix.name`.
pub(crate) fn register<'a, T: Element>(
    store: &'a mut ParamStore<T>,
    prefix: &str,
) -> impl FnMut(&str, &Tensor<T>) -> Result<ParamId> + 'a {
    let prefix = prefix.to_string();
    move |name, t| store.insert(join(&prefix, name), t.clone())
}
