//! Gated CNN block and its Mamba sibling.
//!
//! ```text
//! X' = LN(X)
//! [g | i | c] = X' W_fc1 + b_fc1
//! Y = (gelu(g) ⊙ concat(i, mixer(c))) W_fc2 + b_fc2 + X
//! ```
//!
//! `mixer` is a depthwise conv for [`MixerKind::GatedConv`] and
//! `SSM(gelu(conv(c)))` over raster-ordered tokens for [`MixerKind::MambaSsm`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{drop_path_graph, drop_path_scales, join, LinearWeights, MixerKind, NormWeights, INIT_STD, NORM_EPS};
use crate::mixers::{conv_mixer_graph, ssm_graph, ConvMixerWeights, SplitIndices, SsmWeights, DEFAULT_STATE_DIM};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Switches that strip the Mamba mixer down to the Gated CNN mixer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaAblation {
    /// Replace the SSM with the identity.
    pub skip_ssm: bool,
    /// Drop the activation between conv and SSM.
    pub skip_activation: bool,
}

impl MambaAblation {
    pub const GATED_CONV_EQUIVALENT: Self = Self {
        skip_ssm: true,
        skip_activation: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedBlockConfig {
    pub dim: usize,
    pub split: SplitIndices,
    pub kernel: usize,
    pub kind: MixerKind,
    pub state_dim: usize,
    pub drop_path_rate: f64,
    pub ablation: MambaAblation,
    pub eps: f64,
}

impl GatedBlockConfig {
    /// Expansion 8/3, all hidden channels convolved, 7×7 kernel.
    pub fn new(dim: usize, kind: MixerKind) -> Result<Self> {
        Ok(Self {
            dim,
            split: SplitIndices::new(dim, (8, 3), (1, 1))?,
            kernel: 7,
            kind,
            state_dim: DEFAULT_STATE_DIM,
            drop_path_rate: 0.0,
            ablation: MambaAblation::default(),
            eps: NORM_EPS,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("block width must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if !matches!(
            self.kind,
            MixerKind::GatedConv | MixerKind::MambaSsm | MixerKind::Identity
        ) {
            return Err(Error::Config(format!("mixer {} is not a gated-block mixer", self.kind)));
        }
        if self.kind == MixerKind::MambaSsm && (self.state_dim == 0 || self.split.conv == 0) {
            return Err(Error::Config(
                "mamba mixer needs state_dim > 0 and conv channels > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }
}

/// Token-mixer weights: conv on the `c` slice, plus the SSM for Mamba.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerWeights<H> {
    pub conv: Option<ConvMixerWeights<H>>,
    pub ssm: Option<SsmWeights<H>>,
}

impl<H> MixerWeights<H> {
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &H) -> Result<U>) -> Result<MixerWeights<U>> {
        Ok(MixerWeights {
            conv: self
                .conv
                .as_ref()
                .map(|c| c.try_map(|n, h| f(&join("conv", n), h)))
                .transpose()?,
            ssm: self
                .ssm
                .as_ref()
                .map(|s| s.try_map(|n, h| f(&join("ssm", n), h)))
                .transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<H> {
    pub norm: NormWeights<H>,
    /// `[D, 2·hidden]`: gate half first, then the mixer input.
    pub fc1: LinearWeights<H>,
    /// `[hidden, D]`.
    pub fc2: LinearWeights<H>,
    pub mixer: MixerWeights<H>,
}

impl<H> BlockWeights<H> {
    /// Maps every handle, passing its dotted name (`"fc1.weight"`, ...).
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &H) -> Result<U>) -> Result<BlockWeights<U>> {
        Ok(BlockWeights {
            norm: self.norm.try_map(|n, h| f(&join("norm", n), h))?,
            fc1: self.fc1.try_map(|n, h| f(&join("fc1", n), h))?,
            fc2: self.fc2.try_map(|n, h| f(&join("fc2", n), h))?,
            mixer: self.mixer.try_map(|n, h| f(&join("mixer", n), h))?,
        })
    }
}

impl<T: Element> BlockWeights<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &GatedBlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, h, c, k) = (cfg.dim, cfg.split.hidden(), cfg.split.conv, cfg.kernel);
        let conv = (c > 0 && cfg.kind != MixerKind::Identity).then(|| ConvMixerWeights {
            kernel: Tensor::trunc_normal([k, k, c], INIT_STD, rng),
            bias: Tensor::zeros([c]),
        });
        let ssm = (cfg.kind == MixerKind::MambaSsm).then(|| SsmWeights::init(c, cfg.state_dim, rng));
        Ok(BlockWeights {
            norm: NormWeights::init(d),
            fc1: LinearWeights::init(d, cfg.split.fused_width(), rng),
            fc2: LinearWeights::init(h, d, rng),
            mixer: MixerWeights { conv, ssm },
        })
    }

    /// Adds every tensor to `store` under `prefix`.
    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<BlockWeights<ParamId>> {
        self.try_map(super::register(store, prefix))
    }

    pub fn constants(&self, g: &mut Graph<T>) -> BlockWeights<Var> {
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

/// Records the block on `x: [B, H, W, D]`. `drop_scales` are the per-sample
/// residual-branch multipliers (`None` at inference).
pub fn gated_block_graph<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: &BlockWeights<Var>,
    cfg: &GatedBlockConfig,
    drop_scales: Option<&[f64]>,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[3] != cfg.dim {
        return Err(Error::shape(
            "gated_block",
            format!("expected [B,H,W,{}], got {shape:?}", cfg.dim),
        ));
    }
    let xn = g.layer_norm(x, w.norm.gamma, w.norm.beta, cfg.eps)?;
    let h = g.linear(xn, w.fc1.weight, Some(w.fc1.bias))?;
    let (gate, mixed) = match cfg.kind {
        MixerKind::GatedConv => conv_mixer_graph(g, h, w.mixer.conv.as_ref(), &cfg.split, |_, y| Ok(y))?,
        MixerKind::MambaSsm => {
            let ssm = w
                .mixer
                .ssm
                .as_ref()
                .ok_or_else(|| Error::Config("mamba block without ssm weights".into()))?;
            let ablation = cfg.ablation;
            conv_mixer_graph(g, h, w.mixer.conv.as_ref(), &cfg.split, |g, y| {
                let y = if ablation.skip_activation { y } else { g.gelu(y)? };
                if ablation.skip_ssm {
                    return Ok(y);
                }
                let s = g.shape(y).to_vec();
                let tokens = g.reshape(y, &[s[0], s[1] * s[2], s[3]])?;
                let z = ssm_graph(g, tokens, ssm)?;
                g.reshape(z, &s)
            })?
        }
        MixerKind::Identity => {
            let parts = g.split_last(h, &cfg.split.widths())?;
            let rest: Vec<Var> = parts[1..].iter().flatten().copied().collect();
            (parts[0].expect("hidden > 0"), g.concat_last(&rest)?)
        }
        MixerKind::AttentionFv | MixerKind::AttentionCausal => unreachable!("rejected by validate"),
    };
    let act = g.gelu(gate)?;
    let gated = g.mul(act, mixed)?;
    let branch = g.linear(gated, w.fc2.weight, Some(w.fc2.bias))?;
    let branch = drop_path_graph(g, branch, drop_scales)?;
    g.add(branch, x)
}

/// Runs one block on plain tensors.
pub fn gated_block_forward<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    w: &BlockWeights<Tensor<T>>,
    cfg: &GatedBlockConfig,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let scales = drop_path_scales(x.shape()[0], cfg.drop_path_rate, training, rng)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = w.constants(&mut g);
    let y = gated_block_graph(&mut g, xv, &wv, cfg, scales.as_deref())?;
    Ok(g.value(y).clone())
}

/// A configured block with its own weights.
#[derive(Clone, Debug)]
pub struct GatedBlock<T: Element> {
    pub config: GatedBlockConfig,
    pub weights: BlockWeights<Tensor<T>>,
}

impl<T: Element> GatedBlock<T> {
    pub fn new<R: Rng + ?Sized>(config: GatedBlockConfig, rng: &mut R) -> Result<Self> {
        let weights = BlockWeights::init(&config, rng)?;
        Ok(Self { config, weights })
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor<T>, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        gated_block_forward(x, &self.weights, &self.config, training, rng)
    }

    pub fn num_params(&self) -> usize {
        self.weights.numel()
    }
}
