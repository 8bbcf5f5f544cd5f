use rand::{Rng, RngCore};

use super::{Model, ModelConfig};
use crate::blocks::{
    drop_path_scales, gated_block_graph, linear_drop_rates, register, BlockWeights, GatedBlockConfig, LinearWeights,
    MambaAblation, NormWeights, INIT_STD, NORM_EPS,
};
use crate::mixers::SplitIndices;
use crate::tensor::{kernels::conv_out_extent, Bound, Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Spatial size after the stem and after each downsampling transition.
///
/// Every stride-2 layer must receive an extent of at least 2; below that the
/// ladder stops halving and the input is rejected as too small.
pub fn stage_resolutions(height: usize, width: usize) -> Result<[(usize, usize); 4]> {
    let halve = |n: usize, layer: &str| -> Result<usize> {
        match conv_out_extent(n, 3, 2, 1) {
            Some(out) if n >= 2 => Ok(out),
            _ => Err(Error::Resolution {
                height,
                width,
                detail: format!("{layer} receives extent {n}, needs at least 2"),
            }),
        }
    };
    let both =
        |(h, w): (usize, usize), layer: &str| -> Result<(usize, usize)> { Ok((halve(h, layer)?, halve(w, layer)?)) };
    let s = both((height, width), "stem conv1")?;
    let mut out = [both(s, "stem conv2")?; 4];
    for i in 1..4 {
        out[i] = both(out[i - 1], &format!("downsample {i}"))?;
    }
    Ok(out)
}

fn conv_init<T: Element, R: Rng + ?Sized>(k: usize, cin: usize, cout: usize, rng: &mut R) -> LinearWeights<Tensor<T>> {
    LinearWeights {
        weight: Tensor::trunc_normal([k, k, cin, cout], INIT_STD, rng),
        bias: Tensor::zeros([cout]),
    }
}

#[derive(Clone, Debug)]
struct Stem {
    conv1: LinearWeights<ParamId>,
    norm1: NormWeights<ParamId>,
    conv2: LinearWeights<ParamId>,
    norm2: NormWeights<ParamId>,
}

#[derive(Clone, Debug)]
struct Downsample {
    norm: NormWeights<ParamId>,
    conv: LinearWeights<ParamId>,
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: Option<Downsample>,
    blocks: Vec<(GatedBlockConfig, BlockWeights<ParamId>)>,
}

#[derive(Clone, Debug)]
struct Head {
    norm: NormWeights<ParamId>,
    fc1: LinearWeights<ParamId>,
    norm2: NormWeights<ParamId>,
    fc2: LinearWeights<ParamId>,
}

/// Stem (two stride-2 3×3 convs), four stages of gated blocks with
/// norm + stride-2 conv transitions, and a pooled MLP head.
#[derive(Clone, Debug)]
pub struct MambaOut<T: Element> {
    config: ModelConfig,
    params: ParamStore<T>,
    stem: Stem,
    stages: Vec<Stage>,
    head: Head,
}

impl<T: Element> MambaOut<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let w = config.widths;
        let reg_lin = |prefix: &str, lw: LinearWeights<Tensor<T>>, params: &mut ParamStore<T>| {
            lw.try_map(register(params, prefix))
        };
        let reg_norm = |prefix: &str, d: usize, params: &mut ParamStore<T>| {
            NormWeights::<Tensor<T>>::init(d).try_map(register(params, prefix))
        };

        let half = w[0] / 2;
        let stem = Stem {
            conv1: reg_lin("stem.conv1", conv_init(3, 3, half, rng), &mut params)?,
            norm1: reg_norm("stem.norm1", half, &mut params)?,
            conv2: reg_lin("stem.conv2", conv_init(3, half, w[0], rng), &mut params)?,
            norm2: reg_norm("stem.norm2", w[0], &mut params)?,
        };

        let rates = linear_drop_rates(config.total_blocks(), config.drop_path_peak);
        let mut rates = rates.into_iter();
        let mut stages = Vec::with_capacity(4);
        for (i, (&depth, &dim)) in config.depths.iter().zip(&w).enumerate() {
            let downsample = if i == 0 {
                None
            } else {
                let p = format!("stages.{i}.downsample");
                Some(Downsample {
                    norm: reg_norm(&format!("{p}.norm"), w[i - 1], &mut params)?,
                    conv: reg_lin(&format!("{p}.conv"), conv_init(3, w[i - 1], dim, rng), &mut params)?,
                })
            };
            let split = SplitIndices::new(
                dim,
                (*config.expansion.numer(), *config.expansion.denom()),
                (*config.conv_ratio.numer(), *config.conv_ratio.denom()),
            )?;
            let mut blocks = Vec::with_capacity(depth);
            for j in 0..depth {
                let cfg = GatedBlockConfig {
                    dim,
                    split,
                    kernel: config.kernel,
                    kind: config.mixer,
                    state_dim: config.state_dim,
                    drop_path_rate: rates.next().expect("one rate per block"),
                    ablation: MambaAblation::default(),
                    eps: NORM_EPS,
                };
                let weights = BlockWeights::<Tensor<T>>::init(&cfg, rng)?;
                let ids = weights.register(&mut params, &format!("stages.{i}.blocks.{j}"))?;
                blocks.push((cfg, ids));
            }
            stages.push(Stage { downsample, blocks });
        }

        let (d, hidden) = (w[3], config.head_hidden());
        let head = Head {
            norm: reg_norm("head.norm", d, &mut params)?,
            fc1: reg_lin("head.fc1", LinearWeights::init(d, hidden, rng), &mut params)?,
            norm2: reg_norm("head.norm2", hidden, &mut params)?,
            fc2: reg_lin(
                "head.fc2",
                LinearWeights::init(hidden, config.num_classes, rng),
                &mut params,
            )?,
        };
        Ok(Self {
            config,
            params,
            stem,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Records the four stage outputs `[B, H_i, W_i, D_i]`.
    pub fn record_features(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        images: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<Var>> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::shape(
                "mambaout",
                format!("expected [B,H,W,3] images, got {shape:?}"),
            ));
        }
        stage_resolutions(shape[1], shape[2])?;
        let batch = shape[0];
        let v = |id: ParamId| bound.var(id);
        let conv = |g: &mut Graph<T>, x: Var, w: &LinearWeights<ParamId>| -> Result<Var> {
            let y = g.conv2d(x, v(w.weight), 2, 1)?;
            g.add(y, v(w.bias))
        };
        let norm =
            |g: &mut Graph<T>, x: Var, n: &NormWeights<ParamId>| g.layer_norm(x, v(n.gamma), v(n.beta), NORM_EPS);

        let s = &self.stem;
        let mut x = conv(g, images, &s.conv1)?;
        x = norm(g, x, &s.norm1)?;
        x = g.gelu(x)?;
        x = conv(g, x, &s.conv2)?;
        x = norm(g, x, &s.norm2)?;

        let mut features = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                x = norm(g, x, &ds.norm)?;
                x = conv(g, x, &ds.conv)?;
            }
            for (cfg, ids) in &stage.blocks {
                let scales = match rng.as_deref_mut() {
                    Some(r) => drop_path_scales(batch, cfg.drop_path_rate, true, r)?,
                    None => None,
                };
                let w = ids.try_map(|_, &id| Ok(v(id)))?;
                x = gated_block_graph(g, x, &w, cfg, scales.as_deref())?;
            }
            features.push(x);
        }
        Ok(features)
    }

    /// Stage outputs on plain tensors (inference mode).
    pub fn forward_features(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let f = self.record_features(&mut g, &bound, x, None)?;
        Ok(f.into_iter().map(|v| g.value(v).clone()).collect())
    }
}

impl<T: Element> Model<T> for MambaOut<T> {
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
        let features = self.record_features(g, bound, images, rng)?;
        let v = |id: ParamId| bound.var(id);
        let h = &self.head;
        let x = g.mean_axes(*features.last().expect("four stages"), &[1, 2])?;
        let x = g.layer_norm(x, v(h.norm.gamma), v(h.norm.beta), NORM_EPS)?;
        let x = g.linear(x, v(h.fc1.weight), Some(v(h.fc1.bias)))?;
        let x = g.gelu(x)?;
        let x = g.layer_norm(x, v(h.norm2.gamma), v(h.norm2.beta), NORM_EPS)?;
        g.linear(x, v(h.fc2.weight), Some(v(h.fc2.bias)))
    }
}
