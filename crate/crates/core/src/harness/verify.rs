//! Oracle suites: analytic gradients against central finite differences,
//! and the parallel scan against the sequential recurrence.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{
    drop_path_graph, gated_block_graph, transformer_block_graph, BlockWeights, GatedBlockConfig, MixerKind,
    TransformerWeights,
};
use crate::mixers::{
    attention_graph, ssm_graph, ssm_scan_parallel, ssm_scan_sequential, AttnWeights, MixMode, SsmParams,
};
use crate::tensor::gradcheck::check_gradient;
use crate::tensor::{max_rel_error, Graph, Mask, Tensor, Var};
use crate::Result;

/// Central-difference step of the gradient suite.
pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const SCAN_TOLERANCE: f64 = 1e-5;

type Build = Arc<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A differentiable computation of some input tensors, reduced to a scalar
/// by a fixed random weighting of its output.
#[derive(Clone)]
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    build: Build,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .field(
                "inputs",
                &self.inputs.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>(),
            )
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            build: Arc::new(build),
        }
    }

    pub fn numel(&self) -> usize {
        self.inputs.iter().map(Tensor::numel).sum()
    }

    /// Loss `Σ out ⊙ R` with `R` drawn from `seed`; `track` marks inputs as
    /// gradient-requiring leaves.
    fn loss(&self, g: &mut Graph<f64>, inputs: &[Tensor<f64>], track: bool, seed: u64) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = (self.build)(g, &vars)?;
        let r = Tensor::randn(g.shape(out).to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let r = g.constant(r);
        let weighted = g.mul(out, r)?;
        Ok((g.sum(weighted)?, vars))
    }

    fn unflatten(&self, flat: &[f64]) -> Result<Vec<Tensor<f64>>> {
        let mut at = 0;
        self.inputs
            .iter()
            .map(|t| {
                let n = t.numel();
                at += n;
                Tensor::new(t.shape().to_vec(), flat[at - n..at].to_vec())
            })
            .collect()
    }

    /// Compares analytic and numeric gradients on `coords` coordinates drawn
    /// uniformly from all inputs jointly (every coordinate if fewer exist).
    pub fn check(&self, coords: usize, seed: u64) -> Result<GradRow> {
        let weight_seed = seed ^ 0x5eed;
        let mut g = Graph::new();
        let (loss, vars) = self.loss(&mut g, &self.inputs, true, weight_seed)?;
        let grads = g.backward(loss)?;
        let mut analytic = Vec::with_capacity(self.numel());
        for v in vars {
            analytic.extend_from_slice(grads.get(v)?.data());
        }
        let flat: Vec<f64> = self.inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let n = flat.len();
        let x = Tensor::new([n], flat)?;
        let analytic = Tensor::new([n], analytic)?;
        let f = |x: &Tensor<f64>| -> Result<f64> {
            let inputs = self.unflatten(x.data())?;
            let mut g = Graph::new();
            let (l, _) = self.loss(&mut g, &inputs, false, weight_seed)?;
            Ok(g.value(l).item())
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = check_gradient(f, &x, &analytic, FD_STEP, coords, &mut rng)?;
        Ok(GradRow {
            name: self.name.clone(),
            coords: r.coords_checked,
            max_rel_error: r.max_rel_error,
            pass: r.max_rel_error < GRAD_TOLERANCE,
        })
    }
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Splits a weight struct into a flat tensor list plus an index template.
fn flatten<W, I>(
    w: &W,
    try_map: impl Fn(&W, &mut dyn FnMut(&str, &Tensor<f64>) -> Result<usize>) -> Result<I>,
) -> (Vec<Tensor<f64>>, I) {
    let mut tensors = Vec::new();
    let idx = try_map(w, &mut |_, t| {
        tensors.push(t.clone());
        Ok(tensors.len() - 1)
    })
    .expect("infallible");
    (tensors, idx)
}

/// Every differentiable op and block, at small randomized shapes.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        GradCase::new(
            "add (broadcast)",
            vec![randn(&[4, 5, 6], 1.0, r), randn(&[6], 1.0, r)],
            |g, v| g.add(v[0], v[1]),
        ),
        GradCase::new(
            "mul (broadcast)",
            vec![randn(&[4, 5, 6], 1.0, r), randn(&[5, 6], 1.0, r)],
            |g, v| g.mul(v[0], v[1]),
        ),
        GradCase::new("scale", vec![randn(&[120], 1.0, r)], |g, v| g.scale(v[0], -1.7)),
        GradCase::new("exp", vec![randn(&[120], 0.5, r)], |g, v| g.exp(v[0])),
        GradCase::new("softplus", vec![randn(&[120], 2.0, r)], |g, v| g.softplus(v[0])),
        GradCase::new("gelu", vec![randn(&[120], 2.0, r)], |g, v| g.gelu(v[0])),
        GradCase::new(
            "matmul (batched)",
            vec![randn(&[2, 5, 7], 1.0, r), randn(&[2, 7, 3], 1.0, r)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        GradCase::new(
            "matmul (shared rhs)",
            vec![randn(&[2, 6, 7], 1.0, r), randn(&[7, 4], 1.0, r)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        GradCase::new(
            "linear",
            vec![randn(&[3, 4, 8], 1.0, r), randn(&[8, 6], 0.5, r), randn(&[6], 1.0, r)],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        GradCase::new(
            "layer_norm",
            vec![randn(&[6, 20], 1.0, r), randn(&[20], 1.0, r), randn(&[20], 1.0, r)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
        ),
        GradCase::new("softmax", vec![randn(&[4, 6, 6], 1.0, r)], |g, v| g.softmax(v[0], None)),
        GradCase::new("softmax (causal mask)", vec![randn(&[2, 8, 8], 1.0, r)], |g, v| {
            g.softmax(v[0], Some(Mask::causal(8)))
        }),
        GradCase::new(
            "conv2d (stride 2)",
            vec![randn(&[2, 5, 5, 3], 1.0, r), randn(&[3, 3, 3, 4], 0.5, r)],
            |g, v| g.conv2d(v[0], v[1], 2, 1),
        ),
        GradCase::new(
            "conv2d (stride 1)",
            vec![randn(&[1, 4, 4, 3], 1.0, r), randn(&[3, 3, 3, 2], 0.5, r)],
            |g, v| g.conv2d(v[0], v[1], 1, 1),
        ),
        GradCase::new(
            "depthwise_conv2d",
            vec![randn(&[2, 6, 6, 4], 1.0, r), randn(&[3, 3, 4], 0.5, r)],
            |g, v| g.depthwise_conv2d(v[0], v[1], 1, 1),
        ),
        GradCase::new(
            "depthwise_conv2d (stride 2)",
            vec![randn(&[1, 7, 7, 4], 1.0, r), randn(&[5, 5, 4], 0.5, r)],
            |g, v| g.depthwise_conv2d(v[0], v[1], 2, 2),
        ),
        GradCase::new("split/concat", vec![randn(&[4, 30], 1.0, r)], |g, v| {
            let p = g.split_last(v[0], &[10, 0, 20])?;
            let (a, b) = (p[0].expect("nonzero"), p[2].expect("nonzero"));
            let b2 = g.exp(b)?;
            g.concat_last(&[b2, a])
        }),
        GradCase::new("permute", vec![randn(&[3, 4, 10], 1.0, r)], |g, v| {
            g.permute(v[0], &[2, 0, 1])
        }),
        GradCase::new("reshape", vec![randn(&[120], 1.0, r)], |g, v| {
            let y = g.reshape(v[0], &[6, 20])?;
            g.softmax(y, None)
        }),
        GradCase::new("mean_axes", vec![randn(&[4, 5, 6], 1.0, r)], |g, v| {
            g.mean_axes(v[0], &[1, 2])
        }),
        GradCase::new("sum", vec![randn(&[120], 1.0, r)], |g, v| {
            let e = g.exp(v[0])?;
            g.sum(e)
        }),
    ];

    let labels: Vec<usize> = (0..16).map(|_| r.gen_range(0..8)).collect();
    cases.push(GradCase::new(
        "cross_entropy (smoothing 0.1)",
        vec![randn(&[16, 8], 2.0, r)],
        move |g, v| g.cross_entropy(v[0], &labels, 0.1),
    ));
    cases.push(GradCase::new("drop_path", vec![randn(&[4, 30], 1.0, r)], |g, v| {
        drop_path_graph(g, v[0], Some(&[2.0, 0.0, 2.0, 2.0]))
    }));

    // selective SSM: projections, discretization and scan
    let mut ssm = SsmParams::<f64>::init(4, 4, r);
    ssm.delta_w = randn(&[4, 4], 0.3, r);
    ssm.b_w = randn(&[4, 4], 0.5, r);
    ssm.c_w = randn(&[4, 4], 0.5, r);
    let (mut inputs, idx) = flatten(&ssm, |w, f| w.try_map(f));
    inputs.insert(0, randn(&[2, 12, 4], 1.0, r));
    cases.push(GradCase::new("selective_scan", inputs, move |g, v| {
        let w = idx.try_map(|_, &i| Ok(v[1 + i]))?;
        ssm_graph(g, v[0], &w)
    }));

    for mode in [MixMode::FullyVisible, MixMode::Causal] {
        let w = AttnWeights::<Tensor<f64>>::init(8, 2, r).expect("heads divide width");
        let w = w.map(|_, _| randn(&[8, 8], 0.4, r));
        let (mut inputs, idx) = flatten(&w, |w, f| w.try_map(f));
        inputs.insert(0, randn(&[2, 6, 8], 1.0, r));
        cases.push(GradCase::new(format!("attention ({mode})"), inputs, move |g, v| {
            let w = idx.try_map(|_, &i| Ok(v[1 + i]))?;
            attention_graph(g, v[0], &w, mode)
        }));
    }

    for kind in [MixerKind::GatedConv, MixerKind::MambaSsm, MixerKind::Identity] {
        let mut cfg = GatedBlockConfig::new(6, kind).expect("valid width");
        cfg.kernel = 3;
        cfg.state_dim = 4;
        let w = BlockWeights::<Tensor<f64>>::init(&cfg, r).expect("valid config");
        // larger-than-init weights so every path carries signal
        let w = w
            .try_map(|name, t| {
                Ok(if name.ends_with("gamma") {
                    t.clone()
                } else if name.ends_with("a_log") {
                    {
                        let shift = randn(t.shape(), 0.2, r);
                        t.zip_map(&shift, |a, b| a + b.abs())?
                    }
                } else {
                    randn(t.shape(), 0.3, r)
                })
            })
            .expect("infallible");
        let (mut inputs, idx) = flatten(&w, |w, f| w.try_map(f));
        inputs.insert(0, randn(&[2, 4, 4, 6], 1.0, r));
        cases.push(GradCase::new(format!("gated block ({kind})"), inputs, move |g, v| {
            let w = idx.try_map(|_, &i| Ok(v[1 + i]))?;
            gated_block_graph(g, v[0], &w, &cfg, None)
        }));
    }

    for mode in [MixMode::FullyVisible, MixMode::Causal] {
        let w = TransformerWeights::<Tensor<f64>>::init(8, 2, r).expect("heads divide width");
        let w = w
            .try_map(|name, t| {
                Ok(if name.ends_with("gamma") {
                    t.clone()
                } else {
                    randn(t.shape(), 0.3, r)
                })
            })
            .expect("infallible");
        let (mut inputs, idx) = flatten(&w, |w, f| w.try_map(f));
        inputs.insert(0, randn(&[2, 5, 8], 1.0, r));
        cases.push(GradCase::new(
            format!("transformer block ({mode})"),
            inputs,
            move |g, v| {
                let w = idx.try_map(|_, &i| Ok(v[1 + i]))?;
                transformer_block_graph(g, v[0], &w, mode, None)
            },
        ));
    }
    cases
}

/// Runs every case of [`gradient_cases`].
pub fn gradient_suite(coords: usize, seed: u64) -> Result<Vec<GradRow>> {
    gradient_cases(seed)
        .iter()
        .enumerate()
        .map(|(i, c)| c.check(coords, seed.wrapping_add(i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanCheck {
    pub trials: usize,
    pub max_len: usize,
    pub max_rel_error: f64,
    pub worst_len: usize,
    /// Sequential prefix outputs bit-identical under suffix perturbation.
    pub sequential_causal_exact: bool,
    /// Largest prefix change of the parallel scan under suffix perturbation.
    pub parallel_causal_max_diff: f64,
    pub pass: bool,
}

/// `trials` random instances with lengths in `1..=max_len` (both ends
/// always included), comparing the parallel scan to the sequential one and
/// probing causality.
pub fn scan_suite(max_len: usize, trials: usize, seed: u64) -> Result<ScanCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut worst_len) = (0.0f64, 0);
    let (mut causal_exact, mut par_diff) = (true, 0.0f64);
    for trial in 0..trials.max(1) {
        let t = match trial {
            0 => 1,
            1 => max_len.max(1),
            _ => rng.gen_range(1..=max_len.max(1)),
        };
        let d = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=8);
        let mut p = SsmParams::<f64>::init(d, n, &mut rng);
        p.a_log = Tensor::randn([d, n], 1.0, &mut rng);
        p.delta_w = Tensor::randn([d, d], 0.5, &mut rng);
        p.b_w = Tensor::randn([d, n], 0.5, &mut rng);
        p.c_w = Tensor::randn([d, n], 0.5, &mut rng);
        let x = Tensor::randn([t, d], 1.0, &mut rng);
        let seq = ssm_scan_sequential(&x, &p)?;
        let par = ssm_scan_parallel(&x, &p)?;
        let e = max_rel_error(par.data(), seq.data());
        if e > worst {
            (worst, worst_len) = (e, t);
        }
        if t > 1 && trial % 10 == 0 {
            let cut = rng.gen_range(1..t);
            let mut xs = x.to_vec();
            for v in &mut xs[cut * d..] {
                *v += rng.gen_range(-3.0..3.0);
            }
            let x2 = Tensor::new([t, d], xs)?;
            let (seq2, par2) = (ssm_scan_sequential(&x2, &p)?, ssm_scan_parallel(&x2, &p)?);
            causal_exact &= seq.data()[..cut * d] == seq2.data()[..cut * d];
            for (a, b) in par.data()[..cut * d].iter().zip(&par2.data()[..cut * d]) {
                par_diff = par_diff.max((a - b).abs());
            }
        }
    }
    Ok(ScanCheck {
        trials: trials.max(1),
        max_len,
        max_rel_error: worst,
        worst_len,
        sequential_causal_exact: causal_exact,
        parallel_causal_max_diff: par_diff,
        pass: worst <= SCAN_TOLERANCE && causal_exact && par_diff <= 1e-10,
    })
}
