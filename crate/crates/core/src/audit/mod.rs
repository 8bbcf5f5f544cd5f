//! Parameter and multiply-accumulate accounting, plus the attention-block
//! complexity analysis in [`complexity`].

pub mod complexity;

use serde::Serialize;

use crate::blocks::{MixerKind, MLP_RATIO};
use crate::mixers::SplitIndices;
use crate::models::{stage_resolutions, IsotropicConfig, Model, ModelConfig};
use crate::tensor::{Element, Graph, Tensor};
use crate::Result;

pub use complexity::{
    classify_sequence_task, patch_tokens, quadratic_ratio, quadratic_ratio_from_terms, threshold,
    transformer_block_flops, transformer_block_macs, ComplexityVerdict,
};

pub const SCHEMA_VERSION: u32 = 1;

pub const MAC_CONVENTION: &str = "1 MAC = 1 multiply + 1 add (FLOPs = 2 x MACs for dense ops). \
Dense map: in*out per position. Conv: k*k*Cin*Cout*Hout*Wout. Depthwise conv: k*k*C*Hout*Wout. \
Attention: the Q.K^T and P.V products, L*L*D each. Selective scan: 2*N per token and channel. \
Norms, activations, biases, pooling and elementwise products are excluded. Batch size 1.";

/// Published parameter (millions) and MAC (billions at 224²) figures.
pub fn reference_figures(preset: &str) -> Option<(f64, f64)> {
    match preset {
        "femto" => Some((7.3, 1.2)),
        "tiny" => Some((26.5, 4.5)),
        "small" => Some((48.5, 9.0)),
        "base" => Some((84.8, 15.8)),
        _ => None,
    }
}

pub const PARAM_TOLERANCE: f64 = 0.03;
pub const MAC_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRow {
    pub name: String,
    /// `stem`, `stage1`..`stage4`, `head`, ...
    pub group: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParityCheck {
    pub metric: String,
    pub expected: f64,
    pub measured: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ParityCheck {
    fn new(metric: &str, expected: f64, measured: f64, tolerance: f64) -> Self {
        let rel_error = (measured - expected).abs() / expected;
        Self {
            metric: metric.to_string(),
            expected,
            measured,
            rel_error,
            tolerance,
            pass: rel_error <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupTotal {
    pub group: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub schema_version: u32,
    pub model: String,
    pub input: [usize; 2],
    pub convention: String,
    pub head_included: bool,
    pub total_params: u64,
    pub total_macs: u64,
    /// The complementary figures (without head if it is included, with head otherwise).
    pub alt_params: u64,
    pub alt_macs: u64,
    pub groups: Vec<GroupTotal>,
    pub layers: Vec<LayerRow>,
    pub parity: Vec<ParityCheck>,
}

impl AuditReport {
    fn from_rows(model: &str, input: [usize; 2], rows: Vec<LayerRow>, head_included: bool) -> Self {
        let (head, body): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.group == "head");
        let sum = |rs: &[LayerRow]| {
            (
                rs.iter().map(|r| r.params).sum::<u64>(),
                rs.iter().map(|r| r.macs).sum::<u64>(),
            )
        };
        let (hp, hm) = sum(&head);
        let (bp, bm) = sum(&body);
        let mut layers = body;
        if head_included {
            layers.extend(head);
        }
        let mut groups: Vec<GroupTotal> = Vec::new();
        for r in &layers {
            match groups.iter_mut().find(|g| g.group == r.group) {
                Some(g) => {
                    g.params += r.params;
                    g.macs += r.macs;
                }
                None => groups.push(GroupTotal {
                    group: r.group.clone(),
                    params: r.params,
                    macs: r.macs,
                }),
            }
        }
        let (total_params, total_macs, alt_params, alt_macs) = if head_included {
            (bp + hp, bm + hm, bp, bm)
        } else {
            (bp, bm, bp + hp, bm + hm)
        };
        AuditReport {
            schema_version: SCHEMA_VERSION,
            model: model.to_string(),
            input,
            convention: MAC_CONVENTION.to_string(),
            head_included,
            total_params,
            total_macs,
            alt_params,
            alt_macs,
            groups,
            layers,
            parity: Vec::new(),
        }
    }

    /// Compares against the published figures for `preset` (224² only).
    pub fn with_parity(mut self, preset: &str) -> Self {
        if let Some((p, m)) = reference_figures(preset) {
            self.parity.push(ParityCheck::new(
                "params_M",
                p,
                self.total_params as f64 / 1e6,
                PARAM_TOLERANCE,
            ));
            if self.input == [224, 224] {
                self.parity.push(ParityCheck::new(
                    "macs_G",
                    m,
                    self.total_macs as f64 / 1e9,
                    MAC_TOLERANCE,
                ));
            }
        }
        self
    }

    pub fn passed(&self) -> bool {
        self.parity.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "model {}  input {}x{}  head {}\n{}\n\n",
            self.model,
            self.input[0],
            self.input[1],
            if self.head_included { "included" } else { "excluded" },
            self.convention
        );
        let w = self.layers.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        s += &format!("{:<w$}  {:>12}  {:>16}\n", "layer", "params", "MACs");
        for r in &self.layers {
            s += &format!("{:<w$}  {:>12}  {:>16}\n", r.name, r.params, r.macs);
        }
        s += "\n";
        for gr in &self.groups {
            s += &format!("{:<w$}  {:>12}  {:>16}\n", gr.group, gr.params, gr.macs);
        }
        s += &format!("{:<w$}  {:>12}  {:>16}\n", "TOTAL", self.total_params, self.total_macs);
        s += &format!(
            "{:<w$}  {:>12}  {:>16}\n",
            if self.head_included {
                "without head"
            } else {
                "with head"
            },
            self.alt_params,
            self.alt_macs
        );
        s += &format!(
            "\nparams {:.3} M   MACs {:.3} G\n",
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        for c in &self.parity {
            s += &format!(
                "{:<8} expected {:>7.2}  measured {:>8.3}  rel.err {:>6.2}%  (tol {:.0}%)  {}\n",
                c.metric,
                c.expected,
                c.measured,
                100.0 * c.rel_error,
                100.0 * c.tolerance,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

fn row(rows: &mut Vec<LayerRow>, group: &str, name: String, params: usize, macs: usize) {
    rows.push(LayerRow {
        name,
        group: group.to_string(),
        params: params as u64,
        macs: macs as u64,
    });
}

/// Analytic per-layer accounting of a hierarchical model at `input`.
pub fn audit_mambaout(cfg: &ModelConfig, name: &str, input: [usize; 2], include_head: bool) -> Result<AuditReport> {
    cfg.validate()?;
    let res = stage_resolutions(input[0], input[1])?;
    let s1 = (input[0].div_ceil(2), input[1].div_ceil(2));
    let w = cfg.widths;
    let half = w[0] / 2;
    let mut rows = Vec::new();
    let conv = |rows: &mut Vec<LayerRow>, group: &str, name: String, cin: usize, cout: usize, pos: usize| {
        row(rows, group, name, 9 * cin * cout + cout, 9 * cin * cout * pos)
    };
    let norm = |rows: &mut Vec<LayerRow>, group: &str, name: String, d: usize| row(rows, group, name, 2 * d, 0);

    conv(&mut rows, "stem", "stem.conv1".into(), 3, half, s1.0 * s1.1);
    norm(&mut rows, "stem", "stem.norm1".into(), half);
    conv(&mut rows, "stem", "stem.conv2".into(), half, w[0], res[0].0 * res[0].1);
    norm(&mut rows, "stem", "stem.norm2".into(), w[0]);

    for i in 0..4 {
        let group = format!("stage{}", i + 1);
        let pos = res[i].0 * res[i].1;
        let d = w[i];
        if i > 0 {
            let p = format!("stages.{i}.downsample");
            norm(&mut rows, &group, format!("{p}.norm"), w[i - 1]);
            conv(&mut rows, &group, format!("{p}.conv"), w[i - 1], d, pos);
        }
        let split = SplitIndices::new(
            d,
            (*cfg.expansion.numer(), *cfg.expansion.denom()),
            (*cfg.conv_ratio.numer(), *cfg.conv_ratio.denom()),
        )?;
        let (h, c, k, n) = (split.hidden(), split.conv, cfg.kernel, cfg.state_dim);
        for j in 0..cfg.depths[i] {
            let p = format!("stages.{i}.blocks.{j}");
            norm(&mut rows, &group, format!("{p}.norm"), d);
            row(
                &mut rows,
                &group,
                format!("{p}.fc1"),
                d * 2 * h + 2 * h,
                d * 2 * h * pos,
            );
            if c > 0 && cfg.mixer != MixerKind::Identity {
                row(
                    &mut rows,
                    &group,
                    format!("{p}.mixer.conv"),
                    k * k * c + c,
                    k * k * c * pos,
                );
            }
            if cfg.mixer == MixerKind::MambaSsm {
                let params = c * n + (c * c + c) + 2 * (c * n + n);
                // Δ/B/C projections plus the recurrence and readout
                let macs = (c * c + 2 * c * n + 2 * c * n) * pos;
                row(&mut rows, &group, format!("{p}.mixer.ssm"), params, macs);
            }
            row(&mut rows, &group, format!("{p}.fc2"), h * d + d, h * d * pos);
        }
    }

    let (d, hidden, k) = (w[3], cfg.head_hidden(), cfg.num_classes);
    norm(&mut rows, "head", "head.norm".into(), d);
    row(&mut rows, "head", "head.fc1".into(), d * hidden + hidden, d * hidden);
    norm(&mut rows, "head", "head.norm2".into(), hidden);
    row(&mut rows, "head", "head.fc2".into(), hidden * k + k, hidden * k);
    Ok(AuditReport::from_rows(name, input, rows, include_head))
}

/// Analytic accounting of the isotropic transformer.
pub fn audit_isotropic(cfg: &IsotropicConfig, include_head: bool) -> Result<AuditReport> {
    cfg.validate()?;
    let (d, p, l) = (cfg.dim, cfg.patch, cfg.tokens()?);
    let mut rows = Vec::new();
    row(
        &mut rows,
        "embed",
        "patch_embed".into(),
        p * p * 3 * d + d,
        p * p * 3 * d * l,
    );
    row(&mut rows, "embed", "pos_embed".into(), l * d, 0);
    let hidden = MLP_RATIO * d;
    for i in 0..cfg.depth {
        let g = format!("block{i}");
        row(&mut rows, &g, format!("blocks.{i}.norm1"), 2 * d, 0);
        row(&mut rows, &g, format!("blocks.{i}.attn.proj"), 4 * d * d, 4 * d * d * l);
        row(&mut rows, &g, format!("blocks.{i}.attn.mix"), 0, 2 * l * l * d);
        row(&mut rows, &g, format!("blocks.{i}.norm2"), 2 * d, 0);
        row(
            &mut rows,
            &g,
            format!("blocks.{i}.fc1"),
            d * hidden + hidden,
            d * hidden * l,
        );
        row(&mut rows, &g, format!("blocks.{i}.fc2"), hidden * d + d, hidden * d * l);
    }
    row(&mut rows, "norm", "norm".into(), 2 * d, 0);
    row(
        &mut rows,
        "head",
        "head".into(),
        d * cfg.num_classes + cfg.num_classes,
        d * cfg.num_classes,
    );
    Ok(AuditReport::from_rows(
        "isotropic",
        [cfg.image_size; 2],
        rows,
        include_head,
    ))
}

/// Sum of element counts over the model's parameter registry.
pub fn count_params<T: Element>(model: &dyn Model<T>) -> u64 {
    model.num_params() as u64
}

/// Multiply-accumulates counted while actually running one `height × width`
/// image through the model.
pub fn instrumented_macs<T: Element>(model: &dyn Model<T>, height: usize, width: usize) -> Result<u64> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, false);
    let x = g.constant(Tensor::zeros([1, height, width, 3]));
    model.record(&mut g, &bound, x, None)?;
    Ok(g.macs())
}
