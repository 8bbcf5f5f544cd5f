//! Token mixers: partial-channel depthwise convolution, the selective
//! state-space scan, and multi-head attention with a visibility mode.

mod attention;
mod conv;
mod scan;
mod ssm;

use serde::{Deserialize, Serialize};

pub use attention::{attention, attention_graph, attention_weights, AttnWeights};
pub use conv::{conv_mixer, conv_mixer_graph, ConvMixerWeights, SplitIndices};
pub use scan::{scan_parallel, scan_sequential};
pub use ssm::{
    discretize, expm1_over, ssm_discretize, ssm_graph, ssm_scan_parallel, ssm_scan_sequential, SelectiveInputs,
    SelectiveScan, SsmParams, SsmWeights, DEFAULT_STATE_DIM, SERIES_THRESHOLD,
};

/// Which tokens a mixer may aggregate from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Token `t` sees every token.
    FullyVisible,
    /// Token `t` sees tokens `1..=t`.
    Causal,
}

impl std::fmt::Display for MixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixMode::FullyVisible => "fully_visible",
            MixMode::Causal => "causal",
        })
    }
}

impl std::str::FromStr for MixMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "fully_visible" | "fully-visible" | "fv" => Ok(MixMode::FullyVisible),
            "causal" => Ok(MixMode::Causal),
            other => Err(crate::Error::Config(format!("unknown mix mode '{other}'"))),
        }
    }
}
