//! The four-stage MambaOut family and a small isotropic transformer.

pub mod checkpoint;
mod isotropic;
mod mambaout;

use num_rational::Ratio;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::blocks::MixerKind;
use crate::tensor::{Bound, Element, Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

pub use isotropic::{sincos_2d, IsotropicConfig, IsotropicTransformer, PosInit};
pub use mambaout::{stage_resolutions, MambaOut};

/// Preset names accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 5] = ["femto", "tiny", "small", "base", "micro"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depths: [usize; 4],
    pub widths: [usize; 4],
    pub mixer: MixerKind,
    pub expansion: Ratio<u64>,
    pub conv_ratio: Ratio<u64>,
    pub kernel: usize,
    pub head_hidden_ratio: Ratio<u64>,
    pub num_classes: usize,
    pub drop_path_peak: f64,
    /// SSM state size, used only by [`MixerKind::MambaSsm`].
    pub state_dim: usize,
}

impl ModelConfig {
    fn family(depths: [usize; 4], widths: [usize; 4], drop_path_peak: f64) -> Self {
        Self {
            depths,
            widths,
            mixer: MixerKind::GatedConv,
            expansion: Ratio::new(8, 3),
            conv_ratio: Ratio::from_integer(1),
            kernel: 7,
            head_hidden_ratio: Ratio::from_integer(4),
            num_classes: 1000,
            drop_path_peak,
            state_dim: crate::mixers::DEFAULT_STATE_DIM,
        }
    }

    /// `femto`, `tiny`, `small`, `base`, or the non-paper `micro` preset
    /// used for fast regression training.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "femto" => Self::family([3, 3, 9, 3], [48, 96, 192, 288], 0.025),
            "tiny" => Self::family([3, 3, 9, 3], [96, 192, 384, 576], 0.2),
            "small" => Self::family([3, 4, 27, 3], [96, 192, 384, 576], 0.4),
            "base" => Self::family([3, 4, 27, 3], [128, 256, 512, 768], 0.6),
            "micro" => Self::family([1, 1, 2, 1], [16, 32, 64, 96], 0.0),
            _ => {
                return Err(Error::UnknownPreset {
                    name: name.to_string(),
                    options: PRESETS.join(", "),
                })
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.contains(&0) || self.widths.contains(&0) {
            return Err(Error::Config("depths and widths must be positive".into()));
        }
        if self.widths[0] < 2 {
            return Err(Error::Config("first width must be at least 2 (stem halves it)".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_peak) {
            return Err(Error::Config(format!(
                "drop_path_peak {} outside [0, 1)",
                self.drop_path_peak
            )));
        }
        if *self.head_hidden_ratio.numer() == 0 {
            return Err(Error::Config("head_hidden_ratio must be positive".into()));
        }
        if !matches!(
            self.mixer,
            MixerKind::GatedConv | MixerKind::MambaSsm | MixerKind::Identity
        ) {
            return Err(Error::Config(format!(
                "mixer {} cannot build a hierarchical model",
                self.mixer
            )));
        }
        Ok(())
    }

    /// Hidden width of the stage-4 head MLP.
    pub fn head_hidden(&self) -> usize {
        floor_mul(self.widths[3], self.head_hidden_ratio)
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }
}

/// `floor(n · r)`.
pub(crate) fn floor_mul(n: usize, r: Ratio<u64>) -> usize {
    (n as u64 * r.numer() / r.denom()) as usize
}

/// Common surface of the image classifiers.
pub trait Model<T: Element>: Send + Sync {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn num_classes(&self) -> usize;

    /// Records logits `[B, classes]` for `images: [B, H, W, 3]`. Passing an
    /// rng selects training mode, where it drives stochastic depth only.
    fn record(&self, g: &mut Graph<T>, bound: &Bound, images: Var, rng: Option<&mut dyn RngCore>) -> Result<Var>;

    fn num_params(&self) -> usize {
        self.params().numel()
    }

    fn forward(&self, images: &Tensor<T>, training: bool, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.params().bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.record(&mut g, &bound, x, training.then_some(rng))?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_the_published_table() {
        let t = |n: &str| ModelConfig::preset(n).unwrap();
        assert_eq!(
            (t("femto").depths, t("femto").widths),
            ([3, 3, 9, 3], [48, 96, 192, 288])
        );
        assert_eq!(
            (t("tiny").depths, t("tiny").widths),
            ([3, 3, 9, 3], [96, 192, 384, 576])
        );
        assert_eq!(
            (t("small").depths, t("small").widths),
            ([3, 4, 27, 3], [96, 192, 384, 576])
        );
        assert_eq!(
            (t("base").depths, t("base").widths),
            ([3, 4, 27, 3], [128, 256, 512, 768])
        );
    }

    #[test]
    fn unknown_preset_lists_options() {
        let e = ModelConfig::preset("huge").unwrap_err().to_string();
        assert!(e.contains("femto") && e.contains("base"), "{e}");
    }
}
