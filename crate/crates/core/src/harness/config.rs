//! Flat TOML run configuration. Keys mirror the field names of
//! [`ModelConfig`], [`TrainConfig`] and [`SyntheticTask`]; every key is
//! optional and overrides the chosen preset (default `micro`).
//!
//! ```toml
//! preset = "micro"
//! epochs = 30
//! base_lr = 2e-3
//! expansion = [8, 3]
//! ```

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::data::SyntheticTask;
use super::train::TrainConfig;
use crate::blocks::MixerKind;
use crate::models::ModelConfig;
use crate::tensor::DType;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub depths: Option<[usize; 4]>,
    pub widths: Option<[usize; 4]>,
    pub mixer: Option<MixerKind>,
    pub expansion: Option<Ratio<u64>>,
    pub conv_ratio: Option<Ratio<u64>>,
    pub kernel: Option<usize>,
    pub head_hidden_ratio: Option<Ratio<u64>>,
    pub num_classes: Option<usize>,
    pub drop_path_peak: Option<f64>,
    pub state_dim: Option<usize>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub seed: Option<u64>,
    pub dtype: Option<DType>,
    pub hflip: Option<bool>,

    pub image_size: Option<usize>,
    pub train_samples: Option<usize>,
    pub val_samples: Option<usize>,
    pub distractor_prob: Option<f64>,
    pub noise_std: Option<f64>,
}

/// Fully resolved settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn resolve(&self) -> Result<ResolvedRun> {
        let preset = self.preset.clone().unwrap_or_else(|| "micro".into());
        let mut m = ModelConfig::preset(&preset)?;
        macro_rules! set {
            ($dst:expr, $($f:ident),*) => { $( if let Some(v) = self.$f.clone() { $dst.$f = v; } )* };
        }
        set!(
            m,
            depths,
            widths,
            mixer,
            expansion,
            conv_ratio,
            kernel,
            head_hidden_ratio,
            state_dim
        );
        let mut t = TrainConfig::default();
        set!(
            t,
            epochs,
            batch_size,
            warmup_epochs,
            weight_decay,
            label_smoothing,
            seed,
            dtype,
            hflip,
            drop_path_peak
        );
        t.base_lr = self.base_lr;
        let mut task = SyntheticTask::default();
        set!(
            task,
            image_size,
            train_samples,
            val_samples,
            distractor_prob,
            noise_std,
            num_classes
        );
        task.seed = t.seed;
        m.num_classes = task.num_classes;
        m.drop_path_peak = t.drop_path_peak;
        m.validate()?;
        t.validate()?;
        task.validate()?;
        Ok(ResolvedRun {
            preset,
            model: m,
            train: t,
            task,
        })
    }
}

impl ResolvedRun {
    /// Flat, fully explicit form that [`RunConfig::from_toml`] reads back.
    pub fn to_toml(&self) -> String {
        toml::to_string(&RunConfig::from(self)).expect("resolved config serializes")
    }
}

impl From<&ResolvedRun> for RunConfig {
    fn from(r: &ResolvedRun) -> Self {
        let (m, t, d) = (&r.model, &r.train, &r.task);
        RunConfig {
            preset: Some(r.preset.clone()),
            depths: Some(m.depths),
            widths: Some(m.widths),
            mixer: Some(m.mixer),
            expansion: Some(m.expansion),
            conv_ratio: Some(m.conv_ratio),
            kernel: Some(m.kernel),
            head_hidden_ratio: Some(m.head_hidden_ratio),
            num_classes: Some(d.num_classes),
            drop_path_peak: Some(t.drop_path_peak),
            state_dim: Some(m.state_dim),
            epochs: Some(t.epochs),
            batch_size: Some(t.batch_size),
            base_lr: t.base_lr,
            warmup_epochs: Some(t.warmup_epochs),
            weight_decay: Some(t.weight_decay),
            label_smoothing: Some(t.label_smoothing),
            seed: Some(t.seed),
            dtype: Some(t.dtype),
            hflip: Some(t.hflip),
            image_size: Some(d.image_size),
            train_samples: Some(d.train_samples),
            val_samples: Some(d.val_samples),
            distractor_prob: Some(d.distractor_prob),
            noise_std: Some(d.noise_std),
        }
    }
}
