use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{batch_tensor, hflip, Split, SyntheticTask};
use super::optim::{adamw_step, lr_schedule, AdamState, DecayPolicy};
use crate::models::{checkpoint, MambaOut, Model, ModelConfig};
use crate::tensor::{DType, Element, Graph, Tensor};
use crate::{Error, Result};

/// Batch size the reference learning rate of `1e-3` is quoted for.
pub const LR_REFERENCE_BATCH: f64 = 1024.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Explicit learning rate; `None` applies `batch_size / 1024 · 1e-3`.
    pub base_lr: Option<f64>,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub drop_path_peak: f64,
    pub seed: u64,
    pub dtype: DType,
    /// Mirror augmentation (labels are remapped accordingly).
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: None,
            warmup_epochs: 2,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            drop_path_peak: 0.0,
            seed: 0,
            dtype: DType::F32,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.base_lr
            .unwrap_or(self.batch_size as f64 / LR_REFERENCE_BATCH * 1e-3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.lr() < 0.0 || !self.lr().is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr()
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.drop_path_peak) {
            return Err(Error::Config(
                "label_smoothing and drop_path_peak must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub steps: usize,
    pub params: usize,
}

pub const CSV_HEADER: &str = "epoch,split,loss,accuracy,lr";

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for m in &self.history {
            s += &format!("{},{},{:.6},{:.6},{:.6e}\n", m.epoch, m.split, m.loss, m.accuracy, m.lr);
        }
        s
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &EpochMetrics> {
        let split = split.to_string();
        self.history.iter().filter(move |m| m.split == split)
    }
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Mean cross-entropy (no smoothing) and accuracy in inference mode.
pub fn evaluate<T: Element>(
    model: &dyn Model<T>,
    data: &[(Vec<f64>, usize)],
    size: usize,
    batch: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut hits) = (0.0, 0);
    for chunk in data.chunks(batch.max(1)) {
        let imgs: Vec<&[f64]> = chunk.iter().map(|(x, _)| x.as_slice()).collect();
        let labels: Vec<usize> = chunk.iter().map(|(_, l)| *l).collect();
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, false);
        let x = g.constant(batch_tensor(&imgs, size)?);
        let logits = model.record(&mut g, &bound, x, None)?;
        let l = g.cross_entropy(logits, &labels, 0.0)?;
        loss += g.value(l).item().f64() * chunk.len() as f64;
        hits += correct(g.value(logits), &labels);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Trains `model` in place on `task`. With `out_dir`, writes
/// `metrics.csv` and `checkpoint.mokt` there; a non-finite loss aborts the
/// run after saving the last finite parameters to `last_good.mokt`.
pub fn train<T: Element>(
    model: &mut dyn Model<T>,
    task: &SyntheticTask,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    tc.validate()?;
    task.validate()?;
    if model.num_classes() != task.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes, task has {}",
            model.num_classes(),
            task.num_classes
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let size = task.image_size;
    let train_set = task.materialize(Split::Train);
    let val_set = task.materialize(Split::Val);
    let steps_per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total = tc.epochs * steps_per_epoch;
    let warmup = tc.warmup_epochs * steps_per_epoch;
    let base_lr = tc.lr();

    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    order_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    aug_rng.set_stream(2);

    let mut state = AdamState::new(model.params(), DecayPolicy::MatricesOnly);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(2 * tc.epochs);
    let mut step = 0;
    let mut lr = 0.0;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for idx in order.chunks(tc.batch_size) {
            let samples: Vec<(Vec<f64>, usize)> = idx
                .iter()
                .map(|&i| {
                    let (img, label) = &train_set[i];
                    if tc.hflip && aug_rng.gen::<bool>() {
                        hflip(img, size, *label)
                    } else {
                        (img.clone(), *label)
                    }
                })
                .collect();
            let imgs: Vec<&[f64]> = samples.iter().map(|(x, _)| x.as_slice()).collect();
            let labels: Vec<usize> = samples.iter().map(|(_, l)| *l).collect();

            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, true);
            let x = g.constant(batch_tensor(&imgs, size)?);
            let logits = model.record(&mut g, &bound, x, Some(&mut aug_rng as &mut dyn RngCore))?;
            let loss_var = g.cross_entropy(logits, &labels, tc.label_smoothing)?;
            let loss = g.value(loss_var).item().f64();
            lr = lr_schedule(step, total, warmup, base_lr);
            let grads = if loss.is_finite() {
                let gr = g.backward(loss_var)?;
                bound
                    .vars()
                    .iter()
                    .map(|&v| gr.get(v).cloned())
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let update = if loss.is_finite() {
                adamw_step(model.params_mut(), &grads, &mut state, lr, tc.weight_decay)
            } else {
                Err(Error::NonFinite(format!(
                    "training loss {loss} at epoch {epoch}, step {step}"
                )))
            };
            if let Err(e) = update {
                if let Some(dir) = out_dir {
                    checkpoint::save_file(model.params(), dir.join("last_good.mokt"))?;
                }
                return Err(e);
            }
            loss_sum += loss * labels.len() as f64;
            hits += correct(g.value(logits), &labels);
            step += 1;
        }
        let n = train_set.len() as f64;
        history.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
            lr,
        });
        let (vl, va) = evaluate(&*model, &val_set, size, tc.batch_size)?;
        history.push(EpochMetrics {
            epoch,
            split: "val".into(),
            loss: vl,
            accuracy: va,
            lr,
        });
    }

    let vals: Vec<f64> = history
        .iter()
        .filter(|m| m.split == "val")
        .map(|m| m.accuracy)
        .collect();
    let report = TrainReport {
        final_val_accuracy: *vals.last().expect("at least one epoch"),
        best_val_accuracy: vals.iter().cloned().fold(0.0, f64::max),
        history,
        steps: step,
        params: model.num_params(),
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join("metrics.csv"), report.to_csv())?;
        checkpoint::save_file(model.params(), dir.join("checkpoint.mokt"))?;
    }
    Ok(report)
}

/// Builds a hierarchical model for `task` (class count and stochastic depth
/// taken from the task and `tc`) and trains it.
pub fn train_mambaout<T: Element>(
    model_cfg: &ModelConfig,
    task: &SyntheticTask,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(MambaOut<T>, TrainReport)> {
    let mut cfg = model_cfg.clone();
    cfg.num_classes = task.num_classes;
    cfg.drop_path_peak = tc.drop_path_peak;
    let mut model = MambaOut::new(cfg, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    let report = train(&mut model, task, tc, out_dir)?;
    Ok((model, report))
}
