//! Toy-scale training on a synthetic arrangement task, the paired
//! fully-visible/causal comparison, and the scan benchmark.

mod bench;
mod compare;
mod config;
mod data;
mod optim;
mod train;
pub mod verify;

pub use bench::{bench_scan, bench_table, BenchRow};
pub use compare::{compare_mixers, ArmResult, ComparisonReport, Protocol, GAP_BAND, REFERENCE_GAP};
pub use config::{ResolvedRun, RunConfig};
pub use data::{batch_tensor, hflip, Split, SyntheticTask, NUM_CLASSES};
pub use optim::{adamw_step, lr_schedule, AdamState, DecayPolicy, ADAM_EPS, BETA1, BETA2};
pub use train::{
    evaluate, train, train_mambaout, EpochMetrics, TrainConfig, TrainReport, CSV_HEADER, LR_REFERENCE_BATCH,
};
pub use verify::{gradient_cases, gradient_suite, scan_suite, GradCase, GradRow, ScanCheck};
