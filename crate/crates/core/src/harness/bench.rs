//! Wall-clock comparison of the sequential and parallel selective scans.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::mixers::{ssm_scan_parallel, ssm_scan_sequential, SsmParams};
use crate::tensor::{max_rel_error, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    pub sequential_s: f64,
    pub parallel_s: f64,
    pub sequential_ns_per_token: f64,
    pub parallel_ns_per_token: f64,
    pub max_rel_error: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median timings over `repeats` runs per length (one warmup run of each
/// implementation is discarded).
pub fn bench_scan(
    lens: &[usize],
    channels: usize,
    state_dim: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::Config(format!("repeats must be at least 3, got {repeats}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SsmParams::<f64>::init(channels, state_dim, &mut rng);
    lens.iter()
        .map(|&t| {
            let x = Tensor::<f64>::randn([t, channels], 1.0, &mut rng);
            let seq = ssm_scan_sequential(&x, &params)?;
            let par = ssm_scan_parallel(&x, &params)?;
            let time = |f: &dyn Fn() -> Result<Tensor<f64>>| -> Result<f64> {
                let mut v = Vec::with_capacity(repeats);
                for _ in 0..repeats {
                    let start = Instant::now();
                    std::hint::black_box(f()?);
                    v.push(start.elapsed().as_secs_f64());
                }
                Ok(median(v))
            };
            let s = time(&|| ssm_scan_sequential(&x, &params))?;
            let p = time(&|| ssm_scan_parallel(&x, &params))?;
            Ok(BenchRow {
                len: t,
                sequential_s: s,
                parallel_s: p,
                sequential_ns_per_token: 1e9 * s / t as f64,
                parallel_ns_per_token: 1e9 * p / t as f64,
                max_rel_error: max_rel_error(par.data(), seq.data()),
            })
        })
        .collect()
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>6}  {:>12}  {:>12}  {:>12}  {:>12}  {:>10}\n",
        "T", "seq (s)", "par (s)", "seq ns/tok", "par ns/tok", "rel.err"
    );
    for r in rows {
        s += &format!(
            "{:>6}  {:>12.6}  {:>12.6}  {:>12.1}  {:>12.1}  {:>10.2e}\n",
            r.len, r.sequential_s, r.parallel_s, r.sequential_ns_per_token, r.parallel_ns_per_token, r.max_rel_error
        );
    }
    s
}
