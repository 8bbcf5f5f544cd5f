//! `mokt`: complexity audit, oracle checks, toy training and scan benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mokt::audit::{audit_mambaout, classify_sequence_task, count_params};
use mokt::blocks::MixerKind;
use mokt::harness::{self, RunConfig, SyntheticTask, TrainConfig};
use mokt::mixers::MixMode;
use mokt::models::{IsotropicConfig, MambaOut, ModelConfig, PosInit};
use mokt::tensor::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "mokt",
    version,
    about = "Gated CNN / SSM / attention toolkit: audit, verify, train, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random draw of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving the config echo, version stamp and outputs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Table,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mixer {
    GatedConv,
    MambaSsm,
    Identity,
}

impl From<Mixer> for MixerKind {
    fn from(m: Mixer) -> Self {
        match m {
            Mixer::GatedConv => MixerKind::GatedConv,
            Mixer::MambaSsm => MixerKind::MambaSsm,
            Mixer::Identity => MixerKind::Identity,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Pos {
    Random,
    Sincos,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and MAC accounting of a preset, compared with the published figures.
    Audit {
        #[arg(long, default_value = "femto")]
        model: String,
        /// Square input resolution.
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long, value_enum)]
        mixer: Option<Mixer>,
        /// Report totals without the classifier head.
        #[arg(long)]
        no_head: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Transformer-block FLOPs and the long-sequence verdict for L tokens of width D.
    Complexity {
        #[arg(long)]
        tokens: u64,
        #[arg(long)]
        dim: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic vs finite-difference gradients for every op and block.
    Gradcheck {
        /// Random coordinates checked per case.
        #[arg(long, default_value_t = 100)]
        coords: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Parallel vs sequential selective scan on random instances.
    ScanCheck {
        #[arg(long, default_value_t = 512)]
        max_len: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a hierarchical model on the synthetic arrangement task.
    Train {
        /// Flat TOML config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum)]
        mixer: Option<Mixer>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Learning-rate override (default: batch_size/1024 · 1e-3).
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        val_samples: Option<usize>,
        #[arg(long, value_enum)]
        dtype: Option<Precision>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the isotropic transformer in two token-mixing modes over several seeds.
    CompareMixers {
        #[arg(long, default_value_t = proto().seeds)]
        seeds: usize,
        /// Run fully-visible in both arms (control; the gap must be 0).
        #[arg(long)]
        control: bool,
        #[arg(long, default_value_t = proto().train.epochs)]
        epochs: usize,
        #[arg(long, default_value_t = proto().train.batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = proto().train.lr())]
        lr: f64,
        #[arg(long, default_value_t = proto().model.dim)]
        dim: usize,
        #[arg(long, default_value_t = proto().model.depth)]
        depth: usize,
        #[arg(long, default_value_t = proto().model.heads)]
        heads: usize,
        #[arg(long, default_value_t = proto().model.patch)]
        patch: usize,
        /// Initial value of the learned position embedding.
        #[arg(long, value_enum, default_value_t = Pos::Sincos)]
        pos_init: Pos,
        #[arg(long, default_value_t = proto().task.train_samples)]
        train_samples: usize,
        #[arg(long, default_value_t = proto().task.val_samples)]
        val_samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Median wall time of the sequential and parallel scans per sequence length.
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 64, 512, 4096])]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes mapped to exit codes 1 (validation) and 2 (internal).
enum Failure {
    Validation(String),
    Internal(String),
}

impl From<mokt::Error> for Failure {
    fn from(e: mokt::Error) -> Self {
        use mokt::Error::*;
        match e {
            Config(_) | UnknownPreset { .. } | Resolution { .. } | Domain { .. } => Failure::Validation(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type Outcome = Result<bool, Failure>;

/// Prints the result and, with `--out`, writes config echo, version stamp
/// and outputs. Returns whether the command's checks passed.
fn emit(common: &Common, name: &str, config: Value, table: String, result: Value, passed: bool) -> Outcome {
    let config = json!({ "command": name, "seed": common.seed, "version": VERSION, "settings": config });
    eprintln!("effective config: {config}");
    match common.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&result).expect("json")),
        Format::Table => print!("{table}"),
    }
    if let Some(dir) = &common.out {
        write_outputs(dir, name, &config, &table, &result)?;
    }
    Ok(passed)
}

fn write_outputs(dir: &Path, name: &str, config: &Value, table: &str, result: &Value) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(config).expect("json"),
    )?;
    fs::write(dir.join("VERSION"), format!("mokt {VERSION}\n"))?;
    fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(result).expect("json"),
    )?;
    fs::write(dir.join(format!("{name}.txt")), table)?;
    Ok(())
}

fn to_value<S: serde::Serialize>(s: &S) -> Value {
    serde_json::to_value(s).expect("serializable")
}

fn run_audit(model: &str, input: usize, mixer: Option<Mixer>, no_head: bool, common: &Common) -> Outcome {
    let mut cfg = ModelConfig::preset(model)?;
    if let Some(m) = mixer {
        cfg.mixer = m.into();
    }
    let name = model.to_ascii_lowercase();
    let paper_arch = cfg.mixer == MixerKind::GatedConv;
    let with_head = audit_mambaout(&cfg, &name, [input, input], true)?;
    let with_head = if paper_arch {
        with_head.with_parity(&name)
    } else {
        with_head
    };
    let built = MambaOut::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(common.seed))?;
    let registry = count_params(&built);
    let mut report = if no_head {
        audit_mambaout(&cfg, &name, [input, input], false)?
    } else {
        with_head.clone()
    };
    report.parity = with_head.parity.clone();
    let consistent = registry == with_head.total_params;
    let mut table = report.to_table();
    table += &format!(
        "registry params {registry} ({})\n",
        if consistent {
            "matches analytic count"
        } else {
            "MISMATCH with analytic count"
        }
    );
    let mut result = to_value(&report);
    result["registry_params"] = json!(registry);
    let settings =
        json!({ "model": name, "input": input, "mixer": cfg.mixer, "head_included": !no_head, "config": cfg });
    emit(common, "audit", settings, table, result, report.passed() && consistent)
}

fn run_complexity(tokens: u64, dim: u64, common: &Common) -> Outcome {
    let v = classify_sequence_task(tokens, dim)?;
    emit(
        common,
        "complexity",
        json!({ "tokens": tokens, "dim": dim }),
        v.to_table(),
        to_value(&v),
        true,
    )
}

fn run_gradcheck(coords: usize, common: &Common) -> Outcome {
    let rows = harness::gradient_suite(coords, common.seed)?;
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4);
    let mut table = format!("{:<w$}  {:>6}  {:>12}\n", "case", "coords", "max rel.err");
    for r in &rows {
        table += &format!(
            "{:<w$}  {:>6}  {:>12.3e}  {}\n",
            r.name,
            r.coords,
            r.max_rel_error,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = rows.iter().all(|r| r.pass);
    table += &format!(
        "max relative error {worst:.3e} (tolerance {:.0e})\n",
        harness::verify::GRAD_TOLERANCE
    );
    let result = json!({ "cases": rows, "max_rel_error": worst, "pass": passed });
    let settings =
        json!({ "coords": coords, "step": harness::verify::FD_STEP, "tolerance": harness::verify::GRAD_TOLERANCE });
    emit(common, "gradcheck", settings, table, result, passed)
}

fn run_scan_check(max_len: usize, trials: usize, common: &Common) -> Outcome {
    if max_len == 0 {
        return Err(Failure::Validation("--max-len must be at least 1".into()));
    }
    let r = harness::scan_suite(max_len, trials, common.seed)?;
    let table = format!(
        "trials {}  lengths 1..={}\nmax relative error {:.3e} (T = {}, tolerance {:.0e})\nsequential causality exact: {}\nparallel causality max diff: {:.3e}\n{}\n",
        r.trials,
        r.max_len,
        r.max_rel_error,
        r.worst_len,
        harness::verify::SCAN_TOLERANCE,
        r.sequential_causal_exact,
        r.parallel_causal_max_diff,
        if r.pass { "PASS" } else { "FAIL" }
    );
    emit(
        common,
        "scan-check",
        json!({ "max_len": max_len, "trials": trials }),
        table,
        to_value(&r),
        r.pass,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    config: Option<&Path>,
    preset: Option<String>,
    mixer: Option<Mixer>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    train_samples: Option<usize>,
    val_samples: Option<usize>,
    dtype: Option<Precision>,
    common: &Common,
) -> Outcome {
    let mut rc = match config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    rc.preset = preset.or(rc.preset);
    rc.mixer = mixer.map(Into::into).or(rc.mixer);
    rc.epochs = epochs.or(rc.epochs);
    rc.batch_size = batch_size.or(rc.batch_size);
    rc.base_lr = lr.or(rc.base_lr);
    rc.train_samples = train_samples.or(rc.train_samples);
    rc.val_samples = val_samples.or(rc.val_samples);
    rc.dtype = dtype
        .map(|d| match d {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        })
        .or(rc.dtype);
    rc.seed = Some(common.seed);
    let run = rc.resolve()?;
    let out = common.out.as_deref();
    let report = match run.train.dtype {
        DType::F32 => harness::train_mambaout::<f32>(&run.model, &run.task, &run.train, out)?.1,
        DType::F64 => harness::train_mambaout::<f64>(&run.model, &run.task, &run.train, out)?.1,
    };
    if let Some(dir) = out {
        fs::write(dir.join("config.toml"), run.to_toml())?;
    }
    let mut table = report.to_csv();
    table += &format!(
        "final val accuracy {:.4}  best {:.4}  ({} params, {} steps, lr {:.3e})\n",
        report.final_val_accuracy,
        report.best_val_accuracy,
        report.params,
        report.steps,
        run.train.lr()
    );
    emit(common, "train", to_value(&run), table, to_value(&report), true)
}

#[allow(clippy::too_many_arguments)]
fn proto() -> harness::Protocol {
    harness::Protocol::default()
}

fn run_compare(
    seeds: usize,
    control: bool,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    dim: usize,
    depth: usize,
    heads: usize,
    patch: usize,
    pos_init: Pos,
    train_samples: usize,
    val_samples: usize,
    common: &Common,
) -> Outcome {
    if seeds == 0 {
        return Err(Failure::Validation("--seeds must be at least 1".into()));
    }
    let p = proto();
    let task = SyntheticTask {
        train_samples,
        val_samples,
        seed: common.seed,
        ..p.task
    };
    let base = IsotropicConfig {
        dim,
        depth,
        heads,
        patch,
        pos_init: match pos_init {
            Pos::Random => PosInit::Random,
            Pos::Sincos => PosInit::Sincos,
        },
        ..p.model
    };
    let tc = TrainConfig {
        epochs,
        batch_size,
        base_lr: Some(lr),
        seed: common.seed,
        ..p.train
    };
    let modes = if control {
        [MixMode::FullyVisible, MixMode::FullyVisible]
    } else {
        [MixMode::FullyVisible, MixMode::Causal]
    };
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| common.seed + s).collect();
    let report = harness::compare_mixers::<f32>(&task, modes, &base, &tc, &seed_list)?;
    let passed = if control { report.gap == 0.0 } else { report.gap >= 0.0 };
    let settings = json!({ "task": task, "model": base, "train": tc, "seeds": seed_list, "control": control });
    emit(
        common,
        "compare-mixers",
        settings,
        report.to_table(),
        to_value(&report),
        passed,
    )
}

fn run_bench(lens: &[usize], channels: usize, state: usize, repeats: usize, common: &Common) -> Outcome {
    if lens.contains(&0) || channels == 0 || state == 0 {
        return Err(Failure::Validation(
            "lengths, channels and state must be positive".into(),
        ));
    }
    let rows = harness::bench_scan(lens, channels, state, repeats, common.seed)?;
    let passed = rows.iter().all(|r| r.max_rel_error <= harness::verify::SCAN_TOLERANCE);
    let settings = json!({ "lens": lens, "channels": channels, "state": state, "repeats": repeats });
    emit(
        common,
        "bench-scan",
        settings,
        harness::bench_table(&rows),
        to_value(&rows),
        passed,
    )
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("MOKT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Validation(format!("MOKT_THREADS must be a non-negative integer, got '{v}'")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    configure_threads()?;
    match cli.command {
        Command::Audit {
            model,
            input,
            mixer,
            no_head,
            common,
        } => run_audit(&model, input, mixer, no_head, &common),
        Command::Complexity { tokens, dim, common } => run_complexity(tokens, dim, &common),
        Command::Gradcheck { coords, common } => run_gradcheck(coords, &common),
        Command::ScanCheck {
            max_len,
            trials,
            common,
        } => run_scan_check(max_len, trials, &common),
        Command::Train {
            config,
            preset,
            mixer,
            epochs,
            batch_size,
            lr,
            train_samples,
            val_samples,
            dtype,
            common,
        } => run_train(
            config.as_deref(),
            preset,
            mixer,
            epochs,
            batch_size,
            lr,
            train_samples,
            val_samples,
            dtype,
            &common,
        ),
        Command::CompareMixers {
            seeds,
            control,
            epochs,
            batch_size,
            lr,
            dim,
            depth,
            heads,
            patch,
            pos_init,
            train_samples,
            val_samples,
            common,
        } => run_compare(
            seeds,
            control,
            epochs,
            batch_size,
            lr,
            dim,
            depth,
            heads,
            patch,
            pos_init,
            train_samples,
            val_samples,
            &common,
        ),
        Command::BenchScan {
            lens,
            channels,
            state,
            repeats,
            common,
        } => run_bench(&lens, channels, state, repeats, &common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("validation failed");
            ExitCode::from(1)
        }
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
