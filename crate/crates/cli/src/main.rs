//! `agssm`: data generation, training, evaluation, gradient checks,
//! scaling benchmarks and checkpoint inspection.
//!
//! Every command prints human-readable lines plus machine-readable JSON
//! records (one object per line, each starting with `{`).

mod bench;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use agssm_core::suite::gradient_suite;
use agssm_core::synth::{export, generate, import, SynthConfig};
use agssm_core::train::{evaluate, load_checkpoint, train, Split, TrainConfig, TrainOptions, CHECKPOINT_VERSION};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "agssm",
    version,
    about = "Audio-guided selective state space models for per-frame multi-label detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Attention,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// TOML dataset config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Required; overrides any seed in the config file.
        #[arg(long)]
        seed: u64,
    },
    /// Train a model and write checkpoints plus `history.jsonl` to `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Macro-F1 of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the weight average instead of the last weights.
        #[arg(long)]
        swa: bool,
        /// Replace every audio feature with zeros before predicting.
        #[arg(long)]
        zero_audio: bool,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Check every analytic gradient against central differences.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Time the AG-SSM forward pass over increasing sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384")]
        lengths: Vec<usize>,
        #[arg(long, value_enum, default_value = "none")]
        baseline: Baseline,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 16)]
        state_dim: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn gen_data(config: Option<PathBuf>, out: PathBuf, seed: u64) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = seed;
    let data = generate(&cfg)?;
    export(&data, &out).with_context(|| format!("writing dataset to {}", out.display()))?;
    let prevalence = data.prevalence();
    println!(
        "wrote {}: {} sequences x {} frames, {} classes",
        out.display(),
        data.samples.len(),
        cfg.frames,
        cfg.classes
    );
    let shown: Vec<String> = prevalence.iter().map(|p| format!("{p:.4}")).collect();
    println!("prevalence: {}", shown.join(" "));
    println!(
        "{}",
        json!({
            "command": "gen-data",
            "out": out,
            "sequences": data.samples.len(),
            "frames": cfg.frames,
            "classes": cfg.classes,
            "seed": seed,
            "prevalence": prevalence,
        })
    );
    Ok(())
}

fn run_train(
    config: PathBuf,
    data: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
) -> Result<()> {
    let cfg = TrainConfig::load(&config).with_context(|| format!("loading config {}", config.display()))?;
    let dataset = import(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let resume = resume
        .map(|p| load_checkpoint(&p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()?;
    let opts = TrainOptions {
        resume,
        stop_after,
        out_dir: Some(out.clone()),
    };
    let started = Instant::now();
    let outcome = train(&cfg, &dataset, &opts)?;
    for rec in &outcome.history {
        println!("{}", serde_json::to_string(rec)?);
    }
    let ck = &outcome.checkpoint;
    let last = outcome.history.last();
    let val = last.map(|r| r.val_macro_f1);
    let val_swa = last.and_then(|r| r.val_macro_f1_swa);
    println!(
        "{}",
        json!({
            "command": "train",
            "epochs": ck.epoch,
            "steps": ck.step,
            "seconds": started.elapsed().as_secs_f64(),
            "best_epoch": ck.best_epoch,
            "best_val_macro_f1": ck.best_val_f1,
            "val_macro_f1": val,
            "val_macro_f1_swa": val_swa,
            "out": out,
        })
    );
    match (val, val_swa) {
        (Some(v), Some(s)) => println!("final held-out macro-F1: {v:.4} (SWA {s:.4})"),
        (Some(v), None) => println!("final held-out macro-F1: {v:.4}"),
        _ => println!("no epochs run; checkpoint already at epoch {}", ck.epoch),
    }
    Ok(())
}

fn run_eval(checkpoint: PathBuf, data: PathBuf, swa: bool, zero_audio: bool, split: SplitArg) -> Result<()> {
    let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut dataset = import(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    if zero_audio {
        dataset = dataset.without_audio();
    }
    let report = evaluate(&ck, &dataset, swa, split.into())?;
    println!(
        "{}",
        json!({
            "command": "eval",
            "split": Split::from(split),
            "swa": swa,
            "zero_audio": zero_audio,
            "frames": report.frames,
            "macro_f1": report.macro_f1,
            "per_class": report.per_class,
        })
    );
    Ok(())
}

fn run_gradcheck(seed: u64, tolerance: f64) -> Result<bool> {
    let started = Instant::now();
    let results = gradient_suite(seed)?;
    let mut failed = Vec::new();
    for c in &results {
        let pass = c.report.passes(tolerance);
        println!(
            "{}",
            json!({
                "op": c.op,
                "max_rel_error": c.report.max_rel_error,
                "checked": c.report.checked,
                "pass": pass,
            })
        );
        if !pass {
            failed.push(c);
        }
    }
    for c in &failed {
        eprintln!(
            "FAILED {}: max relative error {:.3e} > {tolerance:e} at index {} (analytic {:.6e}, numeric {:.6e})",
            c.op, c.report.max_rel_error, c.report.worst_index, c.report.analytic_at_worst, c.report.numeric_at_worst
        );
    }
    println!(
        "gradcheck: {}/{} operations within {tolerance:e} in {:.2}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(failed.is_empty())
}

fn run_bench(lengths: Vec<usize>, baseline: Baseline, settings: bench::BenchSettings) -> Result<()> {
    if lengths.is_empty() || lengths.contains(&0) {
        bail!("--lengths must be a non-empty list of positive lengths");
    }
    if lengths.windows(2).any(|w| w[1] <= w[0]) {
        bail!("--lengths must be strictly ascending");
    }
    if settings.runs == 0 || settings.d_model == 0 || settings.state_dim == 0 {
        bail!("--runs, --d-model and --state-dim must be positive");
    }
    let settings = bench::BenchSettings {
        attention: baseline == Baseline::Attention,
        ..settings
    };
    let rows = bench::run(&lengths, &settings);
    println!("{:>8} {:>14} {:>14}", "length", "ag_ssm_ms", "attention_ms");
    for r in &rows {
        let show = |t: Option<&bench::Timing>| match t {
            Some(bench::Timing::Ms(ms)) => format!("{ms:.3}"),
            Some(bench::Timing::OutOfMemory) => "oom".into(),
            None => "-".into(),
        };
        println!(
            "{:>8} {:>14} {:>14}",
            r.length,
            show(Some(&r.ag_ssm)),
            show(r.attention.as_ref())
        );
    }
    for r in &rows {
        println!("{}", r.to_json());
    }
    println!(
        "{}",
        json!({
            "command": "bench",
            "runs": settings.runs,
            "d_model": settings.d_model,
            "state_dim": settings.state_dim,
            "ratios": bench::doubling_ratios(&rows),
        })
    );
    Ok(())
}

fn run_inspect(checkpoint: PathBuf) -> Result<()> {
    let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let counts = ck.model.module_param_counts();
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    println!(
        "checkpoint {} (format version {CHECKPOINT_VERSION})",
        checkpoint.display()
    );
    println!("epoch {} step {}, SWA models {}", ck.epoch, ck.step, ck.swa.n_models);
    for (name, n) in &counts {
        println!("  {name:<12} {n:>10}");
    }
    println!("  {:<12} {total:>10}", "total");
    let modules: serde_json::Map<String, serde_json::Value> =
        counts.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    println!(
        "{}",
        json!({
            "command": "inspect",
            "version": CHECKPOINT_VERSION,
            "epoch": ck.epoch,
            "step": ck.step,
            "swa_n_models": ck.swa.n_models,
            "params": modules,
            "total_params": total,
            "config": ck.config,
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, seed } => gen_data(config, out, seed).map(|_| true),
        Command::Train {
            config,
            data,
            out,
            resume,
            stop_after,
        } => run_train(config, data, out, resume, stop_after).map(|_| true),
        Command::Eval {
            checkpoint,
            data,
            swa,
            zero_audio,
            split,
        } => run_eval(checkpoint, data, swa, zero_audio, split).map(|_| true),
        Command::Gradcheck { seed, tolerance } => run_gradcheck(seed, tolerance),
        Command::Bench {
            lengths,
            baseline,
            d_model,
            state_dim,
            runs,
            seed,
        } => run_bench(
            lengths,
            baseline,
            bench::BenchSettings {
                d_model,
                state_dim,
                runs,
                attention: false,
                seed,
            },
        )
        .map(|_| true),
        Command::Inspect { checkpoint } => run_inspect(checkpoint).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
