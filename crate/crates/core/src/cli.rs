//! Command-line entry points: `train`, `eval`, `compare`, and `verify`, all
//! file-driven and reproducible from the run manifest alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{
    evaluate, Checkpoint, EvalOptions, EvalPolicy, EvalStats, Mode, TrainConfig, Trainer,
};
use crate::verify::{self, FaultInjection};

// ---------------------------------------------------------------------------
// Config loading and overrides
// ---------------------------------------------------------------------------

/// Parses config bytes, applies `--set key=value` dotted-path overrides, and
/// deserializes with unknown-key rejection and field-level error paths.
pub fn load_config(raw: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut value: serde_json::Value = serde_json::from_str(raw)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let rendered = value.to_string();
    let deserializer = &mut serde_json::Deserializer::from_str(&rendered);
    let config: TrainConfig = serde_path_to_error::deserialize(deserializer)
        .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    // Interpret the value as JSON when possible, else as a bare string.
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let object = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' is not an object")))?;
        if i + 1 == segments.len() {
            object.insert(segment.to_string(), parsed);
            return Ok(());
        }
        cursor = object
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment");
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEntry {
    pub mode: String,
    pub seed: u64,
    pub metrics: String,
    pub checkpoint: String,
}

/// Reproducibility record: the byte-exact config that was loaded, the
/// overrides applied, the effective config, and where outputs landed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub suite_version: String,
    pub config_raw: String,
    pub overrides: Vec<String>,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub runs: Vec<RunEntry>,
    pub started_at: String,
    pub finished_at: String,
}

fn timestamp() -> String {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    format!("{:.3}", now.as_secs_f64())
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Prefpoe => "prefpoe",
        Mode::PpoBaseline => "ppo_baseline",
        Mode::LinearFusionAblation => "linear_fusion_ablation",
    }
}

fn parse_mode(name: &str) -> Result<Mode> {
    match name {
        "prefpoe" => Ok(Mode::Prefpoe),
        "ppo_baseline" => Ok(Mode::PpoBaseline),
        "linear_fusion_ablation" => Ok(Mode::LinearFusionAblation),
        other => Err(Error::Config(format!(
            "unknown mode '{other}' (expected prefpoe | ppo_baseline | linear_fusion_ablation)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Trains one run and writes `manifest.json`, `metrics.jsonl`, and
/// `final.ckpt.json` under `out_dir`.
pub fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    out_dir: &Path,
    sets: &[String],
) -> Result<PathBuf> {
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let mut overrides = sets.to_vec();
    if let Some(seed) = seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = load_config(&raw, &overrides)?;
    std::fs::create_dir_all(out_dir)?;
    let started_at = timestamp();

    let metrics_path = out_dir.join("metrics.jsonl");
    let ckpt_path = out_dir.join("final.ckpt.json");
    train_single(&config, &metrics_path, &ckpt_path)?;

    let manifest = RunManifest {
        suite_version: env!("CARGO_PKG_VERSION").to_string(),
        config_raw: raw,
        overrides,
        seeds: vec![config.seed],
        out_dir: out_dir.display().to_string(),
        runs: vec![RunEntry {
            mode: mode_name(config.mode).to_string(),
            seed: config.seed,
            metrics: metrics_path.display().to_string(),
            checkpoint: ckpt_path.display().to_string(),
        }],
        config,
        started_at,
        finished_at: timestamp(),
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest_path)
}

/// One training run with crash-safe metric streaming: each record is written
/// and flushed as its update finishes, so aborts keep the partial log.
fn train_single(config: &TrainConfig, metrics_path: &Path, ckpt_path: &Path) -> Result<()> {
    let mut trainer = Trainer::new(config.clone())?;
    let file = std::fs::File::create(metrics_path)?;
    let mut writer = std::io::BufWriter::new(file);
    let run_result = trainer.run(|record| {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    });
    writer.flush()?;
    run_result?;
    trainer.checkpoint().save(ckpt_path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub env: String,
    pub deterministic: bool,
    pub policy: EvalPolicy,
    pub seed: u64,
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub cv: Option<f64>,
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    episodes: usize,
    deterministic: bool,
    seed: u64,
    policy: EvalPolicy,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let net = ckpt.to_net()?;
    let opts = EvalOptions {
        episodes,
        deterministic,
        seed,
        policy,
    };
    let stats = evaluate(
        &net,
        &ckpt.config.env,
        ckpt.config.mode,
        ckpt.config.lambda_pref,
        &opts,
    )?;
    let report = EvalReport {
        checkpoint: checkpoint_path.display().to_string(),
        env: ckpt.config.env.clone(),
        deterministic,
        policy,
        seed,
        episodes: stats.episodes,
        mean: stats.mean,
        std: stats.std,
        min: stats.min,
        max: stats.max,
        cv: stats.cv,
    };
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareCell {
    pub mode: String,
    pub seed: u64,
    pub eval: Option<EvalStats>,
    pub error: Option<String>,
    pub metrics: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mean: f64,
    pub std: f64,
    pub cv: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareSummary {
    pub cells: Vec<CompareCell>,
    pub per_mode: BTreeMap<String, ModeSummary>,
    /// (mean_mode − mean_base) / |mean_base| · 100, versus ppo_baseline.
    pub improvement_pct: BTreeMap<String, Option<f64>>,
    pub eval_episodes: usize,
    pub partial: bool,
}

/// Trains every (mode, seed) cell, evaluates each final checkpoint
/// deterministically, and writes `summary.json` plus per-cell run dirs.
/// `PREFPOE_THREADS` caps cell parallelism (default 1).
pub fn cmd_compare(
    config_path: &Path,
    seeds: &[u64],
    modes: &[String],
    out_dir: &Path,
    eval_episodes: usize,
    sets: &[String],
    threads_override: Option<usize>,
) -> Result<CompareSummary> {
    if seeds.len() < 2 {
        return Err(Error::Config("compare needs at least 2 seeds".into()));
    }
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let base = load_config(&raw, sets)?;
    let modes: Vec<Mode> = modes
        .iter()
        .map(|m| parse_mode(m))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir)?;

    struct CellJob {
        mode: Mode,
        seed: u64,
        config: TrainConfig,
        dir: PathBuf,
    }
    let mut jobs = Vec::new();
    for &mode in &modes {
        for &seed in seeds {
            let mut config = base.clone();
            config.mode = mode;
            config.seed = seed;
            let dir = out_dir
                .join(mode_name(mode))
                .join(format!("seed_{seed}"));
            jobs.push(CellJob {
                mode,
                seed,
                config,
                dir,
            });
        }
    }

    let threads: usize = threads_override
        .or_else(|| {
            std::env::var("PREFPOE_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .filter(|&t| t >= 1)
        .unwrap_or(1);

    let results: Vec<Mutex<Option<CompareCell>>> =
        (0..jobs.len()).map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let run_cell = |job: &CellJob| -> CompareCell {
        let metrics_path = job.dir.join("metrics.jsonl");
        let ckpt_path = job.dir.join("final.ckpt.json");
        let outcome = std::fs::create_dir_all(&job.dir)
            .map_err(Error::from)
            .and_then(|_| train_single(&job.config, &metrics_path, &ckpt_path))
            .and_then(|_| {
                let ckpt = Checkpoint::load(&ckpt_path)?;
                let net = ckpt.to_net()?;
                evaluate(
                    &net,
                    &job.config.env,
                    job.mode,
                    job.config.lambda_pref,
                    &EvalOptions {
                        episodes: eval_episodes,
                        deterministic: true,
                        seed: 1_000_000 + job.seed,
                        policy: EvalPolicy::Fused,
                    },
                )
            });
        let (eval, error) = match outcome {
            Ok(stats) => (Some(stats), None),
            Err(e) => (None, Some(e.to_string())),
        };
        CompareCell {
            mode: mode_name(job.mode).to_string(),
            seed: job.seed,
            eval,
            error,
            metrics: metrics_path.display().to_string(),
            checkpoint: ckpt_path.display().to_string(),
        }
    };

    std::thread::scope(|scope| {
        for _ in 0..threads.min(jobs.len()) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= jobs.len() {
                    break;
                }
                let cell = run_cell(&jobs[idx]);
                *results[idx].lock().expect("no poisoned cells") = Some(cell);
            });
        }
    });

    let cells: Vec<CompareCell> = results
        .into_iter()
        .map(|m| m.into_inner().expect("no poisoned cells").expect("all jobs ran"))
        .collect();
    let partial = cells.iter().any(|c| c.error.is_some());

    let mut per_mode = BTreeMap::new();
    for &mode in &modes {
        let name = mode_name(mode).to_string();
        let means: Vec<f64> = cells
            .iter()
            .filter(|c| c.mode == name)
            .filter_map(|c| c.eval.as_ref().map(|e| e.mean))
            .collect();
        if means.is_empty() {
            continue;
        }
        let n = means.len() as f64;
        let mean = means.iter().sum::<f64>() / n;
        let std = (means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n).sqrt();
        let cv = if std == 0.0 {
            Some(0.0)
        } else if mean.abs() < 1e-12 {
            None
        } else {
            Some(100.0 * std / mean.abs())
        };
        per_mode.insert(
            name,
            ModeSummary {
                mean,
                std,
                cv,
                seeds: means.len(),
            },
        );
    }

    let mut improvement_pct = BTreeMap::new();
    if let Some(baseline) = per_mode.get("ppo_baseline").map(|s| s.mean) {
        for (name, summary) in &per_mode {
            if name == "ppo_baseline" {
                continue;
            }
            let pct = if baseline.abs() < 1e-12 {
                None
            } else {
                Some((summary.mean - baseline) / baseline.abs() * 100.0)
            };
            improvement_pct.insert(name.clone(), pct);
        }
    }

    let summary = CompareSummary {
        cells,
        per_mode,
        improvement_pct,
        eval_episodes,
        partial,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

fn print_compare_table(summary: &CompareSummary) {
    println!(
        "{:<24} {:>10} {:>10} {:>8} {:>7} {:>12}",
        "mode", "mean", "std", "cv%", "seeds", "improv%"
    );
    for (name, s) in &summary.per_mode {
        let cv = s
            .cv
            .map(|v| format!("{v:.1}"))
            .unwrap_or_else(|| "-".into());
        let improv = summary
            .improvement_pct
            .get(name)
            .and_then(|v| *v)
            .map(|v| format!("{v:+.1}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<24} {:>10.2} {:>10.2} {:>8} {:>7} {:>12}",
            name, s.mean, s.std, cv, s.seeds, improv
        );
    }
    if summary.partial {
        println!("WARNING: partial report; one or more cells aborted");
    }
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// Runs the oracle suite, prints the table, writes the JSONL report, and
/// returns whether everything passed.
pub fn cmd_verify(out: &Path) -> Result<bool> {
    let fault = match std::env::var("PREFPOE_INJECT_FAULT").ok().as_deref() {
        Some("negate_lambda") => Some(FaultInjection::NegateLambda),
        Some(other) => {
            return Err(Error::Config(format!("unknown fault injection '{other}'")))
        }
        None => None,
    };
    let reports = verify::run_suite(fault)?;
    let mut file = std::fs::File::create(out)?;
    println!(
        "{:<42} {:>7} {:>12} {:>12} {:>9} {:>6}",
        "check", "cases", "max_abs", "max_rel", "tol", "pass"
    );
    let mut all_pass = true;
    for report in &reports {
        serde_json::to_writer(&mut file, report)?;
        file.write_all(b"\n")?;
        println!(
            "{:<42} {:>7} {:>12.3e} {:>12.3e} {:>9.0e} {:>6}",
            report.check,
            report.cases,
            report.max_abs_error,
            report.max_rel_error,
            report.tolerance,
            if report.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= report.pass;
    }
    Ok(all_pass)
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "prefpoe",
    about = "Advantage-guided preference learning with product-of-experts policy fusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a JSON config.
    Train {
        /// Path to the JSON training config.
        #[arg(long)]
        config: PathBuf,
        /// Shorthand for --set seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for manifest, metrics, and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path config overrides, e.g. --set weights.beta1=0.3
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint over fresh episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Use the distribution mode instead of sampling.
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Which policy's mode deterministic evaluation rolls out.
        #[arg(long, default_value = "fused")]
        policy: String,
        /// Optional JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several modes across seeds, then summarize.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0,10,42,77,123")]
        seeds: String,
        /// Comma-separated mode list.
        #[arg(long, default_value = "prefpoe,ppo_baseline")]
        modes: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        eval_episodes: usize,
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Run the numerical oracle suite; exit 0 iff every check passes.
    Verify {
        #[arg(long, default_value = "verify_report.jsonl")]
        out: PathBuf,
    },
}

/// Binary entry point. Returns the process exit code.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    let outcome: Result<i32> = match cli.command {
        Command::Train {
            config,
            seed,
            out,
            set,
        } => cmd_train(&config, seed, &out, &set).map(|manifest| {
            println!("wrote {}", manifest.display());
            0
        }),
        Command::Eval {
            checkpoint,
            episodes,
            deterministic,
            seed,
            policy,
            out,
        } => parse_eval_policy(&policy).and_then(|policy| {
            cmd_eval(
                &checkpoint,
                episodes,
                deterministic,
                seed,
                policy,
                out.as_deref(),
            )
        })
        .and_then(|report| {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(0)
        }),
        Command::Compare {
            config,
            seeds,
            modes,
            out,
            eval_episodes,
            set,
        } => parse_u64_list(&seeds).and_then(|seeds| {
            let modes: Vec<String> = modes.split(',').map(|s| s.trim().to_string()).collect();
            let summary = cmd_compare(&config, &seeds, &modes, &out, eval_episodes, &set, None)?;
            print_compare_table(&summary);
            Ok(0)
        }),
        Command::Verify { out } => cmd_verify(&out).map(|pass| if pass { 0 } else { 1 }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse_eval_policy(name: &str) -> Result<EvalPolicy> {
    match name {
        "fused" => Ok(EvalPolicy::Fused),
        "main" => Ok(EvalPolicy::Main),
        other => Err(Error::Config(format!(
            "unknown eval policy '{other}' (expected fused | main)"
        ))),
    }
}

fn parse_u64_list(input: &str) -> Result<Vec<u64>> {
    input
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{s}'")))
        })
        .collect()
}
