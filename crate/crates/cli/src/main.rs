//! `dr-forge`: generate reinforced shards, train students, run ablations.
//!
//! Relative paths inside a config file resolve against the file's directory.
//! Exit status is 0 on success, 1 on errors and 2 on an invariant breach.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use dr_forge_core::ablation::{self, OverheadSettings};
use dr_forge_core::coordinator::{self, GenerationJob, Manifest, RunOptions, ShardEvent};
use dr_forge_core::shard;
use dr_forge_core::train::{self, CurvePoint, DataSource, Dataset, TeacherChoice, TrainConfig};

#[derive(Parser)]
#[command(name = "dr-forge", version, about = "Reinforced dataset generation and distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or resume) the reinforced shards described by a job file.
    Reinforce {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; overrides the job file.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Continue from an existing manifest.
        #[arg(long)]
        resume: bool,
        /// Abandon a claimed shard after this many completions (crash drill).
        #[arg(long, hide = true)]
        crash_after: Option<usize>,
    },
    /// Re-hash done shards and return damaged ones to pending.
    Verify { dir: PathBuf },
    /// Print a shard's header and size accounting without decoding records.
    Inspect {
        shard: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train one student.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation sweep.
    Sweep {
        kind: SweepKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Timing benchmarks.
    Bench {
        kind: BenchKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Accuracy-vs-samples curves for a reinforced and a plain run.
    Curve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    LogitScale,
    Ensemble,
    Captions,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Overhead,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogitScaleSweep {
    train: TrainConfig,
    teacher_id: String,
    grid: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSweep {
    train: TrainConfig,
    rosters: Vec<Vec<TeacherChoice>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionSweep {
    train: TrainConfig,
    counts: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairConfig {
    reinforced: TrainConfig,
    plain: TrainConfig,
    #[serde(default)]
    checkpoints: Vec<usize>,
    #[serde(default)]
    timed_steps: Option<usize>,
    #[serde(default)]
    warmup_steps: Option<usize>,
    /// Fail the run when reinforced/plain exceeds this.
    #[serde(default)]
    max_ratio: Option<f64>,
}

/// A broken invariant; reported and mapped to exit status 2.
#[derive(Debug)]
struct Breach(String);

impl std::fmt::Display for Breach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant breach: {}", self.0)
    }
}

impl std::error::Error for Breach {}

fn breach(msg: impl Into<String>) -> anyhow::Error {
    Breach(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dr-forge: {e:#}");
            if e.downcast_ref::<Breach>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Reinforce {
            config,
            parallelism,
            resume,
            crash_after,
        } => reinforce(&config, parallelism, resume, crash_after),
        Command::Verify { dir } => verify(&dir),
        Command::Inspect { shard, json } => inspect(&shard, json),
        Command::Train { config, out } => train_cmd(&config, &out),
        Command::Sweep { kind, config, out } => sweep(kind, &config, &out),
        Command::Bench {
            kind: BenchKind::Overhead,
            config,
            out,
        } => bench_overhead(&config, &out),
        Command::Curve { config, out } => curve(&config, &out),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn rebase_train(base: &Path, mut cfg: TrainConfig) -> TrainConfig {
    if let DataSource::Reinforced { dir } = &cfg.data {
        cfg.data = DataSource::Reinforced { dir: rebase(base, dir) };
    }
    cfg
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> dr_forge_core::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn reinforce(config: &Path, parallelism: Option<usize>, resume: bool, crash_after: Option<usize>) -> Result<()> {
    let mut job: GenerationJob = read_config(config)?;
    job.output_dir = rebase(&config_dir(config), &job.output_dir);
    if let Some(p) = parallelism {
        job.parallelism = p;
    }
    let opts = RunOptions {
        resume,
        crash_after,
        ..RunOptions::default()
    };
    let progress = |e: &ShardEvent| {
        if !e.skipped {
            let _ = writeln!(io::stdout().lock(), "shard {}/{} done hash={:016x}", e.index + 1, e.total, e.hash);
        }
    };
    let report = coordinator::run(&job, &opts, &progress)?;
    let manifest = Manifest::load(&job.output_dir)?;
    write_csv(&job.output_dir.join("reinforce.csv"), |b| coordinator::write_manifest_csv(b, &manifest))?;
    let hashes: Vec<String> = report.hashes.iter().map(|h| format!("{h:016x}")).collect();
    write_json(
        &job.output_dir.join("reinforce_summary.json"),
        &json!({
            "dataset_id": manifest.dataset_id,
            "num_shards": manifest.shards.len(),
            "generated": report.generated,
            "skipped": report.skipped,
            "all_done": manifest.all_done(),
            "hashes": hashes,
        }),
    )?;
    if !manifest.all_done() {
        return Err(breach("generation finished with shards not done"));
    }
    Ok(())
}

fn verify(dir: &Path) -> Result<()> {
    let report = coordinator::verify(dir)?;
    println!("checked {} done shards", report.checked);
    for (i, note) in &report.downgraded {
        println!("shard {i} -> pending: {note}");
    }
    if !report.downgraded.is_empty() {
        return Err(breach(format!("{} shard(s) failed verification", report.downgraded.len())));
    }
    Ok(())
}

fn inspect(path: &Path, as_json: bool) -> Result<()> {
    let s = shard::inspect(path)?;
    if as_json {
        let v = json!({
            "header": s.header,
            "file_size": s.file_size,
            "bytes_per_record": s.bytes_per_record,
            "content_hash": format!("{:016x}", s.content_hash),
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("{s}");
    }
    Ok(())
}

fn check_curve(name: &str, curve: &[CurvePoint]) -> Result<()> {
    if !curve.windows(2).all(|w| w[1].samples_seen > w[0].samples_seen) {
        return Err(breach(format!("{name} curve samples_seen is not increasing")));
    }
    if let Some(p) = curve.iter().find(|p| !(0.0..=1.0).contains(&p.zeroshot_acc)) {
        return Err(breach(format!("{name} accuracy {} at step {} outside [0, 1]", p.zeroshot_acc, p.step)));
    }
    Ok(())
}

fn valid(report: &dr_forge_core::eval::EvalReport) -> Result<()> {
    report.validate().map_err(|e| breach(e.to_string()))
}

fn train_cmd(config: &Path, out: &Path) -> Result<()> {
    let cfg = rebase_train(&config_dir(config), read_config(config)?);
    create_out(out)?;
    let output = train::train(&cfg)?;
    write_csv(&out.join("steps.csv"), |b| train::write_steps_csv(b, &output.steps))?;
    write_csv(&out.join("curve.csv"), |b| {
        let report = ablation::EfficiencyReport {
            reinforced: output.curve.clone(),
            plain: Vec::new(),
            target_acc: 0.0,
            samples_to_match: None,
            ratio: None,
        };
        ablation::write_curve_csv(b, &report)
    })?;
    output.model.save(&out.join("student.model"))?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "config": cfg,
            "report": output.report,
            "final_student_scale": output.model.logit_scale,
            "final_loss": output.steps.last().map(|s| s.total),
        }),
    )?;
    println!(
        "zeroshot_acc={:.4} retrieval_t2i@1={:.4} retrieval_i2t@1={:.4}",
        output.report.zeroshot_acc, output.report.retrieval_t2i_at1, output.report.retrieval_i2t_at1
    );
    valid(&output.report)?;
    check_curve("training", &output.curve)
}

fn load(cfg: &TrainConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset::load(&cfg.data, cfg.loader_threads)?)
}

fn sweep(kind: SweepKind, config: &Path, out: &Path) -> Result<()> {
    let base = config_dir(config);
    create_out(out)?;
    match kind {
        SweepKind::LogitScale => {
            let c: LogitScaleSweep = read_config(config)?;
            let cfg = rebase_train(&base, c.train);
            let data = load(&cfg)?;
            let result = ablation::sweep_logit_scale(&cfg, &data, &c.teacher_id, &c.grid)?;
            write_csv(&out.join("sweep_logit_scale.csv"), |b| ablation::write_sweep_csv(b, &result))?;
            write_json(&out.join("sweep_logit_scale.json"), &result)?;
            for p in &result.grid {
                println!("scale {} zeroshot_acc={:.4}", p.setting, p.report.zeroshot_acc);
            }
            println!("best {} interior={}", result.best_setting, result.best_is_interior);
            result.grid.iter().try_for_each(|p| valid(&p.report))
        }
        SweepKind::Ensemble => {
            let c: EnsembleSweep = read_config(config)?;
            let cfg = rebase_train(&base, c.train);
            let data = load(&cfg)?;
            let rows = ablation::compare_ensembles(&cfg, &data, &c.rosters)?;
            write_csv(&out.join("sweep_ensemble.csv"), |b| ablation::write_roster_csv(b, &rows))?;
            write_json(&out.join("sweep_ensemble.json"), &rows)?;
            for r in &rows {
                let ids: Vec<&str> = r.teachers.iter().map(|t| t.teacher_id.as_str()).collect();
                println!("{} zeroshot_acc={:.4}", ids.join("+"), r.report.zeroshot_acc);
            }
            if rows.len() != c.rosters.len() {
                return Err(breach("one row per roster"));
            }
            rows.iter().try_for_each(|r| valid(&r.report))
        }
        SweepKind::Captions => {
            let c: CaptionSweep = read_config(config)?;
            let cfg = rebase_train(&base, c.train);
            let data = load(&cfg)?;
            let rows = ablation::caption_count_ablation(&cfg, &data, &c.counts)?;
            write_csv(&out.join("sweep_captions.csv"), |b| ablation::write_caption_csv(b, &rows))?;
            write_json(&out.join("sweep_captions.json"), &rows)?;
            for r in &rows {
                println!("syn_captions {} zeroshot_acc={:.4}", r.syn_captions, r.report.zeroshot_acc);
            }
            rows.iter().try_for_each(|r| valid(&r.report))
        }
    }
}

fn load_pair(c: &PairConfig) -> Result<(Dataset, Option<Dataset>)> {
    let r = load(&c.reinforced)?;
    let p = if c.plain.data == c.reinforced.data {
        None
    } else {
        Some(load(&c.plain)?)
    };
    Ok((r, p))
}

fn read_pair(config: &Path) -> Result<PairConfig> {
    let base = config_dir(config);
    let mut c: PairConfig = read_config(config)?;
    c.reinforced = rebase_train(&base, c.reinforced);
    c.plain = rebase_train(&base, c.plain);
    Ok(c)
}

fn bench_overhead(config: &Path, out: &Path) -> Result<()> {
    let c = read_pair(config)?;
    create_out(out)?;
    let (rd, pd) = load_pair(&c)?;
    let defaults = OverheadSettings::default();
    let settings = OverheadSettings {
        timed_steps: c.timed_steps.unwrap_or(defaults.timed_steps),
        warmup_steps: c.warmup_steps.unwrap_or(defaults.warmup_steps),
    };
    let report = ablation::overhead_bench((&c.reinforced, &rd), (&c.plain, pd.as_ref().unwrap_or(&rd)), settings)?;
    write_csv(&out.join("overhead.csv"), |b| ablation::write_overhead_csv(b, &report))?;
    write_json(&out.join("overhead.json"), &json!({ "report": report, "max_ratio": c.max_ratio }))?;
    println!(
        "reinforced median {:.4} ms (MAD {:.4}), plain median {:.4} ms (MAD {:.4}), ratio {:.4}",
        report.reinforced.median_seconds * 1e3,
        report.reinforced.mad_seconds * 1e3,
        report.plain.median_seconds * 1e3,
        report.plain.mad_seconds * 1e3,
        report.ratio
    );
    if !(report.ratio.is_finite() && report.ratio > 0.0) {
        return Err(breach(format!("ratio {} is not a positive number", report.ratio)));
    }
    match c.max_ratio {
        Some(max) if report.ratio > max => Err(breach(format!("overhead ratio {:.4} exceeds {max}", report.ratio))),
        _ => Ok(()),
    }
}

fn curve(config: &Path, out: &Path) -> Result<()> {
    let c = read_pair(config)?;
    if c.checkpoints.is_empty() {
        bail!("curve needs at least one checkpoint");
    }
    create_out(out)?;
    let (rd, pd) = load_pair(&c)?;
    let report = ablation::efficiency_curve((&c.reinforced, &rd), (&c.plain, pd.as_ref().unwrap_or(&rd)), &c.checkpoints)?;
    write_csv(&out.join("curve.csv"), |b| ablation::write_curve_csv(b, &report))?;
    write_json(&out.join("curve.json"), &report)?;
    match report.ratio {
        Some(r) => println!("plain final {:.4}; reinforced matches it after {:.0} samples (ratio {r:.4})", report.target_acc, report.samples_to_match.unwrap_or(0.0)),
        None => println!("plain final {:.4}; reinforced never reached it", report.target_acc),
    }
    check_curve("reinforced", &report.reinforced)?;
    check_curve("plain", &report.plain)
}
