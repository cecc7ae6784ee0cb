//! Ablation protocols built on [`train_on`]: logit-scale sweeps, teacher
//! rosters, synthetic caption counts, sample-efficiency curves and per-step
//! overhead.
//!
//! Accuracy tables omit wall-clock columns so they are byte-stable under re-run.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::train::{train_on, CurvePoint, Dataset, TeacherChoice, TrainConfig, CSV_SCHEMA_VERSION};

/// Grid points closer than this to the best scale count toward the flatness spread.
pub const FLAT_WINDOW: f64 = 5.0;
/// Accuracy spread at or below which the neighbourhood of the best scale is called flat.
pub const FLAT_TOLERANCE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub setting: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub teacher_id: String,
    pub grid: Vec<SweepPoint>,
    pub best_setting: f64,
    pub best_is_interior: bool,
    pub monotone_increasing: bool,
    pub monotone_decreasing: bool,
    /// max − min accuracy over grid points within [`FLAT_WINDOW`] of the best.
    pub near_best_spread: f64,
    pub flat_near_best: bool,
}

impl SweepResult {
    /// Summarises `(setting, report)` pairs; ties go to the smaller setting.
    pub fn from_points(teacher_id: &str, grid: Vec<SweepPoint>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Precondition("sweep grid is empty".into()));
        }
        let acc: Vec<f64> = grid.iter().map(|p| p.report.zeroshot_acc).collect();
        let best = (0..acc.len()).fold(0, |b, i| if acc[i] > acc[b] { i } else { b });
        let best_setting = grid[best].setting;
        let near: Vec<f64> = grid
            .iter()
            .filter(|p| (p.setting - best_setting).abs() <= FLAT_WINDOW)
            .map(|p| p.report.zeroshot_acc)
            .collect();
        let spread = near.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - near.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self {
            teacher_id: teacher_id.to_string(),
            best_setting,
            best_is_interior: best > 0 && best + 1 < grid.len(),
            monotone_increasing: acc.windows(2).all(|w| w[1] >= w[0]),
            monotone_decreasing: acc.windows(2).all(|w| w[1] <= w[0]),
            near_best_spread: spread,
            flat_near_best: spread <= FLAT_TOLERANCE,
            grid,
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 3 {
        return Err(Error::Precondition(format!("logit-scale grid needs at least 3 points, got {}", grid.len())));
    }
    if !grid.windows(2).all(|w| w[1] > w[0]) {
        return Err(Error::Precondition("logit-scale grid must be strictly ascending".into()));
    }
    Ok(())
}

/// Single-teacher distillation at each scale in `grid`.
pub fn sweep_logit_scale(base: &TrainConfig, data: &Dataset, teacher_id: &str, grid: &[f64]) -> Result<SweepResult> {
    check_grid(grid)?;
    if base.lambda == 0.0 {
        return Err(Error::Config("a logit-scale sweep needs lambda > 0".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &s in grid {
        let mut cfg = base.clone();
        cfg.teachers = Some(vec![TeacherChoice {
            teacher_id: teacher_id.to_string(),
            logit_scale: Some(s),
        }]);
        points.push(SweepPoint {
            setting: s,
            report: train_on(&cfg, data)?.report,
        });
    }
    SweepResult::from_points(teacher_id, points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterRow {
    pub teachers: Vec<TeacherChoice>,
    pub report: EvalReport,
}

/// One student per roster, each teacher at the scale given in its choice.
pub fn compare_ensembles(base: &TrainConfig, data: &Dataset, rosters: &[Vec<TeacherChoice>]) -> Result<Vec<RosterRow>> {
    if rosters.is_empty() || rosters.iter().any(|r| r.is_empty()) {
        return Err(Error::Precondition("rosters must be nonempty".into()));
    }
    if base.lambda == 0.0 {
        return Err(Error::Config("an ensemble comparison needs lambda > 0".into()));
    }
    rosters
        .iter()
        .map(|r| {
            let mut cfg = base.clone();
            cfg.teachers = Some(r.clone());
            Ok(RosterRow {
                teachers: r.clone(),
                report: train_on(&cfg, data)?.report,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRow {
    pub syn_captions: usize,
    pub report: EvalReport,
}

/// Trains with the first `j` stored synthetic captions for each `j` in `counts`.
pub fn caption_count_ablation(base: &TrainConfig, data: &Dataset, counts: &[usize]) -> Result<Vec<CaptionRow>> {
    if counts.is_empty() {
        return Err(Error::Precondition("caption counts are empty".into()));
    }
    if let Some(&j) = counts.iter().find(|&&j| j > data.num_captions()) {
        return Err(Error::Config(format!(
            "{j} synthetic captions requested, shards store {}",
            data.num_captions()
        )));
    }
    counts
        .iter()
        .map(|&j| {
            let mut cfg = base.clone();
            cfg.syn_captions = j;
            Ok(CaptionRow {
                syn_captions: j,
                report: train_on(&cfg, data)?.report,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub reinforced: Vec<CurvePoint>,
    pub plain: Vec<CurvePoint>,
    /// Final accuracy of the plain run.
    pub target_acc: f64,
    /// Samples the reinforced run needed to reach `target_acc`, interpolated
    /// between checkpoints; `None` if it never did.
    pub samples_to_match: Option<f64>,
    /// `samples_to_match / plain samples`.
    pub ratio: Option<f64>,
}

/// Samples at which `curve` first reaches `target`, linear between checkpoints.
pub fn samples_to_reach(curve: &[CurvePoint], target: f64) -> Option<f64> {
    let i = curve.iter().position(|c| c.zeroshot_acc >= target)?;
    if i == 0 {
        return Some(curve[0].samples_seen as f64);
    }
    let (a, b) = (&curve[i - 1], &curve[i]);
    let t = (target - a.zeroshot_acc) / (b.zeroshot_acc - a.zeroshot_acc);
    Some(a.samples_seen as f64 + t * (b.samples_seen - a.samples_seen) as f64)
}

/// Accuracy-vs-samples curves for a reinforced and a plain run with equal budgets.
pub fn efficiency_curve(
    reinforced: (&TrainConfig, &Dataset),
    plain: (&TrainConfig, &Dataset),
    checkpoints: &[usize],
) -> Result<EfficiencyReport> {
    let (rc, pc) = (reinforced.0, plain.0);
    if rc.steps != pc.steps || rc.batch_size != pc.batch_size {
        return Err(Error::Precondition(format!(
            "budgets differ: {}x{} vs {}x{}",
            rc.steps, rc.batch_size, pc.steps, pc.batch_size
        )));
    }
    let mut checkpoints: Vec<usize> = checkpoints.iter().copied().filter(|&c| c <= rc.steps).collect();
    checkpoints.push(0);
    checkpoints.push(rc.steps);
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let run = |cfg: &TrainConfig, data: &Dataset| -> Result<Vec<CurvePoint>> {
        let mut cfg = cfg.clone();
        cfg.checkpoints = checkpoints.clone();
        Ok(train_on(&cfg, data)?.curve)
    };
    let r = run(rc, reinforced.1)?;
    let p = run(pc, plain.1)?;
    let last = p.last().ok_or_else(|| Error::Precondition("empty curve".into()))?;
    let target_acc = last.zeroshot_acc;
    let samples_to_match = samples_to_reach(&r, target_acc);
    Ok(EfficiencyReport {
        ratio: samples_to_match.map(|s| s / last.samples_seen as f64),
        target_acc,
        samples_to_match,
        reinforced: r,
        plain: p,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub steps: usize,
    pub median_seconds: f64,
    /// Median absolute deviation from the median.
    pub mad_seconds: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Precondition("no timing samples".into()));
        }
        let median_seconds = median(samples.to_vec());
        let mad_seconds = median(samples.iter().map(|s| (s - median_seconds).abs()).collect());
        Ok(Self {
            steps: samples.len(),
            median_seconds,
            mad_seconds,
        })
    }
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadSettings {
    pub timed_steps: usize,
    pub warmup_steps: usize,
}

impl Default for OverheadSettings {
    fn default() -> Self {
        Self {
            timed_steps: 500,
            warmup_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub reinforced: TimingStats,
    pub plain: TimingStats,
    /// Reinforced median over plain median.
    pub ratio: f64,
}

/// Median per-step wall-clock of two configurations.
///
/// Both runs are split into alternating blocks so slow drift in machine load
/// lands on both sides.
pub fn overhead_bench(
    reinforced: (&TrainConfig, &Dataset),
    plain: (&TrainConfig, &Dataset),
    settings: OverheadSettings,
) -> Result<OverheadReport> {
    if settings.timed_steps < 500 {
        return Err(Error::Precondition(format!("overhead needs >= 500 timed steps, got {}", settings.timed_steps)));
    }
    const BLOCKS: usize = 10;
    let per_block = settings.timed_steps.div_ceil(BLOCKS);
    let mut samples = [Vec::new(), Vec::new()];
    for _ in 0..BLOCKS {
        for (side, (cfg, data)) in [reinforced, plain].into_iter().enumerate() {
            let mut cfg = cfg.clone();
            cfg.steps = settings.warmup_steps + per_block;
            cfg.checkpoints.clear();
            cfg.eval.zero_shot_samples = cfg.eval.zero_shot_samples.min(16);
            cfg.eval.retrieval_pairs = cfg.eval.retrieval_pairs.min(16);
            let out = train_on(&cfg, data)?;
            samples[side].extend_from_slice(&out.step_seconds[settings.warmup_steps..]);
        }
    }
    let reinforced = TimingStats::from_samples(&samples[0])?;
    let plain = TimingStats::from_samples(&samples[1])?;
    Ok(OverheadReport {
        ratio: reinforced.median_seconds / plain.median_seconds,
        reinforced,
        plain,
    })
}

fn io_err(e: std::io::Error) -> Error {
    Error::io(Path::new("<csv>"), e)
}

fn header<W: Write>(out: &mut W, columns: &str) -> Result<()> {
    writeln!(out, "# schema_version={CSV_SCHEMA_VERSION}").map_err(io_err)?;
    writeln!(out, "{columns}").map_err(io_err)
}

const ACC_COLUMNS: &str = "zeroshot_acc,retrieval_t2i_at1,retrieval_i2t_at1,steps_seen,samples_seen";

fn acc_fields(r: &EvalReport) -> String {
    format!(
        "{:.6},{:.6},{:.6},{},{}",
        r.zeroshot_acc, r.retrieval_t2i_at1, r.retrieval_i2t_at1, r.steps_seen, r.samples_seen
    )
}

pub fn write_sweep_csv<W: Write>(mut out: W, sweep: &SweepResult) -> Result<()> {
    header(&mut out, &format!("teacher_id,logit_scale,{ACC_COLUMNS}"))?;
    for p in &sweep.grid {
        writeln!(out, "{},{},{}", sweep.teacher_id, p.setting, acc_fields(&p.report)).map_err(io_err)?;
    }
    Ok(())
}

pub fn write_roster_csv<W: Write>(mut out: W, rows: &[RosterRow]) -> Result<()> {
    header(&mut out, &format!("roster,{ACC_COLUMNS}"))?;
    for r in rows {
        let names: Vec<String> = r
            .teachers
            .iter()
            .map(|t| match t.logit_scale {
                Some(s) => format!("{}@{s}", t.teacher_id),
                None => t.teacher_id.clone(),
            })
            .collect();
        writeln!(out, "{},{}", names.join("+"), acc_fields(&r.report)).map_err(io_err)?;
    }
    Ok(())
}

pub fn write_caption_csv<W: Write>(mut out: W, rows: &[CaptionRow]) -> Result<()> {
    header(&mut out, &format!("syn_captions,{ACC_COLUMNS}"))?;
    for r in rows {
        writeln!(out, "{},{}", r.syn_captions, acc_fields(&r.report)).map_err(io_err)?;
    }
    Ok(())
}

pub fn write_curve_csv<W: Write>(mut out: W, report: &EfficiencyReport) -> Result<()> {
    header(&mut out, "run,step,samples_seen,zeroshot_acc")?;
    for (name, curve) in [("reinforced", &report.reinforced), ("plain", &report.plain)] {
        for c in curve {
            writeln!(out, "{name},{},{},{:.6}", c.step, c.samples_seen, c.zeroshot_acc).map_err(io_err)?;
        }
    }
    Ok(())
}

pub fn write_overhead_csv<W: Write>(mut out: W, report: &OverheadReport) -> Result<()> {
    header(&mut out, "run,steps,median_seconds,mad_seconds")?;
    for (name, t) in [("reinforced", &report.reinforced), ("plain", &report.plain)] {
        writeln!(out, "{name},{},{:.9},{:.9}", t.steps, t.median_seconds, t.mad_seconds).map_err(io_err)?;
    }
    Ok(())
}
