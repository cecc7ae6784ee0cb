//! Student training on reinforced shards or on plain world samples.
//!
//! Each epoch shuffles shard order with a seed derived from `(seed, epoch)`,
//! then walks records sequentially and drops the last partial batch. A
//! reinforced record contributes one stored augmentation per epoch; by default
//! augmentation `epoch mod A`, so stored teacher embeddings always match the
//! replayed view.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{draw_params, replay, AugmentationParams};
use crate::coordinator::Manifest;
use crate::encoders::{avgpool, StudentModel};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, EvalSet, EvalSettings};
use crate::loss::{combine_slots, slot_weights, total_loss_with_targets, backprop_normalize, TeacherEmbeddings, TeacherTargets};
use crate::seed;
use crate::shard;
use crate::tensor::{l2_normalize_rows, matmul, matmul_nt, LogitScale, Matrix};
use crate::world::{Split, World, WorldConfig};

pub const CSV_SCHEMA_VERSION: u32 = 1;
/// `ln ŝ` is clamped so the student scale stays in `[1, 100]`.
pub const STUDENT_SCALE_RANGE: (f64, f64) = (1.0, 100.0);
/// `e^2.996`, the usual initial value of a learned contrastive scale.
pub const DEFAULT_STUDENT_SCALE: f64 = 20.005_921;
const PSEUDO_SHARD: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Directory produced by the coordinator.
    Reinforced { dir: PathBuf },
    /// Train-split samples `0..num_samples` with fresh augmentations and no reinforcements.
    Unreinforced { world: WorldConfig, num_samples: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherChoice {
    pub teacher_id: String,
    /// Overrides the scale stored in the shard header.
    #[serde(default)]
    pub logit_scale: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    Cosine { warmup_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationOrder {
    /// Augmentation `epoch mod A`.
    Cycle,
    /// A seeded draw among the A stored augmentations per (epoch, sample).
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataSource,
    #[serde(default)]
    pub lambda: f64,
    /// Teachers to distill from, in order; `None` uses every teacher in the shards.
    #[serde(default)]
    pub teachers: Option<Vec<TeacherChoice>>,
    /// Synthetic caption slots used per sample (the first `j` stored ones).
    #[serde(default)]
    pub syn_captions: usize,
    #[serde(default = "one")]
    pub gt_weight: f64,
    #[serde(default = "one")]
    pub syn_weight: f64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_scale")]
    pub initial_student_scale: f64,
    #[serde(default = "yes")]
    pub train_student_scale: bool,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default = "default_order")]
    pub augmentation_order: AugmentationOrder,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Steps after which to record an accuracy checkpoint.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default = "one_usize")]
    pub loader_threads: usize,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_embed_dim() -> usize {
    16
}
fn default_scale() -> f64 {
    DEFAULT_STUDENT_SCALE
}
type LoadedShard = (shard::ShardHeader, Vec<Example>);

fn default_batch_size() -> usize {
    64
}
fn default_steps() -> usize {
    2000
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_schedule() -> Schedule {
    Schedule::Cosine { warmup_steps: 100 }
}
fn default_optimizer() -> Optimizer {
    Optimizer::Momentum { beta: 0.9 }
}
fn default_order() -> AugmentationOrder {
    AugmentationOrder::Cycle
}

impl TrainConfig {
    /// Defaults used by the CLI and the calibration runs.
    pub fn new(data: DataSource) -> Self {
        Self {
            data,
            lambda: 0.0,
            teachers: None,
            syn_captions: 0,
            gt_weight: 1.0,
            syn_weight: 1.0,
            embed_dim: default_embed_dim(),
            initial_student_scale: DEFAULT_STUDENT_SCALE,
            train_student_scale: true,
            batch_size: default_batch_size(),
            steps: default_steps(),
            learning_rate: default_learning_rate(),
            schedule: default_schedule(),
            optimizer: default_optimizer(),
            ema_decay: None,
            augmentation_order: AugmentationOrder::Cycle,
            seed: 0,
            eval: EvalSettings::default(),
            checkpoints: Vec::new(),
            loader_threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.gt_weight >= 0.0 && self.syn_weight >= 0.0) {
            return Err(Error::Config("caption weights must be >= 0".into()));
        }
        let (lo, hi) = STUDENT_SCALE_RANGE;
        if !(lo..=hi).contains(&self.initial_student_scale) {
            return Err(Error::Config(format!("initial_student_scale outside [{lo}, {hi}]")));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config("ema_decay must be in [0, 1)".into()));
            }
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config("momentum beta must be in [0, 1)".into()));
            }
        }
        if self.loader_threads == 0 {
            return Err(Error::Config("loader_threads must be >= 1".into()));
        }
        if let DataSource::Unreinforced { num_samples, .. } = self.data {
            if self.lambda > 0.0 || self.syn_captions > 0 {
                return Err(Error::ReinforcementsRequired);
            }
            if num_samples < self.batch_size {
                return Err(Error::Config("num_samples must be >= batch_size".into()));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine { warmup_steps } => {
                if step < warmup_steps {
                    self.learning_rate * (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = (self.steps - warmup_steps.min(self.steps)).max(1) as f64;
                    let t = (step - warmup_steps) as f64 / span;
                    0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}

/// One sample as the trainer sees it.
#[derive(Clone, Debug)]
struct Example {
    sample_id: u64,
    image: Vec<f32>,
    /// Ground-truth caption, then synthetic captions.
    captions: Vec<Vec<f64>>,
    augmentations: Vec<AugmentationParams>,
    /// `[teacher][augmentation]`, renormalized after BF16 decoding.
    teacher_img: Vec<Vec<Vec<f64>>>,
    /// `[teacher][caption slot]`.
    teacher_txt: Vec<Vec<Vec<f64>>>,
}

/// Loaded training data plus the world it came from.
pub struct Dataset {
    world: World,
    examples: Vec<Example>,
    /// Example indices per shard, in stored order.
    shards: Vec<Vec<usize>>,
    teacher_ids: Vec<String>,
    teacher_scales: Vec<f64>,
    num_captions: usize,
    reinforced: bool,
}

fn unit_f64(v: &[f32]) -> Vec<f64> {
    let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
    let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    x.into_iter().map(|a| a / n).collect()
}

impl Dataset {
    pub fn load(source: &DataSource, loader_threads: usize) -> Result<Self> {
        match source {
            DataSource::Reinforced { dir } => Self::load_reinforced(dir, loader_threads),
            DataSource::Unreinforced { world, num_samples } => {
                let world = World::build(world.clone())?;
                let examples: Vec<Example> = world
                    .draw_samples(Split::Train, *num_samples)?
                    .into_iter()
                    .map(|s| Example {
                        sample_id: s.sample_id,
                        image: s.image,
                        captions: vec![s.caption.iter().map(|&v| v as f64).collect()],
                        augmentations: Vec::new(),
                        teacher_img: Vec::new(),
                        teacher_txt: Vec::new(),
                    })
                    .collect();
                let shards = (0..examples.len()).collect::<Vec<_>>().chunks(PSEUDO_SHARD).map(|c| c.to_vec()).collect();
                Ok(Self {
                    world,
                    examples,
                    shards,
                    teacher_ids: Vec::new(),
                    teacher_scales: Vec::new(),
                    num_captions: 0,
                    reinforced: false,
                })
            }
        }
    }

    fn load_reinforced(dir: &Path, loader_threads: usize) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        if !manifest.all_done() {
            return Err(Error::Precondition(format!("{} has shards that are not done", dir.display())));
        }
        let world = World::build(manifest.config.world.clone())?;
        let paths: Vec<PathBuf> = manifest.shards.iter().map(|s| dir.join(&s.path)).collect();
        let expected: Vec<Option<u64>> = manifest.hashes();
        // Shards are decoded in parallel, but results are placed by index so the
        // loaded order never depends on thread count.
        let mut loaded: Vec<Option<Result<LoadedShard>>> = (0..paths.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let chunks: Vec<_> = loaded.chunks_mut(paths.len().div_ceil(loader_threads).max(1)).collect();
            let mut start = 0;
            for chunk in chunks {
                let base = start;
                start += chunk.len();
                let paths = &paths;
                let expected = &expected;
                s.spawn(move || {
                    for (off, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(load_shard(&paths[base + off], expected[base + off]));
                    }
                });
            }
        });
        let mut examples = Vec::new();
        let mut shards = Vec::new();
        let mut header0: Option<shard::ShardHeader> = None;
        for item in loaded {
            let (header, exs) = item.expect("every shard slot is filled")?;
            if let Some(h0) = &header0 {
                if h0.teachers != header.teachers || h0.num_augs != header.num_augs || h0.num_captions != header.num_captions {
                    return Err(Error::Corrupt(format!("shard {} disagrees with shard 0", header.shard_id)));
                }
            }
            if header.world_fingerprint != manifest.config.world_fingerprint {
                return Err(Error::Fingerprint {
                    what: format!("world in shard {}", header.shard_id),
                    expected: manifest.config.world_fingerprint,
                    found: header.world_fingerprint,
                });
            }
            let first = examples.len();
            shards.push((first..first + exs.len()).collect());
            examples.extend(exs);
            header0.get_or_insert(header);
        }
        let (teacher_ids, teacher_scales, num_captions) = match &header0 {
            Some(h) => (
                h.teachers.iter().map(|t| t.teacher_id.clone()).collect(),
                h.teachers.iter().map(|t| t.logit_scale).collect(),
                h.num_captions,
            ),
            None => (Vec::new(), Vec::new(), 0),
        };
        Ok(Self {
            world,
            examples,
            shards,
            teacher_ids,
            teacher_scales,
            num_captions,
            reinforced: true,
        })
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn teacher_ids(&self) -> &[String] {
        &self.teacher_ids
    }

    pub fn num_captions(&self) -> usize {
        self.num_captions
    }
}

fn load_shard(path: &Path, expected: Option<u64>) -> Result<(shard::ShardHeader, Vec<Example>)> {
    let reader = shard::read_shard(path)?;
    if let Some(h) = expected {
        if reader.content_hash() != h {
            return Err(Error::Fingerprint {
                what: format!("shard {}", path.display()),
                expected: h,
                found: reader.content_hash(),
            });
        }
    }
    let examples = reader
        .records()
        .map(|r| {
            let r = r?;
            Ok(Example {
                sample_id: r.sample_id,
                image: r.image,
                captions: std::iter::once(&r.gt_caption)
                    .chain(&r.syn_captions)
                    .map(|c| c.iter().map(|&v| v as f64).collect())
                    .collect(),
                augmentations: r.augmentations,
                teacher_img: r.teachers.iter().map(|t| t.image.iter().map(|e| unit_f64(e)).collect()).collect(),
                teacher_txt: r.teachers.iter().map(|t| t.text.iter().map(|e| unit_f64(e)).collect()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((reader.header().clone(), examples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub student_scale: f64,
    pub clip: f64,
    pub distill: f64,
    pub total: f64,
    /// `(image→text, text→image)` per teacher, caption-slot weighted.
    pub per_teacher: Vec<(f64, f64)>,
    pub grad_norm_img: f64,
    pub grad_norm_txt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub samples_seen: usize,
    pub zeroshot_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: StudentModel,
    pub report: EvalReport,
    pub steps: Vec<StepRecord>,
    pub curve: Vec<CurvePoint>,
    /// Per-step wall-clock seconds, excluding checkpoint evaluations.
    pub step_seconds: Vec<f64>,
}

/// Selected teacher indices into the dataset's roster and their scales.
fn resolve_teachers(cfg: &TrainConfig, data: &Dataset) -> Result<Vec<(usize, LogitScale)>> {
    if cfg.lambda == 0.0 {
        return Ok(Vec::new());
    }
    if !data.reinforced || data.teacher_ids.is_empty() {
        return Err(Error::ReinforcementsRequired);
    }
    let choices: Vec<TeacherChoice> = match &cfg.teachers {
        Some(c) => c.clone(),
        None => data
            .teacher_ids
            .iter()
            .map(|id| TeacherChoice {
                teacher_id: id.clone(),
                logit_scale: None,
            })
            .collect(),
    };
    if choices.is_empty() {
        return Err(Error::Config("teacher roster is empty".into()));
    }
    choices
        .iter()
        .map(|c| {
            let k = data
                .teacher_ids
                .iter()
                .position(|id| id == &c.teacher_id)
                .ok_or_else(|| Error::Config(format!("teacher {} not in shards", c.teacher_id)))?;
            Ok((k, LogitScale::new(c.logit_scale.unwrap_or(data.teacher_scales[k]))?))
        })
        .collect()
}

fn rows(v: Vec<Vec<f64>>) -> Result<Matrix> {
    Matrix::from_rows(&v)
}

/// Stacks borrowed rows of equal length `dim` into a matrix.
fn gather<'a>(src: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Result<Matrix> {
    let n = src.len();
    let mut data = Vec::with_capacity(n * dim);
    for r in src {
        if r.len() != dim {
            return Err(Error::shape(format!("row of {dim}"), format!("row of {}", r.len())));
        }
        data.extend_from_slice(r);
    }
    Matrix::from_vec(n, dim, data)
}

struct Params {
    model: StudentModel,
    log_scale: f64,
    vel_img: Matrix,
    vel_txt: Matrix,
    vel_scale: f64,
    ema: Option<(Matrix, Matrix)>,
}

/// Loads the data named in `cfg` and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.data, cfg.loader_threads)?;
    train_on(cfg, &data)
}

/// Trains on already-loaded data; `cfg.data` is ignored.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.syn_captions > 0 && !data.reinforced {
        return Err(Error::ReinforcementsRequired);
    }
    if cfg.syn_captions > data.num_captions {
        return Err(Error::Config(format!(
            "{} synthetic captions requested, shards store {}",
            cfg.syn_captions, data.num_captions
        )));
    }
    let teachers = resolve_teachers(cfg, data)?;
    let scales: Vec<LogitScale> = teachers.iter().map(|t| t.1).collect();
    let usable = data.shards.iter().map(|s| s.len()).sum::<usize>();
    if usable < cfg.batch_size {
        return Err(Error::Config(format!("{usable} samples cannot fill a batch of {}", cfg.batch_size)));
    }
    let world = &data.world;
    let side = world.config().image_side;
    let caption_dim = world.config().caption_dim;
    let eval_set = EvalSet::new(world, cfg.eval)?;

    let model = StudentModel::init(cfg.embed_dim, caption_dim, cfg.initial_student_scale, cfg.seed)?;
    let mut p = Params {
        log_scale: cfg.initial_student_scale.ln(),
        vel_img: Matrix::zeros(model.towers.w_img.rows(), model.towers.w_img.cols()),
        vel_txt: Matrix::zeros(model.towers.w_txt.rows(), model.towers.w_txt.cols()),
        vel_scale: 0.0,
        ema: cfg.ema_decay.map(|_| (model.towers.w_img.clone(), model.towers.w_txt.clone())),
        model,
    };
    let slots = 1 + cfg.syn_captions;
    let slot_cfg = crate::loss::LossConfig {
        lambda: cfg.lambda,
        student_scale: LogitScale::new(cfg.initial_student_scale)?,
        train_student_scale: cfg.train_student_scale,
        teacher_scales: scales.clone(),
        gt_weight: cfg.gt_weight,
        syn_weight: cfg.syn_weight,
    };
    let (weights, _) = slot_weights(slots, &slot_cfg);

    let mut steps = Vec::with_capacity(cfg.steps);
    let mut step_seconds = Vec::with_capacity(cfg.steps);
    let mut curve = Vec::new();
    let mut checkpoints: Vec<usize> = cfg.checkpoints.iter().copied().filter(|&c| c <= cfg.steps).collect();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut next_checkpoint = 0;
    if checkpoints.first() == Some(&0) {
        curve.push(CurvePoint {
            step: 0,
            samples_seen: 0,
            zeroshot_acc: eval_set.zero_shot_accuracy(&p.model)?,
        });
        next_checkpoint = 1;
    }

    let mut epoch = 0u64;
    let mut order = epoch_order(data, cfg.seed, epoch);
    let mut cursor = 0usize;
    for step in 0..cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            epoch += 1;
            order = epoch_order(data, cfg.seed, epoch);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch_size];
        cursor += cfg.batch_size;

        let started = Instant::now();
        let record = train_step(cfg, data, &teachers, &weights, &mut p, batch, epoch, step, side)?;
        step_seconds.push(started.elapsed().as_secs_f64());
        steps.push(record);

        if next_checkpoint < checkpoints.len() && checkpoints[next_checkpoint] == step + 1 {
            let view = current_model(&p);
            curve.push(CurvePoint {
                step: step + 1,
                samples_seen: (step + 1) * cfg.batch_size,
                zeroshot_acc: eval_set.zero_shot_accuracy(&view)?,
            });
            next_checkpoint += 1;
        }
    }

    let model = current_model(&p);
    let mut report = eval_set.evaluate(&model)?;
    report.steps_seen = cfg.steps;
    report.samples_seen = cfg.steps * cfg.batch_size;
    report.wall_clock_per_step = step_seconds.iter().sum::<f64>() / step_seconds.len() as f64;
    report.validate()?;
    Ok(TrainOutput {
        model,
        report,
        steps,
        curve,
        step_seconds,
    })
}

fn current_model(p: &Params) -> StudentModel {
    let mut m = p.model.clone();
    if let Some((wi, wt)) = &p.ema {
        m.towers.w_img = wi.clone();
        m.towers.w_txt = wt.clone();
    }
    m.logit_scale = p.log_scale.exp();
    m
}

fn epoch_order(data: &Dataset, seed: u64, epoch: u64) -> Vec<usize> {
    let mut shard_order: Vec<usize> = (0..data.shards.len()).collect();
    shard_order.shuffle(&mut seed::rng_for(&[seed, seed::tag("shard-order"), epoch]));
    shard_order.iter().flat_map(|&s| data.shards[s].iter().copied()).collect()
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    data: &Dataset,
    teachers: &[(usize, LogitScale)],
    weights: &[f64],
    p: &mut Params,
    batch: &[usize],
    epoch: u64,
    step: usize,
    side: usize,
) -> Result<StepRecord> {
    let examples: Vec<&Example> = batch.iter().map(|&i| &data.examples[i]).collect();
    // Image side: replay the stored augmentation (or draw a fresh one for plain data).
    let mut aug_index = Vec::with_capacity(examples.len());
    let mut pooled = Vec::with_capacity(examples.len());
    for ex in &examples {
        let (params, a) = if data.reinforced {
            let count = ex.augmentations.len() as u64;
            let a = match cfg.augmentation_order {
                AugmentationOrder::Cycle => epoch % count,
                AugmentationOrder::Sample => seed::derive(&[cfg.seed, seed::tag("aug-pick"), epoch, ex.sample_id]) % count,
            } as usize;
            (ex.augmentations[a], a)
        } else {
            let s = seed::derive(&[cfg.seed, seed::tag("plain-aug"), epoch, ex.sample_id]);
            (draw_params(s, side)?, 0)
        };
        aug_index.push(a);
        pooled.push(avgpool(&replay(&ex.image, &params)?.pixels)?);
    }
    let x_img = rows(pooled)?;
    let raw_img = matmul_nt(&x_img, &p.model.towers.w_img)?;
    let phi_img = l2_normalize_rows(&raw_img)?;
    let scale = LogitScale::new(p.log_scale.exp())?;

    let teacher_img: Vec<Matrix> = teachers
        .iter()
        .map(|&(k, _)| {
            let dim = examples[0].teacher_img[k][0].len();
            gather(examples.iter().zip(&aug_index).map(|(ex, &a)| ex.teacher_img[k][a].as_slice()), dim)
        })
        .collect::<Result<_>>()?;
    let teacher_scales: Vec<LogitScale> = teachers.iter().map(|t| t.1).collect();

    let mut reports = Vec::with_capacity(weights.len());
    let mut text_inputs = Vec::with_capacity(weights.len());
    for slot in 0..weights.len() {
        let x_txt = gather(examples.iter().map(|ex| ex.captions[slot].as_slice()), examples[0].captions[slot].len())?;
        let raw_txt = matmul_nt(&x_txt, &p.model.towers.w_txt)?;
        let phi_txt = l2_normalize_rows(&raw_txt)?;
        let targets = if teachers.is_empty() {
            None
        } else {
            let embs = teachers
                .iter()
                .zip(&teacher_img)
                .map(|(&(k, _), img)| {
                    Ok(TeacherEmbeddings {
                        img: img.clone(),
                        txt: gather(examples.iter().map(|ex| ex.teacher_txt[k][slot].as_slice()), img.cols())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(TeacherTargets::new(&embs, &teacher_scales)?)
        };
        reports.push(total_loss_with_targets(&phi_img, &phi_txt, scale, cfg.lambda, targets.as_ref())?);
        text_inputs.push((x_txt, raw_txt));
    }
    let report = combine_slots(reports, weights, Vec::new())?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }

    let g_raw_img = backprop_normalize(&raw_img, &report.grad_phi_img)?;
    let grad_w_img = matmul(&g_raw_img.transpose(), &x_img)?;
    let mut grad_w_txt = Matrix::zeros(p.model.towers.w_txt.rows(), p.model.towers.w_txt.cols());
    for ((x_txt, raw_txt), g) in text_inputs.iter().zip(&report.grad_phi_txt_slots) {
        let g_raw = backprop_normalize(raw_txt, g)?;
        grad_w_txt.add_scaled(&matmul(&g_raw.transpose(), x_txt)?, 1.0)?;
    }
    let grad_log_scale = if cfg.train_student_scale {
        report.grad_student_scale * scale.get()
    } else {
        0.0
    };

    let lr = cfg.learning_rate_at(step);
    let beta = match cfg.optimizer {
        Optimizer::Sgd => 0.0,
        Optimizer::Momentum { beta } => beta,
    };
    p.vel_img.scale_in_place(beta);
    p.vel_img.add_scaled(&grad_w_img, 1.0)?;
    p.vel_txt.scale_in_place(beta);
    p.vel_txt.add_scaled(&grad_w_txt, 1.0)?;
    p.vel_scale = beta * p.vel_scale + grad_log_scale;
    p.model.towers.w_img.add_scaled(&p.vel_img, -lr)?;
    p.model.towers.w_txt.add_scaled(&p.vel_txt, -lr)?;
    let (lo, hi) = STUDENT_SCALE_RANGE;
    p.log_scale = (p.log_scale - lr * p.vel_scale).clamp(lo.ln(), hi.ln());
    p.model.logit_scale = p.log_scale.exp();
    if let (Some(decay), Some((ei, et))) = (cfg.ema_decay, p.ema.as_mut()) {
        ei.scale_in_place(decay);
        ei.add_scaled(&p.model.towers.w_img, 1.0 - decay)?;
        et.scale_in_place(decay);
        et.add_scaled(&p.model.towers.w_txt, 1.0 - decay)?;
    }

    let k = teachers.len();
    let per_teacher = (0..k)
        .map(|t| {
            report.slots.iter().zip(weights).fold((0.0, 0.0), |acc, (r, &w)| {
                (acc.0 + w * r.per_teacher_terms[t].0, acc.1 + w * r.per_teacher_terms[t].1)
            })
        })
        .collect();
    Ok(StepRecord {
        step,
        learning_rate: lr,
        student_scale: scale.get(),
        clip: report.clip_loss,
        distill: report.distill_loss,
        total: report.total,
        per_teacher,
        grad_norm_img: grad_w_img.frobenius_norm(),
        grad_norm_txt: grad_w_txt.frobenius_norm(),
    })
}

/// Writes per-step records as CSV behind a `# schema_version=1` line.
pub fn write_steps_csv<W: Write>(mut out: W, steps: &[StepRecord]) -> Result<()> {
    writeln!(out, "# schema_version={CSV_SCHEMA_VERSION}").map_err(|e| Error::io(Path::new("<csv>"), e))?;
    let k = steps.first().map_or(0, |s| s.per_teacher.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["step", "learning_rate", "student_scale", "clip", "distill", "total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for t in 0..k {
        header.push(format!("teacher{t}_i2t"));
        header.push(format!("teacher{t}_t2i"));
    }
    header.push("grad_norm_img".into());
    header.push("grad_norm_txt".into());
    w.write_record(&header)?;
    for s in steps {
        let mut row = vec![
            s.step.to_string(),
            s.learning_rate.to_string(),
            s.student_scale.to_string(),
            s.clip.to_string(),
            s.distill.to_string(),
            s.total.to_string(),
        ];
        for (a, b) in &s.per_teacher {
            row.push(a.to_string());
            row.push(b.to_string());
        }
        row.push(s.grad_norm_img.to_string());
        row.push(s.grad_norm_txt.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
    Ok(())
}
