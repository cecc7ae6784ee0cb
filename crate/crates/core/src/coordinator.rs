//! Resumable, parallel generation of reinforced shards.
//!
//! The output directory holds:
//!
//! ```text
//! manifest.json          job state; the single source of truth
//! manifest.lock          advisory lock serializing manifest updates
//! teachers/<id>.model    frozen teacher checkpoints written by `plan`
//! leases/shard-NNNNN.lease
//! shard-NNNNN.drsh
//! ```
//!
//! Shard `s` covers train-split indices `[s·samples_per_shard, (s+1)·samples_per_shard)`
//! and is a pure function of the job config, so worker count, claim order, and
//! crash history never change its bytes.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{apply, draw_params, AugmentationParams};
use crate::container::{hex64, write_atomic};
use crate::encoders::{fit_teacher, CaptionerModel, CaptionerSpec, Embedder, TeacherModel, TeacherSpec};
use crate::error::{Error, Result};
use crate::seed;
use crate::shard::{self, ReinforcedRecord, ShardHeader, TeacherReinforcement, TeacherSlot};
use crate::tensor::LogitScale;
use crate::world::{Split, World, WorldConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub world: WorldConfig,
    pub teachers: Vec<TeacherSpec>,
    pub captioner: CaptionerSpec,
    #[serde(rename = "A")]
    pub num_augs: usize,
    #[serde(rename = "N")]
    pub num_captions: usize,
    pub samples_per_shard: usize,
    pub num_shards: usize,
    pub output_dir: PathBuf,
    #[serde(default = "one")]
    pub parallelism: usize,
}

fn one() -> usize {
    1
}

impl Default for GenerationJob {
    fn default() -> Self {
        let teacher = |id: &str, d: usize, scale: f64| TeacherSpec {
            teacher_id: id.into(),
            embed_dim: d,
            ridge_lambda: 1.0,
            logit_scale: LogitScale::new(scale).unwrap(),
            fit_samples: 2048,
        };
        Self {
            world: WorldConfig::default(),
            teachers: vec![teacher("teacher-a", 32, 70.0), teacher("teacher-b", 24, 60.0)],
            captioner: CaptionerSpec {
                captioner_id: "captioner".into(),
                backbone: "teacher-a".into(),
                caption_noise_sigma: 0.5,
                seed: 7,
            },
            num_augs: 2,
            num_captions: 5,
            samples_per_shard: 256,
            num_shards: 16,
            output_dir: PathBuf::from("reinforced"),
            parallelism: 1,
        }
    }
}

impl GenerationJob {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.teachers.is_empty() {
            return Err(Error::Config("at least one teacher is required".into()));
        }
        let mut ids = HashSet::new();
        for t in &self.teachers {
            if !ids.insert(&t.teacher_id) {
                return Err(Error::Config(format!("duplicate teacher id {}", t.teacher_id)));
            }
            if t.teacher_id.is_empty() || t.teacher_id.contains(['/', '\\']) {
                return Err(Error::Config(format!("bad teacher id {:?}", t.teacher_id)));
            }
        }
        if !ids.contains(&self.captioner.backbone) {
            return Err(Error::Config(format!("captioner backbone {} is not in the roster", self.captioner.backbone)));
        }
        if self.num_augs == 0 {
            return Err(Error::Config("A must be >= 1".into()));
        }
        if self.samples_per_shard == 0 {
            return Err(Error::Config("samples_per_shard must be >= 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub spec: TeacherSpec,
    #[serde(with = "hex64")]
    pub fingerprint: u64,
    pub zero_shot_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub world: WorldConfig,
    #[serde(with = "hex64")]
    pub world_fingerprint: u64,
    pub teachers: Vec<TeacherRecord>,
    pub captioner: CaptionerSpec,
    #[serde(rename = "A")]
    pub num_augs: usize,
    #[serde(rename = "N")]
    pub num_captions: usize,
    pub samples_per_shard: usize,
    pub num_shards: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardStatus {
    Pending,
    InProgress,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub path: String,
    pub record_count: u64,
    #[serde(with = "hex64::option")]
    pub content_hash: Option<u64>,
    pub status: ShardStatus,
    pub worker_id: Option<String>,
    /// Unix milliseconds.
    pub completed_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(with = "hex64")]
    pub dataset_id: u64,
    pub config: ConfigSnapshot,
    pub shards: Vec<ShardEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn all_done(&self) -> bool {
        self.shards.iter().all(|s| s.status == ShardStatus::Done)
    }

    pub fn hashes(&self) -> Vec<Option<u64>> {
        self.shards.iter().map(|s| s.content_hash).collect()
    }
}

pub fn shard_file_name(index: usize) -> String {
    format!("shard-{index:05}.drsh")
}

/// One CSV row per manifest entry behind a schema line.
pub fn write_manifest_csv<W: std::io::Write>(mut out: W, manifest: &Manifest) -> Result<()> {
    let io = |e| Error::io(Path::new("<csv>"), e);
    writeln!(out, "# schema_version={MANIFEST_SCHEMA_VERSION}").map_err(io)?;
    writeln!(out, "index,path,record_count,status,content_hash").map_err(io)?;
    for (i, s) in manifest.shards.iter().enumerate() {
        let status = match s.status {
            ShardStatus::Pending => "pending",
            ShardStatus::InProgress => "in_progress",
            ShardStatus::Done => "done",
        };
        let hash = s.content_hash.map(|h| format!("{h:016x}")).unwrap_or_default();
        writeln!(out, "{i},{},{},{status},{hash}", s.path, s.record_count).map_err(io)?;
    }
    Ok(())
}

fn teacher_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("teachers").join(format!("{id}.model"))
}

fn lease_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("leases").join(format!("shard-{index:05}.lease"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Paths (dotted, with `[i]` for array positions) where two JSON values differ.
fn json_diff(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => json_diff(u, v, &sub, out),
                    _ => out.push(sub),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                json_diff(u, v, &format!("{path}[{i}]"), out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

/// Everything derived from the job that generation needs.
struct Context {
    world: World,
    teachers: Vec<TeacherModel>,
    captioner: CaptionerModel,
    snapshot: ConfigSnapshot,
}

fn snapshot_for(job: &GenerationJob, teachers: &[TeacherModel]) -> ConfigSnapshot {
    ConfigSnapshot {
        world: job.world.clone(),
        world_fingerprint: job.world.fingerprint(),
        teachers: job
            .teachers
            .iter()
            .zip(teachers)
            .map(|(spec, t)| TeacherRecord {
                spec: spec.clone(),
                fingerprint: t.fingerprint(),
                zero_shot_accuracy: t.zero_shot_accuracy,
            })
            .collect(),
        captioner: job.captioner.clone(),
        num_augs: job.num_augs,
        num_captions: job.num_captions,
        samples_per_shard: job.samples_per_shard,
        num_shards: job.num_shards,
    }
}

fn lock_manifest(dir: &Path) -> Result<File> {
    let path = dir.join("manifest.lock");
    let f = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    f.lock().map_err(|e| Error::io(&path, e))?;
    Ok(f)
}

/// Fits the roster, writes teacher checkpoints, and writes an all-pending manifest.
///
/// Over an existing manifest this is a no-op when the config snapshot matches
/// and a [`Error::ManifestConflict`] otherwise.
pub fn plan(job: &GenerationJob) -> Result<Manifest> {
    job.validate()?;
    let world = World::build(job.world.clone())?;
    let teachers = job
        .teachers
        .iter()
        .map(|spec| fit_teacher(spec, &world))
        .collect::<Result<Vec<_>>>()?;
    let snapshot = snapshot_for(job, &teachers);

    let dir = &job.output_dir;
    create_dir(&dir.join("teachers"))?;
    create_dir(&dir.join("leases"))?;
    let _lock = lock_manifest(dir)?;
    if dir.join(MANIFEST_FILE).exists() {
        let existing = Manifest::load(dir)?;
        let mut diffs = Vec::new();
        json_diff(
            &serde_json::to_value(&existing.config)?,
            &serde_json::to_value(&snapshot)?,
            "",
            &mut diffs,
        );
        if !diffs.is_empty() {
            return Err(Error::ManifestConflict(diffs));
        }
        return Ok(existing);
    }
    for t in &teachers {
        t.save(&teacher_path(dir, &t.teacher_id))?;
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset_id: seed::hash64(&serde_json::to_vec(&snapshot)?),
        shards: (0..job.num_shards)
            .map(|i| ShardEntry {
                path: shard_file_name(i),
                record_count: job.samples_per_shard as u64,
                content_hash: None,
                status: ShardStatus::Pending,
                worker_id: None,
                completed_at: None,
            })
            .collect(),
        config: snapshot,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

fn load_context(job: &GenerationJob, manifest: &Manifest) -> Result<Context> {
    let world = World::build(job.world.clone())?;
    if job.world.fingerprint() != manifest.config.world_fingerprint {
        return Err(Error::Fingerprint {
            what: "world".into(),
            expected: manifest.config.world_fingerprint,
            found: job.world.fingerprint(),
        });
    }
    let mut teachers = Vec::new();
    for rec in &manifest.config.teachers {
        let t = TeacherModel::load(&teacher_path(&job.output_dir, &rec.spec.teacher_id))?;
        if t.fingerprint() != rec.fingerprint {
            return Err(Error::Fingerprint {
                what: format!("teacher {}", rec.spec.teacher_id),
                expected: rec.fingerprint,
                found: t.fingerprint(),
            });
        }
        teachers.push(t);
    }
    let backbone = teachers
        .iter()
        .find(|t| t.teacher_id == job.captioner.backbone)
        .cloned()
        .ok_or_else(|| Error::Config("captioner backbone missing".into()))?;
    let captioner = CaptionerModel::new(job.captioner.clone(), backbone, &world)?;
    Ok(Context {
        world,
        teachers,
        captioner,
        snapshot: manifest.config.clone(),
    })
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// Builds the header and records of shard `index`.
fn generate_records(ctx: &Context, index: usize) -> Result<(ShardHeader, Vec<ReinforcedRecord>)> {
    let cfg = &ctx.snapshot;
    let wcfg = ctx.world.config();
    let samples = ctx.world.draw_range(
        Split::Train,
        (index * cfg.samples_per_shard) as u64,
        cfg.samples_per_shard,
    )?;
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        let augmentations = (0..cfg.num_augs as u64)
            .map(|a| draw_params(AugmentationParams::seed_for(wcfg.seed, sample.sample_id, a), wcfg.image_side))
            .collect::<Result<Vec<_>>>()?;
        let views = augmentations
            .iter()
            .map(|p| apply(&sample.image, p).map(|v| v.pixels))
            .collect::<Result<Vec<_>>>()?;
        let syn_captions = ctx.captioner.generate(&sample.image, cfg.num_captions)?;
        let texts: Vec<Vec<f64>> = std::iter::once(&sample.caption)
            .chain(&syn_captions)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect();
        let teachers = ctx
            .teachers
            .iter()
            .map(|t| {
                Ok(TeacherReinforcement {
                    image: views.iter().map(|v| t.embed_image(v).map(to_f32)).collect::<Result<_>>()?,
                    text: texts.iter().map(|c| t.embed_text(c).map(to_f32)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(ReinforcedRecord {
            sample_id: sample.sample_id,
            image: sample.image,
            gt_caption: sample.caption,
            syn_captions,
            augmentations,
            teachers,
        });
    }
    let header = ShardHeader {
        shard_id: index as u64,
        record_count: records.len() as u64,
        image_side: wcfg.image_side,
        caption_dim: wcfg.caption_dim,
        num_augs: cfg.num_augs,
        num_captions: cfg.num_captions,
        teachers: ctx
            .teachers
            .iter()
            .map(|t| TeacherSlot {
                teacher_id: t.teacher_id.clone(),
                d_k: t.embed_dim(),
                logit_scale: t.logit_scale.get(),
            })
            .collect(),
        world_fingerprint: cfg.world_fingerprint,
    };
    Ok((header, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Lease {
    shard_index: usize,
    worker_id: String,
    run_id: String,
    pid: u32,
    /// Unix milliseconds.
    lease_expiry: u64,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Runs currently executing in this process.
fn live_runs() -> &'static Mutex<HashSet<String>> {
    static RUNS: OnceLock<Mutex<HashSet<String>>> = OnceLock::new();
    RUNS.get_or_init(Default::default)
}

struct RunGuard(String);

impl RunGuard {
    fn register() -> Self {
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let id = format!("{}-{:x}-{}", std::process::id(), nanos, COUNTER.fetch_add(1, Ordering::Relaxed));
        live_runs().lock().unwrap().insert(id.clone());
        Self(id)
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        live_runs().lock().unwrap().remove(&self.0);
    }
}

impl Lease {
    /// A lease binds until it expires or its owner is known to be gone.
    fn is_live(&self, now: u64) -> bool {
        if now >= self.lease_expiry {
            return false;
        }
        if self.pid == std::process::id() {
            return live_runs().lock().unwrap().contains(&self.run_id);
        }
        let proc_root = Path::new("/proc");
        !proc_root.is_dir() || proc_root.join(self.pid.to_string()).exists()
    }

    fn read(path: &Path) -> Option<Lease> {
        fs::read(path).ok().and_then(|b| serde_json::from_slice(&b).ok())
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Continue from a manifest that already has progress.
    pub resume: bool,
    pub lease_duration: Duration,
    /// Test hook: after this many shards complete in this run, the next claimed
    /// shard is abandoned mid-flight with its lease and `in_progress` state left behind.
    pub crash_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            resume: false,
            lease_duration: Duration::from_secs(600),
            crash_after: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShardEvent {
    pub index: usize,
    pub total: usize,
    pub hash: u64,
    /// Already done and re-verified rather than generated.
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub generated: Vec<usize>,
    pub skipped: Vec<usize>,
    /// Final content hash of every shard, in index order.
    pub hashes: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checked: usize,
    /// `(shard index, note)` for every entry downgraded to pending.
    pub downgraded: Vec<(usize, String)>,
}

fn verify_locked(dir: &Path, manifest: &mut Manifest) -> VerifyReport {
    let mut report = VerifyReport::default();
    for (i, entry) in manifest.shards.iter_mut().enumerate() {
        if entry.status != ShardStatus::Done {
            continue;
        }
        report.checked += 1;
        let note = match shard::file_hash(&dir.join(&entry.path)) {
            Err(_) if !dir.join(&entry.path).exists() => Some("missing file".to_string()),
            Err(e) => Some(format!("unreadable: {e}")),
            Ok(h) if Some(h) != entry.content_hash => Some(format!(
                "hash mismatch: manifest {:016x}, file {h:016x}",
                entry.content_hash.unwrap_or(0)
            )),
            Ok(_) => None,
        };
        if let Some(note) = note {
            entry.status = ShardStatus::Pending;
            entry.content_hash = None;
            entry.worker_id = None;
            entry.completed_at = None;
            report.downgraded.push((i, note));
        }
    }
    report
}

/// Re-hashes every done shard; mismatched or missing files go back to pending.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let _lock = lock_manifest(dir)?;
    let mut manifest = Manifest::load(dir)?;
    let report = verify_locked(dir, &mut manifest);
    if !report.downgraded.is_empty() {
        manifest.save(dir)?;
    }
    Ok(report)
}

enum Claim {
    Shard(usize),
    /// Nothing claimable now, but other workers hold live leases.
    Wait,
    Finished,
}

struct Shared<'a> {
    job: &'a GenerationJob,
    opts: &'a RunOptions,
    ctx: Context,
    run_id: String,
    abort: AtomicBool,
    completed: AtomicUsize,
    crash_armed: AtomicBool,
    generated: Mutex<Vec<usize>>,
    progress: &'a (dyn Fn(&ShardEvent) + Sync),
}

impl Shared<'_> {
    fn dir(&self) -> &Path {
        &self.job.output_dir
    }

    fn claim(&self, worker_id: &str, attempt: u64) -> Result<Claim> {
        let dir = self.dir();
        let _lock = lock_manifest(dir)?;
        let mut manifest = Manifest::load(dir)?;
        if manifest.all_done() {
            return Ok(Claim::Finished);
        }
        let now = now_ms();
        let mut candidates: Vec<usize> = Vec::new();
        let mut waiting = false;
        for (i, e) in manifest.shards.iter().enumerate() {
            match e.status {
                ShardStatus::Done => {}
                ShardStatus::Pending | ShardStatus::InProgress => {
                    let held = Lease::read(&lease_path(dir, i)).is_some_and(|l| l.is_live(now));
                    if held {
                        waiting = true;
                    } else {
                        candidates.push(i);
                    }
                }
            }
        }
        if candidates.is_empty() {
            return Ok(if waiting { Claim::Wait } else { Claim::Finished });
        }
        let mut rng = seed::rng_for(&[seed::tag(worker_id), attempt]);
        candidates.shuffle(&mut rng);
        let index = candidates[0];
        let lease = Lease {
            shard_index: index,
            worker_id: worker_id.to_string(),
            run_id: self.run_id.clone(),
            pid: std::process::id(),
            lease_expiry: now + self.opts.lease_duration.as_millis() as u64,
        };
        write_atomic(&lease_path(dir, index), &serde_json::to_vec(&lease)?)?;
        let entry = &mut manifest.shards[index];
        entry.status = ShardStatus::InProgress;
        entry.worker_id = Some(worker_id.to_string());
        manifest.save(dir)?;
        Ok(Claim::Shard(index))
    }

    fn release(&self, index: usize) -> Result<()> {
        let dir = self.dir();
        let _lock = lock_manifest(dir)?;
        let mut manifest = Manifest::load(dir)?;
        let entry = &mut manifest.shards[index];
        entry.status = ShardStatus::Pending;
        entry.worker_id = None;
        manifest.save(dir)?;
        let _ = fs::remove_file(lease_path(dir, index));
        Ok(())
    }

    fn complete(&self, index: usize, worker_id: &str, hash: u64) -> Result<()> {
        let dir = self.dir();
        let _lock = lock_manifest(dir)?;
        let mut manifest = Manifest::load(dir)?;
        let entry = &mut manifest.shards[index];
        if entry.status == ShardStatus::Done && entry.content_hash != Some(hash) {
            return Err(Error::Corrupt(format!(
                "shard {index} already done with hash {:016x}, regenerated as {hash:016x}",
                entry.content_hash.unwrap_or(0)
            )));
        }
        entry.status = ShardStatus::Done;
        entry.content_hash = Some(hash);
        entry.worker_id = Some(worker_id.to_string());
        entry.completed_at = Some(now_ms());
        manifest.save(dir)?;
        let _ = fs::remove_file(lease_path(dir, index));
        Ok(())
    }

    fn produce(&self, index: usize) -> Result<u64> {
        let (header, records) = generate_records(&self.ctx, index)?;
        let path = self.dir().join(shard_file_name(index));
        let hash = shard::write_shard(&path, &header, &records)?;
        let reader = shard::read_shard(&path)?;
        reader.read_all()?;
        if reader.content_hash() != hash {
            return Err(Error::Corrupt(format!("shard {index} changed between write and verify")));
        }
        Ok(hash)
    }

    fn worker(&self, worker_index: usize) -> Result<()> {
        let worker_id = format!("{}/w{worker_index}", self.run_id);
        let mut attempt = 0u64;
        while !self.abort.load(Ordering::SeqCst) {
            attempt += 1;
            let index = match self.claim(&worker_id, attempt)? {
                Claim::Finished => return Ok(()),
                Claim::Wait => {
                    std::thread::sleep(Duration::from_millis(50));
                    continue;
                }
                Claim::Shard(i) => i,
            };
            if let Some(limit) = self.opts.crash_after {
                if self.completed.load(Ordering::SeqCst) >= limit && self.crash_armed.swap(false, Ordering::SeqCst) {
                    self.abort.store(true, Ordering::SeqCst);
                    return Err(Error::InjectedCrash { shard: index });
                }
            }
            match self.produce(index) {
                Ok(hash) => {
                    self.complete(index, &worker_id, hash)?;
                    self.completed.fetch_add(1, Ordering::SeqCst);
                    self.generated.lock().unwrap().push(index);
                    (self.progress)(&ShardEvent {
                        index,
                        total: self.job.num_shards,
                        hash,
                        skipped: false,
                    });
                }
                Err(e) => {
                    self.abort.store(true, Ordering::SeqCst);
                    let _ = self.release(index);
                    return Err(e);
                }
            }
        }
        Ok(())
    }
}

/// Plans (idempotently) and then generates every pending shard with
/// `job.parallelism` worker threads.
pub fn run(job: &GenerationJob, opts: &RunOptions, progress: &(dyn Fn(&ShardEvent) + Sync)) -> Result<RunReport> {
    let manifest = plan(job)?;
    let dir = &job.output_dir;
    let has_progress = manifest.shards.iter().any(|s| s.status != ShardStatus::Pending);
    if has_progress && !opts.resume {
        return Err(Error::Precondition(format!(
            "{} already has progress; rerun with resume",
            dir.join(MANIFEST_FILE).display()
        )));
    }
    let ctx = load_context(job, &manifest)?;

    let mut skipped = Vec::new();
    {
        let _lock = lock_manifest(dir)?;
        let mut m = Manifest::load(dir)?;
        let report = verify_locked(dir, &mut m);
        if !report.downgraded.is_empty() {
            m.save(dir)?;
        }
        for (i, e) in m.shards.iter().enumerate() {
            if let (ShardStatus::Done, Some(hash)) = (e.status, e.content_hash) {
                skipped.push(i);
                progress(&ShardEvent {
                    index: i,
                    total: job.num_shards,
                    hash,
                    skipped: true,
                });
            }
        }
    }

    let guard = RunGuard::register();
    let shared = Shared {
        job,
        opts,
        ctx,
        run_id: guard.0.clone(),
        abort: AtomicBool::new(false),
        completed: AtomicUsize::new(0),
        crash_armed: AtomicBool::new(true),
        generated: Mutex::new(Vec::new()),
        progress,
    };
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..job.parallelism)
            .map(|w| {
                let shared = &shared;
                s.spawn(move || shared.worker(w))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    // An injected crash outranks the errors it may cause in sibling workers.
    if let Some(crash) = results.iter().position(|r| matches!(r, Err(Error::InjectedCrash { .. }))) {
        return Err(results.into_iter().nth(crash).unwrap().unwrap_err());
    }
    results.into_iter().collect::<Result<Vec<()>>>()?;
    drop(guard);

    let final_manifest = Manifest::load(dir)?;
    if !final_manifest.all_done() {
        return Err(Error::Precondition("run finished with shards still pending".into()));
    }
    let mut generated = shared.generated.into_inner().unwrap();
    generated.sort_unstable();
    Ok(RunReport {
        generated,
        skipped,
        hashes: final_manifest.shards.iter().map(|s| s.content_hash.unwrap_or(0)).collect(),
    })
}
