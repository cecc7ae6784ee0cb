//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Accuracy values are pinned from calibration runs of the exact configs built
//! here (default world, seed 0). They are deterministic on one platform; the
//! tolerance absorbs libm differences between platforms.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use dr_forge_core::augment::{apply, draw_params, replay, AugmentationParams, RATIO_RANGE, SCALE_RANGE};
use dr_forge_core::coordinator::GenerationJob;
use dr_forge_core::loss::{clip_loss, distill_loss, grad_check, GRAD_CHECK_EPSILON, total_loss, BatchEmbeddings, LossConfig, TeacherEmbeddings};
use dr_forge_core::shard::{encode_shard, inspect, ShardHeader, ShardReader};
use dr_forge_core::train::{DataSource, TrainConfig};
use dr_forge_core::tensor::{bf16_round_trip, l2_normalize_rows, LogitScale, Matrix};

const GRAD_TOL: f64 = 1e-5;
const ZERO_TOL: f64 = 1e-12;
const ALGEBRA_TOL: f64 = 1e-9;
const ACC_TOL: f64 = 0.01;

const PINNED_KD_ACC: f64 = 0.8457;
const PINNED_PLAIN_ACC: f64 = 0.5806;
const PINNED_KD_MARGIN: f64 = PINNED_KD_ACC - PINNED_PLAIN_ACC;
const MAX_SAMPLE_RATIO: f64 = 0.5;
const PINNED_SAMPLE_RATIO: f64 = 0.1904;
const SWEEP_GRID: [f64; 5] = [10.0, 40.0, 70.0, 100.0, 130.0];
const PINNED_SWEEP_ACC: [f64; 5] = [0.8110, 0.8135, 0.8140, 0.8140, 0.8130];
const PINNED_SWEEP_BEST: f64 = 70.0;
const CAPTION_COUNTS: [usize; 4] = [0, 1, 2, 5];
const PINNED_CAPTION_ACC: [f64; 4] = [0.5806, 0.6182, 0.6196, 0.6216];
const MAX_OVERHEAD_RATIO: f64 = 1.2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn forge(args: &[&str], cwd: &Path) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_dr-forge"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("dr-forge {} exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn scale(s: f64) -> LogitScale {
    LogitScale::new(s).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Matrix {
    let m = Matrix::from_vec(b, d, (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    l2_normalize_rows(&m).unwrap()
}

fn loss_cfg(lambda: f64, student: f64, teachers: &[f64]) -> LossConfig {
    LossConfig {
        lambda,
        student_scale: scale(student),
        train_student_scale: true,
        teacher_scales: teachers.iter().map(|&s| scale(s)).collect(),
        gt_weight: 1.0,
        syn_weight: 1.0,
    }
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in [2, 4, 8] {
        for d in [4, 16] {
            for k in [1, 2] {
                for lambda in [0.0, 0.3, 1.0] {
                    let teachers: Vec<TeacherEmbeddings> = (0..k)
                        .map(|t| {
                            let dk = d + 4 * t;
                            TeacherEmbeddings {
                                img: unit_rows(&mut rng, b, dk),
                                txt: unit_rows(&mut rng, b, dk),
                            }
                        })
                        .collect();
                    let batch = BatchEmbeddings {
                        phi_img: unit_rows(&mut rng, b, d),
                        phi_txt: unit_rows(&mut rng, b, d),
                        teachers,
                    };
                    let cfg = loss_cfg(lambda, rng.random_range(1.0..100.0), &[70.0, 60.0][..k]);
                    match grad_check(&batch, &cfg, GRAD_CHECK_EPSILON) {
                        Ok(e) => worst = worst.max(e),
                        Err(e) => return outcome(false, format!("b={b} d={d} K={k} λ={lambda}: {e}")),
                    }
                    cases += 1;
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < GRAD_TOL && secs < 10.0,
        format!("max relative error {worst:.2e} over {cases} cases (< {GRAD_TOL:e}), {secs:.2} s (< 10 s)"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, d) = (8, 12);
    let img = unit_rows(&mut rng, b, d);
    let txt = unit_rows(&mut rng, b, d);
    let same = BatchEmbeddings {
        phi_img: img.clone(),
        phi_txt: txt.clone(),
        teachers: vec![TeacherEmbeddings { img, txt }],
    };
    let self_distill = distill_loss(&same, &loss_cfg(1.0, 55.0, &[55.0])).unwrap().term.loss;

    let t1 = TeacherEmbeddings {
        img: unit_rows(&mut rng, b, 16),
        txt: unit_rows(&mut rng, b, 16),
    };
    let t2 = TeacherEmbeddings {
        img: unit_rows(&mut rng, b, 24),
        txt: unit_rows(&mut rng, b, 24),
    };
    let student = (unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d));
    let batch = |teachers: Vec<TeacherEmbeddings>| BatchEmbeddings {
        phi_img: student.0.clone(),
        phi_txt: student.1.clone(),
        teachers,
    };
    let ab = total_loss(&batch(vec![t1.clone(), t2.clone()]), &loss_cfg(0.6, 30.0, &[70.0, 60.0])).unwrap();
    let ba = total_loss(&batch(vec![t2, t1.clone()]), &loss_cfg(0.6, 30.0, &[60.0, 70.0])).unwrap();
    let single = total_loss(&batch(vec![t1.clone()]), &loss_cfg(0.6, 30.0, &[70.0])).unwrap();
    let double = total_loss(&batch(vec![t1.clone(), t1]), &loss_cfg(0.6, 30.0, &[70.0, 70.0])).unwrap();
    let max_abs = |a: &Matrix, b: &Matrix| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let perm = (ab.total - ba.total)
        .abs()
        .max(max_abs(&ab.grad_phi_img, &ba.grad_phi_img))
        .max(max_abs(&ab.grad_phi_txt, &ba.grad_phi_txt));
    let dup = (single.total - double.total)
        .abs()
        .max(max_abs(&single.grad_phi_img, &double.grad_phi_img))
        .max(max_abs(&single.grad_phi_txt, &double.grad_phi_txt));

    let one = BatchEmbeddings {
        phi_img: unit_rows(&mut rng, 1, d),
        phi_txt: unit_rows(&mut rng, 1, d),
        teachers: vec![TeacherEmbeddings {
            img: unit_rows(&mut rng, 1, 16),
            txt: unit_rows(&mut rng, 1, 16),
        }],
    };
    let clip1 = clip_loss(&one.phi_img, &one.phi_txt, scale(20.0)).unwrap().loss;
    let distill1 = distill_loss(&one, &loss_cfg(1.0, 20.0, &[70.0])).unwrap().term.loss;

    let pass = self_distill.abs() <= ZERO_TOL && perm <= ALGEBRA_TOL && dup <= ALGEBRA_TOL && clip1 == 0.0 && distill1 == 0.0;
    outcome(
        pass,
        format!("self-distill {self_distill:.1e}, permutation {perm:.1e}, duplication {dup:.1e}, b=1 clip {clip1} distill {distill1}"),
    )
}

fn criterion_3(default_data: &Path) -> Outcome {
    let started = Instant::now();
    let source = ShardReader::from_bytes(fs::read(default_data.join("shard-00000.drsh")).unwrap()).unwrap();
    let records: Vec<_> = (0..3).map(|i| source.record(i).unwrap()).collect();
    let header = ShardHeader {
        record_count: 3,
        ..source.header().clone()
    };
    let bytes = encode_shard(&header, &records).unwrap();
    let back = ShardReader::from_bytes(bytes.clone()).unwrap().read_all().unwrap();
    let raw_exact = back.iter().zip(&records).all(|(a, b)| {
        a.sample_id == b.sample_id
            && a.image == b.image
            && a.gt_caption == b.gt_caption
            && a.syn_captions == b.syn_captions
            && a.augmentations == b.augmentations
    });
    let quantized = |v: &[f32]| bf16_round_trip(&v.iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap();
    let bf16_idempotent = back.iter().zip(&records).all(|(a, b)| {
        a.teachers.iter().zip(&b.teachers).all(|(ta, tb)| {
            ta.image.iter().chain(&ta.text).zip(tb.image.iter().chain(&tb.text)).all(|(x, y)| *x == quantized(y) && *x == quantized(x))
        })
    }) && encode_shard(&header, &back).unwrap() == bytes;

    let mut undetected = Vec::new();
    for pos in 0..bytes.len() {
        for mask in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[pos] ^= mask;
            let detected = match ShardReader::from_bytes(bad) {
                Err(_) => true,
                Ok(r) => r.read_all().is_err(),
            };
            if !detected {
                undetected.push((pos, mask));
            }
        }
    }

    let summary = inspect(&default_data.join("shard-00000.drsh")).unwrap();
    let (a, n, k) = (summary.header.num_augs, summary.header.num_captions, summary.header.teachers.len());
    let secs = started.elapsed().as_secs_f64();
    outcome(
        raw_exact && bf16_idempotent && undetected.is_empty() && (a, n, k) == (2, 5, 2) && secs < 30.0,
        format!(
            "round trip raw={raw_exact} bf16={bf16_idempotent}; {} of {} single-byte flips undetected; inspect A={a} N={n} K={k}; {secs:.2} s (< 30 s)",
            undetected.len(),
            bytes.len() * 3
        ),
    )
}

fn default_job(output_dir: &str, num_shards: usize) -> Value {
    let mut job = serde_json::to_value(GenerationJob {
        num_shards,
        output_dir: PathBuf::from(output_dir),
        ..GenerationJob::default()
    })
    .unwrap();
    job["parallelism"] = json!(1);
    job
}

fn hashes(dir: &Path) -> Vec<String> {
    read_json(&dir.join("reinforce_summary.json"))["hashes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h.as_str().unwrap().to_string())
        .collect()
}

fn criterion_4(work: &Path) -> Outcome {
    let started = Instant::now();
    let run = || -> Result<Outcome, String> {
        for name in ["p1", "p8", "crash"] {
            write_json(&work.join(format!("{name}.json")), &default_job(name, 8));
        }
        forge(&["reinforce", "--config", "p1.json", "--parallelism", "1"], work)?;
        forge(&["reinforce", "--config", "p8.json", "--parallelism", "8"], work)?;
        if forge(&["reinforce", "--config", "crash.json", "--parallelism", "4", "--crash-after", "3"], work).is_ok() {
            return Ok(outcome(false, "injected crash did not stop the run"));
        }
        let resumed = forge(&["reinforce", "--config", "crash.json", "--parallelism", "4", "--resume"], work)?;
        let (h1, h8, hc) = (hashes(&work.join("p1")), hashes(&work.join("p8")), hashes(&work.join("crash")));
        let secs = started.elapsed().as_secs_f64();
        Ok(outcome(
            h1 == h8 && h1 == hc && h1.len() == 8 && secs < 120.0,
            format!(
                "8 shards x 256: P=1 vs P=8 equal={}, crash+resume equal={} ({} shards regenerated); {secs:.1} s (< 120 s)",
                h1 == h8,
                h1 == hc,
                resumed.lines().count()
            ),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e))
}

fn criterion_5() -> Outcome {
    let side = 32;
    let n = 100_000u64;
    let mut violations = 0;
    for seed in 0..n {
        let p = draw_params(seed, side).unwrap();
        let area = p.area_fraction(side);
        let ratio = p.crop_w as f64 / p.crop_h as f64;
        let full = p.crop_w as usize == side && p.crop_h as usize == side;
        let in_range = (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&area) && (RATIO_RANGE.0..=RATIO_RANGE.1).contains(&ratio);
        if !(in_range || full) || p.validate(side).is_err() {
            violations += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image: Vec<f32> = (0..side * side).map(|_| rng.random::<f32>()).collect();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let replay_identical = (0..200).all(|s| {
        let p = draw_params(s, side).unwrap();
        bits(&replay(&image, &p).unwrap().pixels) == bits(&apply(&image, &p).unwrap().pixels)
            && bits(&replay(&image, &p).unwrap().pixels) == bits(&replay(&image, &p).unwrap().pixels)
    });
    let identity_noop = bits(&apply(&image, &AugmentationParams::identity(side)).unwrap().pixels) == bits(&image);
    outcome(
        violations == 0 && replay_identical && identity_noop,
        format!("{violations} of {n} draws outside scale [0.08, 1.0] / ratio [0.75, 1.33]; replay identical={replay_identical}; identity no-op={identity_noop}"),
    )
}

/// Train config for the default calibration: 2000 steps, b = 64, seed 0.
fn train_cfg(lambda: f64) -> Value {
    let cfg = TrainConfig {
        lambda,
        ..TrainConfig::new(DataSource::Reinforced { dir: "default".into() })
    };
    serde_json::to_value(cfg).unwrap()
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= ACC_TOL
}

fn timed(limit: Duration, f: impl FnOnce() -> Result<Outcome, String>) -> Outcome {
    let started = Instant::now();
    let mut o = f().unwrap_or_else(|e| outcome(false, e));
    let secs = started.elapsed().as_secs_f64();
    o.pass &= secs < limit.as_secs_f64();
    o.detail = format!("{}; {secs:.1} s (< {} s)", o.detail, limit.as_secs());
    o
}

fn criterion_6(work: &Path) -> Outcome {
    timed(Duration::from_secs(300), || {
        write_json(&work.join("kd.json"), &train_cfg(1.0));
        write_json(&work.join("plain.json"), &train_cfg(0.0));
        forge(&["train", "--config", "kd.json", "--out", "run-kd"], work)?;
        forge(&["train", "--config", "plain.json", "--out", "run-plain"], work)?;
        let acc = |run: &str| read_json(&work.join(run).join("summary.json"))["report"]["zeroshot_acc"].as_f64().unwrap();
        let (kd, plain) = (acc("run-kd"), acc("run-plain"));
        let margin = kd - plain;
        Ok(outcome(
            margin > 0.0 && near(kd, PINNED_KD_ACC) && near(plain, PINNED_PLAIN_ACC) && margin >= PINNED_KD_MARGIN - 2.0 * ACC_TOL,
            format!(
                "λ=1 two-teacher {kd:.4} (pinned {PINNED_KD_ACC}), λ=0 {plain:.4} (pinned {PINNED_PLAIN_ACC}), margin {margin:.4} (pinned {PINNED_KD_MARGIN:.4})"
            ),
        ))
    })
}

fn criterion_7(work: &Path) -> Outcome {
    timed(Duration::from_secs(600), || {
        let checkpoints: Vec<usize> = (1..=20).map(|i| i * 100).collect();
        write_json(
            &work.join("curve.json"),
            &json!({"reinforced": train_cfg(1.0), "plain": train_cfg(0.0), "checkpoints": checkpoints}),
        );
        forge(&["curve", "--config", "curve.json", "--out", "curve"], work)?;
        let r = read_json(&work.join("curve/curve.json"));
        let ratio = r["ratio"].as_f64();
        Ok(match ratio {
            Some(x) => outcome(
                x <= MAX_SAMPLE_RATIO && near(x, PINNED_SAMPLE_RATIO),
                format!(
                    "reinforced reaches plain final {:.4} after {:.0} samples, ratio {x:.4} (<= {MAX_SAMPLE_RATIO}, pinned {PINNED_SAMPLE_RATIO})",
                    r["target_acc"].as_f64().unwrap(),
                    r["samples_to_match"].as_f64().unwrap()
                ),
            ),
            None => outcome(false, "reinforced run never reached the plain final accuracy"),
        })
    })
}

fn criterion_8(work: &Path) -> Outcome {
    timed(Duration::from_secs(900), || {
        write_json(
            &work.join("sweep.json"),
            &json!({"train": train_cfg(1.0), "teacher_id": "teacher-a", "grid": SWEEP_GRID}),
        );
        forge(&["sweep", "logit-scale", "--config", "sweep.json", "--out", "sweep"], work)?;
        let r = read_json(&work.join("sweep/sweep_logit_scale.json"));
        let accs: Vec<f64> = r["grid"].as_array().unwrap().iter().map(|p| p["report"]["zeroshot_acc"].as_f64().unwrap()).collect();
        let best = r["best_setting"].as_f64().unwrap();
        let interior = r["best_is_interior"].as_bool().unwrap();
        let pinned = accs.len() == 5 && accs.iter().zip(PINNED_SWEEP_ACC).all(|(&a, p)| near(a, p));
        let table: Vec<String> = SWEEP_GRID.iter().zip(&accs).map(|(s, a)| format!("{s}:{a:.4}")).collect();
        Ok(outcome(
            interior && pinned,
            format!("teacher-a grid {} best {best} (pinned {PINNED_SWEEP_BEST}) interior={interior}", table.join(" ")),
        ))
    })
}

fn criterion_9(work: &Path) -> Outcome {
    timed(Duration::from_secs(900), || {
        write_json(&work.join("captions.json"), &json!({"train": train_cfg(0.0), "counts": CAPTION_COUNTS}));
        forge(&["sweep", "captions", "--config", "captions.json", "--out", "captions"], work)?;
        let rows = read_json(&work.join("captions/sweep_captions.json"));
        let acc: Vec<f64> = rows.as_array().unwrap().iter().map(|r| r["report"]["zeroshot_acc"].as_f64().unwrap()).collect();
        let late_gain = acc[3] - acc[2];
        let early_gain = acc[1] - acc[0];
        let pinned = acc.iter().zip(PINNED_CAPTION_ACC).all(|(&a, p)| near(a, p));
        let table: Vec<String> = CAPTION_COUNTS.iter().zip(&acc).map(|(j, a)| format!("j={j}:{a:.4}")).collect();
        Ok(outcome(
            late_gain < early_gain && pinned,
            format!("{}; gain 2→5 {late_gain:.4} < gain 0→1 {early_gain:.4}", table.join(" ")),
        ))
    })
}

fn criterion_10(work: &Path) -> Outcome {
    let run = || -> Result<Outcome, String> {
        write_json(
            &work.join("overhead.json"),
            &json!({"reinforced": train_cfg(1.0), "plain": train_cfg(0.0), "timed_steps": 500, "warmup_steps": 50}),
        );
        forge(&["bench", "overhead", "--config", "overhead.json", "--out", "overhead"], work)?;
        let r = &read_json(&work.join("overhead/overhead.json"))["report"];
        let ratio = r["ratio"].as_f64().unwrap();
        let ms = |side: &str, field: &str| r[side][field].as_f64().unwrap() * 1e3;
        Ok(outcome(
            ratio <= MAX_OVERHEAD_RATIO,
            format!(
                "median step {:.3} ms (MAD {:.3}) vs plain {:.3} ms (MAD {:.3}) over {} steps, ratio {ratio:.3} (<= {MAX_OVERHEAD_RATIO})",
                ms("reinforced", "median_seconds"),
                ms("reinforced", "mad_seconds"),
                ms("plain", "median_seconds"),
                ms("plain", "mad_seconds"),
                r["reinforced"]["steps"]
            ),
        ))
    };
    run().unwrap_or_else(|e| outcome(false, e))
}

fn main() -> ExitCode {
    // libtest-style filters are ignored; `--list` reports a single entry.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let work = tempfile::tempdir().expect("tempdir");
    let root = work.path();
    write_json(&root.join("default.json"), &default_job("default", 16));
    if let Err(e) = forge(&["reinforce", "--config", "default.json"], root) {
        eprintln!("could not generate the default dataset: {e}");
        return ExitCode::FAILURE;
    }
    let default_data = root.join("default");

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("loss correctness", Box::new(criterion_1)),
        ("loss algebra", Box::new(criterion_2)),
        ("shard format", Box::new(|| criterion_3(&default_data))),
        ("distributed determinism", Box::new(|| criterion_4(root))),
        ("augmentation replay", Box::new(criterion_5)),
        ("distillation gain", Box::new(|| criterion_6(root))),
        ("sample efficiency", Box::new(|| criterion_7(root))),
        ("logit-scale sweep", Box::new(|| criterion_8(root))),
        ("caption saturation", Box::new(|| criterion_9(root))),
        ("per-step overhead", Box::new(|| criterion_10(root))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {:>2} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
