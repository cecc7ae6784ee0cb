use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn forge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dr-forge"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dr-forge")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn job(output_dir: &str, shards: usize) -> Value {
    json!({
        "world": {"num_classes": 16, "image_side": 16, "caption_dim": 24,
                  "pixel_noise_sigma": 0.8, "caption_noise_sigma": 0.5, "seed": 2024},
        "teachers": [
            {"teacher_id": "teacher-a", "embed_dim": 32, "ridge_lambda": 1.0, "logit_scale": 70.0, "fit_samples": 256},
            {"teacher_id": "teacher-b", "embed_dim": 24, "ridge_lambda": 1.0, "logit_scale": 60.0, "fit_samples": 256}
        ],
        "captioner": {"captioner_id": "captioner", "backbone": "teacher-a", "caption_noise_sigma": 0.5, "seed": 7},
        "A": 2, "N": 5, "samples_per_shard": 32, "num_shards": shards, "output_dir": output_dir
    })
}

fn train_cfg(lambda: f64, steps: usize) -> Value {
    json!({
        "data": {"kind": "reinforced", "dir": "data"},
        "lambda": lambda,
        "batch_size": 16,
        "steps": steps,
        "learning_rate": 0.1,
        "seed": 3,
        "eval": {"zero_shot_samples": 64, "retrieval_pairs": 16}
    })
}

fn write(dir: &Path, name: &str, v: &Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// A tempdir holding `job.json` and a generated `data/` directory.
fn generated(shards: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "job.json", &job("data", shards));
    let o = forge(&["reinforce", "--config", "job.json", "--parallelism", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn summary_hashes(dir: &Path) -> Vec<Value> {
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.join("reinforce_summary.json")).unwrap()).unwrap();
    v["hashes"].as_array().unwrap().clone()
}

#[test]
fn reinforce_prints_progress_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "job.json", &job("data", 3));
    let o = forge(&["reinforce", "--config", "job.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    for line in &lines {
        let rest = line.strip_prefix("shard ").unwrap();
        let (frac, hash) = rest.split_once(" done hash=").unwrap();
        let (i, n) = frac.split_once('/').unwrap();
        assert!((1..=3).contains(&i.parse::<usize>().unwrap()));
        assert_eq!(n, "3");
        assert_eq!(hash.len(), 16);
        assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    }
    let data = dir.path().join("data");
    let summary: Value = serde_json::from_str(&fs::read_to_string(data.join("reinforce_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["all_done"], json!(true));
    let csv = fs::read_to_string(data.join("reinforce.csv")).unwrap();
    assert!(csv.starts_with("# schema_version=1\nindex,path,record_count,status,content_hash\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",done,")).count(), 3);

    let again = forge(&["reinforce", "--config", "job.json"], dir.path());
    assert_eq!(again.status.code(), Some(1), "progress without --resume must be refused");
    let resumed = forge(&["reinforce", "--config", "job.json", "--resume"], dir.path());
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert!(stdout(&resumed).is_empty());
}

#[test]
fn crash_and_resume_match_a_clean_parallel_run() {
    let clean = generated(4);
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "job.json", &job("data", 4));
    let crashed = forge(&["reinforce", "--config", "job.json", "--crash-after", "1"], dir.path());
    assert!(!crashed.status.success());
    let resumed = forge(&["reinforce", "--config", "job.json", "--resume", "--parallelism", "3"], dir.path());
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    assert_eq!(summary_hashes(&dir.path().join("data")), summary_hashes(&clean.path().join("data")));
}

#[test]
fn inspect_and_verify() {
    let dir = generated(2);
    let data = dir.path().join("data");
    let o = forge(&["inspect", "data/shard-00000.drsh", "--json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["header"]["A"], json!(2));
    assert_eq!(v["header"]["N"], json!(5));
    assert_eq!(v["header"]["teachers"].as_array().unwrap().len(), 2);

    let ok = forge(&["verify", "data"], dir.path());
    assert!(ok.status.success(), "{}", stderr(&ok));
    fs::remove_file(data.join("shard-00001.drsh")).unwrap();
    let bad = forge(&["verify", "data"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(stdout(&bad).contains("shard 1 -> pending: missing file"));
}

#[test]
fn train_writes_run_directory() {
    let dir = generated(4);
    let mut cfg = train_cfg(1.0, 30);
    cfg["checkpoints"] = json!([10, 20, 30]);
    cfg["syn_captions"] = json!(2);
    write(dir.path(), "train.json", &cfg);
    let o = forge(&["train", "--config", "train.json", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let steps = fs::read_to_string(run.join("steps.csv")).unwrap();
    assert!(steps.starts_with("# schema_version=1\nstep,"));
    assert_eq!(steps.lines().count(), 32);
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5);
    assert!(run.join("student.model").exists());
    let summary: Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let acc = summary["report"]["zeroshot_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(summary["report"]["steps_seen"], json!(30));
}

#[test]
fn distillation_without_reinforcements_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "data": {"kind": "unreinforced", "num_samples": 128,
                 "world": {"num_classes": 16, "image_side": 16, "caption_dim": 24,
                           "pixel_noise_sigma": 0.8, "caption_noise_sigma": 0.5, "seed": 2024}},
        "lambda": 1.0, "batch_size": 16, "steps": 5, "learning_rate": 0.1, "seed": 0
    });
    write(dir.path(), "train.json", &cfg);
    let o = forge(&["train", "--config", "train.json", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("reinforcements required for distillation"), "{}", stderr(&o));
}

#[test]
fn sweeps_emit_stable_tables_and_reject_bad_grids() {
    let dir = generated(4);
    let base = train_cfg(1.0, 20);
    write(dir.path(), "bad.json", &json!({"train": base, "teacher_id": "teacher-a", "grid": [70.0, 70.0, 70.0]}));
    let bad = forge(&["sweep", "logit-scale", "--config", "bad.json", "--out", "bad"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("ascending"), "{}", stderr(&bad));

    write(dir.path(), "sweep.json", &json!({"train": base, "teacher_id": "teacher-a", "grid": [10.0, 70.0, 130.0]}));
    let o = forge(&["sweep", "logit-scale", "--config", "sweep.json", "--out", "s1"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = forge(&["sweep", "logit-scale", "--config", "sweep.json", "--out", "s2"], dir.path());
    assert!(o.status.success());
    let a = fs::read(dir.path().join("s1/sweep_logit_scale.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("s2/sweep_logit_scale.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);
    let result: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s1/sweep_logit_scale.json")).unwrap()).unwrap();
    assert!(result["best_is_interior"].is_boolean());

    write(
        dir.path(),
        "ens.json",
        &json!({"train": base, "rosters": [
            [{"teacher_id": "teacher-a"}], [{"teacher_id": "teacher-b"}],
            [{"teacher_id": "teacher-a"}, {"teacher_id": "teacher-b"}]]}),
    );
    let o = forge(&["sweep", "ensemble", "--config", "ens.json", "--out", "e"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("e/sweep_ensemble.csv")).unwrap().lines().count(), 5);

    write(dir.path(), "caps.json", &json!({"train": base, "counts": [0, 6]}));
    let o = forge(&["sweep", "captions", "--config", "caps.json", "--out", "c"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    write(dir.path(), "caps.json", &json!({"train": base, "counts": [0, 1, 2, 5]}));
    let o = forge(&["sweep", "captions", "--config", "caps.json", "--out", "c"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("c/sweep_captions.csv")).unwrap().lines().count(), 6);
}

#[test]
fn curve_and_overhead_bench() {
    let dir = generated(4);
    let pair = json!({
        "reinforced": train_cfg(1.0, 40),
        "plain": train_cfg(0.0, 40),
        "checkpoints": [10, 20, 30, 40]
    });
    write(dir.path(), "curve.json", &pair);
    let o = forge(&["curve", "--config", "curve.json", "--out", "curve"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("curve/curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 2 * 5);

    let mut bench = pair.clone();
    bench["timed_steps"] = json!(500);
    bench["warmup_steps"] = json!(5);
    bench["max_ratio"] = json!(1000.0);
    write(dir.path(), "bench.json", &bench);
    let o = forge(&["bench", "overhead", "--config", "bench.json", "--out", "bench"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bench/overhead.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["reinforced"]["steps"], json!(500));
    assert!(v["report"]["ratio"].as_f64().unwrap() > 0.0);

    bench["max_ratio"] = json!(1e-6);
    bench["timed_steps"] = json!(500);
    write(dir.path(), "bench.json", &bench);
    let o = forge(&["bench", "overhead", "--config", "bench.json", "--out", "bench"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    bench["timed_steps"] = json!(10);
    write(dir.path(), "bench.json", &bench);
    let o = forge(&["bench", "overhead", "--config", "bench.json", "--out", "bench"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
