use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sparselif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparselif"))
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 6] = ["--set", "sim.num_scenes=3", "--set", "train.threads=1", "--seed", "5"];

fn run(args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(SMALL);
    sparselif(&all)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) {
    ok(&run(&["generate", "--out", s(dir)]));
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn keys(v: &Value) -> Vec<String> {
    match v {
        Value::Object(m) => m.iter().flat_map(|(k, v)| {
            std::iter::once(k.clone()).chain(keys(v).into_iter().map(move |s| format!("{}.{}", k, s)))
        }).collect(),
        _ => Vec::new(),
    }
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["generate", "--out", s(tmp.path()), "--set", "train.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.bogus"));

    let out = sparselif(&["generate", "--out", s(tmp.path()), "--set", "sim.num_scenes=many"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sim.num_scenes"));

    let out = run(&["eval", "--scenario", "fog"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["generate"]).status.code(), Some(2), "missing --out");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"model\": {\"layers\": 0}}").unwrap();
    assert_eq!(run(&["generate", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]).status.code(), Some(2));
    assert!(!tmp.path().join("x").exists(), "validated before touching the filesystem");
}

#[test]
fn generate_is_reproducible_and_guards_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a);
    generate(&b);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 3);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{:?}", n);
    }
    assert_eq!(run(&["generate", "--out", s(&a)]).status.code(), Some(1));
    ok(&run(&["generate", "--out", s(&a), "--force"]));
}

#[test]
fn train_logs_every_step_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let first = tmp.path().join("first");
    ok(&run(&["train", "--dataset", s(&data), "--out", s(&first), "--set", "train.steps=10"]));
    let log = fs::read_to_string(first.join("train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"].as_u64(), Some(i as u64 + 1));
        assert!(l["loss"].as_f64().unwrap().is_finite());
    }

    let second = tmp.path().join("second");
    let ck = first.join("checkpoint.slck");
    let out = run(&[
        "train", "--dataset", s(&data), "--out", s(&second), "--resume", s(&ck), "--set", "train.steps=13",
    ]);
    ok(&out);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["first_step"].as_u64(), Some(10));
    assert_eq!(summary["last_step"].as_u64(), Some(13));
    let steps: Vec<u64> = fs::read_to_string(second.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![11, 12, 13]);
}

#[test]
fn training_is_independent_of_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let mut bytes = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{}", threads));
        let set = format!("train.threads={}", threads);
        ok(&run(&["train", "--dataset", s(&data), "--out", s(&out), "--set", "train.steps=3", "--set", &set]));
        bytes.push((fs::read(out.join("checkpoint.slck")).unwrap(), fs::read(out.join("train_log.jsonl")).unwrap()));
    }
    assert!(bytes[0] == bytes[1]);
}

#[test]
fn eval_reports_share_a_schema_across_fusion_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let mut reports = Vec::new();
    for fusion in ["uaf", "equal"] {
        let out = tmp.path().join(fusion);
        ok(&run(&["eval", "--dataset", s(&data), "--out", s(&out), "--fusion", fusion, "--scenario", "fov120"]));
        let r = json(&out.join("metrics.json"));
        assert_eq!(r["fusion"], fusion);
        assert_eq!(r["scenario"], "fov120");
        assert!(out.join("distance_bins.csv").exists());
        reports.push(r);
    }
    assert_eq!(keys(&reports[0]), keys(&reports[1]));

    let rob = tmp.path().join("rob");
    ok(&run(&["robustness", "--dataset", s(&data), "--out", s(&rob), "--oracle-uncertainty"]));
    let r = json(&rob.join("robustness.json"));
    let names: Vec<&str> = r["scenarios"].as_array().unwrap().iter().map(|x| x["report"]["scenario"].as_str().unwrap()).collect();
    assert!(names.contains(&"fov120"));
    assert_eq!(r["oracle_uncertainty"], true);
    // Scenario parameters differ by kind; everything else is shared.
    let shared = |v: &Value| -> Vec<String> { keys(v).into_iter().filter(|k| !k.starts_with("scenario_kind.")).collect() };
    let clean_keys = shared(&r["clean"]);
    for sc in r["scenarios"].as_array().unwrap() {
        assert_eq!(shared(&sc["report"]), clean_keys);
    }
}

#[test]
fn dataset_from_another_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    let out = run(&["eval", "--dataset", s(&data), "--out", s(&tmp.path().join("e")), "--set", "sim.lidar_density=10"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stuck_on_single_frame_data_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&run(&["generate", "--out", s(&data), "--set", "sensors.num_frames=1"]));
    let out = run(&[
        "eval", "--dataset", s(&data), "--out", s(&tmp.path().join("e")), "--set", "sensors.num_frames=1", "--scenario", "stuck",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_and_bench_subcommands_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--seeds", "2", "--out", s(tmp.path())]);
    ok(&out);
    assert!(json(&tmp.path().join("gradcheck.json"))["passed"].as_bool().unwrap());
    let out = run(&["bench", "--repetitions", "30", "--out", s(tmp.path())]);
    ok(&out);
    assert_eq!(json(&tmp.path().join("bench.json")).as_array().unwrap().len(), 4);
    assert_eq!(run(&["bench", "--repetitions", "3", "--out", s(tmp.path())]).status.code(), Some(1));
}
