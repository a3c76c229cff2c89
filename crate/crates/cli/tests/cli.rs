use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn faastrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faastrain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("specs")
        .join(name)
}

fn run_ok(args: &[&str]) -> String {
    let out = faastrain(args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn minimal_spec_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_ok(&[
        "run",
        spec("minimal.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stdout.contains("wall_time="), "{stdout}");
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["events.csv", "iterations.csv", "summary.json"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["iterations"], 32);
    assert_eq!(summary["status"], "completed");
}

#[test]
fn golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run",
        spec("minimal.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let first = |f: &str| {
        fs::read_to_string(dir.path().join(f))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(
        first("iterations.csv"),
        "epoch,iteration,global_iteration,start_s,end_s,iter_time_s,workers,memory_mb,batch_size,param_count,\
         loss,ul_shard_s,dl_shard_s,ul_aggr_s,dl_grad_s,cost_usd,throughput_sps"
    );
    assert_eq!(
        first("events.csv"),
        "time_s,kind,worker,epoch,iteration,detail"
    );

    let out = tempfile::tempdir().unwrap();
    run_ok(&[
        "experiment",
        "sync-scaling",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.path().join("sync_scaling.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,workers,ul_shard_s,dl_shard_s,ul_aggr_s,ul_grad_s,dl_grad_s,total_s"
    );
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
}

#[test]
fn overrides_and_seed_apply() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run",
        spec("minimal.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "3",
        "--override",
        "epochs=1",
        "--override",
        "deployment.workers=4",
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["iterations"], 16);
    assert_eq!(summary["final_workers"], 4);
}

#[test]
fn malformed_json_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        "{\n  \"model\": { \"kind\": \"mlp\", \"n_features\": \"eight\" }\n}\n",
    )
    .unwrap();
    let out = faastrain(&[
        "run",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("line 2") && err.contains("model.n_features"),
        "{err}"
    );

    fs::write(&bad, "{ not json").unwrap();
    let out = faastrain(&[
        "run",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_override_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = faastrain(&[
        "run",
        spec("minimal.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "epochs=0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn impossible_deadline_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let out = faastrain(&[
        "run",
        spec("deadline.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "goal.t_max=30",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn restart_storm_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = faastrain(&[
        "run",
        spec("minimal.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--override",
        "platform.failure_rate=1",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let out = faastrain(&["experiment", "scenario9", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn deadline_spec_meets_its_deadline() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "run",
        spec("deadline.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert!(summary["wall_time_s"].as_f64().unwrap() <= 600.0);
}

#[test]
fn presets_are_byte_identical_across_runs() {
    for preset in ["sync-scaling", "scenario1"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_ok(&[
            "experiment",
            preset,
            "--out",
            a.path().to_str().unwrap(),
            "--seed",
            "5",
        ]);
        run_ok(&[
            "experiment",
            preset,
            "--out",
            b.path().to_str().unwrap(),
            "--seed",
            "5",
        ]);
        for entry in fs::read_dir(a.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }
    }
}
