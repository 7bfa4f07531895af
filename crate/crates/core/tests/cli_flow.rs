//! End-to-end runs of the command-line tool on files in a temporary directory.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use packsweep::cli::RunReport;
use packsweep::JobQueue;
use tempfile::TempDir;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

fn tool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_packsweep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a copy of the sample workload with `edit` applied to its JSON.
fn edited_workload(dir: &TempDir, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data("sample_workload.json")).unwrap())
            .unwrap();
    edit(&mut doc);
    let path = dir.path().join("edited.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

fn plan_sample(dir: &TempDir, name: &str) -> (Output, PathBuf) {
    let queue = dir.path().join(name);
    let out = tool(&[
        "plan",
        "--workload",
        s(&data("sample_workload.json")),
        "--profiles",
        s(&data("sample_profiles.csv")),
        "--out",
        s(&queue),
    ]);
    (out, queue)
}

#[test]
fn plan_simulate_report_round_trip() {
    let dir = TempDir::new().unwrap();
    let (out, queue_path) = plan_sample(&dir, "queue.json");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let queue = JobQueue::from_json(&std::fs::read_to_string(&queue_path).unwrap()).unwrap();
    assert_eq!(queue.jobs().map(|j| j.configs.len()).sum::<usize>(), 120);

    let report_path = dir.path().join("report.json");
    let trace_path = dir.path().join("trace.csv");
    let out = tool(&[
        "simulate",
        "--queue",
        s(&queue_path),
        "--workload",
        s(&data("sample_workload.json")),
        "--profiles",
        s(&data("sample_profiles.csv")),
        "--out",
        s(&report_path),
        "--trace-csv",
        s(&trace_path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: RunReport =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.violations.is_empty());
    assert!(report.speedups.min_gpu >= 1.0 && report.speedups.max_gpu >= 1.0);
    assert_eq!(report.queue.configs, 120);
    let rows = std::fs::read_to_string(&trace_path)
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 1 + queue.jobs().count());

    let out = tool(&["report", "--report", s(&report_path)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("violations 0"));
}

#[test]
fn planning_twice_writes_identical_queues() {
    let dir = TempDir::new().unwrap();
    let (_, a) = plan_sample(&dir, "a.json");
    let (_, b) = plan_sample(&dir, "b.json");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn queue_for_another_workload_is_refused() {
    let dir = TempDir::new().unwrap();
    let (_, queue) = plan_sample(&dir, "queue.json");
    let out = tool(&[
        "simulate",
        "--queue",
        s(&queue),
        "--workload",
        s(&data("sample_workload.json")),
        "--profiles",
        s(&data("sample_profiles.csv")),
        "--load-factor",
        "0.9",
    ]);
    assert_eq!(code(&out), 7);
}

#[test]
fn calibrate_accepts_csv() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("model.json");
    let out = tool(&[
        "calibrate",
        "--profiles",
        s(&data("sample_profiles.csv")),
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&out), 0);
    let tm: packsweep::TimeModel =
        serde_json::from_str(&std::fs::read_to_string(model).unwrap()).unwrap();
    assert!([1, 2, 4, 8].iter().all(|&d| tm.is_calibrated(d)));
}

#[test]
fn verify_kernels_passes() {
    assert_eq!(code(&tool(&["verify-kernels"])), 0);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("q.json");
    let plan_with = |workload: &Path, profiles: &Path| {
        code(&tool(&[
            "plan",
            "--workload",
            s(workload),
            "--profiles",
            s(profiles),
            "--out",
            s(&out_path),
        ]))
    };
    let profiles = data("sample_profiles.csv");

    assert_eq!(code(&tool(&["plan"])), 2);

    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    assert_eq!(plan_with(&garbage, &profiles), 3);

    let bad_factor = edited_workload(&dir, |d| d["pool"]["load_factor"] = 1.5.into());
    assert_eq!(plan_with(&bad_factor, &profiles), 4);

    let degree_one = dir.path().join("degree_one.csv");
    let text = std::fs::read_to_string(&profiles).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("degree") || l.starts_with("1,"))
        .collect();
    std::fs::write(&degree_one, kept.join("\n") + "\n").unwrap();
    let needs_sharding = edited_workload(&dir, |d| {
        d["pool"]["mem_per_gpu"] = 17_000_000_000u64.into()
    });
    assert_eq!(plan_with(&needs_sharding, &degree_one), 5);

    let tiny = edited_workload(&dir, |d| d["pool"]["mem_per_gpu"] = 1_000_000_000u64.into());
    assert_eq!(plan_with(&tiny, &profiles), 6);

    assert_eq!(plan_with(&dir.path().join("missing.json"), &profiles), 8);
}
