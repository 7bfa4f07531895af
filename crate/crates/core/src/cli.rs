//! File-level commands behind the `packsweep` binary.
//!
//! Each command reads its inputs from disk, returns a serializable result and
//! maps every failure onto one [`CliError`] category with its own exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::costmodel::{
    calibrate_time_model, read_profiles_csv, CostError, MemoryContext, TimeModel,
};
use crate::lorapack::{grad_check, random_pack, CaseReport, LoraError, GRAD_TOLERANCE};
use crate::planner::{ar_bound, baseline_queue, plan_jobs, Baseline, JobQueue, PlanError};
use crate::simulator::{check_feasibility, simulate, ScheduleTrace, SimError};
use crate::workload::{parse_workload, LoraConfig, WorkloadError, WorkloadSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse: {0}")]
    Parse(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("digest mismatch: queue was planned for {expected}, workload is {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("verification: {0}")]
    Verification(String),
}

impl CliError {
    /// Process exit status. Usage errors (2) are raised by argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 3,
            CliError::Validation(_) => 4,
            CliError::Calibration(_) => 5,
            CliError::Infeasible(_) => 6,
            CliError::DigestMismatch { .. } => 7,
            CliError::Io { .. } => 8,
            CliError::Verification(_) => 9,
        }
    }
}

impl From<WorkloadError> for CliError {
    fn from(e: WorkloadError) -> Self {
        match e {
            WorkloadError::Syntax { .. } => CliError::Parse(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        match e {
            CostError::Profile(_) => CliError::Parse(e.to_string()),
            CostError::ZeroTrainSteps(_) | CostError::EmptyJob | CostError::InvalidSharding(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Calibration(e.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::MissingCalibration(_) => CliError::Calibration(e.to_string()),
            PlanError::Cost(c) => c.into(),
            PlanError::NoConfigs | PlanError::NoGpus | PlanError::EmptyTrace => {
                CliError::Validation(e.to_string())
            }
            PlanError::Unschedulable(_) | PlanError::NothingFits(_) | PlanError::Packing(_) => {
                CliError::Infeasible(e.to_string())
            }
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Cost(c) => c.into(),
            SimError::UnknownConfig { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Infeasible(e.to_string()),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        CliError::Verification(e.to_string())
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents are always serializable");
    s.push('\n');
    s
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Workload plus the time model used to plan it.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub workload: WorkloadSpec,
    pub time_model: TimeModel,
}

impl Inputs {
    pub fn configs(&self) -> Vec<&LoraConfig> {
        self.workload.configs.iter().collect()
    }

    pub fn memory(&self) -> MemoryContext {
        MemoryContext::for_workload(&self.workload)
    }
}

/// Reads a workload, optionally replacing its load factor and its embedded
/// profiles (by a CSV profile table), then calibrates the time model.
pub fn load_inputs(
    workload: &Path,
    profiles: Option<&Path>,
    load_factor: Option<f64>,
) -> Result<Inputs, CliError> {
    let mut spec = parse_workload(&read(workload)?)?;
    if let Some(c) = load_factor {
        spec.pool.load_factor = c;
    }
    if let Some(p) = profiles {
        spec.profiles = read_profiles_csv(&read(p)?)?;
    }
    spec.validate()?;
    let time_model = calibrate_time_model(&spec.profiles)?;
    Ok(Inputs {
        workload: spec,
        time_model,
    })
}

/// Plans the workload; the queue carries the workload digest.
pub fn plan(inputs: &Inputs) -> Result<JobQueue, CliError> {
    let configs = inputs.configs();
    let mut queue = plan_jobs(
        inputs.workload.pool.gpu_count,
        &configs,
        &inputs.time_model,
        &inputs.memory(),
    )?;
    queue.workload_digest = inputs.workload.digest();
    Ok(queue)
}

pub fn cmd_plan(
    workload: &Path,
    profiles: Option<&Path>,
    load_factor: Option<f64>,
    out: &Path,
) -> Result<JobQueue, CliError> {
    let inputs = load_inputs(workload, profiles, load_factor)?;
    let queue = plan(&inputs)?;
    write(out, &to_json(&queue))?;
    Ok(queue)
}

/// Fitted coefficients per degree.
pub fn cmd_calibrate(profiles: &Path, out: Option<&Path>) -> Result<TimeModel, CliError> {
    let text = read(profiles)?;
    let records = if profiles.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Parse(e.to_string()))?
    } else {
        read_profiles_csv(&text)?
    };
    let tm = calibrate_time_model(&records)?;
    if let Some(out) = out {
        write(out, &to_json(&tm))?;
    }
    Ok(tm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Makespans {
    pub packed: f64,
    pub min_gpu: f64,
    pub max_gpu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedups {
    /// `min_gpu / packed`.
    pub min_gpu: f64,
    /// `max_gpu / packed`.
    pub max_gpu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub batches: usize,
    pub jobs: usize,
    pub configs: usize,
    pub predicted_makespan: f64,
    pub degrees: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub workload_digest: String,
    pub queue_digest: String,
    pub gpu_count: u32,
    pub queue: QueueSummary,
    pub makespans: Makespans,
    pub speedups: Speedups,
    pub ar_bound: f64,
    pub full_utilization: bool,
    pub monotone_degrees: bool,
    pub utilization: f64,
    pub max_abs_drift: f64,
    pub violations: Vec<String>,
}

/// Simulated plan and baselines for one workload.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: ScheduleTrace,
}

pub fn simulate_baseline(baseline: Baseline, inputs: &Inputs) -> Result<ScheduleTrace, CliError> {
    let configs = inputs.configs();
    let pool = &inputs.workload.pool;
    let q = baseline_queue(
        baseline,
        pool.gpu_count,
        &configs,
        &inputs.time_model,
        &inputs.memory(),
    )?;
    Ok(simulate(&q, &configs, pool, &inputs.time_model)?)
}

/// Simulates `queue` and both baselines and assembles the report.
pub fn run(queue: &JobQueue, inputs: &Inputs) -> Result<RunOutcome, CliError> {
    let found = inputs.workload.digest();
    if queue.workload_digest != found {
        return Err(CliError::DigestMismatch {
            expected: queue.workload_digest.clone(),
            found,
        });
    }
    let configs = inputs.configs();
    let pool = &inputs.workload.pool;
    let trace = simulate(queue, &configs, pool, &inputs.time_model)?;
    let violations = check_feasibility(&trace, queue, &configs, &inputs.memory())
        .iter()
        .map(ToString::to_string)
        .collect();
    let tail = ar_bound(&trace)?;
    let min_gpu = simulate_baseline(Baseline::MinGpu, inputs)?.makespan;
    let max_gpu = simulate_baseline(Baseline::MaxGpu, inputs)?.makespan;
    let packed = trace.makespan;
    let mut degrees: Vec<u32> = queue.jobs().map(|j| j.degree).collect();
    degrees.sort_unstable();
    degrees.dedup();
    let report = RunReport {
        tool_version: TOOL_VERSION.to_string(),
        workload_digest: queue.workload_digest.clone(),
        queue_digest: sha256_hex(&queue.to_json()),
        gpu_count: pool.gpu_count,
        queue: QueueSummary {
            batches: queue.batches.len(),
            jobs: queue.jobs().count(),
            configs: configs.len(),
            predicted_makespan: queue.predicted_makespan,
            degrees,
        },
        makespans: Makespans {
            packed,
            min_gpu,
            max_gpu,
        },
        speedups: Speedups {
            min_gpu: min_gpu / packed,
            max_gpu: max_gpu / packed,
        },
        ar_bound: tail.bound,
        full_utilization: tail.full_utilization,
        monotone_degrees: tail.monotone_degrees,
        utilization: trace.utilization(),
        max_abs_drift: trace.max_abs_drift(),
        violations,
    };
    Ok(RunOutcome { report, trace })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_simulate(
    queue: &Path,
    workload: &Path,
    profiles: Option<&Path>,
    load_factor: Option<f64>,
    out: Option<&Path>,
    trace_csv: Option<&Path>,
) -> Result<RunReport, CliError> {
    let q = JobQueue::from_json(&read(queue)?).map_err(|e| CliError::Parse(e.to_string()))?;
    let inputs = load_inputs(workload, profiles, load_factor)?;
    let outcome = run(&q, &inputs)?;
    if let Some(p) = trace_csv {
        write(p, &outcome.trace.to_csv())?;
    }
    if let Some(p) = out {
        write(p, &to_json(&outcome.report))?;
    }
    Ok(outcome.report)
}

/// Human-readable rendering of a stored report.
pub fn render_report(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "workload   {}", r.workload_digest);
    let _ = writeln!(s, "version    {}", r.tool_version);
    let _ = writeln!(
        s,
        "queue      {} batches, {} jobs, {} configs, degrees {:?}",
        r.queue.batches, r.queue.jobs, r.queue.configs, r.queue.degrees
    );
    let _ = writeln!(s, "gpus       {}", r.gpu_count);
    let _ = writeln!(
        s,
        "{:<10} {:>14} {:>10}",
        "strategy", "makespan_s", "speedup"
    );
    let _ = writeln!(
        s,
        "{:<10} {:>14.3} {:>10.3}",
        "packed", r.makespans.packed, 1.0
    );
    let _ = writeln!(
        s,
        "{:<10} {:>14.3} {:>10.3}",
        "min_gpu", r.makespans.min_gpu, r.speedups.min_gpu
    );
    let _ = writeln!(
        s,
        "{:<10} {:>14.3} {:>10.3}",
        "max_gpu", r.makespans.max_gpu, r.speedups.max_gpu
    );
    let _ = writeln!(
        s,
        "ar_bound   {:.4} (full_utilization={}, monotone_degrees={})",
        r.ar_bound, r.full_utilization, r.monotone_degrees
    );
    let _ = writeln!(
        s,
        "utilization {:.3}, max drift {:.3e} s",
        r.utilization, r.max_abs_drift
    );
    let _ = writeln!(s, "violations {}", r.violations.len());
    for v in &r.violations {
        let _ = writeln!(s, "  {v}");
    }
    s
}

pub fn cmd_report(report: &Path) -> Result<String, CliError> {
    let r: RunReport =
        serde_json::from_str(&read(report)?).map_err(|e| CliError::Parse(e.to_string()))?;
    let recomputed = r.makespans.min_gpu / r.makespans.packed;
    if (recomputed - r.speedups.min_gpu).abs() > 1e-9 * recomputed.abs().max(1.0) {
        return Err(CliError::Validation(
            "stored speedup disagrees with stored makespans".into(),
        ));
    }
    Ok(render_report(&r))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub seed: u64,
    pub packs: usize,
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<6} {:<4} {:>10} {:>14} result",
            "case", "grad", "entries", "max_rel_err"
        );
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{:<6} {:<4} {:>10} {:>14.3e} {}",
                c.case,
                c.quantity,
                c.entries,
                c.max_rel_error,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

/// Finite-difference check of all four gradient cases over `packs` random
/// packs drawn from `seed`.
pub fn verify_kernels(seed: u64, packs: usize) -> Result<KernelReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<CaseReport> = Vec::new();
    for _ in 0..packs {
        let n = rng.gen_range(1..=4);
        let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
        let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=4)).collect();
        let (d, k) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let (p, w) = random_pack(&mut rng, &ranks, &rows, d, k)?;
        let report = grad_check(&p, &w, rng.gen())?;
        if cases.is_empty() {
            cases = report.cases;
            continue;
        }
        for (acc, c) in cases.iter_mut().zip(report.cases) {
            acc.entries += c.entries;
            acc.max_rel_error = acc.max_rel_error.max(c.max_rel_error);
            acc.passed &= c.passed;
        }
    }
    Ok(KernelReport {
        seed,
        packs,
        tolerance: GRAD_TOLERANCE,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let errs = [
            CliError::Parse(String::new()),
            CliError::Validation(String::new()),
            CliError::Calibration(String::new()),
            CliError::Infeasible(String::new()),
            CliError::DigestMismatch {
                expected: String::new(),
                found: String::new(),
            },
            CliError::Io {
                path: PathBuf::new(),
                source: std::io::Error::other("x"),
            },
            CliError::Verification(String::new()),
        ];
        let mut codes: Vec<i32> = errs.iter().map(CliError::exit_code).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), errs.len());
        assert!(!codes.contains(&0) && !codes.contains(&2));
    }

    #[test]
    fn kernel_verification_passes() {
        let r = verify_kernels(7, 5).unwrap();
        assert!(r.passed());
        assert_eq!(r.cases.len(), 4);
        assert!(r.render().contains("pass"));
    }

    #[test]
    fn error_categories() {
        let e: CliError = PlanError::MissingCalibration(4).into();
        assert_eq!(e.exit_code(), 5);
        assert!(e.to_string().contains('4'));
        let e: CliError = PlanError::Unschedulable("cfg-x".into()).into();
        assert_eq!(e.exit_code(), 6);
        assert!(e.to_string().contains("cfg-x"));
    }
}
