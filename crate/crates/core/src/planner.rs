//! Job planning.
//!
//! [`dtm`] enumerates power-of-two GPU splits recursively, solving the
//! single-job packing subproblem for every degree tried, and keeps the
//! concurrent policy that finishes first. [`plan_jobs`] repeatedly applies it
//! to whatever GPUs are free, advancing a predicted clock from one job
//! completion to the next until every config is placed.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{CostError, MemoryContext, TimeModel};
use crate::packing::{solve_subproblem, PackingError, PackingSolution};
use crate::simulator::ScheduleTrace;
use crate::workload::LoraConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no configs to plan")]
    NoConfigs,
    #[error("gpu count must be >= 1")]
    NoGpus,
    #[error("config `{0}` cannot be scheduled at any degree up to the pool size")]
    Unschedulable(String),
    #[error("time model not calibrated for degree {0}")]
    MissingCalibration(u32),
    #[error("nothing fits on {0} GPUs")]
    NothingFits(u32),
    #[error("trace has no jobs")]
    EmptyTrace,
    #[error(transparent)]
    Packing(PackingError),
    #[error(transparent)]
    Cost(CostError),
}

impl From<PackingError> for PlanError {
    fn from(e: PackingError) -> Self {
        match e {
            PackingError::Cost(CostError::UncalibratedDegree(d)) => {
                PlanError::MissingCalibration(d)
            }
            PackingError::Cost(c) => PlanError::Cost(c),
            other => PlanError::Packing(other),
        }
    }
}

impl From<CostError> for PlanError {
    fn from(e: CostError) -> Self {
        match e {
            CostError::UncalibratedDegree(d) => PlanError::MissingCalibration(d),
            other => PlanError::Cost(other),
        }
    }
}

/// A set of packed configs trained together on `degree` GPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    /// Sorted config ids.
    pub configs: Vec<String>,
    pub degree: u32,
    pub predicted_time: f64,
    pub predicted_memory: u64,
    pub rank_sum: u64,
}

impl Job {
    fn from_solution(sol: &PackingSolution) -> Self {
        Job {
            id: format!("d{}:{}", sol.degree, sol.selected[0]),
            configs: sol.selected.clone(),
            degree: sol.degree,
            predicted_time: sol.predicted_time,
            predicted_memory: sol.memory_used,
            rank_sum: sol.rank_sum,
        }
    }

    pub fn throughput(&self) -> f64 {
        self.rank_sum as f64 / self.predicted_time
    }
}

/// Jobs meant to start together on disjoint GPUs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulingPolicy {
    pub jobs: Vec<Job>,
    pub gpus_used: u32,
}

impl SchedulingPolicy {
    fn new(jobs: Vec<Job>) -> Self {
        let gpus_used = jobs.iter().map(|j| j.degree).sum();
        SchedulingPolicy { jobs, gpus_used }
    }

    /// Predicted time until every job of the policy has finished.
    pub fn completion_time(&self) -> f64 {
        self.jobs
            .iter()
            .map(|j| j.predicted_time)
            .fold(0.0, f64::max)
    }

    /// Aggregate rank throughput of the concurrent jobs.
    pub fn throughput(&self) -> f64 {
        self.jobs.iter().map(Job::throughput).sum()
    }

    fn job_keys(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.jobs.iter().map(|j| j.id.as_str()).collect();
        keys.sort_unstable();
        keys
    }

    pub fn config_ids(&self) -> impl Iterator<Item = &str> {
        self.jobs
            .iter()
            .flat_map(|j| j.configs.iter().map(String::as_str))
    }
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Preference order between candidate policies: earlier completion, then
/// higher throughput, then lexicographically smaller job keys.
/// `Ordering::Less` means `a` is preferred.
pub fn compare_policies(a: &SchedulingPolicy, b: &SchedulingPolicy) -> Ordering {
    let (ta, tb) = (a.completion_time(), b.completion_time());
    if !approx_eq(ta, tb) {
        return ta.partial_cmp(&tb).unwrap_or(Ordering::Equal);
    }
    let (ha, hb) = (a.throughput(), b.throughput());
    if !approx_eq(ha, hb) {
        return hb.partial_cmp(&ha).unwrap_or(Ordering::Equal);
    }
    a.job_keys().cmp(&b.job_keys())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DtmOptions {
    /// Cache subproblem results keyed by degree and remaining config set.
    pub memoize: bool,
    /// Keep every enumerated policy in the outcome.
    pub retain_policies: bool,
}

#[derive(Debug, Clone)]
pub struct DtmOutcome {
    pub policy: SchedulingPolicy,
    /// Number of subproblem evaluations requested by the recursion.
    pub solver_calls: usize,
    /// Subproblems actually solved (differs from `solver_calls` when memoized).
    pub solves: usize,
    pub enumerated: Vec<SchedulingPolicy>,
}

struct DtmSearch<'a> {
    tm: &'a TimeModel,
    ctx: &'a MemoryContext,
    options: DtmOptions,
    solver_calls: usize,
    solves: usize,
    cache: HashMap<(u32, Vec<String>), Result<PackingSolution, PackingError>>,
    best: Option<SchedulingPolicy>,
    enumerated: Vec<SchedulingPolicy>,
}

impl DtmSearch<'_> {
    fn solve(
        &mut self,
        degree: u32,
        remaining: &[&LoraConfig],
    ) -> Result<PackingSolution, PackingError> {
        self.solver_calls += 1;
        if !self.options.memoize {
            self.solves += 1;
            return solve_subproblem(degree, remaining, self.tm, self.ctx);
        }
        let key = (degree, remaining.iter().map(|c| c.id.clone()).collect());
        if let Some(hit) = self.cache.get(&key) {
            return hit.clone();
        }
        self.solves += 1;
        let res = solve_subproblem(degree, remaining, self.tm, self.ctx);
        self.cache.insert(key, res.clone());
        res
    }

    fn offer(&mut self, jobs: &[Job]) {
        let policy = SchedulingPolicy::new(jobs.to_vec());
        if self.options.retain_policies {
            self.enumerated.push(policy.clone());
        }
        let better = match &self.best {
            None => true,
            Some(b) => compare_policies(&policy, b) == Ordering::Less,
        };
        if better {
            self.best = Some(policy);
        }
    }

    fn helper(
        &mut self,
        g: u32,
        current: &mut Vec<Job>,
        remaining: &[&LoraConfig],
    ) -> Result<(), PlanError> {
        if g == 0 || remaining.is_empty() {
            if !current.is_empty() {
                self.offer(current);
            }
            return Ok(());
        }
        let mut placed_any = false;
        let mut d = prev_power_of_two(g);
        while d >= 1 {
            match self.solve(d, remaining) {
                Ok(sol) => {
                    placed_any = true;
                    let used: BTreeSet<&str> = sol.selected.iter().map(String::as_str).collect();
                    let rest: Vec<&LoraConfig> = remaining
                        .iter()
                        .copied()
                        .filter(|c| !used.contains(c.id.as_str()))
                        .collect();
                    current.push(Job::from_solution(&sol));
                    self.helper(g - d, current, &rest)?;
                    current.pop();
                }
                Err(e) if e.is_infeasible() => {}
                Err(e) => return Err(e.into()),
            }
            d /= 2;
        }
        if !placed_any && !current.is_empty() {
            self.offer(current);
        }
        Ok(())
    }
}

/// Largest power of two not exceeding `g` (`g >= 1`).
pub fn prev_power_of_two(g: u32) -> u32 {
    1 << (31 - g.leading_zeros())
}

/// Best concurrent policy for `g` free GPUs and the remaining configs.
pub fn dtm(
    g: u32,
    remaining: &[&LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<SchedulingPolicy, PlanError> {
    dtm_with_options(g, remaining, tm, ctx, DtmOptions::default()).map(|o| o.policy)
}

pub fn dtm_with_options(
    g: u32,
    remaining: &[&LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
    options: DtmOptions,
) -> Result<DtmOutcome, PlanError> {
    if g == 0 {
        return Err(PlanError::NoGpus);
    }
    if remaining.is_empty() {
        return Err(PlanError::NoConfigs);
    }
    let mut search = DtmSearch {
        tm,
        ctx,
        options,
        solver_calls: 0,
        solves: 0,
        cache: HashMap::new(),
        best: None,
        enumerated: Vec::new(),
    };
    search.helper(g, &mut Vec::new(), remaining)?;
    log::debug!(
        "dtm g={g} |K|={}: {} solver calls, {} solves",
        remaining.len(),
        search.solver_calls,
        search.solves
    );
    let policy = search.best.ok_or(PlanError::NothingFits(g))?;
    Ok(DtmOutcome {
        policy,
        solver_calls: search.solver_calls,
        solves: search.solves,
        enumerated: search.enumerated,
    })
}

/// Jobs planned to start at the same predicted instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub planned_start: f64,
    pub gpus_used: u32,
    pub jobs: Vec<Job>,
}

/// Ordered batches covering every config exactly once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobQueue {
    pub workload_digest: String,
    pub gpu_count: u32,
    pub predicted_makespan: f64,
    pub batches: Vec<Batch>,
}

impl JobQueue {
    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.batches.iter().flat_map(|b| b.jobs.iter())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("queue is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Checks that every config can run alone at some power-of-two degree up to
/// `gpu_count`, and that every degree the planner may use is calibrated.
pub fn check_schedulable(
    gpu_count: u32,
    configs: &[&LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<(), PlanError> {
    let degrees: Vec<u32> = (0..32)
        .map(|i| 1u32 << i)
        .take_while(|&d| d <= gpu_count)
        .filter(|&d| ctx.base_fits(d))
        .collect();
    for &d in &degrees {
        if !tm.is_calibrated(d) {
            return Err(PlanError::MissingCalibration(d));
        }
    }
    for c in configs {
        if c.train_steps == 0 {
            return Err(CostError::ZeroTrainSteps(c.id.clone()).into());
        }
        let fits = degrees
            .iter()
            .any(|&d| ctx.base_weight_bytes(d) + ctx.config_bytes(c, d) <= ctx.capacity());
        if !fits {
            return Err(PlanError::Unschedulable(c.id.clone()));
        }
    }
    Ok(())
}

/// Plans the whole sweep on `gpu_count` GPUs.
pub fn plan_jobs(
    gpu_count: u32,
    configs: &[&LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<JobQueue, PlanError> {
    if gpu_count == 0 {
        return Err(PlanError::NoGpus);
    }
    if configs.is_empty() {
        return Err(PlanError::NoConfigs);
    }
    check_schedulable(gpu_count, configs, tm, ctx)?;

    let mut remaining: Vec<&LoraConfig> = configs.to_vec();
    let mut g_avail = gpu_count;
    let mut now = 0.0_f64;
    // (predicted end, degree)
    let mut running: Vec<(f64, u32)> = Vec::new();
    let mut batches = Vec::new();
    let mut next_id = 0usize;

    while !remaining.is_empty() {
        if g_avail > 0 {
            match dtm(g_avail, &remaining, tm, ctx) {
                Ok(policy) => {
                    let used: BTreeSet<&str> = policy.config_ids().collect();
                    remaining.retain(|c| !used.contains(c.id.as_str()));
                    let mut jobs = policy.jobs;
                    for job in &mut jobs {
                        job.id = format!("job-{next_id:04}");
                        next_id += 1;
                        running.push((now + job.predicted_time, job.degree));
                    }
                    g_avail -= policy.gpus_used;
                    batches.push(Batch {
                        planned_start: now,
                        gpus_used: policy.gpus_used,
                        jobs,
                    });
                }
                Err(PlanError::NothingFits(_)) if !running.is_empty() => {}
                Err(PlanError::NothingFits(_)) => {
                    return Err(PlanError::Unschedulable(remaining[0].id.clone()))
                }
                Err(e) => return Err(e),
            }
        }
        if remaining.is_empty() {
            break;
        }
        let Some(next) = running.iter().map(|r| r.0).min_by(|a, b| a.total_cmp(b)) else {
            return Err(PlanError::Unschedulable(remaining[0].id.clone()));
        };
        now = next;
        running.retain(|&(end, degree)| {
            if end <= next {
                g_avail += degree;
                false
            } else {
                true
            }
        });
    }
    let predicted_makespan = batches
        .iter()
        .flat_map(|b| {
            b.jobs
                .iter()
                .map(move |j| b.planned_start + j.predicted_time)
        })
        .fold(0.0, f64::max);
    Ok(JobQueue {
        workload_digest: String::new(),
        gpu_count,
        predicted_makespan,
        batches,
    })
}

/// One-config-per-job reference strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Smallest memory-feasible degree per config, as many in parallel as fit.
    MinGpu,
    /// Every config alone on the whole pool, one after another.
    MaxGpu,
}

/// Queue of single-config jobs in input order, one job per batch. Start
/// times and makespan come from simulating it.
pub fn baseline_queue(
    baseline: Baseline,
    gpu_count: u32,
    configs: &[&LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<JobQueue, PlanError> {
    if gpu_count == 0 {
        return Err(PlanError::NoGpus);
    }
    let full = prev_power_of_two(gpu_count);
    let mut batches = Vec::with_capacity(configs.len());
    for (n, c) in configs.iter().enumerate() {
        let fits = |d: u32| crate::costmodel::job_memory(&[c], d, ctx).feasible;
        let degree = match baseline {
            Baseline::MaxGpu => Some(full).filter(|&d| fits(d)),
            Baseline::MinGpu => (0..32)
                .map(|i| 1u32 << i)
                .take_while(|&d| d <= gpu_count)
                .find(|&d| fits(d)),
        }
        .ok_or_else(|| PlanError::Unschedulable(c.id.clone()))?;
        let predicted_time = crate::costmodel::job_time(tm, &[c], degree)?;
        let job = Job {
            id: format!("job-{n:04}"),
            configs: vec![c.id.clone()],
            degree,
            predicted_time,
            predicted_memory: crate::costmodel::job_memory(&[c], degree, ctx).bytes,
            rank_sum: c.rank as u64,
        };
        batches.push(Batch {
            planned_start: 0.0,
            gpus_used: degree,
            jobs: vec![job],
        });
    }
    Ok(JobQueue {
        workload_digest: String::new(),
        gpu_count,
        predicted_makespan: 0.0,
        batches,
    })
}

/// Tail-effect bound on the approximation ratio of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    /// `F / (F - T_last * (G - D) / G)`.
    pub bound: f64,
    pub makespan: f64,
    pub last_job: String,
    pub last_duration: f64,
    pub last_degree: u32,
    pub gpu_count: u32,
    /// Every GPU was busy from time 0 until the last job started.
    pub full_utilization: bool,
    /// Job degrees never increase in start order.
    pub monotone_degrees: bool,
}

impl TailBound {
    pub fn preconditions_hold(&self) -> bool {
        self.full_utilization && self.monotone_degrees
    }
}

/// Computes the tail bound of a trace and checks the conditions under which
/// it is a proven bound on the approximation ratio.
pub fn ar_bound(trace: &ScheduleTrace) -> Result<TailBound, PlanError> {
    let last = trace
        .records
        .iter()
        .max_by(|a, b| {
            a.end()
                .total_cmp(&b.end())
                .then(a.start.total_cmp(&b.start))
                .then(a.degree.cmp(&b.degree))
                .then(b.job_id.cmp(&a.job_id))
        })
        .ok_or(PlanError::EmptyTrace)?;
    let g = trace.gpu_count as f64;
    let f = trace.makespan;
    let t_last = last.duration;
    let idle = (trace.gpu_count - last.degree.min(trace.gpu_count)) as f64 / g;
    let denom = f - t_last * idle;
    assert!(denom > 0.0, "makespan {f} below last job duration {t_last}");
    let bound = if t_last == 0.0 || idle == 0.0 {
        1.0
    } else {
        f / denom
    };

    let full_utilization = busy_until(trace, last.start);
    let mut order: Vec<_> = trace.records.iter().collect();
    order.sort_by(|a, b| a.start.total_cmp(&b.start).then(b.degree.cmp(&a.degree)));
    let monotone_degrees = order.windows(2).all(|w| w[1].degree <= w[0].degree);

    Ok(TailBound {
        bound,
        makespan: f,
        last_job: last.job_id.clone(),
        last_duration: t_last,
        last_degree: last.degree,
        gpu_count: trace.gpu_count,
        full_utilization,
        monotone_degrees,
    })
}

/// Whether all GPUs are busy throughout `[0, until)`.
fn busy_until(trace: &ScheduleTrace, until: f64) -> bool {
    let eps = 1e-9 * trace.makespan.max(1.0);
    let mut points: Vec<f64> = std::iter::once(0.0)
        .chain(trace.records.iter().flat_map(|r| [r.start, r.end()]))
        .filter(|&t| t < until - eps)
        .collect();
    points.push(until);
    points.sort_by(f64::total_cmp);
    points.dedup_by(|a, b| (*a - *b).abs() <= eps);
    points.windows(2).all(|w| {
        if w[1] - w[0] <= eps {
            return true;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let busy: u32 = trace
            .records
            .iter()
            .filter(|r| r.start <= mid && mid < r.end())
            .map(|r| r.degree)
            .sum();
        busy >= trace.gpu_count
    })
}
