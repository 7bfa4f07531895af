//! Discrete-event execution of a job queue on a homogeneous GPU pool.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{job_memory, job_time, CostError, MemoryContext, TimeModel};
use crate::packing::is_power_of_two;
use crate::planner::{ar_bound, JobQueue};
use crate::workload::{GpuPool, LoraConfig};

/// Largest instance accepted by [`brute_force_makespan`].
pub const BRUTE_FORCE_MAX_CONFIGS: usize = 6;
pub const BRUTE_FORCE_MAX_GPUS: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("job `{job}` references unknown config `{config}`")]
    UnknownConfig { job: String, config: String },
    #[error("batch {index} needs {needed} GPUs but the pool has {available}")]
    BatchNeverFits {
        index: usize,
        needed: u32,
        available: u32,
    },
    #[error("instance too large for exhaustive search: {configs} configs on {gpus} GPUs")]
    TooLarge { configs: usize, gpus: u32 },
    #[error("no feasible schedule exists")]
    NoFeasibleSchedule,
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Execution of one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub job_id: String,
    pub configs: Vec<String>,
    pub degree: u32,
    pub start: f64,
    pub duration: f64,
    pub devices: Vec<u32>,
    pub planned_start: f64,
    pub predicted_duration: f64,
}

impl TraceRecord {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Actual minus predicted duration.
    pub fn drift(&self) -> f64 {
        self.duration - self.predicted_duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: EventKind,
    pub job_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub gpu_count: u32,
    pub records: Vec<TraceRecord>,
    pub makespan: f64,
    pub events: Vec<TraceEvent>,
}

impl ScheduleTrace {
    /// Builds a trace from records, deriving the makespan and event log.
    pub fn from_records(gpu_count: u32, records: Vec<TraceRecord>) -> Self {
        let makespan = records.iter().map(TraceRecord::end).fold(0.0, f64::max);
        let mut events: Vec<TraceEvent> = records
            .iter()
            .flat_map(|r| {
                [
                    TraceEvent {
                        time: r.start,
                        kind: EventKind::Start,
                        job_id: r.job_id.clone(),
                    },
                    TraceEvent {
                        time: r.end(),
                        kind: EventKind::Finish,
                        job_id: r.job_id.clone(),
                    },
                ]
            })
            .collect();
        events.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then((a.kind == EventKind::Start).cmp(&(b.kind == EventKind::Start)))
                .then(a.job_id.cmp(&b.job_id))
        });
        ScheduleTrace {
            gpu_count,
            records,
            makespan,
            events,
        }
    }

    /// Whether jobs `i` and `j` share at least one device.
    pub fn shares_devices(&self, i: usize, j: usize) -> bool {
        let (a, b) = (&self.records[i], &self.records[j]);
        a.devices.iter().any(|d| b.devices.contains(d))
    }

    /// Whether job `i` finishes no later than job `j` starts.
    pub fn precedes(&self, i: usize, j: usize) -> bool {
        self.records[i].end() <= self.records[j].start + time_eps(self.makespan)
    }

    /// Fraction of GPU-seconds in `[0, makespan)` spent running jobs.
    pub fn utilization(&self) -> f64 {
        if self.makespan <= 0.0 {
            return 0.0;
        }
        let work: f64 = self
            .records
            .iter()
            .map(|r| r.degree as f64 * r.duration)
            .sum();
        work / (self.gpu_count as f64 * self.makespan)
    }

    pub fn max_abs_drift(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.drift().abs())
            .fold(0.0, f64::max)
    }

    /// Gantt-friendly CSV: `job_id,start_s,end_s,devices,configs`.
    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            job_id: &'a str,
            start_s: f64,
            end_s: f64,
            devices: String,
            configs: String,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(Row {
                job_id: &r.job_id,
                start_s: r.start,
                end_s: r.end(),
                devices: r
                    .devices
                    .iter()
                    .map(u32::to_string)
                    .collect::<Vec<_>>()
                    .join("+"),
                configs: r.configs.join("+"),
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    pub fn summary(&self) -> TraceSummary {
        let tail = ar_bound(self).ok();
        TraceSummary {
            makespan: self.makespan,
            utilization: self.utilization(),
            ar_bound: tail.as_ref().map(|t| t.bound),
            full_utilization: tail.as_ref().is_some_and(|t| t.full_utilization),
            monotone_degrees: tail.as_ref().is_some_and(|t| t.monotone_degrees),
            max_abs_drift: self.max_abs_drift(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub makespan: f64,
    pub utilization: f64,
    pub ar_bound: Option<f64>,
    pub full_utilization: bool,
    pub monotone_degrees: bool,
    pub max_abs_drift: f64,
}

fn time_eps(scale: f64) -> f64 {
    1e-9 * scale.abs().max(1.0)
}

fn lookup<'a>(configs: &[&'a LoraConfig]) -> HashMap<&'a str, &'a LoraConfig> {
    configs.iter().map(|c| (c.id.as_str(), *c)).collect()
}

fn resolve<'a>(
    job: &str,
    ids: &[String],
    by_id: &HashMap<&str, &'a LoraConfig>,
) -> Result<Vec<&'a LoraConfig>, SimError> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| SimError::UnknownConfig {
                    job: job.to_string(),
                    config: id.clone(),
                })
        })
        .collect()
}

/// Runs `queue` batch by batch. A batch starts once every one of its jobs
/// can start; jobs take the lowest-index free devices. Durations come from
/// `tm`, which acts as ground truth.
pub fn simulate(
    queue: &JobQueue,
    configs: &[&LoraConfig],
    pool: &GpuPool,
    tm: &TimeModel,
) -> Result<ScheduleTrace, SimError> {
    let by_id = lookup(configs);
    let gpus = pool.gpu_count;
    for (index, batch) in queue.batches.iter().enumerate() {
        let needed: u32 = batch.jobs.iter().map(|j| j.degree).sum();
        if needed > gpus {
            return Err(SimError::BatchNeverFits {
                index,
                needed,
                available: gpus,
            });
        }
    }

    let mut free: BTreeSet<u32> = (0..gpus).collect();
    // (end, record index)
    let mut running: Vec<(f64, usize)> = Vec::new();
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut now = 0.0_f64;
    let mut next_batch = 0;

    while next_batch < queue.batches.len() {
        while let Some(batch) = queue.batches.get(next_batch) {
            let needed: u32 = batch.jobs.iter().map(|j| j.degree).sum();
            if needed as usize > free.len() {
                break;
            }
            for job in &batch.jobs {
                let members = resolve(&job.id, &job.configs, &by_id)?;
                let duration = job_time(tm, &members, job.degree)?;
                let devices: Vec<u32> = free.iter().copied().take(job.degree as usize).collect();
                for d in &devices {
                    free.remove(d);
                }
                running.push((now + duration, records.len()));
                records.push(TraceRecord {
                    job_id: job.id.clone(),
                    configs: job.configs.clone(),
                    degree: job.degree,
                    start: now,
                    duration,
                    devices,
                    planned_start: batch.planned_start,
                    predicted_duration: job.predicted_time,
                });
            }
            next_batch += 1;
        }
        if next_batch == queue.batches.len() {
            break;
        }
        let next = running
            .iter()
            .map(|r| r.0)
            .min_by(f64::total_cmp)
            .expect("a blocked batch implies running jobs");
        now = next;
        running.retain(|&(end, idx)| {
            if end <= next {
                free.extend(records[idx].devices.iter().copied());
                false
            } else {
                true
            }
        });
    }
    Ok(ScheduleTrace::from_records(gpus, records))
}

/// A broken scheduling constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    MissingConfig(String),
    DuplicateConfig(String),
    UnknownConfig {
        job: String,
        config: String,
    },
    UnknownJob(String),
    DegreeMismatch {
        job: String,
        planned: u32,
        traced: u32,
    },
    DeviceCount {
        job: String,
        degree: u32,
        devices: usize,
    },
    NotPowerOfTwo {
        job: String,
        degree: u32,
    },
    DeviceOutOfRange {
        job: String,
        device: u32,
    },
    Overlap {
        first: String,
        second: String,
        device: u32,
    },
    NegativeStart {
        job: String,
        start: f64,
    },
    MakespanMismatch {
        recorded: f64,
        computed: f64,
    },
    Memory {
        job: String,
        bytes: u64,
        capacity: u64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingConfig(c) => write!(f, "config `{c}` is never trained"),
            Violation::DuplicateConfig(c) => write!(f, "config `{c}` is trained more than once"),
            Violation::UnknownConfig { job, config } => {
                write!(f, "job `{job}` trains unknown config `{config}`")
            }
            Violation::UnknownJob(j) => write!(f, "job `{j}` is not in the queue"),
            Violation::DegreeMismatch {
                job,
                planned,
                traced,
            } => write!(
                f,
                "job `{job}` planned at degree {planned} but ran at {traced}"
            ),
            Violation::DeviceCount {
                job,
                degree,
                devices,
            } => write!(
                f,
                "job `{job}` has degree {degree} but {devices} distinct devices"
            ),
            Violation::NotPowerOfTwo { job, degree } => {
                write!(f, "job `{job}` degree {degree} is not a power of two")
            }
            Violation::DeviceOutOfRange { job, device } => {
                write!(f, "job `{job}` uses nonexistent device {device}")
            }
            Violation::Overlap {
                first,
                second,
                device,
            } => write!(
                f,
                "jobs `{first}` and `{second}` overlap on device {device}"
            ),
            Violation::NegativeStart { job, start } => {
                write!(f, "job `{job}` starts at negative time {start}")
            }
            Violation::MakespanMismatch { recorded, computed } => {
                write!(
                    f,
                    "makespan {recorded} differs from last completion {computed}"
                )
            }
            Violation::Memory {
                job,
                bytes,
                capacity,
            } => write!(
                f,
                "job `{job}` needs {bytes} bytes per device, capacity {capacity}"
            ),
        }
    }
}

/// Lists every constraint the trace breaks. An empty list means the trace is
/// a feasible schedule of `queue` covering `configs` exactly once.
pub fn check_feasibility(
    trace: &ScheduleTrace,
    queue: &JobQueue,
    configs: &[&LoraConfig],
    ctx: &MemoryContext,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let by_id = lookup(configs);
    let planned: HashMap<&str, u32> = queue.jobs().map(|j| (j.id.as_str(), j.degree)).collect();
    let eps = time_eps(trace.makespan);

    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &trace.records {
        for c in &r.configs {
            *seen.entry(c.as_str()).or_default() += 1;
        }
    }
    for c in configs {
        match seen.get(c.id.as_str()) {
            None => out.push(Violation::MissingConfig(c.id.clone())),
            Some(&n) if n > 1 => out.push(Violation::DuplicateConfig(c.id.clone())),
            _ => {}
        }
    }

    for r in &trace.records {
        let job = &r.job_id;
        match planned.get(job.as_str()) {
            None => out.push(Violation::UnknownJob(job.clone())),
            Some(&d) if d != r.degree => out.push(Violation::DegreeMismatch {
                job: job.clone(),
                planned: d,
                traced: r.degree,
            }),
            _ => {}
        }
        if !is_power_of_two(r.degree) {
            out.push(Violation::NotPowerOfTwo {
                job: job.clone(),
                degree: r.degree,
            });
        }
        let distinct: BTreeSet<u32> = r.devices.iter().copied().collect();
        if distinct.len() != r.degree as usize || distinct.len() != r.devices.len() {
            out.push(Violation::DeviceCount {
                job: job.clone(),
                degree: r.degree,
                devices: distinct.len(),
            });
        }
        if let Some(&device) = distinct.iter().find(|&&d| d >= trace.gpu_count) {
            out.push(Violation::DeviceOutOfRange {
                job: job.clone(),
                device,
            });
        }
        if r.start < 0.0 {
            out.push(Violation::NegativeStart {
                job: job.clone(),
                start: r.start,
            });
        }
        let mut members = Vec::new();
        let mut known = true;
        for c in &r.configs {
            match by_id.get(c.as_str()) {
                Some(cfg) => members.push(*cfg),
                None => {
                    known = false;
                    out.push(Violation::UnknownConfig {
                        job: job.clone(),
                        config: c.clone(),
                    });
                }
            }
        }
        if known && r.degree >= 1 {
            let mem = job_memory(&members, r.degree, ctx);
            if !mem.feasible {
                out.push(Violation::Memory {
                    job: job.clone(),
                    bytes: mem.bytes,
                    capacity: mem.capacity,
                });
            }
        }
    }

    let n = trace.records.len();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&trace.records[i], &trace.records[j]);
            let shared = a.devices.iter().filter(|d| b.devices.contains(d)).min();
            let Some(&device) = shared else { continue };
            let disjoint_in_time = a.end() <= b.start + eps || b.end() <= a.start + eps;
            let instantaneous = a.duration <= 0.0 || b.duration <= 0.0;
            if !disjoint_in_time && !instantaneous {
                out.push(Violation::Overlap {
                    first: a.job_id.clone(),
                    second: b.job_id.clone(),
                    device,
                });
            }
        }
    }

    let computed = trace
        .records
        .iter()
        .map(TraceRecord::end)
        .fold(0.0, f64::max);
    if (computed - trace.makespan).abs() > eps {
        out.push(Violation::MakespanMismatch {
            recorded: trace.makespan,
            computed,
        });
    }
    out
}

/// Optimal makespan and one schedule achieving it.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSchedule {
    pub makespan: f64,
    pub trace: ScheduleTrace,
}

#[derive(Debug, Clone)]
struct Candidate {
    members: Vec<usize>,
    degree: u32,
    duration: f64,
}

/// Exact minimum makespan by exhaustive search over partitions of the
/// configs into jobs, degree assignments and start orders.
///
/// For a fixed order, each job is placed at the earliest time no earlier
/// than its predecessor's start at which enough devices stay free for its
/// whole run. Left-shifting any optimal schedule in start order yields such
/// a placement, so trying every order is exact.
pub fn brute_force_makespan(
    configs: &[&LoraConfig],
    gpu_count: u32,
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<OptimalSchedule, SimError> {
    let n = configs.len();
    if n > BRUTE_FORCE_MAX_CONFIGS || gpu_count > BRUTE_FORCE_MAX_GPUS {
        return Err(SimError::TooLarge {
            configs: n,
            gpus: gpu_count,
        });
    }
    if n == 0 || gpu_count == 0 {
        return Err(SimError::NoFeasibleSchedule);
    }
    let degrees: Vec<u32> = (0..3)
        .map(|i| 1u32 << i)
        .filter(|&d| d <= gpu_count && tm.is_calibrated(d) && ctx.base_fits(d))
        .collect();

    // Job options for every non-empty subset, by bitmask.
    let mut options: Vec<Vec<(u32, f64)>> = vec![Vec::new(); 1 << n];
    for (mask, opts) in options.iter_mut().enumerate().skip(1) {
        let members: Vec<&LoraConfig> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| configs[i])
            .collect();
        for &d in &degrees {
            if job_memory(&members, d, ctx).feasible {
                opts.push((d, job_time(tm, &members, d)?));
            }
        }
    }

    let mut search = Exhaustive {
        gpus: gpu_count,
        options: &options,
        best: f64::INFINITY,
        witness: Vec::new(),
    };
    let mut blocks = Vec::new();
    search.partitions((1usize << n) - 1, &mut blocks);
    if search.witness.is_empty() {
        return Err(SimError::NoFeasibleSchedule);
    }

    let placements = std::mem::take(&mut search.witness);
    let devices = assign_devices(&placements, gpu_count);
    let records = placements
        .iter()
        .zip(devices)
        .enumerate()
        .map(|(k, ((start, cand), devs))| TraceRecord {
            job_id: format!("opt-{k:02}"),
            configs: cand
                .members
                .iter()
                .map(|&i| configs[i].id.clone())
                .collect(),
            degree: cand.degree,
            start: *start,
            duration: cand.duration,
            devices: devs,
            planned_start: *start,
            predicted_duration: cand.duration,
        })
        .collect();
    let trace = ScheduleTrace::from_records(gpu_count, records);
    Ok(OptimalSchedule {
        makespan: trace.makespan,
        trace,
    })
}

/// Largest job count accepted by [`optimal_job_order`].
pub const JOB_ORDER_MAX_JOBS: usize = 8;

/// Minimum makespan over every schedule of a fixed set of jobs, given as
/// `(degree, duration)` pairs. Unlike [`brute_force_makespan`] the packing
/// of configs into jobs is not revisited.
pub fn optimal_job_order(jobs: &[(u32, f64)], gpu_count: u32) -> Result<f64, SimError> {
    if jobs.len() > JOB_ORDER_MAX_JOBS {
        return Err(SimError::TooLarge {
            configs: jobs.len(),
            gpus: gpu_count,
        });
    }
    if jobs.is_empty() || jobs.iter().any(|&(d, _)| d == 0 || d > gpu_count) {
        return Err(SimError::NoFeasibleSchedule);
    }
    let candidates: Vec<Candidate> = jobs
        .iter()
        .map(|&(degree, duration)| Candidate {
            members: Vec::new(),
            degree,
            duration,
        })
        .collect();
    let mut search = Exhaustive {
        gpus: gpu_count,
        options: &[],
        best: f64::INFINITY,
        witness: Vec::new(),
    };
    search.orders(&candidates);
    Ok(search.best)
}

struct Exhaustive<'a> {
    gpus: u32,
    options: &'a [Vec<(u32, f64)>],
    best: f64,
    witness: Vec<(f64, Candidate)>,
}

impl Exhaustive<'_> {
    /// Enumerates set partitions of `left` as lists of bitmasks; each block
    /// contains the lowest remaining element.
    fn partitions(&mut self, left: usize, blocks: &mut Vec<usize>) {
        if left == 0 {
            self.degrees(blocks, 0, &mut Vec::new());
            return;
        }
        let low = left & left.wrapping_neg();
        let rest = left ^ low;
        let mut sub = rest;
        loop {
            let block = sub | low;
            if !self.options[block].is_empty() {
                blocks.push(block);
                self.partitions(left ^ block, blocks);
                blocks.pop();
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }

    fn degrees(&mut self, blocks: &[usize], i: usize, chosen: &mut Vec<Candidate>) {
        if i == blocks.len() {
            let work: f64 = chosen.iter().map(|c| c.degree as f64 * c.duration).sum();
            let longest = chosen.iter().map(|c| c.duration).fold(0.0, f64::max);
            if (work / self.gpus as f64).max(longest) >= self.best {
                return;
            }
            self.orders(chosen);
            return;
        }
        let block = blocks[i];
        for &(degree, duration) in &self.options[block] {
            chosen.push(Candidate {
                members: (0..usize::BITS as usize)
                    .filter(|b| block & (1 << b) != 0)
                    .collect(),
                degree,
                duration,
            });
            self.degrees(blocks, i + 1, chosen);
            chosen.pop();
        }
    }

    fn orders(&mut self, jobs: &[Candidate]) {
        let mut idx: Vec<usize> = (0..jobs.len()).collect();
        idx.sort_by(|&a, &b| {
            jobs[a]
                .degree
                .cmp(&jobs[b].degree)
                .then(jobs[a].duration.total_cmp(&jobs[b].duration))
        });
        let mut used = vec![false; jobs.len()];
        let mut placed = Vec::with_capacity(jobs.len());
        self.permute(jobs, &idx, &mut used, &mut placed, 0.0);
    }

    fn permute(
        &mut self,
        jobs: &[Candidate],
        idx: &[usize],
        used: &mut [bool],
        placed: &mut Vec<(f64, usize)>,
        span: f64,
    ) {
        if span >= self.best {
            return;
        }
        if placed.len() == jobs.len() {
            self.best = span;
            self.witness = placed.iter().map(|&(s, j)| (s, jobs[j].clone())).collect();
            return;
        }
        let floor = placed.last().map_or(0.0, |p| p.0);
        for k in 0..idx.len() {
            if used[k] {
                continue;
            }
            // Identical jobs are interchangeable; try only the first unused.
            if k > 0 && !used[k - 1] && same_shape(&jobs[idx[k - 1]], &jobs[idx[k]]) {
                continue;
            }
            let j = idx[k];
            let start = earliest_start(jobs, placed, floor, &jobs[j], self.gpus);
            used[k] = true;
            placed.push((start, j));
            self.permute(jobs, idx, used, placed, span.max(start + jobs[j].duration));
            placed.pop();
            used[k] = false;
        }
    }
}

fn same_shape(a: &Candidate, b: &Candidate) -> bool {
    a.degree == b.degree && a.duration == b.duration
}

fn earliest_start(
    jobs: &[Candidate],
    placed: &[(f64, usize)],
    floor: f64,
    job: &Candidate,
    gpus: u32,
) -> f64 {
    let mut times: Vec<f64> = std::iter::once(floor)
        .chain(placed.iter().map(|&(s, j)| s + jobs[j].duration))
        .filter(|&t| t >= floor)
        .collect();
    times.sort_by(f64::total_cmp);
    let load_at = |t: f64| -> u32 {
        placed
            .iter()
            .filter(|&&(s, j)| s <= t && t < s + jobs[j].duration)
            .map(|&(_, j)| jobs[j].degree)
            .sum()
    };
    for &t in &times {
        let end = t + job.duration;
        // Load only rises at placed starts inside the window.
        let fits = std::iter::once(t)
            .chain(placed.iter().map(|&(s, _)| s).filter(|&s| s > t && s < end))
            .all(|p| load_at(p) + job.degree <= gpus);
        if fits {
            return t;
        }
    }
    unreachable!("the pool is empty after the last completion")
}

/// Interval-partitioning sweep: jobs in start order take the lowest free
/// devices, releasing them at completion.
fn assign_devices(placements: &[(f64, Candidate)], gpus: u32) -> Vec<Vec<u32>> {
    let mut order: Vec<usize> = (0..placements.len()).collect();
    order.sort_by(|&a, &b| placements[a].0.total_cmp(&placements[b].0));
    let mut out = vec![Vec::new(); placements.len()];
    let mut busy: Vec<(f64, usize)> = Vec::new();
    let mut free: BTreeSet<u32> = (0..gpus).collect();
    for k in order {
        let (start, cand) = &placements[k];
        busy.retain(|&(end, j)| {
            if end <= *start {
                free.extend(out[j].iter().copied());
                false
            } else {
                true
            }
        });
        let devs: Vec<u32> = free.iter().copied().take(cand.degree as usize).collect();
        for d in &devs {
            free.remove(d);
        }
        out[k] = devs;
        busy.push((start + cand.duration, k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{Batch, Job};
    use crate::workload::{
        ActivationCoefficients, ModelSpec, ParallelismMode, Projection, TargetModule,
    };

    fn ctx(capacity: u64, gpus: u32) -> MemoryContext {
        let model = ModelSpec {
            name: "toy".into(),
            n_layers: 1,
            target_modules: vec![TargetModule::new(Projection::Q, 8, 8)],
            base_param_count: 100,
            c_prec: 1,
            activation: ActivationCoefficients::default(),
        };
        let pool = GpuPool {
            gpu_count: gpus,
            mem_per_gpu: capacity,
            load_factor: 1.0,
        };
        MemoryContext::new(model, pool, ParallelismMode::Tensor, 1)
    }

    fn cfg(rank: u32, steps: u32, tag: f64) -> LoraConfig {
        LoraConfig::new(rank, tag, 1, 1e-4, 1, steps)
    }

    fn job(id: &str, configs: &[&LoraConfig], degree: u32) -> Job {
        Job {
            id: id.into(),
            configs: configs.iter().map(|c| c.id.clone()).collect(),
            degree,
            predicted_time: 0.0,
            predicted_memory: 0,
            rank_sum: configs.iter().map(|c| c.rank as u64).sum(),
        }
    }

    fn queue(gpus: u32, batches: Vec<Vec<Job>>) -> JobQueue {
        JobQueue {
            workload_digest: String::new(),
            gpu_count: gpus,
            predicted_makespan: 0.0,
            batches: batches
                .into_iter()
                .map(|jobs| Batch {
                    planned_start: 0.0,
                    gpus_used: jobs.iter().map(|j| j.degree).sum(),
                    jobs,
                })
                .collect(),
        }
    }

    fn pool(gpus: u32) -> GpuPool {
        GpuPool {
            gpu_count: gpus,
            mem_per_gpu: 1 << 30,
            load_factor: 1.0,
        }
    }

    fn tm() -> TimeModel {
        TimeModel::from_coefficients([(1, 1.0, 0.0), (2, 0.75, 0.0), (4, 0.5, 0.0), (8, 0.3, 0.0)])
            .unwrap()
    }

    #[test]
    fn single_job_starts_at_zero() {
        let a = cfg(4, 10, 1.0);
        let q = queue(8, vec![vec![job("j", &[&a], 1)]]);
        let t = simulate(&q, &[&a], &pool(8), &tm()).unwrap();
        assert_eq!(t.records[0].start, 0.0);
        assert_eq!(t.makespan, 10.0);
        assert_eq!(t.records[0].devices, vec![0]);
    }

    #[test]
    fn concurrent_and_serial_pairs() {
        let (a, b) = (cfg(4, 10, 1.0), cfg(4, 30, 2.0));
        let q = queue(8, vec![vec![job("x", &[&a], 4), job("y", &[&b], 4)]]);
        let t = simulate(&q, &[&a, &b], &pool(8), &tm()).unwrap();
        assert_eq!(t.records[1].start, 0.0);
        assert_eq!(t.records[1].devices, vec![4, 5, 6, 7]);
        assert!((t.makespan - 15.0).abs() < 1e-12);

        let q = queue(8, vec![vec![job("x", &[&a], 8)], vec![job("y", &[&b], 8)]]);
        let t = simulate(&q, &[&a, &b], &pool(8), &tm()).unwrap();
        assert!((t.makespan - 12.0).abs() < 1e-12);
        assert!(t.precedes(0, 1) && t.shares_devices(0, 1));
        assert!(check_feasibility(&t, &q, &[&a, &b], &ctx(1 << 20, 8)).is_empty());
    }

    #[test]
    fn oversized_batch_is_an_error() {
        let a = cfg(4, 10, 1.0);
        let q = queue(2, vec![vec![job("x", &[&a], 4)]]);
        assert!(matches!(
            simulate(&q, &[&a], &pool(2), &tm()),
            Err(SimError::BatchNeverFits { needed: 4, .. })
        ));
        let q = queue(8, vec![vec![job("x", &[&a], 1)]]);
        assert!(matches!(
            simulate(&q, &[], &pool(8), &tm()),
            Err(SimError::UnknownConfig { .. })
        ));
    }

    #[test]
    fn forged_overlap_and_missing_config() {
        let (a, b) = (cfg(4, 10, 1.0), cfg(4, 10, 2.0));
        let q = queue(2, vec![vec![job("x", &[&a], 1), job("y", &[&b], 1)]]);
        let mut t = simulate(&q, &[&a, &b], &pool(2), &tm()).unwrap();
        t.records[1].devices = vec![0];
        let v = check_feasibility(&t, &q, &[&a, &b], &ctx(1 << 20, 2));
        assert_eq!(
            v,
            vec![Violation::Overlap {
                first: "x".into(),
                second: "y".into(),
                device: 0
            }]
        );

        let c = cfg(4, 10, 3.0);
        let t = simulate(&q, &[&a, &b], &pool(2), &tm()).unwrap();
        let v = check_feasibility(&t, &q, &[&a, &b, &c], &ctx(1 << 20, 2));
        assert_eq!(v, vec![Violation::MissingConfig(c.id.clone())]);
    }

    #[test]
    fn fixed_job_orders() {
        assert_eq!(
            optimal_job_order(&[(2, 3.0), (2, 3.0), (4, 1.0)], 4).unwrap(),
            4.0
        );
        assert_eq!(optimal_job_order(&[(1, 5.0), (1, 5.0)], 1).unwrap(), 10.0);
        // A wide job first leaves no idle gap: 2 + max(3, 1 + 1).
        assert_eq!(
            optimal_job_order(&[(1, 3.0), (1, 1.0), (1, 1.0), (2, 2.0)], 2).unwrap(),
            5.0
        );
        assert!(optimal_job_order(&[(4, 1.0)], 2).is_err());
    }

    #[test]
    fn brute_force_small_cases() {
        let c = ctx(1 << 20, 2);
        let a = cfg(4, 10, 1.0);
        let opt = brute_force_makespan(&[&a], 1, &tm(), &c).unwrap();
        assert_eq!(opt.makespan, 10.0);

        // Packing two configs makes one job slower than two parallel singles.
        let slow = TimeModel::from_coefficients([(1, 1.0, 1.0), (2, 1.0, 1.0)]).unwrap();
        let b = cfg(4, 10, 2.0);
        let opt = brute_force_makespan(&[&a, &b], 2, &slow, &c).unwrap();
        assert!((opt.makespan - 50.0).abs() < 1e-9);
        assert_eq!(opt.trace.records.len(), 2);

        // Each degree-1 job holds exactly one config: three configs, two GPUs.
        let base = c.base_weight_bytes(1);
        let tight = ctx(base + c.config_bytes(&a, 1), 2);
        let d = cfg(4, 10, 3.0);
        let flat = TimeModel::from_coefficients([(1, 1.0, 0.0)]).unwrap();
        let opt = brute_force_makespan(&[&a, &b, &d], 2, &flat, &tight).unwrap();
        assert!((opt.makespan - 20.0).abs() < 1e-9);
        assert!(brute_force_makespan(&[&a; 7], 2, &flat, &tight).is_err());
    }
}
