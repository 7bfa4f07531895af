//! Single-job packing: pick the configs that maximize `sum(rank) / T` for
//! one job of fixed degree under the per-device memory limit.
//!
//! With the affine time model the ratio objective is solved exactly by
//! Dinkelbach's parametric method. Each iteration maximizes
//! `sum(r_k - lambda * S * tau * load_k)` subject to memory, a 0/1 knapsack,
//! then moves `lambda` to the ratio of the new selection until the
//! parametric optimum reaches zero. `S` is the step count of the job; since
//! a job runs for its largest `train_steps`, the search is repeated for each
//! distinct step cap.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{config_load, job_memory, job_time, CostError, MemoryContext, TimeModel};
use crate::workload::LoraConfig;

/// Largest candidate set the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Knapsack instances with at most this many `item x capacity-unit` cells
/// are solved by dynamic programming instead of branch-and-bound.
const DP_CELL_LIMIT: u64 = 2_000_000;

/// Hard stop for the parametric loop; never reached on sane inputs.
const MAX_DINKELBACH_ITERATIONS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackingError {
    #[error("no candidate configs")]
    NoCandidates,
    #[error("parallelism degree {0} is not a power of two")]
    NotPowerOfTwo(u32),
    #[error("base model does not fit at degree {degree}")]
    BaseDoesNotFit { degree: u32 },
    #[error("no config fits at degree {degree}")]
    NoFeasibleSelection { degree: u32 },
    #[error("{size} candidates exceed the brute-force limit of {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error(transparent)]
    Cost(#[from] CostError),
}

impl PackingError {
    /// True for the errors that mean "nothing can be packed at this degree".
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            PackingError::BaseDoesNotFit { .. } | PackingError::NoFeasibleSelection { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingSolution {
    /// Selected config ids, sorted.
    pub selected: Vec<String>,
    pub degree: u32,
    /// `sum(rank) / predicted_time`, rank per second.
    pub throughput: f64,
    pub rank_sum: u64,
    pub predicted_time: f64,
    /// Per-device bytes.
    pub memory_used: u64,
    /// Parametric iterations of the winning step cap (0 for the oracle).
    pub iterations: usize,
    /// Successive ratio estimates of the winning step cap.
    pub lambdas: Vec<f64>,
}

pub fn is_power_of_two(d: u32) -> bool {
    d != 0 && d & (d - 1) == 0
}

fn finish(
    degree: u32,
    chosen: Vec<&LoraConfig>,
    tm: &TimeModel,
    ctx: &MemoryContext,
    iterations: usize,
    lambdas: Vec<f64>,
) -> Result<PackingSolution, PackingError> {
    let predicted_time = job_time(tm, &chosen, degree)?;
    let rank_sum: u64 = chosen.iter().map(|c| c.rank as u64).sum();
    let memory_used = job_memory(&chosen, degree, ctx).bytes;
    let mut selected: Vec<String> = chosen.iter().map(|c| c.id.clone()).collect();
    selected.sort();
    Ok(PackingSolution {
        selected,
        degree,
        throughput: rank_sum as f64 / predicted_time,
        rank_sum,
        predicted_time,
        memory_used,
        iterations,
        lambdas,
    })
}

/// Total order used to pick between equally good selections: higher
/// throughput, then larger rank sum, then smaller sorted id list.
pub fn compare_solutions(a: &PackingSolution, b: &PackingSolution) -> Ordering {
    let scale = a
        .throughput
        .abs()
        .max(b.throughput.abs())
        .max(f64::MIN_POSITIVE);
    if (a.throughput - b.throughput).abs() > 1e-12 * scale {
        return a
            .throughput
            .partial_cmp(&b.throughput)
            .unwrap_or(Ordering::Equal);
    }
    a.rank_sum
        .cmp(&b.rank_sum)
        .then_with(|| b.selected.cmp(&a.selected))
}

/// Candidates that fit alone; errors when the base model or every config
/// overflows.
fn screen<'a>(
    degree: u32,
    candidates: &[&'a LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<(u64, Vec<&'a LoraConfig>), PackingError> {
    if candidates.is_empty() {
        return Err(PackingError::NoCandidates);
    }
    if !is_power_of_two(degree) {
        return Err(PackingError::NotPowerOfTwo(degree));
    }
    let base = ctx.base_weight_bytes(degree);
    let cap = ctx.capacity();
    if base > cap {
        return Err(PackingError::BaseDoesNotFit { degree });
    }
    tm.fit(degree)?;
    if let Some(c) = candidates.iter().find(|c| c.train_steps == 0) {
        return Err(CostError::ZeroTrainSteps(c.id.clone()).into());
    }
    let room = cap - base;
    let fitting: Vec<&LoraConfig> = candidates
        .iter()
        .copied()
        .filter(|c| ctx.config_bytes(c, degree) <= room)
        .collect();
    if fitting.is_empty() {
        return Err(PackingError::NoFeasibleSelection { degree });
    }
    Ok((room, fitting))
}

/// Exact solution of the single-job subproblem at `degree`.
pub fn solve_subproblem(
    degree: u32,
    candidates: &[&LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<PackingSolution, PackingError> {
    let (room, fitting) = screen(degree, candidates, tm, ctx)?;
    let fit = tm.fit(degree)?;

    let mut step_caps: Vec<u32> = fitting.iter().map(|c| c.train_steps).collect();
    step_caps.sort_unstable();
    step_caps.dedup();

    let mut per_cap = Vec::with_capacity(step_caps.len());
    for &cap_steps in &step_caps {
        let group: Vec<&LoraConfig> = fitting
            .iter()
            .copied()
            .filter(|c| c.train_steps <= cap_steps)
            .collect();
        let items: Vec<Item> = group
            .iter()
            .map(|c| Item {
                weight: ctx.config_bytes(c, degree),
                rank: c.rank as f64,
                load: config_load(c),
            })
            .collect();
        let (picked, iterations, lambdas) =
            dinkelbach(&items, room, cap_steps as f64, fit.t0, fit.tau);
        let chosen = picked.iter().map(|&i| group[i]).collect();
        let sol = finish(degree, chosen, tm, ctx, iterations, lambdas)?;
        per_cap.push((cap_steps, group, items, sol));
    }
    let best = per_cap
        .iter()
        .map(|(_, _, _, sol)| sol)
        .max_by(|a, b| compare_solutions(a, b))
        .expect("at least one step cap")
        .clone();

    // Equally good selections may exist under several step caps; take the
    // smallest id list among all of them.
    let mut out = best.clone();
    for (cap_steps, group, items, sol) in &per_cap {
        if !ties(sol, &best) {
            continue;
        }
        let lex = LexSearch {
            degree,
            group,
            items,
            room,
            steps: *cap_steps as f64,
            tau: fit.tau,
            reference: &best,
            tm,
            ctx,
        };
        if let Some(mut canon) = lex.smallest()? {
            canon.iterations = sol.iterations;
            canon.lambdas = sol.lambdas.clone();
            if compare_solutions(&canon, &out) == Ordering::Greater {
                out = canon;
            }
        }
    }
    Ok(out)
}

/// Equal throughput and rank sum, ignoring ids.
fn ties(a: &PackingSolution, b: &PackingSolution) -> bool {
    let mut a = a.clone();
    a.selected.clone_from(&b.selected);
    compare_solutions(&a, b) == Ordering::Equal
}

/// Finds the smallest sorted id list among selections of one step-cap group
/// that tie `reference`, deciding ids in ascending order.
struct LexSearch<'a, 'c> {
    degree: u32,
    group: &'a [&'c LoraConfig],
    items: &'a [Item],
    room: u64,
    steps: f64,
    tau: f64,
    reference: &'a PackingSolution,
    tm: &'a TimeModel,
    ctx: &'a MemoryContext,
}

impl<'c> LexSearch<'_, 'c> {
    fn evaluate(&self, set: &[usize]) -> Result<Option<PackingSolution>, PackingError> {
        if set.is_empty() {
            return Ok(None);
        }
        let chosen: Vec<&'c LoraConfig> = set.iter().map(|&i| self.group[i]).collect();
        let sol = finish(self.degree, chosen, self.tm, self.ctx, 0, Vec::new())?;
        Ok(ties(&sol, self.reference).then_some(sol))
    }

    /// Best completion of `forced` using only `free`, if it ties the reference.
    fn complete(
        &self,
        forced: &[usize],
        free: &[usize],
        values: &[f64],
    ) -> Result<Option<Vec<usize>>, PackingError> {
        let used: u64 = forced.iter().map(|&i| self.items[i].weight).sum();
        if used > self.room {
            return Ok(None);
        }
        let open: Vec<usize> = free.iter().copied().filter(|&i| values[i] > 0.0).collect();
        let weights: Vec<u64> = open.iter().map(|&i| self.items[i].weight).collect();
        let vals: Vec<f64> = open.iter().map(|&i| values[i]).collect();
        let mut set = forced.to_vec();
        set.extend(
            knapsack(&weights, &vals, self.room - used)
                .into_iter()
                .map(|j| open[j]),
        );
        Ok(self.evaluate(&set)?.map(|_| set))
    }

    fn smallest(&self) -> Result<Option<PackingSolution>, PackingError> {
        let lambda = self.reference.throughput;
        let values: Vec<f64> = self
            .items
            .iter()
            .map(|it| it.rank - lambda * self.steps * self.tau * it.load)
            .collect();
        let mut order: Vec<usize> = (0..self.group.len()).collect();
        order.sort_by(|&a, &b| self.group[a].id.cmp(&self.group[b].id));

        let Some(mut witness) = self.complete(&[], &order, &values)? else {
            return Ok(None);
        };
        let mut prefix: Vec<usize> = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            if let Some(sol) = self.evaluate(&prefix)? {
                return Ok(Some(sol));
            }
            prefix.push(i);
            if witness.contains(&i) {
                continue;
            }
            match self.complete(&prefix, &order[pos + 1..], &values)? {
                Some(set) => witness = set,
                None => {
                    prefix.pop();
                }
            }
        }
        self.evaluate(&prefix)
    }
}

#[derive(Debug, Clone, Copy)]
struct Item {
    weight: u64,
    rank: f64,
    load: f64,
}

/// Returns picked item indices, the iteration count and the lambda trace.
fn dinkelbach(
    items: &[Item],
    room: u64,
    steps: f64,
    t0: f64,
    tau: f64,
) -> (Vec<usize>, usize, Vec<f64>) {
    let ratio = |sel: &[usize]| {
        let n: f64 = sel.iter().map(|&i| items[i].rank).sum();
        let load: f64 = sel.iter().map(|&i| items[i].load).sum();
        n / (steps * (t0 + tau * load))
    };
    let mut lambda = 0.0;
    let mut lambdas = vec![lambda];
    let mut current: Vec<usize> = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_DINKELBACH_ITERATIONS {
        iterations += 1;
        let values: Vec<f64> = items
            .iter()
            .map(|it| it.rank - lambda * steps * tau * it.load)
            .collect();
        let (picked, value) = best_nonempty(items, &values, room);
        let parametric = value - lambda * steps * t0;
        let scale = lambda * steps * t0 + values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !current.is_empty() && parametric <= 1e-12 * scale {
            break;
        }
        let next = ratio(&picked);
        if !current.is_empty() && next <= lambda {
            break;
        }
        log::debug!("dinkelbach iter {iterations}: lambda {lambda:.9e} -> {next:.9e}");
        current = picked;
        lambda = next;
        lambdas.push(lambda);
    }
    (current, iterations, lambdas)
}

/// Best non-empty feasible set for the given values.
fn best_nonempty(items: &[Item], values: &[f64], room: u64) -> (Vec<usize>, f64) {
    let positive: Vec<usize> = (0..items.len()).filter(|&i| values[i] > 0.0).collect();
    if !positive.is_empty() {
        let weights: Vec<u64> = positive.iter().map(|&i| items[i].weight).collect();
        let vals: Vec<f64> = positive.iter().map(|&i| values[i]).collect();
        let picked = knapsack(&weights, &vals, room);
        if !picked.is_empty() {
            let value = picked.iter().map(|&j| vals[j]).sum();
            return (picked.into_iter().map(|j| positive[j]).collect(), value);
        }
    }
    // Every value is non-positive: the best non-empty set is one item.
    let best = (0..items.len())
        .filter(|&i| items[i].weight <= room)
        .max_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.cmp(&a))
        })
        .expect("screened items fit individually");
    (vec![best], values[best])
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// 0/1 knapsack with positive values; returns chosen indices (ascending).
pub(crate) fn knapsack(weights: &[u64], values: &[f64], capacity: u64) -> Vec<usize> {
    let g = weights.iter().fold(0, |acc, &w| gcd(acc, w)).max(1);
    let units = capacity / g;
    if (units + 1).saturating_mul(weights.len() as u64) <= DP_CELL_LIMIT {
        knapsack_dp(weights, values, capacity, g)
    } else {
        knapsack_branch_and_bound(weights, values, capacity)
    }
}

/// Dynamic program over capacity measured in multiples of `unit`.
pub(crate) fn knapsack_dp(weights: &[u64], values: &[f64], capacity: u64, unit: u64) -> Vec<usize> {
    let cap = (capacity / unit) as usize;
    let n = weights.len();
    let mut best = vec![0.0_f64; cap + 1];
    let mut take = vec![false; n * (cap + 1)];
    for i in 0..n {
        let w = (weights[i] / unit) as usize;
        if w > cap {
            continue;
        }
        for c in (w..=cap).rev() {
            let cand = best[c - w] + values[i];
            if cand > best[c] {
                best[c] = cand;
                take[i * (cap + 1) + c] = true;
            }
        }
    }
    let mut c = cap;
    let mut out = Vec::new();
    for i in (0..n).rev() {
        if take[i * (cap + 1) + c] {
            out.push(i);
            c -= (weights[i] / unit) as usize;
        }
    }
    out.reverse();
    out
}

/// Depth-first branch-and-bound over classes of identical items, bounded by
/// the fractional relaxation. Identical items branch on a count, so uniform
/// candidate sets do not explode combinatorially.
pub(crate) fn knapsack_branch_and_bound(
    weights: &[u64],
    values: &[f64],
    capacity: u64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = values[a] / weights[a] as f64;
        let rb = values[b] / weights[b] as f64;
        rb.partial_cmp(&ra)
            .unwrap_or(Ordering::Equal)
            .then(weights[a].cmp(&weights[b]))
            .then(a.cmp(&b))
    });
    let mut classes: Vec<Class> = Vec::new();
    for &i in &order {
        match classes.last_mut() {
            Some(c) if c.weight == weights[i] && c.value.to_bits() == values[i].to_bits() => {
                c.members.push(i)
            }
            _ => classes.push(Class {
                weight: weights[i],
                value: values[i],
                members: vec![i],
            }),
        }
    }
    let mut search = Search {
        classes: &classes,
        best_value: 0.0,
        best_counts: vec![0; classes.len()],
        counts: vec![0; classes.len()],
        tolerance: 1e-12 * values.iter().sum::<f64>().max(f64::MIN_POSITIVE),
    };
    search.dfs(0, capacity, 0.0);
    let mut out: Vec<usize> = search
        .best_counts
        .iter()
        .zip(&classes)
        .flat_map(|(&k, c)| c.members[..k].iter().copied())
        .collect();
    out.sort_unstable();
    out
}

struct Class {
    weight: u64,
    value: f64,
    members: Vec<usize>,
}

struct Search<'a> {
    classes: &'a [Class],
    best_value: f64,
    best_counts: Vec<usize>,
    counts: Vec<usize>,
    tolerance: f64,
}

impl Search<'_> {
    fn bound(&self, from: usize, mut room: u64) -> f64 {
        let mut extra = 0.0;
        for c in &self.classes[from..] {
            let fit = ((room / c.weight) as usize).min(c.members.len());
            extra += fit as f64 * c.value;
            room -= fit as u64 * c.weight;
            if fit < c.members.len() {
                extra += c.value * room as f64 / c.weight as f64;
                break;
            }
        }
        extra
    }

    fn dfs(&mut self, i: usize, room: u64, value: f64) {
        if value > self.best_value + self.tolerance {
            self.best_value = value;
            self.best_counts.copy_from_slice(&self.counts);
        }
        if i == self.classes.len() {
            return;
        }
        if value + self.bound(i, room) <= self.best_value + self.tolerance {
            return;
        }
        let c = &self.classes[i];
        let max = ((room / c.weight) as usize).min(c.members.len());
        for k in (0..=max).rev() {
            self.counts[i] = k;
            let (w, v) = (c.weight, c.value);
            self.dfs(i + 1, room - k as u64 * w, value + k as f64 * v);
        }
        self.counts[i] = 0;
    }
}

/// Exhaustive oracle for the subproblem: enumerates every non-empty subset.
pub fn brute_force_subproblem(
    degree: u32,
    candidates: &[&LoraConfig],
    tm: &TimeModel,
    ctx: &MemoryContext,
) -> Result<PackingSolution, PackingError> {
    if candidates.len() > BRUTE_FORCE_LIMIT {
        return Err(PackingError::TooLarge {
            size: candidates.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if candidates.is_empty() {
        return Err(PackingError::NoCandidates);
    }
    if !is_power_of_two(degree) {
        return Err(PackingError::NotPowerOfTwo(degree));
    }
    if !ctx.base_fits(degree) {
        return Err(PackingError::BaseDoesNotFit { degree });
    }
    tm.fit(degree)?;
    let n = candidates.len();
    let mut best: Option<PackingSolution> = None;
    for mask in 1u32..(1u32 << n) {
        let subset: Vec<&LoraConfig> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| candidates[i])
            .collect();
        if !job_memory(&subset, degree, ctx).feasible {
            continue;
        }
        let sol = finish(degree, subset, tm, ctx, 0, Vec::new())?;
        best = match best {
            Some(b) if compare_solutions(&b, &sol) != Ordering::Less => Some(b),
            _ => Some(sol),
        };
    }
    best.ok_or(PackingError::NoFeasibleSelection { degree })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{
        ActivationCoefficients, GpuPool, ModelSpec, ParallelismMode, Projection, TargetModule,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx(base_params: u64, mem: u64) -> MemoryContext {
        let model = ModelSpec {
            name: "toy".into(),
            n_layers: 1,
            target_modules: vec![TargetModule::new(Projection::Q, 64, 64)],
            base_param_count: base_params,
            c_prec: 1,
            activation: ActivationCoefficients::default(),
        };
        let pool = GpuPool {
            gpu_count: 8,
            mem_per_gpu: mem,
            load_factor: 1.0,
        };
        MemoryContext::new(model, pool, ParallelismMode::Tensor, 1)
    }

    /// Config whose standalone memory is `512 * rank + rank * batch` bytes.
    fn cfg(rank: u32, batch: u32) -> LoraConfig {
        LoraConfig::new(rank, 1.0, batch, 1e-4, 1, 10)
    }

    #[test]
    fn singleton() {
        let c = cfg(8, 1);
        let tm = TimeModel::from_coefficients([(1, 1.0, 0.1)]).unwrap();
        let ctx = ctx(1000, 1_000_000);
        let s = solve_subproblem(1, &[&c], &tm, &ctx).unwrap();
        assert_eq!(s.selected, vec![c.id.clone()]);
        let t = job_time(&tm, &[&c], 1).unwrap();
        assert!((s.throughput - 8.0 / t).abs() < 1e-12);
    }

    #[test]
    fn capacity_for_two_picks_largest_ranks() {
        // Equal loads (rank * batch = 32) and tau = 0, so T = steps.
        let a = cfg(8, 4);
        let b = cfg(16, 2);
        let c = cfg(32, 1);
        let tm = TimeModel::from_coefficients([(1, 0.1, 0.0)]).unwrap();
        let context = ctx(0, 1);
        let (wb, wc, wa) = (
            context.config_bytes(&b, 1),
            context.config_bytes(&c, 1),
            context.config_bytes(&a, 1),
        );
        // Room for any two but not all three.
        let context = ctx(0, wb + wc);
        assert!(wa + wb + wc > wb + wc);
        let s = solve_subproblem(1, &[&a, &b, &c], &tm, &context).unwrap();
        let mut want = vec![b.id.clone(), c.id.clone()];
        want.sort();
        assert_eq!(s.selected, want);
        assert!((s.throughput - 48.0).abs() < 1e-9);
        let o = brute_force_subproblem(1, &[&a, &b, &c], &tm, &context).unwrap();
        assert_eq!(o.selected, s.selected);
    }

    #[test]
    fn heavy_low_rank_config_is_excluded() {
        let good = cfg(64, 1);
        let heavy = cfg(1, 64);
        let tm = TimeModel::from_coefficients([(1, 1.0, 0.5)]).unwrap();
        let context = ctx(0, 10_000_000);
        let s = solve_subproblem(1, &[&good, &heavy], &tm, &context).unwrap();
        assert_eq!(s.selected, vec![good.id.clone()]);
        let both = job_memory(&[&good, &heavy], 1, &context);
        assert!(both.feasible);
        let o = brute_force_subproblem(1, &[&good, &heavy], &tm, &context).unwrap();
        assert_eq!(o.selected, s.selected);
    }

    #[test]
    fn infeasible_cases() {
        let c = cfg(8, 1);
        let tm = TimeModel::from_coefficients([(1, 1.0, 0.0), (2, 1.0, 0.0)]).unwrap();
        let tight = ctx(1000, 1000);
        assert_eq!(
            solve_subproblem(1, &[&c], &tm, &tight).unwrap_err(),
            PackingError::NoFeasibleSelection { degree: 1 }
        );
        assert_eq!(
            brute_force_subproblem(1, &[&c], &tm, &tight).unwrap_err(),
            PackingError::NoFeasibleSelection { degree: 1 }
        );
        let over = ctx(2000, 1000);
        assert_eq!(
            solve_subproblem(1, &[&c], &tm, &over).unwrap_err(),
            PackingError::BaseDoesNotFit { degree: 1 }
        );
        assert_eq!(
            solve_subproblem(3, &[&c], &tm, &tight).unwrap_err(),
            PackingError::NotPowerOfTwo(3)
        );
        assert_eq!(
            solve_subproblem(1, &[], &tm, &tight).unwrap_err(),
            PackingError::NoCandidates
        );
        let many: Vec<LoraConfig> = (1..=21).map(|r| cfg(r, 1)).collect();
        let refs: Vec<&LoraConfig> = many.iter().collect();
        assert!(matches!(
            brute_force_subproblem(1, &refs, &tm, &tight),
            Err(PackingError::TooLarge { size: 21, .. })
        ));
    }

    fn brute_knapsack(w: &[u64], v: &[f64], cap: u64) -> f64 {
        let mut best = 0.0_f64;
        for mask in 0u32..(1 << w.len()) {
            let (mut tw, mut tv) = (0, 0.0);
            for i in 0..w.len() {
                if mask & (1 << i) != 0 {
                    tw += w[i];
                    tv += v[i];
                }
            }
            if tw <= cap {
                best = best.max(tv);
            }
        }
        best
    }

    #[test]
    fn knapsack_solvers_agree_with_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.gen_range(1..=12);
            let unit = rng.gen_range(1..=50u64);
            let w: Vec<u64> = (0..n).map(|_| unit * rng.gen_range(1..=20)).collect();
            let v: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        5.0
                    } else {
                        rng.gen_range(0.1..10.0)
                    }
                })
                .collect();
            let cap = rng.gen_range(0..=unit * 60);
            let want = brute_knapsack(&w, &v, cap);
            for picked in [
                knapsack_branch_and_bound(&w, &v, cap),
                knapsack_dp(&w, &v, cap, unit),
            ] {
                let tw: u64 = picked.iter().map(|&i| w[i]).sum();
                let tv: f64 = picked.iter().map(|&i| v[i]).sum();
                assert!(tw <= cap);
                assert!((tv - want).abs() <= 1e-9 * want.max(1.0), "{tv} vs {want}");
            }
        }
    }

    #[test]
    fn uniform_candidates_stay_fast() {
        let configs: Vec<LoraConfig> = (0..200)
            .map(|i| LoraConfig::new(16, 1.0 + i as f64, 2, 1e-4, 1, 10))
            .collect();
        let refs: Vec<&LoraConfig> = configs.iter().collect();
        let tm = TimeModel::from_coefficients([(1, 1.0, 0.01)]).unwrap();
        let one = ctx(0, 1).config_bytes(&configs[0], 1);
        // Awkward capacity that is not a multiple of the item size and large
        // enough to route around the DP path.
        let context = ctx(0, one * 37 + one / 3);
        let s = solve_subproblem(1, &refs, &tm, &context).unwrap();
        assert_eq!(s.selected.len(), 37);
        assert!(s.iterations <= refs.len() + 2);
    }

    #[test]
    fn random_instances_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..=10);
            let configs: Vec<LoraConfig> = (0..n)
                .map(|i| {
                    let mut c = cfg(rng.gen_range(1..=32), rng.gen_range(1..=8));
                    c.train_steps = [10, 20][rng.gen_range(0..2)];
                    c.alpha = i as f64 + 1.0;
                    c.id = c.content_id();
                    c
                })
                .collect();
            let refs: Vec<&LoraConfig> = configs.iter().collect();
            let tm = TimeModel::from_coefficients([(
                1,
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.0..0.1),
            )])
            .unwrap();
            let context = ctx(100, rng.gen_range(20_000..120_000));
            match (
                solve_subproblem(1, &refs, &tm, &context),
                brute_force_subproblem(1, &refs, &tm, &context),
            ) {
                (Ok(s), Ok(o)) => {
                    assert!(
                        (s.throughput - o.throughput).abs() <= 1e-9 * o.throughput,
                        "{} vs {}",
                        s.throughput,
                        o.throughput
                    );
                    assert!(
                        job_memory(
                            &s.selected
                                .iter()
                                .map(|id| configs.iter().find(|c| &c.id == id).unwrap())
                                .collect::<Vec<_>>(),
                            1,
                            &context
                        )
                        .feasible
                    );
                    assert!(s.iterations <= n + 2, "{} iterations for {n}", s.iterations);
                    assert!(s.lambdas.windows(2).all(|w| w[1] > w[0]));
                }
                (Err(a), Err(b)) => assert_eq!(a, b),
                (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
            }
        }
    }
}
