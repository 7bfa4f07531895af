//! Per-device memory model for packed LoRA jobs.
//!
//! Adapter state is split into parameters, gradients (1x parameters), AdamW
//! optimizer moments (2x parameters) and activations. Tensor and pipeline
//! parallelism divide every adapter component by `d_tp * d_pp`; ZeRO levels
//! shard optimizer state (1), plus gradients (2), plus parameters (3) by
//! `d_fsdp`. Every division rounds up to whole bytes.

use serde::{Deserialize, Serialize};

use super::CostError;
use crate::workload::{GpuPool, LoraConfig, ModelSpec, ParallelismMode, ShardingSpec, ZeroLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub opt_bytes: u64,
    pub act_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryBreakdown {
    fn new(param_bytes: u64, grad_bytes: u64, opt_bytes: u64, act_bytes: u64) -> Self {
        MemoryBreakdown {
            param_bytes,
            grad_bytes,
            opt_bytes,
            act_bytes,
            total_bytes: param_bytes + grad_bytes + opt_bytes + act_bytes,
        }
    }
}

fn ceil_div(n: u64, d: u64) -> u64 {
    n.div_ceil(d)
}

fn checked_shard(shard: &ShardingSpec) -> Result<(), CostError> {
    shard
        .validate()
        .map_err(|e| CostError::InvalidSharding(e.to_string()))
}

/// Unsharded adapter parameter bytes: `n_layers * r * sum(h_in + h_out) * c_prec`.
fn raw_param_bytes(cfg: &LoraConfig, model: &ModelSpec) -> u64 {
    model.n_layers as u64 * cfg.rank as u64 * model.projection_width() * model.c_prec as u64
}

/// Unsharded adapter activation bytes: one `b x s x r` tensor per layer and
/// targeted projection.
fn raw_act_bytes(cfg: &LoraConfig, model: &ModelSpec) -> u64 {
    model.n_layers as u64
        * model.target_modules.len() as u64
        * cfg.batch_size as u64
        * cfg.seq_len as u64
        * cfg.rank as u64
        * model.c_prec as u64
}

/// Adapter parameter bytes held by one device.
pub fn lora_param_memory(
    cfg: &LoraConfig,
    model: &ModelSpec,
    shard: &ShardingSpec,
) -> Result<u64, CostError> {
    checked_shard(shard)?;
    Ok(ceil_div(
        raw_param_bytes(cfg, model),
        shard.model_parallel(),
    ))
}

/// Full adapter training state held by one device.
pub fn lora_state_memory(
    cfg: &LoraConfig,
    model: &ModelSpec,
    shard: &ShardingSpec,
) -> Result<MemoryBreakdown, CostError> {
    checked_shard(shard)?;
    let param = raw_param_bytes(cfg, model);
    let act = raw_act_bytes(cfg, model);
    let mp = shard.model_parallel();
    let f = shard.d_fsdp as u64;
    let (p, g, o) = match shard.zero_level {
        ZeroLevel::None => (
            ceil_div(param, mp),
            ceil_div(param, mp),
            ceil_div(2 * param, mp),
        ),
        ZeroLevel::One => (param, param, ceil_div(2 * param, f)),
        ZeroLevel::Two => (param, ceil_div(param, f), ceil_div(2 * param, f)),
        ZeroLevel::Three => (
            ceil_div(param, f),
            ceil_div(param, f),
            ceil_div(2 * param, f),
        ),
    };
    Ok(MemoryBreakdown::new(p, g, o, ceil_div(act, mp)))
}

/// Base-model activation bytes per packed sample on one device.
pub fn base_activation_per_sample(model: &ModelSpec, shard: &ShardingSpec, seq_len: u32) -> u64 {
    let raw = model.activation.total() * seq_len as f64 * model.c_prec as f64;
    (raw / shard.model_parallel() as f64).ceil() as u64
}

/// Frozen base-model bytes on one device: weights plus activations for
/// `b_total` packed samples at sequence length `seq_len`.
///
/// Activations are rounded up per sample so the total is additive in the
/// packed batch sizes.
pub fn base_memory(
    model: &ModelSpec,
    shard: &ShardingSpec,
    b_total: u64,
    seq_len: u32,
) -> Result<u64, CostError> {
    checked_shard(shard)?;
    let weights = ceil_div(
        model.base_param_count * model.c_prec as u64,
        shard.model_parallel(),
    );
    Ok(weights + b_total * base_activation_per_sample(model, shard, seq_len))
}

/// Per-device memory of a job and whether it fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobMemory {
    pub bytes: u64,
    pub capacity: u64,
    pub feasible: bool,
}

/// Everything needed to evaluate the memory constraint of a job at a given
/// parallelism degree.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryContext {
    pub model: ModelSpec,
    pub pool: GpuPool,
    pub mode: ParallelismMode,
    /// Sequence length used for base-model activations (the workload maximum).
    pub seq_len: u32,
}

impl MemoryContext {
    pub fn new(model: ModelSpec, pool: GpuPool, mode: ParallelismMode, seq_len: u32) -> Self {
        MemoryContext {
            model,
            pool,
            mode,
            seq_len,
        }
    }

    pub fn for_workload(w: &crate::workload::WorkloadSpec) -> Self {
        Self::new(
            w.model.clone(),
            w.pool.clone(),
            w.parallelism,
            w.max_seq_len(),
        )
    }

    pub fn sharding(&self, degree: u32) -> ShardingSpec {
        assert!(degree >= 1, "parallelism degree must be >= 1");
        self.mode.sharding(degree)
    }

    /// Usable bytes per device.
    pub fn capacity(&self) -> u64 {
        self.pool.capacity()
    }

    /// Base weights on one device at `degree`.
    pub fn base_weight_bytes(&self, degree: u32) -> u64 {
        base_memory(&self.model, &self.sharding(degree), 0, self.seq_len)
            .expect("mode-derived sharding is valid")
    }

    /// Bytes one config adds to a job: its adapter state plus the base
    /// activations of its samples.
    pub fn config_bytes(&self, cfg: &LoraConfig, degree: u32) -> u64 {
        let shard = self.sharding(degree);
        let state = lora_state_memory(cfg, &self.model, &shard)
            .expect("mode-derived sharding is valid")
            .total_bytes;
        state
            + cfg.batch_size as u64 * base_activation_per_sample(&self.model, &shard, self.seq_len)
    }

    /// Whether the frozen model alone fits at `degree`.
    pub fn base_fits(&self, degree: u32) -> bool {
        self.base_weight_bytes(degree) <= self.capacity()
    }
}

/// Per-device bytes of a job packing `configs` at `degree`.
pub fn job_memory(configs: &[&LoraConfig], degree: u32, ctx: &MemoryContext) -> JobMemory {
    let bytes = ctx.base_weight_bytes(degree)
        + configs
            .iter()
            .map(|c| ctx.config_bytes(c, degree))
            .sum::<u64>();
    let capacity = ctx.capacity();
    JobMemory {
        bytes,
        capacity,
        feasible: bytes <= capacity,
    }
}

/// Solves for the effective base-parameter count and base-activation
/// coefficient that reproduce two observed single-device footprints: one
/// job holding `cfg` alone and one holding two copies of it.
///
/// The difference between the two observations is the marginal cost of an
/// adapter (its state plus its base activations); the remainder of the
/// single-adapter footprint is attributed to base weights. Existing
/// activation coefficient proportions are kept; when they are all zero the
/// whole coefficient is placed on the MLP term.
pub fn fit_base_memory(
    model: &ModelSpec,
    cfg: &LoraConfig,
    one_adapter_bytes: u64,
    two_adapter_bytes: u64,
) -> Result<ModelSpec, CostError> {
    let shard = ShardingSpec::unsharded();
    let state = lora_state_memory(cfg, model, &shard)?.total_bytes;
    let marginal = two_adapter_bytes
        .checked_sub(one_adapter_bytes)
        .ok_or_else(|| CostError::Calibration("two-adapter footprint below one-adapter".into()))?;
    let act = marginal.checked_sub(state).ok_or_else(|| {
        CostError::Calibration("marginal footprint smaller than adapter state".into())
    })?;
    let per_token = act as f64 / (cfg.batch_size as f64 * cfg.seq_len as f64 * model.c_prec as f64);
    let mut fitted = model.clone();
    let old = model.activation.total();
    if old > 0.0 {
        let s = per_token / old;
        fitted.activation.embed *= s;
        fitted.activation.attn *= s;
        fitted.activation.mlp *= s;
    } else {
        fitted.activation.embed = 0.0;
        fitted.activation.attn = 0.0;
        fitted.activation.mlp = per_token;
    }
    let act_one = cfg.batch_size as u64 * base_activation_per_sample(&fitted, &shard, cfg.seq_len);
    let weights = one_adapter_bytes
        .checked_sub(state + act_one)
        .ok_or_else(|| CostError::Calibration("single-adapter footprint too small".into()))?;
    fitted.base_param_count = weights / model.c_prec as u64;
    Ok(fitted)
}
