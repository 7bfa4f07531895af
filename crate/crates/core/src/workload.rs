//! Search-space, model and GPU-pool descriptions.
//!
//! A workload document is JSON with the top-level keys `model`, `pool`,
//! `configs` and the optional `profiles`, `parallelism` and
//! `default_train_steps`. Memory is given in bytes and sequence lengths in
//! tokens. See the crate README for a complete annotated document.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::costmodel::ProfileRecord;

/// Errors raised while reading or building a workload.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{field}`: {message}")]
    Semantic { field: String, message: String },
    #[error("empty value list for `{0}`")]
    EmptyRange(&'static str),
}

impl WorkloadError {
    fn semantic(field: impl Into<String>, message: impl Into<String>) -> Self {
        WorkloadError::Semantic {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// One point of the hyperparameter search space.
///
/// Integer fields are unsigned but may still be zero; [`validate_config`]
/// reports such values instead of refusing to construct them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub id: String,
    pub rank: u32,
    pub alpha: f64,
    pub batch_size: u32,
    /// Carried as metadata; it has no influence on cost.
    pub learning_rate: f64,
    pub seq_len: u32,
    pub train_steps: u32,
}

impl LoraConfig {
    /// Builds a config whose id is the content hash of its hyperparameters.
    pub fn new(
        rank: u32,
        alpha: f64,
        batch_size: u32,
        learning_rate: f64,
        seq_len: u32,
        train_steps: u32,
    ) -> Self {
        let mut cfg = LoraConfig {
            id: String::new(),
            rank,
            alpha,
            batch_size,
            learning_rate,
            seq_len,
            train_steps,
        };
        cfg.id = cfg.content_id();
        cfg
    }

    /// Deterministic id derived from the hyperparameter tuple.
    pub fn content_id(&self) -> String {
        let canonical = format!(
            "rank={};alpha={:?};batch_size={};learning_rate={:?};seq_len={};train_steps={}",
            self.rank,
            self.alpha,
            self.batch_size,
            self.learning_rate,
            self.seq_len,
            self.train_steps
        );
        let digest = Sha256::digest(canonical.as_bytes());
        format!("cfg-{}", &hex::encode(digest)[..12])
    }
}

/// The seven projections an adapter may be attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Up,
    Down,
    Gate,
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Up => "up",
            Projection::Down => "down",
            Projection::Gate => "gate",
        };
        f.write_str(s)
    }
}

/// A targeted projection matrix of shape `h_in x h_out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetModule {
    pub projection: Projection,
    pub h_in: u64,
    pub h_out: u64,
}

impl TargetModule {
    pub fn new(projection: Projection, h_in: u64, h_out: u64) -> Self {
        TargetModule {
            projection,
            h_in,
            h_out,
        }
    }
}

/// Per-token activation element counts for the frozen base model, summed
/// over all layers. They are calibration inputs rather than derived values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivationCoefficients {
    #[serde(default)]
    pub embed: f64,
    #[serde(default)]
    pub attn: f64,
    #[serde(default)]
    pub mlp: f64,
}

impl ActivationCoefficients {
    pub fn total(&self) -> f64 {
        self.embed + self.attn + self.mlp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: u32,
    pub target_modules: Vec<TargetModule>,
    pub base_param_count: u64,
    /// Bytes per parameter.
    pub c_prec: u32,
    #[serde(default)]
    pub activation: ActivationCoefficients,
}

impl ModelSpec {
    /// Smallest projection dimension among the targeted modules.
    pub fn min_projection_dim(&self) -> Option<u64> {
        self.target_modules
            .iter()
            .map(|m| m.h_in.min(m.h_out))
            .min()
    }

    /// `sum(h_in + h_out)` over targeted modules.
    pub fn projection_width(&self) -> u64 {
        self.target_modules.iter().map(|m| m.h_in + m.h_out).sum()
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.n_layers == 0 {
            return Err(WorkloadError::semantic("model.n_layers", "must be >= 1"));
        }
        if self.c_prec == 0 {
            return Err(WorkloadError::semantic("model.c_prec", "must be >= 1"));
        }
        if self.target_modules.is_empty() {
            return Err(WorkloadError::semantic(
                "model.target_modules",
                "at least one target module must be enabled",
            ));
        }
        if self.target_modules.len() > 7 {
            return Err(WorkloadError::semantic(
                "model.target_modules",
                "at most 7 target modules",
            ));
        }
        let mut seen = BTreeSet::new();
        for m in &self.target_modules {
            if !seen.insert(m.projection) {
                return Err(WorkloadError::semantic(
                    "model.target_modules",
                    format!("duplicate projection `{}`", m.projection),
                ));
            }
            if m.h_in == 0 || m.h_out == 0 {
                return Err(WorkloadError::semantic(
                    format!("model.target_modules.{}", m.projection),
                    "dimensions must be positive",
                ));
            }
        }
        let a = &self.activation;
        for (name, v) in [("embed", a.embed), ("attn", a.attn), ("mlp", a.mlp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(WorkloadError::semantic(
                    format!("model.activation.{name}"),
                    "must be a non-negative number",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuPool {
    pub gpu_count: u32,
    /// Bytes per device.
    pub mem_per_gpu: u64,
    /// Usable fraction of device memory, in (0, 1].
    pub load_factor: f64,
}

impl GpuPool {
    /// Usable bytes per device, `floor(load_factor * mem_per_gpu)`.
    pub fn capacity(&self) -> u64 {
        (self.load_factor * self.mem_per_gpu as f64).floor() as u64
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.gpu_count == 0 {
            return Err(WorkloadError::semantic("pool.gpu_count", "must be >= 1"));
        }
        if self.mem_per_gpu == 0 {
            return Err(WorkloadError::semantic("pool.mem_per_gpu", "must be > 0"));
        }
        if !(self.load_factor > 0.0 && self.load_factor <= 1.0) {
            return Err(WorkloadError::semantic(
                "pool.load_factor",
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroLevel {
    None,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

/// Per-device sharding of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardingSpec {
    pub d_tp: u32,
    pub d_pp: u32,
    pub d_fsdp: u32,
    pub zero_level: ZeroLevel,
}

impl Default for ShardingSpec {
    fn default() -> Self {
        ShardingSpec::unsharded()
    }
}

impl ShardingSpec {
    pub fn unsharded() -> Self {
        ShardingSpec {
            d_tp: 1,
            d_pp: 1,
            d_fsdp: 1,
            zero_level: ZeroLevel::None,
        }
    }

    pub fn tensor(d_tp: u32) -> Self {
        ShardingSpec {
            d_tp,
            ..Self::unsharded()
        }
    }

    pub fn pipeline(d_pp: u32) -> Self {
        ShardingSpec {
            d_pp,
            ..Self::unsharded()
        }
    }

    pub fn fsdp(d_fsdp: u32, zero_level: ZeroLevel) -> Self {
        ShardingSpec {
            d_fsdp,
            zero_level,
            ..Self::unsharded()
        }
    }

    /// `d_tp * d_pp`, the divisor applied to model-parallel state.
    pub fn model_parallel(&self) -> u64 {
        self.d_tp as u64 * self.d_pp as u64
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.d_tp == 0 || self.d_pp == 0 || self.d_fsdp == 0 {
            return Err(WorkloadError::semantic(
                "sharding",
                "every parallel degree must be >= 1",
            ));
        }
        if self.model_parallel() > 1 && self.zero_level != ZeroLevel::None {
            return Err(WorkloadError::semantic(
                "sharding",
                "mixing tensor/pipeline parallelism with ZeRO sharding is not supported",
            ));
        }
        Ok(())
    }
}

/// How a job's parallelism degree is turned into a [`ShardingSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ParallelismMode {
    #[default]
    Tensor,
    Pipeline,
    Fsdp {
        zero_level: ZeroLevel,
    },
}

impl ParallelismMode {
    pub fn sharding(&self, degree: u32) -> ShardingSpec {
        match *self {
            ParallelismMode::Tensor => ShardingSpec::tensor(degree),
            ParallelismMode::Pipeline => ShardingSpec::pipeline(degree),
            ParallelismMode::Fsdp { zero_level } => ShardingSpec::fsdp(degree, zero_level),
        }
    }
}

/// A validated workload: model, pool and the configuration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub model: ModelSpec,
    pub pool: GpuPool,
    #[serde(default)]
    pub parallelism: ParallelismMode,
    pub configs: Vec<LoraConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profiles: Vec<ProfileRecord>,
}

impl WorkloadSpec {
    pub fn config(&self, id: &str) -> Option<&LoraConfig> {
        self.configs.iter().find(|c| c.id == id)
    }

    /// Largest sequence length in the configuration set.
    pub fn max_seq_len(&self) -> u32 {
        self.configs.iter().map(|c| c.seq_len).max().unwrap_or(0)
    }

    /// Checks every invariant of the workload and its parts.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.model.validate()?;
        self.pool.validate()?;
        self.parallelism.sharding(1).validate()?;
        let mut ids = BTreeSet::new();
        for (i, cfg) in self.configs.iter().enumerate() {
            if cfg.id.is_empty() {
                return Err(WorkloadError::semantic(
                    format!("configs[{i}].id"),
                    "empty id",
                ));
            }
            if !ids.insert(cfg.id.as_str()) {
                return Err(WorkloadError::semantic(
                    format!("configs[{i}].id"),
                    format!("duplicate id `{}`", cfg.id),
                ));
            }
            if let Some(v) = validate_config(cfg, &self.model).into_iter().next() {
                return Err(WorkloadError::semantic(
                    format!("configs[{i}].{}", v.field()),
                    v.to_string(),
                ));
            }
        }
        for (i, p) in self.profiles.iter().enumerate() {
            p.validate()
                .map_err(|m| WorkloadError::semantic(format!("profiles[{i}]"), m))?;
        }
        Ok(())
    }

    /// Stable JSON rendering; `parse_workload` inverts it.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("workload is always serializable")
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("workload is always serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigEntry {
    id: Option<String>,
    rank: u32,
    alpha: f64,
    batch_size: u32,
    learning_rate: f64,
    seq_len: u32,
    train_steps: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadDocument {
    model: ModelSpec,
    pool: GpuPool,
    #[serde(default)]
    parallelism: ParallelismMode,
    default_train_steps: Option<u32>,
    configs: Vec<ConfigEntry>,
    #[serde(default)]
    profiles: Vec<ProfileRecord>,
}

/// Parses and validates a workload document.
///
/// Configs without an explicit `id` receive the content hash of their
/// hyperparameters; configs without `train_steps` take `default_train_steps`.
pub fn parse_workload(text: &str) -> Result<WorkloadSpec, WorkloadError> {
    let doc: WorkloadDocument = serde_json::from_str(text).map_err(|e| WorkloadError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut configs = Vec::with_capacity(doc.configs.len());
    for (i, entry) in doc.configs.into_iter().enumerate() {
        let train_steps = entry
            .train_steps
            .or(doc.default_train_steps)
            .ok_or_else(|| {
                WorkloadError::semantic(
                    format!("configs[{i}].train_steps"),
                    "missing and no default_train_steps given",
                )
            })?;
        let mut cfg = LoraConfig {
            id: String::new(),
            rank: entry.rank,
            alpha: entry.alpha,
            batch_size: entry.batch_size,
            learning_rate: entry.learning_rate,
            seq_len: entry.seq_len,
            train_steps,
        };
        cfg.id = entry.id.unwrap_or_else(|| cfg.content_id());
        configs.push(cfg);
    }
    let spec = WorkloadSpec {
        model: doc.model,
        pool: doc.pool,
        parallelism: doc.parallelism,
        configs,
        profiles: doc.profiles,
    };
    spec.validate()?;
    Ok(spec)
}

/// Value lists for a grid sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRanges {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<u32>,
    pub ranks: Vec<u32>,
    pub alphas: Vec<f64>,
    /// When set, each alpha is a multiple of the rank (`alpha * r`).
    #[serde(default)]
    pub alpha_relative_to_rank: bool,
}

/// Cartesian product of the value lists, stamped onto `template`.
///
/// Iteration order is learning rate, batch size, rank, alpha (outermost to
/// innermost).
pub fn enumerate_grid(
    ranges: &GridRanges,
    template: &LoraConfig,
) -> Result<Vec<LoraConfig>, WorkloadError> {
    if ranges.learning_rates.is_empty() {
        return Err(WorkloadError::EmptyRange("learning_rates"));
    }
    if ranges.batch_sizes.is_empty() {
        return Err(WorkloadError::EmptyRange("batch_sizes"));
    }
    if ranges.ranks.is_empty() {
        return Err(WorkloadError::EmptyRange("ranks"));
    }
    if ranges.alphas.is_empty() {
        return Err(WorkloadError::EmptyRange("alphas"));
    }
    let mut out = Vec::with_capacity(
        ranges.learning_rates.len()
            * ranges.batch_sizes.len()
            * ranges.ranks.len()
            * ranges.alphas.len(),
    );
    for &lr in &ranges.learning_rates {
        for &b in &ranges.batch_sizes {
            for &r in &ranges.ranks {
                for &a in &ranges.alphas {
                    let alpha = if ranges.alpha_relative_to_rank {
                        a * r as f64
                    } else {
                        a
                    };
                    out.push(LoraConfig::new(
                        r,
                        alpha,
                        b,
                        lr,
                        template.seq_len,
                        template.train_steps,
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// A violated config invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    RankZero,
    BatchSizeZero,
    SeqLenZero,
    TrainStepsZero,
    AlphaNotPositive,
    LearningRateNotPositive,
    RankExceedsProjection {
        projection: Projection,
        rank: u32,
        limit: u64,
    },
}

impl Violation {
    pub fn field(&self) -> &'static str {
        match self {
            Violation::RankZero | Violation::RankExceedsProjection { .. } => "rank",
            Violation::BatchSizeZero => "batch_size",
            Violation::SeqLenZero => "seq_len",
            Violation::TrainStepsZero => "train_steps",
            Violation::AlphaNotPositive => "alpha",
            Violation::LearningRateNotPositive => "learning_rate",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RankZero => f.write_str("rank >= 1"),
            Violation::BatchSizeZero => f.write_str("batch_size >= 1"),
            Violation::SeqLenZero => f.write_str("seq_len >= 1"),
            Violation::TrainStepsZero => f.write_str("train_steps >= 1"),
            Violation::AlphaNotPositive => f.write_str("alpha > 0"),
            Violation::LearningRateNotPositive => f.write_str("learning_rate > 0"),
            Violation::RankExceedsProjection {
                projection,
                rank,
                limit,
            } => write!(
                f,
                "rank exceeds projection dimension ({rank} > {limit} on `{projection}`)"
            ),
        }
    }
}

/// Every invariant `cfg` violates against `model`; empty when valid.
pub fn validate_config(cfg: &LoraConfig, model: &ModelSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if cfg.rank == 0 {
        out.push(Violation::RankZero);
    }
    if cfg.batch_size == 0 {
        out.push(Violation::BatchSizeZero);
    }
    if cfg.seq_len == 0 {
        out.push(Violation::SeqLenZero);
    }
    if cfg.train_steps == 0 {
        out.push(Violation::TrainStepsZero);
    }
    if cfg.alpha.is_nan() || cfg.alpha <= 0.0 {
        out.push(Violation::AlphaNotPositive);
    }
    if cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        out.push(Violation::LearningRateNotPositive);
    }
    for m in &model.target_modules {
        let limit = m.h_in.min(m.h_out);
        if cfg.rank as u64 > limit {
            out.push(Violation::RankExceedsProjection {
                projection: m.projection,
                rank: cfg.rank,
                limit,
            });
        }
    }
    out
}
