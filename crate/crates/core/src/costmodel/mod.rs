//! Memory, FLOP and job-time models used by every planning step.

mod memory;
mod profile;
mod time;

use thiserror::Error;

pub use memory::{
    base_activation_per_sample, base_memory, fit_base_memory, job_memory, lora_param_memory,
    lora_state_memory, JobMemory, MemoryBreakdown, MemoryContext,
};
pub use profile::{read_profiles_csv, write_profiles_csv};
pub use time::{
    adapter_load, calibrate_time_model, config_load, job_time, DegreeFit, ProfileRecord, TimeModel,
    MAX_RELATIVE_RMSE,
};

use crate::workload::{LoraConfig, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("invalid sharding: {0}")]
    InvalidSharding(String),
    #[error("time model not calibrated for degree {0}")]
    UncalibratedDegree(u32),
    #[error("no profile records")]
    NoProfiles,
    #[error("degree {degree}: need at least 2 profile records, found {found}")]
    InsufficientRecords { degree: u32, found: usize },
    #[error("degree {degree}: profile loads do not vary, fit is singular")]
    DegenerateDesign { degree: u32 },
    #[error("degree {degree}: relative RMSE {relative_rmse:.3} exceeds limit")]
    FitQuality { degree: u32, relative_rmse: f64 },
    #[error("degree {degree}: non-physical coefficients t0={t0}, tau={tau}")]
    NonPhysicalFit { degree: u32, t0: f64, tau: f64 },
    #[error("invalid profile record: {0}")]
    Profile(String),
    #[error("config `{0}` has train_steps = 0")]
    ZeroTrainSteps(String),
    #[error("job has no configs")]
    EmptyJob,
    #[error("memory calibration: {0}")]
    Calibration(String),
}

/// LoRA FLOPs of one training iteration: forward plus the two backward
/// matmul families, `6 * b * s * r * sum(h_in + h_out) * n_layers`.
pub fn lora_flop(cfg: &LoraConfig, model: &ModelSpec) -> u128 {
    6 * cfg.batch_size as u128
        * cfg.seq_len as u128
        * cfg.rank as u128
        * model.projection_width() as u128
        * model.n_layers as u128
}
