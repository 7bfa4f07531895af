//! Planning, simulation and verification for sweeps that train many LoRA
//! adapters by packing several of them into each job.
//!
//! The pipeline runs bottom-up: [`workload`] describes the search space and
//! cluster, [`costmodel`] predicts memory and time, [`packing`] picks the best
//! set of configs for one job, [`planner`] splits the GPU pool and orders
//! jobs, and [`simulator`] executes the resulting queue. [`lorapack`] holds
//! the dense reference math for packed adapters.

pub mod cli;
pub mod costmodel;
pub mod lorapack;
pub mod packing;
pub mod planner;
pub mod simulator;
pub mod workload;

pub use costmodel::{MemoryContext, TimeModel};
pub use planner::{dtm, plan_jobs, JobQueue};
pub use simulator::{check_feasibility, simulate, ScheduleTrace};
pub use workload::{parse_workload, LoraConfig, WorkloadSpec};
