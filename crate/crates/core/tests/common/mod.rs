//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use packsweep::costmodel::{fit_base_memory, MemoryContext, TimeModel};
use packsweep::workload::{
    ActivationCoefficients, GpuPool, LoraConfig, ModelSpec, ParallelismMode, Projection,
    TargetModule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GB: u64 = 1_000_000_000;

/// A planning instance: configs, ground-truth time model and memory context.
#[derive(Debug, Clone)]
pub struct Instance {
    pub configs: Vec<LoraConfig>,
    pub tm: TimeModel,
    pub ctx: MemoryContext,
    pub gpus: u32,
}

impl Instance {
    pub fn refs(&self) -> Vec<&LoraConfig> {
        self.configs.iter().collect()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn powers_of_two_upto(g: u32) -> Vec<u32> {
    (0..32).map(|i| 1u32 << i).take_while(|&d| d <= g).collect()
}

/// Affine time model whose per-degree speedup is `d^exponent`, so GPU-seconds
/// per unit of work grow with the degree when `exponent < 1`.
pub fn sublinear_time_model(gpus: u32, t0: f64, tau: f64, exponent: f64) -> TimeModel {
    TimeModel::from_coefficients(powers_of_two_upto(gpus).into_iter().map(|d| {
        let speedup = (d as f64).powf(exponent);
        (d, t0 / speedup, tau / speedup)
    }))
    .unwrap()
}

fn toy_model() -> ModelSpec {
    ModelSpec {
        name: "toy".into(),
        n_layers: 2,
        target_modules: vec![
            TargetModule::new(Projection::Q, 64, 64),
            TargetModule::new(Projection::V, 64, 64),
        ],
        base_param_count: 20_000,
        c_prec: 2,
        activation: ActivationCoefficients {
            embed: 0.0,
            attn: 8.0,
            mlp: 8.0,
        },
    }
}

pub const SEQ_LEN: u32 = 16;

/// Random instance with `n` configs on `gpus` GPUs. Every config fits alone
/// at degree 1; the capacity admits between one and about four of the
/// largest configs per degree-1 job.
pub fn random_instance(seed: u64, n: usize, gpus: u32) -> Instance {
    random_instance_scaled(seed, n, gpus, 0.6..0.9)
}

/// As [`random_instance`], with the per-degree speedup exponent drawn from
/// `exponents`.
pub fn random_instance_scaled(
    seed: u64,
    n: usize,
    gpus: u32,
    exponents: std::ops::Range<f64>,
) -> Instance {
    let mut r = rng(seed);
    let ranks = [1, 2, 4, 8, 16];
    let batches = [1, 2, 4];
    let lrs = [2e-5, 1e-4, 4e-4];
    let configs: Vec<LoraConfig> = (0..n)
        .map(|i| {
            let rank = ranks[r.gen_range(0..ranks.len())];
            let b = batches[r.gen_range(0..batches.len())];
            let steps = 50 * r.gen_range(1..=4);
            let lr = lrs[r.gen_range(0..lrs.len())];
            // The alpha doubles as a tag keeping ids distinct.
            LoraConfig::new(
                rank,
                rank as f64 * (1.0 + i as f64 / 64.0),
                b,
                lr,
                SEQ_LEN,
                steps,
            )
        })
        .collect();
    let model = toy_model();
    let probe = MemoryContext::new(
        model.clone(),
        GpuPool {
            gpu_count: gpus,
            mem_per_gpu: u64::MAX / 4,
            load_factor: 1.0,
        },
        ParallelismMode::Tensor,
        SEQ_LEN,
    );
    let largest = configs
        .iter()
        .map(|c| probe.config_bytes(c, 1))
        .max()
        .unwrap_or(0);
    let slots: f64 = r.gen_range(1.0..4.0);
    let capacity = probe.base_weight_bytes(1) + (slots * largest as f64) as u64;
    let ctx = MemoryContext::new(
        model,
        GpuPool {
            gpu_count: gpus,
            mem_per_gpu: capacity,
            load_factor: 1.0,
        },
        ParallelismMode::Tensor,
        SEQ_LEN,
    );
    let t0 = r.gen_range(0.5..2.0);
    let typical_load = 8.0 * 2.0 * SEQ_LEN as f64;
    let tau = t0 * r.gen_range(0.05..0.5) / typical_load;
    let exponent = r.gen_range(exponents);
    Instance {
        configs,
        tm: sublinear_time_model(gpus, t0, tau, exponent),
        ctx,
        gpus,
    }
}

/// Qwen-2.5-7B-like dense model with LoRA on the attention projections.
pub fn qwen7b() -> ModelSpec {
    ModelSpec {
        name: "qwen2.5-7b".into(),
        n_layers: 28,
        target_modules: vec![
            TargetModule::new(Projection::Q, 3584, 3584),
            TargetModule::new(Projection::K, 3584, 512),
            TargetModule::new(Projection::V, 3584, 512),
            TargetModule::new(Projection::O, 3584, 3584),
        ],
        base_param_count: 7_615_616_512,
        c_prec: 2,
        activation: ActivationCoefficients {
            embed: 3584.0,
            attn: 28.0 * 4.0 * 3584.0,
            mlp: 28.0 * 3.0 * 18944.0,
        },
    }
}

/// The adapter used for the two-point memory fit.
pub fn fit_adapter() -> LoraConfig {
    LoraConfig::new(16, 32.0, 1, 1e-4, 1024, 100)
}

/// Qwen-7B memory model fitted to 18.2 GB with one adapter and 20.4 GB
/// with two, on one 40 GB device at load factor 1.
pub fn qwen7b_fitted_context(gpus: u32) -> MemoryContext {
    let fitted =
        fit_base_memory(&qwen7b(), &fit_adapter(), 18_200_000_000, 20_400_000_000).unwrap();
    MemoryContext::new(
        fitted,
        GpuPool {
            gpu_count: gpus,
            mem_per_gpu: 40 * GB,
            load_factor: 1.0,
        },
        ParallelismMode::Tensor,
        1024,
    )
}

/// Naive row-by-column product used as an independent oracle.
pub fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m) = (a.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for (t, row) in b.iter().enumerate() {
                acc += a[i][t] * row[j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn naive_transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = a.first().map_or(0, Vec::len);
    (0..m)
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

fn axpy(x: &[Vec<f64>], s: f64, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .zip(y)
        .map(|(xr, yr)| xr.iter().zip(yr).map(|(a, b)| a + s * b).collect())
        .collect()
}

pub fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Single-adapter forward pass computed with explicit loops.
pub fn naive_forward(
    x: &[Vec<f64>],
    w: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    alpha: f64,
) -> Vec<Vec<f64>> {
    let base = naive_matmul(x, w);
    let low = naive_matmul(&naive_matmul(x, a), b);
    axpy(&base, alpha, &low)
}

/// Single-adapter gradients `(dA, dB, dx)` computed with explicit loops.
type Rows = Vec<Vec<f64>>;

pub fn naive_backward(
    x: &[Vec<f64>],
    w: &[Vec<f64>],
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    alpha: f64,
    dy: &[Vec<f64>],
) -> (Rows, Rows, Rows) {
    let scale = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        m.into_iter()
            .map(|r| r.into_iter().map(|v| alpha * v).collect())
            .collect()
    };
    let h = naive_matmul(x, a);
    let db = scale(naive_matmul(&naive_transpose(&h), dy));
    let dh = scale(naive_matmul(dy, &naive_transpose(b)));
    let da = naive_matmul(&naive_transpose(x), &dh);
    let dx = axpy(
        &naive_matmul(dy, &naive_transpose(w)),
        1.0,
        &naive_matmul(&dh, &naive_transpose(a)),
    );
    (da, db, dx)
}

pub fn max_abs_diff(m: &nalgebra::DMatrix<f64>, oracle: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for (i, row) in oracle.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((m[(i, j)] - v).abs());
        }
    }
    worst
}

pub const SWEEP_GRID: &str = include_str!("../../data/sweep_grid.json");

/// Samples per epoch in the sweep-shaped workloads; each config trains one
/// epoch, so its step count is `SWEEP_SAMPLES / batch_size`.
pub const SWEEP_SAMPLES: u32 = 2048;

/// The 120-config grid at sequence length 1024, one epoch per config.
pub fn sweep_configs() -> Vec<LoraConfig> {
    let ranges: packsweep::workload::GridRanges = serde_json::from_str(SWEEP_GRID).unwrap();
    let template = LoraConfig::new(8, 16.0, 1, 1e-4, 1024, 1);
    packsweep::workload::enumerate_grid(&ranges, &template)
        .unwrap()
        .into_iter()
        .map(|mut c| {
            c.train_steps = SWEEP_SAMPLES / c.batch_size;
            c
        })
        .collect()
}

/// Affine Qwen-7B iteration times: 0.9 s with no adapter load, 10% more when
/// a rank-64 adapter grows its batch from 1 to 8 at 1024 tokens.
pub fn qwen7b_time_model(gpus: u32, exponent: f64) -> TimeModel {
    let t0 = 0.9;
    let tau = 0.1 * t0 / (64.0 * 7.0 * 1024.0);
    sublinear_time_model(gpus, t0, tau, exponent)
}

/// A sweep-shaped instance: 120 grid configs, 8 GPUs of 40 GB, fitted memory.
pub fn sweep_instance(exponent: f64) -> Instance {
    Instance {
        configs: sweep_configs(),
        tm: qwen7b_time_model(8, exponent),
        ctx: qwen7b_fitted_context(8),
        gpus: 8,
    }
}
