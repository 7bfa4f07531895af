//! Fits the base memory of a 7B model to two measured footprints and counts
//! how many adapters share one 40 GB device.

use packsweep::costmodel::{fit_base_memory, job_memory, MemoryContext};
use packsweep::workload::{
    ActivationCoefficients, GpuPool, LoraConfig, ModelSpec, ParallelismMode, Projection,
    TargetModule,
};

const GB: f64 = 1e9;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelSpec {
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
    };
    let adapter = LoraConfig::new(16, 32.0, 1, 1e-4, 1024, 100);
    let fitted = fit_base_memory(&model, &adapter, 18_200_000_000, 20_400_000_000)?;
    println!(
        "fitted base parameters {:.3e}, activation coefficient {:.1}",
        fitted.base_param_count as f64,
        fitted.activation.total()
    );

    let ctx = MemoryContext::new(
        fitted,
        GpuPool {
            gpu_count: 1,
            mem_per_gpu: 40_000_000_000,
            load_factor: 1.0,
        },
        ParallelismMode::Tensor,
        1024,
    );
    for n in 1..=12 {
        let packed = vec![&adapter; n];
        let m = job_memory(&packed, 1, &ctx);
        println!(
            "{n:>2} adapters: {:>6.2} GB of {:.2} GB  {}",
            m.bytes as f64 / GB,
            m.capacity as f64 / GB,
            if m.feasible { "fits" } else { "rejected" }
        );
    }
    Ok(())
}
