//! Compares the planner against the exhaustive optimum on a tiny sweep and
//! prints the tail-effect bound of its schedule.

use packsweep::costmodel::{MemoryContext, TimeModel};
use packsweep::planner::ar_bound;
use packsweep::simulator::brute_force_makespan;
use packsweep::workload::{
    ActivationCoefficients, GpuPool, LoraConfig, ModelSpec, ParallelismMode, Projection,
    TargetModule,
};
use packsweep::{plan_jobs, simulate};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelSpec {
        name: "toy".into(),
        n_layers: 2,
        target_modules: vec![TargetModule::new(Projection::Q, 64, 64)],
        base_param_count: 20_000,
        c_prec: 2,
        activation: ActivationCoefficients {
            embed: 0.0,
            attn: 8.0,
            mlp: 8.0,
        },
    };
    let pool = GpuPool {
        gpu_count: 4,
        mem_per_gpu: 60_000,
        load_factor: 1.0,
    };
    let ctx = MemoryContext::new(model, pool.clone(), ParallelismMode::Tensor, 16);
    // Doubling the degree gives a 1.6x speedup.
    let tm = TimeModel::from_coefficients([1u32, 2, 4].map(|d| {
        let s = 1.6f64.powf((d as f64).log2());
        (d, 1.0 / s, 0.002 / s)
    }))?;
    let configs: Vec<LoraConfig> = [
        (4, 2, 100),
        (8, 1, 200),
        (2, 4, 150),
        (16, 1, 50),
        (4, 4, 200),
    ]
    .iter()
    .map(|&(r, b, steps)| LoraConfig::new(r, 2.0 * r as f64, b, 1e-4, 16, steps))
    .collect();
    let refs: Vec<&LoraConfig> = configs.iter().collect();

    let queue = plan_jobs(pool.gpu_count, &refs, &tm, &ctx)?;
    let trace = simulate(&queue, &refs, &pool, &tm)?;
    let opt = brute_force_makespan(&refs, pool.gpu_count, &tm, &ctx)?;
    let tail = ar_bound(&trace)?;

    println!("planned makespan {:.1} s", trace.makespan);
    println!("optimal makespan {:.1} s", opt.makespan);
    println!("ratio            {:.3}", trace.makespan / opt.makespan);
    println!(
        "tail bound       {:.3} (last job {} on {} of {} GPUs, preconditions hold: {})",
        tail.bound,
        tail.last_job,
        tail.last_degree,
        tail.gpu_count,
        tail.preconditions_hold()
    );
    Ok(())
}
