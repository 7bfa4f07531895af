//! Plans the sample sweep, executes the queue in the simulator and compares
//! it with one-adapter-per-job baselines.

use packsweep::cli::{load_inputs, plan, simulate_baseline};
use packsweep::planner::{ar_bound, Baseline};
use packsweep::{check_feasibility, simulate};
use std::path::Path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let inputs = load_inputs(
        &data.join("sample_workload.json"),
        Some(&data.join("sample_profiles.csv")),
        None,
    )?;
    let configs = inputs.configs();
    let queue = plan(&inputs)?;

    for (i, batch) in queue.batches.iter().enumerate() {
        for job in &batch.jobs {
            println!(
                "batch {i} {} degree {} with {:>2} adapters, {:.0} s",
                job.id,
                job.degree,
                job.configs.len(),
                job.predicted_time
            );
        }
    }

    let trace = simulate(&queue, &configs, &inputs.workload.pool, &inputs.time_model)?;
    let violations = check_feasibility(&trace, &queue, &configs, &inputs.memory());
    let tail = ar_bound(&trace)?;
    println!(
        "packed makespan {:.0} s, utilization {:.3}, {} violations, tail bound {:.3}",
        trace.makespan,
        trace.utilization(),
        violations.len(),
        tail.bound
    );

    for baseline in [Baseline::MinGpu, Baseline::MaxGpu] {
        let t = simulate_baseline(baseline, &inputs)?;
        println!(
            "{baseline:?} makespan {:.0} s ({:.2}x slower)",
            t.makespan,
            t.makespan / trace.makespan
        );
    }
    Ok(())
}
