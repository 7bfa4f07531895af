//! Chooses the adapters that give one job the highest rank throughput at
//! each parallelism degree.

use packsweep::cli::load_inputs;
use packsweep::packing::solve_subproblem;
use std::path::Path;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let inputs = load_inputs(
        &data.join("sample_workload.json"),
        Some(&data.join("sample_profiles.csv")),
        None,
    )?;
    let configs = inputs.configs();
    let ctx = inputs.memory();

    for d in [1, 2, 4, 8] {
        let sol = solve_subproblem(d, &configs, &inputs.time_model, &ctx)?;
        println!(
            "degree {d}: {} adapters, rank sum {}, {:.0} s, {:.2} GB/device, {:.3} rank/s",
            sol.selected.len(),
            sol.rank_sum,
            sol.predicted_time,
            sol.memory_used as f64 / 1e9,
            sol.throughput
        );
    }
    Ok(())
}
