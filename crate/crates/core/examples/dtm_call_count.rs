//! Counts how often the recursive GPU split asks for a single-job solution,
//! with and without caching.

use packsweep::cli::load_inputs;
use packsweep::planner::{dtm_with_options, DtmOptions};
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

    for memoize in [false, true] {
        let out = dtm_with_options(
            8,
            &configs,
            &inputs.time_model,
            &ctx,
            DtmOptions {
                memoize,
                retain_policies: false,
            },
        )?;
        println!(
            "memoize={memoize}: {} calls, {} solves, best policy {} jobs on {} GPUs, {:.0} s",
            out.solver_calls,
            out.solves,
            out.policy.jobs.len(),
            out.policy.gpus_used,
            out.policy.completion_time()
        );
    }
    Ok(())
}
