//! Fits per-degree iteration-time coefficients from a profile table and
//! predicts the time of a packed job.

use packsweep::costmodel::{calibrate_time_model, job_time, read_profiles_csv};
use packsweep::workload::LoraConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let records = read_profiles_csv(include_str!("../data/sample_profiles.csv"))?;
    let tm = calibrate_time_model(&records)?;

    println!("degree  t0 (s)    tau (s/unit)  rel. rmse");
    for d in [1, 2, 4, 8] {
        let fit = tm.fit(d)?;
        println!(
            "{d:>6}  {:.4}    {:.3e}     {:.4}",
            fit.t0, fit.tau, fit.relative_rmse
        );
    }

    let a = LoraConfig::new(8, 16.0, 4, 1e-4, 1024, 512);
    let b = LoraConfig::new(128, 512.0, 2, 2e-4, 1024, 1024);
    for d in [1, 2, 4, 8] {
        println!(
            "degree {d}: alone {:.1} s + {:.1} s, packed {:.1} s",
            job_time(&tm, &[&a], d)?,
            job_time(&tm, &[&b], d)?,
            job_time(&tm, &[&a, &b], d)?
        );
    }
    Ok(())
}
