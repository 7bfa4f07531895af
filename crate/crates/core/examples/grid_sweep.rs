//! Expands a grid of hyperparameter value lists into individual configs.
//!
//! Run with `cargo run --example grid_sweep`.

use packsweep::workload::{enumerate_grid, GridRanges, LoraConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ranges: GridRanges = serde_json::from_str(include_str!("../data/sweep_grid.json"))?;
    let template = LoraConfig::new(8, 16.0, 1, 1e-4, 1024, 1);
    let mut configs = enumerate_grid(&ranges, &template)?;
    // One pass over 2048 samples per config.
    for c in &mut configs {
        c.train_steps = 2048 / c.batch_size;
        c.id = c.content_id();
    }

    println!("{} configs", configs.len());
    println!(
        "{:<18} {:>5} {:>7} {:>3} {:>8} {:>6}",
        "id", "rank", "alpha", "bs", "lr", "steps"
    );
    for c in configs.iter().take(8) {
        println!(
            "{:<18} {:>5} {:>7} {:>3} {:>8.0e} {:>6}",
            c.id, c.rank, c.alpha, c.batch_size, c.learning_rate, c.train_steps
        );
    }
    println!("...");
    Ok(())
}
