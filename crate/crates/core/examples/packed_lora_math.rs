//! Runs several adapters of different ranks through one packed forward and
//! backward pass and checks the gradients numerically.

use packsweep::lorapack::{grad_check, packed_backward, packed_forward, random_pack, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (pack, w) = random_pack(&mut rng, &[2, 4, 8], &[3, 5, 2], 6, 5)?;

    let outputs = packed_forward(&pack, &w)?;
    let upstream: Vec<Matrix> = outputs
        .iter()
        .map(|y| Matrix::from_element(y.nrows(), y.ncols(), 1.0))
        .collect();
    let grads = packed_backward(&pack, &w, &upstream)?;
    for (i, (y, g)) in outputs.iter().zip(&grads).enumerate() {
        println!(
            "adapter {i}: output {}x{}, |dA| {:.3}, |dB| {:.3}",
            y.nrows(),
            y.ncols(),
            g.da.norm(),
            g.db.norm()
        );
    }

    let report = grad_check(&pack, &w, 11)?;
    for case in &report.cases {
        println!(
            "case {} {:<3} max rel err {:.2e} {}",
            case.case,
            case.quantity,
            case.max_rel_error,
            if case.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(())
}
