//! Finite-difference check of a small graph and of the full gradient gate.
//!
//! `cargo run --release --example gradient_check`

use iumad::tensor::{finite_diff_check, Graph, Tensor, Var};
use iumad::verify::{gradient_gate, GRAD_INSTANCES};
use iumad::TensorError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[6, 3], 0.5, &mut rng);

    // softmax(x · w) cross-entropy against fixed labels
    let r = finite_diff_check(
        |g: &mut Graph, v: Var| -> Result<Var, TensorError> {
            let wv = g.constant(w.clone());
            let logits = g.matmul(v, wv)?;
            g.cross_entropy(logits, &[0, 2, 1, 2])
        },
        &x,
        1e-5,
    )?;
    println!("cross-entropy over matmul: max rel err {:.2e} over {} coords", r.max_rel_err, r.checked);

    let gate = gradient_gate(GRAD_INSTANCES);
    for c in &gate.checks {
        println!("  [{}] {:<16} {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{}: {} in {:.1}s", gate.name, if gate.passed { "PASS" } else { "FAIL" }, gate.secs);
    Ok(())
}
