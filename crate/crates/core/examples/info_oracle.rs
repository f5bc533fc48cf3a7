//! Chain rule of mutual information and predictive sufficiency on discrete tables.
//!
//! `cargo run --release --example info_oracle`

use iumad::info::{chain_rule_counterexample, verify_corollary1, verify_corollary2, DeterministicChannel};

fn main() -> anyhow::Result<()> {
    let pf = [0.1, 0.2, 0.3, 0.4];
    let py_given_f = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.2, 0.8]];

    // merging f=0 with f=1 and f=2 with f=3
    let merge = DeterministicChannel::new(vec![0, 0, 1, 1], 2)?;
    let r = verify_corollary1(&pf, &merge, &py_given_f)?;
    println!(
        "I(F;G) = {:.6}, I(F;G|Y) + I(G;Y) = {:.6}, residual {:.1e}",
        r.i_fg,
        r.i_fg_given_y + r.i_gy,
        r.residual
    );

    let bad = chain_rule_counterexample();
    println!(
        "G = F xor Y: I(F;G) = {:.6}, I(F;G|Y) + I(G;Y) = {:.6}",
        bad.mi_fg(),
        bad.conditional_mi_fg_given_y() + bad.mi_gy()
    );

    let lossy = verify_corollary2(&pf, &py_given_f, &merge)?;
    let exact = verify_corollary2(&pf, &py_given_f, &DeterministicChannel::identity(4))?;
    println!("lossy merge: max KL {:.4}, I(Y;F) - I(Y;G) = {:.4}", lossy.kl_max, lossy.mi_gap);
    println!("identity:    max KL {:.4}, I(Y;F) - I(Y;G) = {:.4}", exact.kl_max, exact.mi_gap);
    Ok(())
}
