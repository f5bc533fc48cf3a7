//! Impulse response of the SSM scan and the four-direction ES2D operator.
//!
//! `cargo run --release --example mamba_scan`

use iumad::mamba::{es2d, es2d_direction, ssm_scan, ScanDirection, SsmCoefficients};
use iumad::tensor::Tensor;

fn main() -> anyhow::Result<()> {
    let coeffs = SsmCoefficients::uniform(1, 0.5, 1.0, 1.0, 0.0);
    let mut impulse = vec![0.0; 8];
    impulse[0] = 1.0;
    let y = ssm_scan(&Tensor::new(&[8, 1], impulse)?, &coeffs)?;
    println!("impulse response (decay 0.5): {:?}", y.data());

    // a single hot cell on a 4x4 map spreads along each scan direction
    let mut map = vec![0.0; 16];
    map[5] = 1.0;
    let x = Tensor::new(&[1, 4, 4], map)?;
    for dir in ScanDirection::ALL {
        let y = es2d_direction(&x, &coeffs, dir)?;
        println!("{dir:?}:");
        for row in y.data().chunks(4) {
            println!("  {row:>6.3?}");
        }
    }
    let y = es2d(&x, &coeffs)?;
    println!("merged:");
    for row in y.data().chunks(4) {
        println!("  {row:>6.3?}");
    }
    Ok(())
}
