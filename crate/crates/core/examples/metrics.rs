//! Detection metrics on hand-made maps and the forgetting measure on a toy history.
//!
//! `cargo run --release --example metrics`

use iumad::metrics::{aupro, auroc, forgetting_metric, pixel_auroc, MetricKind, MetricsHistory, ObjectMetrics};
use iumad::tensor::Tensor;

fn om(iauroc: f64) -> ObjectMetrics {
    ObjectMetrics {
        iauroc,
        pauroc: iauroc,
        aupro: iauroc,
    }
}

fn main() -> anyhow::Result<()> {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.7, 0.2];
    let labels = [false, false, true, true, true, false];
    println!("I-AUROC {:.4}", auroc(&scores, &labels)?);

    // an 8x8 map whose 2x2 defect is scored above the background, with one false peak
    let mut m = vec![0.1; 64];
    let mut mask = vec![0.0; 64];
    for i in [18, 19, 26, 27] {
        m[i] = 0.9;
        mask[i] = 1.0;
    }
    m[60] = 0.95;
    let maps = [Tensor::new(&[1, 8, 8], m)?];
    let masks = [Tensor::new(&[1, 8, 8], mask)?];
    println!("P-AUROC {:.4}, AUPRO@0.3 {:.4}", pixel_auroc(&maps, &masks)?, aupro(&maps, &masks, 0.3)?);

    let mut h = MetricsHistory::new();
    h.insert(0, 0, om(90.0));
    h.insert(1, 0, om(80.0));
    h.insert(1, 1, om(85.0));
    h.insert(2, 0, om(70.0));
    h.insert(2, 1, om(84.0));
    h.insert(2, 2, om(88.0));
    println!("FM(I-AUROC) {:.3}", forgetting_metric(&h, MetricKind::IAuroc)?);
    Ok(())
}
