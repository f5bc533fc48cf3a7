//! Redundant noise × spurious background sweep, plus the modality comparison.
//!
//! `cargo run --release --example injection_study -- [seeds]`

use iumad::config::ExperimentConfig;
use iumad::data::generate_synthetic_dataset;
use iumad::study::{injection_variants, modality_variants, run_variants, study_table, NOISE_LEVELS, SPURIOUS_ON};

fn main() -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::compact();
    if let Some(n) = std::env::args().nth(1) {
        cfg.seeds = (0..n.parse()?).collect();
    }
    let ds = generate_synthetic_dataset(&cfg.synth)?;
    let rows = run_variants(&cfg, &ds, &injection_variants(&cfg, &NOISE_LEVELS, SPURIOUS_ON))?;
    print!("{}", study_table(&rows));

    let joint = ExperimentConfig {
        setting: "10-0 with 0 step".into(),
        ..cfg
    };
    let rows = run_variants(&joint, &ds, &modality_variants(&joint))?;
    print!("{}", study_table(&rows));
    Ok(())
}
