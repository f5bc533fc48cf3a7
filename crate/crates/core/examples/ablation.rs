//! Component and fusion-kind ablations on the synthetic dataset.
//!
//! `cargo run --release --example ablation -- [components|fusion] [seeds]`

use iumad::config::ExperimentConfig;
use iumad::data::generate_synthetic_dataset;
use iumad::study::{component_variants, fusion_variants, run_variants, study_table};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let grid = args.next().unwrap_or_else(|| "components".into());
    let mut cfg = ExperimentConfig::compact();
    if let Some(n) = args.next() {
        cfg.seeds = (0..n.parse()?).collect();
    }
    let variants = match grid.as_str() {
        "components" => component_variants(&cfg),
        "fusion" => fusion_variants(&cfg),
        other => anyhow::bail!("unknown grid {other:?}; expected components or fusion"),
    };
    let ds = generate_synthetic_dataset(&cfg.synth)?;
    let rows = run_variants(&cfg, &ds, &variants)?;
    print!("{}", study_table(&rows));
    for r in &rows {
        println!("{}: {:.1}s", r.variant.name, r.wall_clock_secs);
    }
    Ok(())
}
