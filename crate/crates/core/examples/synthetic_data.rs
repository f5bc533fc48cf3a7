//! Generates the synthetic dataset, round-trips it through PNG files and
//! applies both injections to one sample.
//!
//! `cargo run --release --example synthetic_data -- [out-dir]`

use iumad::data::{
    foreground_mask, generate_synthetic_dataset, inject_redundant, inject_spurious, load_dataset, write_dataset,
    SynthConfig,
};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "data/example".into());
    let cfg = SynthConfig {
        n_objects: 3,
        per_object_train: 4,
        per_object_test: 4,
        image_hw: 32,
        seed: 1,
    };
    let ds = generate_synthetic_dataset(&cfg)?;
    write_dataset(&ds, out.as_ref())?;
    let back = load_dataset(out.as_ref())?;
    println!("wrote and reloaded {} objects at {:?} in {out}", back.len(), back.hw());
    for o in &back.objects {
        let defects = o.test.iter().filter(|s| s.is_anomalous).count();
        println!("  {:<12} train {} test {} ({defects} defective)", o.name, o.train.len(), o.test.len());
    }

    let s = &ds.objects[0].train[0];
    let fg = foreground_mask(&s.depth).iter().filter(|&&b| b).count();
    println!("object 0 foreground: {fg} of {} pixels", s.depth.len());
    let spur = inject_spurious(s, &ds.objects[1].train[0], 0.5)?;
    let noisy = inject_redundant(s, 0.2, 3)?;
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    println!("mean |Δrgb|: spurious {:.4}, redundant {:.4}", diff(s.rgb.data(), spur.rgb.data()), diff(s.rgb.data(), noisy.rgb.data()));
    Ok(())
}
