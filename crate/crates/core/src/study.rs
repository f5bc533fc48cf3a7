//! Grids of full runs: component ablation, fusion kinds, modality subsets and
//! the spurious/redundant injection sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InjectionSpec};
use crate::data::Dataset;
use crate::error::Result;
use crate::ibfm::FusionKind;
use crate::model::ModalityMode;
use crate::report::{mkdir, write_text};
use crate::run::{apply_injection, run_incremental_on, MeanStd, RunReport};

/// Spurious blend strength used by the "on" cells of the injection sweep.
pub const SPURIOUS_ON: f64 = 0.5;
pub const NOISE_LEVELS: [f64; 3] = [0.0, 0.2, 0.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub use_mamba: bool,
    pub use_ibfm: bool,
    pub fusion: FusionKind,
    pub modalities: ModalityMode,
    pub injection: InjectionSpec,
}

impl Variant {
    fn from_config(name: impl Into<String>, cfg: &ExperimentConfig) -> Self {
        Self {
            name: name.into(),
            use_mamba: cfg.model.use_mamba,
            use_ibfm: cfg.model.use_ibfm,
            fusion: cfg.model.fusion,
            modalities: cfg.model.modalities,
            injection: cfg.injection.clone(),
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.model.use_mamba = self.use_mamba;
        cfg.model.use_ibfm = self.use_ibfm;
        cfg.model.fusion = self.fusion;
        cfg.model.modalities = self.modalities;
        cfg.injection = self.injection.clone();
        cfg
    }
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

/// Mamba × IBFM on/off, starting from neither and ending with both.
pub fn component_variants(base: &ExperimentConfig) -> Vec<Variant> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(m, i)| {
            let mut cfg = base.clone();
            cfg.model.use_mamba = m;
            cfg.model.use_ibfm = i;
            Variant::from_config(format!("mamba {} ibfm {}", mark(m), mark(i)), &cfg)
        })
        .collect()
}

/// Every fusion kind with both modules on.
pub fn fusion_variants(base: &ExperimentConfig) -> Vec<Variant> {
    FusionKind::ALL
        .into_iter()
        .map(|f| {
            let mut cfg = base.clone();
            cfg.model.use_mamba = true;
            cfg.model.use_ibfm = true;
            cfg.model.fusion = f;
            Variant::from_config(f.as_str(), &cfg)
        })
        .collect()
}

/// RGB+depth, RGB only and depth only.
pub fn modality_variants(base: &ExperimentConfig) -> Vec<Variant> {
    [ModalityMode::Both, ModalityMode::Rgb, ModalityMode::Depth]
        .into_iter()
        .map(|m| {
            let mut cfg = base.clone();
            cfg.model.modalities = m;
            let name = match m {
                ModalityMode::Both => "rgb+depth",
                ModalityMode::Rgb => "rgb",
                ModalityMode::Depth => "depth",
            };
            Variant::from_config(name, &cfg)
        })
        .collect()
}

/// Noise intensities × spurious off/on, in that nesting order.
pub fn injection_variants(base: &ExperimentConfig, noise: &[f64], spurious: f64) -> Vec<Variant> {
    let mut out = Vec::with_capacity(noise.len() * 2);
    for &n in noise {
        for s in [0.0, spurious] {
            let mut cfg = base.clone();
            cfg.injection = InjectionSpec {
                spurious_strength: s,
                noise_intensity: n,
                ..base.injection.clone()
            };
            let name = if s > 0.0 { format!("noise {n} + spurious") } else { format!("noise {n}") };
            out.push(Variant::from_config(name, &cfg));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub variant: Variant,
    /// Per-seed forgetting of I-AUROC; `None` for single-step settings.
    pub fm_iauroc: Vec<Option<f64>>,
    pub final_iauroc: Vec<f64>,
    pub final_pauroc: Vec<f64>,
    pub final_aupro: Vec<f64>,
    pub wall_clock_secs: f64,
}

impl StudyRow {
    pub fn from_report(variant: Variant, r: &RunReport) -> Self {
        Self {
            variant,
            fm_iauroc: r.seeds.iter().map(|s| s.forgetting.iauroc).collect(),
            final_iauroc: r.seeds.iter().map(|s| s.final_mean.iauroc).collect(),
            final_pauroc: r.seeds.iter().map(|s| s.final_mean.pauroc).collect(),
            final_aupro: r.seeds.iter().map(|s| s.final_mean.aupro).collect(),
            wall_clock_secs: r.wall_clock_secs,
        }
    }

    pub fn fm(&self) -> Option<MeanStd> {
        let v: Option<Vec<f64>> = self.fm_iauroc.iter().copied().collect();
        v.map(|v| MeanStd::of(&v))
    }

    pub fn iauroc(&self) -> MeanStd {
        MeanStd::of(&self.final_iauroc)
    }
}

/// Runs each variant on `ds`. Injection is applied per variant on top of
/// `ds`, so pass the clean dataset.
pub fn run_variants(base: &ExperimentConfig, ds: &Dataset, variants: &[Variant]) -> Result<Vec<StudyRow>> {
    variants
        .iter()
        .map(|v| {
            let cfg = v.apply(base);
            let injected = apply_injection(ds, &cfg.injection)?;
            let r = run_incremental_on(&cfg, &injected)?;
            Ok(StudyRow::from_report(v.clone(), &r))
        })
        .collect()
}

fn ms(v: Option<MeanStd>) -> (String, String) {
    match v {
        Some(m) => (format!("{:.3}", m.mean), format!("{:.3}", m.std)),
        None => ("--".into(), "--".into()),
    }
}

pub const STUDY_CSV_HEADER: &str = "variant,mamba,ibfm,fusion,modalities,noise,spurious,fm_iauroc_mean,fm_iauroc_std,iauroc_mean,iauroc_std,pauroc_mean,aupro_mean";

pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from(STUDY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let v = &r.variant;
        let (fm, fs) = ms(r.fm());
        let (im, is) = ms(Some(r.iauroc()));
        let _ = writeln!(
            out,
            "{},{},{},{},{:?},{},{},{fm},{fs},{im},{is},{:.3},{:.3}",
            v.name,
            v.use_mamba,
            v.use_ibfm,
            v.fusion.as_str(),
            v.modalities,
            v.injection.noise_intensity,
            v.injection.spurious_strength,
            MeanStd::of(&r.final_pauroc).mean,
            MeanStd::of(&r.final_aupro).mean,
        );
    }
    out
}

/// Plain-text table for terminals.
pub fn study_table(rows: &[StudyRow]) -> String {
    let mut out = format!("{:<28} {:>16} {:>16}\n", "variant", "FM(I-AUROC)", "final I-AUROC");
    for r in rows {
        let fm = r.fm().map_or("--".to_string(), |m| format!("{:.2} ± {:.2}", m.mean, m.std));
        let ia = r.iauroc();
        let _ = writeln!(out, "{:<28} {:>16} {:>16}", r.variant.name, fm, format!("{:.2} ± {:.2}", ia.mean, ia.std));
    }
    out
}

/// Writes `<name>.csv` and `<name>.json` under `dir`.
pub fn write_study(rows: &[StudyRow], dir: &Path, name: &str) -> Result<()> {
    mkdir(dir)?;
    write_text(&dir.join(format!("{name}.csv")), &study_csv(rows))?;
    let json = serde_json::to_string_pretty(rows).expect("rows serialize");
    write_text(&dir.join(format!("{name}.json")), &(json + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_expected_shape() {
        let base = ExperimentConfig::default();
        let c = component_variants(&base);
        assert_eq!(c.len(), 4);
        assert_eq!((c[0].use_mamba, c[0].use_ibfm), (false, false));
        assert_eq!((c[3].use_mamba, c[3].use_ibfm), (true, true));
        let f = fusion_variants(&base);
        assert_eq!(f.iter().map(|v| v.fusion).collect::<Vec<_>>(), FusionKind::ALL);
        let inj = injection_variants(&base, &NOISE_LEVELS, SPURIOUS_ON);
        assert_eq!(inj.len(), 6);
        assert_eq!(inj[3].injection.noise_intensity, 0.2);
        assert_eq!(inj[3].injection.spurious_strength, SPURIOUS_ON);
        assert_eq!(modality_variants(&base)[2].apply(&base).model.modalities, ModalityMode::Depth);
    }

    #[test]
    fn csv_marks_undefined_forgetting() {
        let base = ExperimentConfig::default();
        let row = StudyRow {
            variant: component_variants(&base).remove(0),
            fm_iauroc: vec![None],
            final_iauroc: vec![80.0],
            final_pauroc: vec![70.0],
            final_aupro: vec![50.0],
            wall_clock_secs: 0.0,
        };
        let csv = study_csv(&[row]);
        let line = csv.lines().nth(1).unwrap();
        assert!(line.contains(",--,--,80.000,0.000,"), "{line}");
        assert_eq!(csv.lines().next().unwrap().split(',').count(), line.split(',').count());
    }
}
