//! Procedural multi-object dataset. Each object has its own grating texture
//! (frequency, orientation, two colors), background tint and a raised
//! elliptic surface in depth. Defects swap the texture inside a disk and dent
//! the surface there. Test samples always carry a mask, empty for good ones.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ObjectData};
use crate::error::{Error, Result};
use crate::mfen::MultimodalSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_objects: usize,
    pub per_object_train: usize,
    pub per_object_test: usize,
    pub image_hw: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_objects: 10,
            per_object_train: 16,
            per_object_test: 16,
            image_hw: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Family {
    freq: f64,
    angle: f64,
    color_a: [f64; 3],
    color_b: [f64; 3],
    tint: [f64; 3],
    plane: (f64, f64),
    height: f64,
}

impl Family {
    fn new(o: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [0, 1, 2].map(|_| rng.random_range(0.15..0.85));
        let (color_a, color_b, tint) = (color(), color(), color());
        Self {
            freq: 3.0 + (o % 4) as f64 * 1.5 + rng.random_range(0.0..0.5),
            angle: PI * o as f64 / n.max(1) as f64,
            color_a,
            color_b,
            tint,
            plane: (rng.random_range(0.1..0.25), rng.random_range(-0.05..0.05)),
            height: rng.random_range(0.35..0.5),
        }
    }

    fn grating(&self, x: f64, y: f64, freq: f64, angle: f64, phase: f64) -> f64 {
        0.5 + 0.5 * (TAU * freq * (x * angle.cos() + y * angle.sin()) + phase).sin()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Split {
    Train,
    Good,
    Defect,
}

struct Defect {
    cx: f64,
    cy: f64,
    r: f64,
    shift: [f64; 3],
    depth: f64,
}

fn quantize(v: f64, levels: f64) -> f64 {
    (v.clamp(0.0, 1.0) * levels).round() / levels
}

fn render(fam: &Family, hw: usize, object_id: usize, split: Split, rng: &mut ChaCha8Rng) -> Result<MultimodalSample> {
    let defective = split == Split::Defect;
    let phase = rng.random_range(0.0..TAU);
    let freq = fam.freq * rng.random_range(0.95..1.05);
    let angle = fam.angle + rng.random_range(-0.05..0.05);
    let (cx, cy) = (rng.random_range(0.45..0.55), rng.random_range(0.45..0.55));
    let (rx, ry) = (rng.random_range(0.28..0.34), rng.random_range(0.24..0.3));
    let gain = rng.random_range(0.95..1.05);
    let defect = defective.then(|| {
        let t = rng.random_range(0.0..TAU);
        let s = rng.random_range(0.0..0.5);
        Defect {
            cx: cx + s * rx * t.cos(),
            cy: cy + s * ry * t.sin(),
            r: rng.random_range(0.08..0.14),
            shift: [0, 1, 2].map(|_| if rng.random_bool(0.5) { 0.25 } else { -0.25 }),
            depth: rng.random_range(0.12..0.2),
        }
    });

    let plane = hw * hw;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut mask = vec![0.0; plane];
    for iy in 0..hw {
        for ix in 0..hw {
            let (x, y) = ((ix as f64 + 0.5) / hw as f64, (iy as f64 + 0.5) / hw as f64);
            let p = iy * hw + ix;
            let e = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
            let mut d = fam.plane.0 + fam.plane.1 * (x - 0.5);
            let mut c = fam.tint;
            if e < 1.0 {
                d += fam.height * (1.0 - e).sqrt();
                let mut g = fam.grating(x, y, freq, angle, phase);
                let mut shift = [0.0; 3];
                if let Some(df) = &defect {
                    let r2 = ((x - df.cx).powi(2) + (y - df.cy).powi(2)) / (df.r * df.r);
                    if r2 < 1.0 {
                        g = fam.grating(x, y, 2.0 * freq, angle + PI / 2.0, phase);
                        shift = df.shift;
                        d -= df.depth * (1.0 - r2);
                        mask[p] = 1.0;
                    }
                }
                for k in 0..3 {
                    c[k] = (fam.color_a[k] + g * (fam.color_b[k] - fam.color_a[k])) * gain + shift[k];
                }
            }
            for k in 0..3 {
                rgb[k * plane + p] = quantize(c[k], 255.0);
            }
            depth[p] = quantize(d, 65535.0);
        }
    }
    let anomalous = mask.iter().any(|&m| m > 0.0);
    let rgb = Tensor::new(&[3, hw, hw], rgb)?;
    let depth = Tensor::new(&[1, hw, hw], depth)?;
    let mask = (split != Split::Train).then(|| Tensor::new(&[1, hw, hw], mask)).transpose()?;
    MultimodalSample::new(rgb, depth, object_id, mask, anomalous)
}

/// Objects are named `object_00`, `object_01`, ...; test splits alternate
/// good and defective samples, starting with good.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_objects == 0 || cfg.per_object_train == 0 {
        return Err(Error::Config("synthetic dataset needs objects and training samples".into()));
    }
    if cfg.image_hw < 16 || cfg.image_hw % 16 != 0 {
        return Err(Error::Config(format!("image_hw {} must be a positive multiple of 16", cfg.image_hw)));
    }
    let mut fam_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let families: Vec<Family> = (0..cfg.n_objects).map(|o| Family::new(o, cfg.n_objects, &mut fam_rng)).collect();
    let objects = families
        .iter()
        .enumerate()
        .map(|(o, fam)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5eed_0000 + o as u64));
            let train = (0..cfg.per_object_train)
                .map(|_| render(fam, cfg.image_hw, o, Split::Train, &mut rng))
                .collect::<Result<_>>()?;
            let test = (0..cfg.per_object_test)
                .map(|i| render(fam, cfg.image_hw, o, if i % 2 == 1 { Split::Defect } else { Split::Good }, &mut rng))
                .collect::<Result<_>>()?;
            Ok(ObjectData {
                name: format!("object_{o:02}"),
                train,
                test,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { objects })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, hw: usize) -> SynthConfig {
        SynthConfig {
            n_objects: n,
            per_object_train: 12,
            per_object_test: 6,
            image_hw: hw,
            seed: 11,
        }
    }

    #[test]
    fn ten_objects_with_aligned_masks() {
        let ds = generate_synthetic_dataset(&cfg(10, 64)).unwrap();
        assert_eq!(ds.len(), 10);
        for o in &ds.objects {
            for s in &o.train {
                assert!(!s.is_anomalous && s.anomaly_mask.is_none());
            }
            for (i, s) in o.test.iter().enumerate() {
                let m = s.anomaly_mask.as_ref().unwrap();
                assert_eq!(s.is_anomalous, i % 2 == 1);
                assert_eq!(m.max(), if s.is_anomalous { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn defects_change_pixels_only_inside_mask() {
        let fam = Family::new(0, 1, &mut ChaCha8Rng::seed_from_u64(1));
        let good = render(&fam, 32, 0, Split::Good, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bad = render(&fam, 32, 0, Split::Defect, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let m = bad.anomaly_mask.as_ref().unwrap().data();
        for p in 0..32 * 32 {
            let same_rgb = (0..3).all(|c| good.rgb.data()[c * 1024 + p] == bad.rgb.data()[c * 1024 + p]);
            let same_d = good.depth.data()[p] == bad.depth.data()[p];
            if m[p] == 0.0 {
                assert!(same_rgb && same_d, "pixel {p} changed outside the mask");
            } else {
                assert!(bad.depth.data()[p] < good.depth.data()[p]);
            }
        }
    }

    #[test]
    fn linear_probe_separates_two_objects() {
        let ds = generate_synthetic_dataset(&cfg(2, 32)).unwrap();
        let xs: Vec<(Vec<f64>, f64)> = ds
            .objects
            .iter()
            .enumerate()
            .flat_map(|(o, obj)| {
                obj.train.iter().map(move |s| {
                    let mut f = s.rgb.data().to_vec();
                    f.extend_from_slice(s.depth.data());
                    (f, o as f64)
                })
            })
            .collect();
        let dim = xs[0].0.len();
        let (mut w, mut b) = (vec![0.0; dim], 0.0);
        for _ in 0..200 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in &xs {
                let z: f64 = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y;
                gw.iter_mut().zip(x).for_each(|(g, v)| *g += err * v);
                gb += err;
            }
            let lr = 0.05 / xs.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= lr * g);
            b -= lr * gb;
        }
        let correct = xs
            .iter()
            .filter(|(x, y)| {
                let z: f64 = b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                (z > 0.0) == (*y > 0.5)
            })
            .count();
        assert!(correct as f64 / xs.len() as f64 > 0.9, "{correct}/{}", xs.len());
    }

    #[test]
    fn bad_sizes_are_config_errors() {
        assert!(matches!(generate_synthetic_dataset(&cfg(2, 20)), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic_dataset(&cfg(0, 32)), Err(Error::Config(_))));
    }
}
