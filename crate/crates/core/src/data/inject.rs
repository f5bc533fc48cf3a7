//! Perturbations that add spurious (foreign background) or redundant (noise)
//! content to samples.

use super::noise::perlin_noise;
use crate::error::{Error, Result};
use crate::mfen::MultimodalSample;
use crate::tensor::Tensor;

const HIST_BINS: usize = 256;
const NOISE_OCTAVES: usize = 4;

/// Otsu's threshold over a 256-bin histogram spanning `[min, max]`. Values
/// at or above the returned threshold form the upper class.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || hi <= lo {
        return hi;
    }
    let width = (hi - lo) / HIST_BINS as f64;
    let mut hist = [0usize; HIST_BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(HIST_BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &c) in hist.iter().enumerate().take(HIST_BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best {
            best = between;
            best_k = k;
        }
    }
    lo + (best_k + 1) as f64 * width
}

/// Pixels whose depth exceeds the Otsu threshold (closer to the camera).
pub fn foreground_mask(depth: &Tensor) -> Vec<bool> {
    let t = otsu_threshold(depth.data());
    depth.data().iter().map(|&d| d >= t).collect()
}

fn blend(dst: &Tensor, src: &Tensor, region: &[bool], a: f64) -> Tensor {
    let plane = region.len();
    Tensor::from_fn(dst.shape(), |i| {
        let (x, s) = (dst.data()[i], src.data()[i]);
        if region[i % plane] {
            (1.0 - a) * x + a * s
        } else {
            x
        }
    })
}

/// Alpha-blends `source` into `sample` wherever both are background, in RGB
/// and depth. Labels and masks are kept.
pub fn inject_spurious(sample: &MultimodalSample, source: &MultimodalSample, strength: f64) -> Result<MultimodalSample> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Precondition(format!("spurious strength {strength} outside [0, 1]")));
    }
    if sample.hw() != source.hw() {
        return Err(Error::Shape(format!("sample {:?} vs source {:?}", sample.hw(), source.hw())));
    }
    let fg_dst = foreground_mask(&sample.depth);
    let fg_src = foreground_mask(&source.depth);
    let region: Vec<bool> = fg_dst.iter().zip(&fg_src).map(|(a, b)| !a && !b).collect();
    Ok(MultimodalSample {
        rgb: blend(&sample.rgb, &source.rgb, &region, strength),
        depth: blend(&sample.depth, &source.depth, &region, strength),
        ..sample.clone()
    })
}

/// Adds `intensity` times a Perlin field to RGB (one field shared by the
/// three channels) and an independent field to depth, then clamps to `[0, 1]`.
pub fn inject_redundant(sample: &MultimodalSample, intensity: f64, seed: u64) -> Result<MultimodalSample> {
    if !(intensity >= 0.0 && intensity.is_finite()) {
        return Err(Error::Precondition(format!("noise intensity {intensity} must be finite and >= 0")));
    }
    let (h, w) = sample.hw();
    let plane = h * w;
    let n_rgb = perlin_noise(h, w, NOISE_OCTAVES, seed);
    let n_depth = perlin_noise(h, w, NOISE_OCTAVES, seed ^ 0x9e37_79b9_7f4a_7c15);
    let add = |t: &Tensor, n: &[f64]| {
        Tensor::from_fn(t.shape(), |i| (t.data()[i] + intensity * n[i % plane]).clamp(0.0, 1.0))
    };
    Ok(MultimodalSample {
        rgb: add(&sample.rgb, &n_rgb),
        depth: add(&sample.depth, &n_depth),
        ..sample.clone()
    })
}
