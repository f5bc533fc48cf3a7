//! Gradient (Perlin) noise fields.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lattice cells across the image at the first octave.
pub const BASE_CELLS: usize = 4;

fn fade(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave gradient noise on an `h × w` grid with values in `[-1, 1]`.
/// Octave `k` uses `BASE_CELLS · 2^k` lattice cells per side and amplitude
/// `2^-k`; the sum is divided by the total amplitude.
pub fn perlin_noise(h: usize, w: usize, octaves: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; h * w];
    let mut total_amp = 0.0;
    for k in 0..octaves.max(1) {
        let cells = BASE_CELLS << k;
        let amp = 0.5f64.powi(k as i32);
        total_amp += amp;
        let grads: Vec<(f64, f64)> = (0..(cells + 1) * (cells + 1))
            .map(|_| {
                let a = rng.random_range(0.0..TAU);
                (a.cos(), a.sin())
            })
            .collect();
        let grad = |i: usize, j: usize| grads[i * (cells + 1) + j];
        for y in 0..h {
            let fy = y as f64 * cells as f64 / h as f64;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 * cells as f64 / w as f64;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let dot = |di: usize, dj: usize| {
                    let (gy, gx) = grad(iy + di, ix + dj);
                    gy * (ty - di as f64) + gx * (tx - dj as f64)
                };
                let (sx, sy) = (fade(tx), fade(ty));
                let top = dot(0, 0) + sx * (dot(0, 1) - dot(0, 0));
                let bot = dot(1, 0) + sx * (dot(1, 1) - dot(1, 0));
                out[y * w + x] += amp * (top + sy * (bot - top));
            }
        }
    }
    out.iter_mut().for_each(|v| *v = (*v / total_amp).clamp(-1.0, 1.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_field() {
        assert_eq!(perlin_noise(32, 32, 3, 7), perlin_noise(32, 32, 3, 7));
        assert_ne!(perlin_noise(32, 32, 3, 7), perlin_noise(32, 32, 3, 8));
    }

    #[test]
    fn bounded() {
        for seed in 0..20 {
            for oct in 1..5 {
                assert!(perlin_noise(48, 40, oct, seed).iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn zero_on_lattice_points_at_one_octave() {
        let f = perlin_noise(64, 64, 1, 3);
        let step = 64 / BASE_CELLS;
        for y in (0..64).step_by(step) {
            for x in (0..64).step_by(step) {
                assert!(f[y * 64 + x].abs() < 1e-15);
            }
        }
        assert!(f.iter().any(|v| v.abs() > 0.05));
    }
}
