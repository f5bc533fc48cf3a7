use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::TensorError;

/// Seed used for dropout masks inside gradient checks; every evaluation of
/// the checked function sees the same masks.
const CHECK_SEED: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±h probes straddle a ReLU kink.
    pub excluded: usize,
}

impl FdReport {
    fn merge(&mut self, other: FdReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.excluded += other.excluded;
    }
}

fn eval_scalar<F, E>(f: &F, x: &Tensor, frozen: &[Tensor]) -> Result<(f64, u64), E>
where
    F: Fn(&mut Graph, Var) -> Result<Var, E>,
{
    let mut g = Graph::training(CHECK_SEED);
    g.override_detached(frozen.to_vec());
    let v = g.input(x.clone(), false);
    let out = f(&mut g, v)?;
    Ok((g.value(out).item(), g.kink_hash()))
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `h`. Stop-gradient (`detach`) outputs are held at
/// their base-point values while probing.
pub fn finite_diff_check<F, E>(f: F, x: &Tensor, h: f64) -> Result<FdReport, E>
where
    F: Fn(&mut Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::training(CHECK_SEED);
    let v = g.input(x.clone(), true);
    let out = f(&mut g, v)?;
    let base_kinks = g.kink_hash();
    let frozen = g.detached_values().to_vec();
    g.backward(out)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = FdReport::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, kp) = eval_scalar(&f, &probe, &frozen)?;
        probe.data_mut()[i] = orig - h;
        let (fm, km) = eval_scalar(&f, &probe, &frozen)?;
        probe.data_mut()[i] = orig;
        if kp != base_kinks || km != base_kinks {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

/// Gradient check over the trainable parameters of `store`. With
/// `coords_per_param = Some(k)`, at most `k` coordinates of each parameter
/// tensor are probed (chosen by `seed`).
pub fn finite_diff_check_params<F, E>(
    store: &ParamStore,
    f: F,
    h: f64,
    coords_per_param: Option<usize>,
    seed: u64,
) -> Result<FdReport, E>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::training(CHECK_SEED);
    let out = f(&mut g, &work)?;
    let base_kinks = g.kink_hash();
    let frozen = g.detached_values().to_vec();
    g.backward(out)?;
    work.accumulate(&g, 1.0);
    let analytic: Vec<Vec<f64>> = work.ids().map(|id| work.grad(id).to_vec()).collect();

    let eval = |s: &ParamStore| -> Result<(f64, u64), E> {
        let mut g = Graph::training(CHECK_SEED);
        g.override_detached(frozen.clone());
        let out = f(&mut g, s)?;
        Ok((g.value(out).item(), g.kink_hash()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    let ids: Vec<_> = work.trainable_ids().collect();
    for id in ids {
        let n = work.value(id).len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut part = FdReport::default();
        for i in coords {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let (fp, kp) = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - h;
            let (fm, km) = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            if kp != base_kinks || km != base_kinks {
                part.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id.0][i];
            part.max_rel_err = part.max_rel_err.max((a - numeric).abs() / a.abs().max(1.0));
            part.checked += 1;
        }
        report.merge(part);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let s = g.scale(x, 3.5)?;
                g.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_err < 1e-9);
    }
}
