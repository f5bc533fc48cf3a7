//! Exact mutual-information calculus on finite joint tables p(f, g, y), in nats.

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Joint distribution table, row-major over `(f, g, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    nf: usize,
    ng: usize,
    ny: usize,
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nf: usize, ng: usize, ny: usize, p: Vec<f64>) -> Result<Self> {
        if nf == 0 || ng == 0 || ny == 0 || p.len() != nf * ng * ny {
            return Err(Error::Shape(format!(
                "joint of {} entries for {nf}×{ng}×{ny}",
                p.len()
            )));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Precondition("joint has negative or non-finite entries".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::Precondition(format!("joint sums to {s}")));
        }
        Ok(Self { nf, ng, ny, p })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.nf, self.ng, self.ny)
    }

    pub fn at(&self, f: usize, g: usize, y: usize) -> f64 {
        self.p[(f * self.ng + g) * self.ny + y]
    }

    /// Pair marginal over the two kept axes (`0 = f, 1 = g, 2 = y`), row-major.
    fn pair(&self, a: usize, b: usize) -> (Vec<f64>, usize, usize) {
        let dims = [self.nf, self.ng, self.ny];
        let (na, nb) = (dims[a], dims[b]);
        let mut out = vec![0.0; na * nb];
        for f in 0..self.nf {
            for g in 0..self.ng {
                for y in 0..self.ny {
                    let idx = [f, g, y];
                    out[idx[a] * nb + idx[b]] += self.at(f, g, y);
                }
            }
        }
        (out, na, nb)
    }

    pub fn mi_fg(&self) -> f64 {
        let (t, a, b) = self.pair(0, 1);
        mi_table(&t, a, b)
    }

    pub fn mi_fy(&self) -> f64 {
        let (t, a, b) = self.pair(0, 2);
        mi_table(&t, a, b)
    }

    pub fn mi_gy(&self) -> f64 {
        let (t, a, b) = self.pair(1, 2);
        mi_table(&t, a, b)
    }

    /// `I(F; G | Y) = Σ_y p(y) · I(F; G | Y = y)`.
    pub fn conditional_mi_fg_given_y(&self) -> f64 {
        let mut total = 0.0;
        for y in 0..self.ny {
            let slice: Vec<f64> = (0..self.nf * self.ng)
                .map(|i| self.at(i / self.ng, i % self.ng, y))
                .collect();
            let py: f64 = slice.iter().sum();
            if py <= 0.0 {
                continue;
            }
            let cond: Vec<f64> = slice.iter().map(|v| v / py).collect();
            total += py * mi_table(&cond, self.nf, self.ng);
        }
        total
    }

    /// `|I(F;G) − I(F;G|Y) − I(G;Y)|` for an arbitrary joint.
    pub fn chain_rule_residual(&self) -> f64 {
        (self.mi_fg() - self.conditional_mi_fg_given_y() - self.mi_gy()).abs()
    }
}

/// `Σ p(a,b) log(p(a,b) / (p(a)p(b)))` over a row-major `na × nb` table.
fn mi_table(t: &[f64], na: usize, nb: usize) -> f64 {
    let pa: Vec<f64> = (0..na).map(|a| t[a * nb..(a + 1) * nb].iter().sum()).collect();
    let pb: Vec<f64> = (0..nb).map(|b| (0..na).map(|a| t[a * nb + b]).sum()).collect();
    let mut mi = 0.0;
    for a in 0..na {
        for b in 0..nb {
            let v = t[a * nb + b];
            if v > 0.0 {
                mi += v * (v / (pa[a] * pb[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information of a two-variable joint table.
pub fn mutual_information(table: &[f64], na: usize, nb: usize) -> Result<f64> {
    DiscreteJoint::new(na, nb, 1, table.to_vec())?;
    Ok(mi_table(table, na, nb))
}

/// `I(F; G | Y)` of a three-variable joint.
pub fn conditional_mi(joint: &DiscreteJoint) -> f64 {
    joint.conditional_mi_fg_given_y()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// A total function from F-indices to G-indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeterministicChannel {
    pub g_of_f: Vec<usize>,
    pub n_out: usize,
}

impl DeterministicChannel {
    pub fn new(g_of_f: Vec<usize>, n_out: usize) -> Result<Self> {
        if let Some(&bad) = g_of_f.iter().find(|&&g| g >= n_out) {
            return Err(Error::Precondition(format!("channel output {bad} >= {n_out}")));
        }
        Ok(Self { g_of_f, n_out })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            g_of_f: (0..n).collect(),
            n_out: n,
        }
    }

    /// From a row-stochastic matrix `P(g | f)`; only 0/1 rows are accepted.
    pub fn from_matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let n_out = rows.first().map_or(0, Vec::len);
        let mut g_of_f = Vec::with_capacity(rows.len());
        for (f, row) in rows.iter().enumerate() {
            if row.len() != n_out {
                return Err(Error::Shape(format!("channel row {f} has {} entries", row.len())));
            }
            let ones: Vec<usize> = (0..n_out).filter(|&g| row[g] == 1.0).collect();
            if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Precondition(format!(
                    "channel row {f} is not deterministic: {row:?}"
                )));
            }
            g_of_f.push(ones[0]);
        }
        Ok(Self { g_of_f, n_out })
    }
}

fn check_inputs(pf: &[f64], channel: &DeterministicChannel, py_given_f: &[Vec<f64>]) -> Result<usize> {
    if pf.len() != channel.g_of_f.len() || pf.len() != py_given_f.len() {
        return Err(Error::Shape(format!(
            "|F| mismatch: p(f) {}, channel {}, p(y|f) {}",
            pf.len(),
            channel.g_of_f.len(),
            py_given_f.len()
        )));
    }
    let ny = py_given_f.first().map_or(0, Vec::len);
    for (f, row) in py_given_f.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.len() != ny || (s - 1.0).abs() > SUM_TOL || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Precondition(format!("p(y|f={f}) is not a distribution")));
        }
    }
    Ok(ny)
}

/// `p(f, g, y) = p(f) · p(y|f) · 1[g = channel(f)]`.
pub fn build_joint(pf: &[f64], channel: &DeterministicChannel, py_given_f: &[Vec<f64>]) -> Result<DiscreteJoint> {
    let ny = check_inputs(pf, channel, py_given_f)?;
    let (nf, ng) = (pf.len(), channel.n_out);
    let mut p = vec![0.0; nf * ng * ny];
    for f in 0..nf {
        let g = channel.g_of_f[f];
        for y in 0..ny {
            p[(f * ng + g) * ny + y] = pf[f] * py_given_f[f][y];
        }
    }
    DiscreteJoint::new(nf, ng, ny, p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainRuleReport {
    pub i_fg: f64,
    pub i_fg_given_y: f64,
    pub i_gy: f64,
    pub residual: f64,
}

/// Checks `I(F;G) = I(F;G|Y) + I(G;Y)` when `G` is a function of `F`.
pub fn verify_corollary1(
    pf: &[f64],
    channel: &DeterministicChannel,
    py_given_f: &[Vec<f64>],
) -> Result<ChainRuleReport> {
    let j = build_joint(pf, channel, py_given_f)?;
    let (i_fg, i_fg_given_y, i_gy) = (j.mi_fg(), j.conditional_mi_fg_given_y(), j.mi_gy());
    Ok(ChainRuleReport {
        i_fg,
        i_fg_given_y,
        i_gy,
        residual: (i_fg - i_fg_given_y - i_gy).abs(),
    })
}

/// A joint where `G` is not a function of `F` (G = F xor Y over fair bits)
/// and the chain-rule identity fails with residual `ln 2`.
pub fn chain_rule_counterexample() -> DiscreteJoint {
    let mut p = vec![0.0; 8];
    for f in 0..2 {
        for y in 0..2 {
            p[(f * 2 + (f ^ y)) * 2 + y] = 0.25;
        }
    }
    DiscreteJoint::new(2, 2, 2, p).expect("valid table")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictiveReport {
    /// `max_f KL(P(Y|f) ‖ P(Y|g(f)))` over `f` with positive mass.
    pub kl_max: f64,
    /// `I(Y;F) − I(Y;G)`.
    pub mi_gap: f64,
}

/// Compares label posteriors before and after the channel.
pub fn verify_corollary2(
    pf: &[f64],
    py_given_f: &[Vec<f64>],
    channel: &DeterministicChannel,
) -> Result<PredictiveReport> {
    let j = build_joint(pf, channel, py_given_f)?;
    let ny = py_given_f[0].len();
    let mut pg = vec![0.0; channel.n_out];
    let mut pgy = vec![vec![0.0; ny]; channel.n_out];
    for (f, &p) in pf.iter().enumerate() {
        let g = channel.g_of_f[f];
        pg[g] += p;
        for y in 0..ny {
            pgy[g][y] += p * py_given_f[f][y];
        }
    }
    let mut kl_max: f64 = 0.0;
    for (f, &p) in pf.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let g = channel.g_of_f[f];
        let post: Vec<f64> = pgy[g].iter().map(|v| v / pg[g]).collect();
        kl_max = kl_max.max(crate::tensor::kl_divergence(&py_given_f[f], &post));
    }
    Ok(PredictiveReport {
        kl_max,
        mi_gap: j.mi_fy() - j.mi_gy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    /// Entropy-form oracle: `I(A;B) = H(A) + H(B) − H(A,B)`.
    fn mi_by_entropies(t: &[f64], na: usize, nb: usize) -> f64 {
        let pa: Vec<f64> = (0..na).map(|a| (0..nb).map(|b| t[a * nb + b]).sum()).collect();
        let pb: Vec<f64> = (0..nb).map(|b| (0..na).map(|a| t[a * nb + b]).sum()).collect();
        entropy(&pa) + entropy(&pb) - entropy(t)
    }

    #[test]
    fn mi_examples() {
        let indep: Vec<f64> = [0.3, 0.7]
            .iter()
            .flat_map(|a| [0.2, 0.5, 0.3].map(|b| a * b))
            .collect();
        assert!(mutual_information(&indep, 2, 3).unwrap().abs() < 1e-15);
        let diag = [0.5, 0.0, 0.0, 0.5];
        assert!((mutual_information(&diag, 2, 2).unwrap() - 2f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = random_dist(9, &mut rng);
            let a = mutual_information(&t, 3, 3).unwrap();
            assert!((a - mi_by_entropies(&t, 3, 3)).abs() < 1e-12);
        }
        assert!(mutual_information(&[0.5, 0.6], 1, 2).is_err());
    }

    #[test]
    fn conditional_mi_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Y independent of (F, G)
        let fg = random_dist(9, &mut rng);
        let py = [0.4, 0.6];
        let p: Vec<f64> = fg.iter().flat_map(|v| py.map(|y| v * y)).collect();
        let j = DiscreteJoint::new(3, 3, 2, p).unwrap();
        assert!((conditional_mi(&j) - mutual_information(&fg, 3, 3).unwrap()).abs() < 1e-12);

        // G == Y
        let mut p = vec![0.0; 3 * 2 * 2];
        let fy = random_dist(6, &mut rng);
        for f in 0..3 {
            for y in 0..2 {
                p[(f * 2 + y) * 2 + y] = fy[f * 2 + y];
            }
        }
        let j = DiscreteJoint::new(3, 2, 2, p).unwrap();
        assert!(conditional_mi(&j).abs() < 1e-15);

        // definition-level oracle on a random 3×3×2 joint
        for _ in 0..20 {
            let p = random_dist(18, &mut rng);
            let j = DiscreteJoint::new(3, 3, 2, p.clone()).unwrap();
            let mut want = 0.0;
            for f in 0..3 {
                for g in 0..3 {
                    for y in 0..2 {
                        let v = p[(f * 3 + g) * 2 + y];
                        let py: f64 = (0..9).map(|i| p[i * 2 + y]).sum();
                        let pfy: f64 = (0..3).map(|gg| p[(f * 3 + gg) * 2 + y]).sum();
                        let pgy: f64 = (0..3).map(|ff| p[(ff * 3 + g) * 2 + y]).sum();
                        want += v * (v * py / (pfy * pgy)).ln();
                    }
                }
            }
            assert!((conditional_mi(&j) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn chain_rule_examples() {
        let pf = [0.2, 0.3, 0.5];
        let pyf = vec![vec![0.9, 0.1], vec![0.4, 0.6], vec![0.5, 0.5]];
        let r = verify_corollary1(&pf, &DeterministicChannel::identity(3), &pyf).unwrap();
        assert!(r.residual < 1e-10);
        assert!((r.i_fg - entropy(&pf)).abs() < 1e-12);
        let constant = DeterministicChannel::new(vec![0, 0, 0], 1).unwrap();
        let r = verify_corollary1(&pf, &constant, &pyf).unwrap();
        assert!(r.i_fg.abs() < 1e-15 && r.i_fg_given_y.abs() < 1e-15 && r.i_gy.abs() < 1e-15);
    }

    #[test]
    fn stochastic_channel_is_rejected() {
        let rows = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        assert!(matches!(DeterministicChannel::from_matrix(&rows), Err(Error::Precondition(_))));
        let ok = DeterministicChannel::from_matrix(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(ok.g_of_f, vec![1, 0]);
    }

    #[test]
    fn general_joints_can_break_the_chain_rule() {
        let j = chain_rule_counterexample();
        assert!((j.chain_rule_residual() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn predictive_sufficiency_examples() {
        let pf = [0.25, 0.25, 0.5];
        let pyf = vec![vec![0.9, 0.1], vec![0.9, 0.1], vec![0.2, 0.8]];
        let r = verify_corollary2(&pf, &pyf, &DeterministicChannel::identity(3)).unwrap();
        assert_eq!(r.kl_max, 0.0);
        assert!(r.mi_gap.abs() < 1e-12);

        let merge_same = DeterministicChannel::new(vec![0, 0, 1], 2).unwrap();
        let r = verify_corollary2(&pf, &pyf, &merge_same).unwrap();
        assert_eq!(r.kl_max, 0.0);
        assert!(r.mi_gap.abs() < 1e-10);

        let merge_diff = DeterministicChannel::new(vec![0, 1, 1], 2).unwrap();
        let r = verify_corollary2(&pf, &pyf, &merge_diff).unwrap();
        assert!(r.kl_max > 0.0 && r.mi_gap > 0.0);
    }

    #[test]
    fn invalid_joint_is_rejected() {
        assert!(DiscreteJoint::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(DiscreteJoint::new(1, 1, 2, vec![1.5, -0.5]).is_err());
        assert!(DiscreteJoint::new(2, 1, 1, vec![1.0]).is_err());
    }
}
