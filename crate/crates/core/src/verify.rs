//! Self-checks run by `iumad verify`: finite-difference gradients, the
//! information-theory identities, metric oracles and forgetting examples.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ibfm::{FusionKind, IbProjection};
use crate::info::{chain_rule_counterexample, verify_corollary1, verify_corollary2, DeterministicChannel};
use crate::mamba::MambaBlock;
use crate::metrics::{aupro, auroc, connected_components, forgetting_metric, MetricKind, MetricsHistory, ObjectMetrics};
use crate::mfen::{feature_jitter, MultimodalSample, RelRect};
use crate::model::{ModalityInputs, ModalityMode, Model, ModelConfig};
use crate::tensor::{finite_diff_check_params, FdReport, Graph, ParamStore, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 20;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GateReport {
    pub gate: usize,
    pub name: String,
    pub passed: bool,
    pub secs: f64,
    pub checks: Vec<Check>,
}

impl GateReport {
    fn new(gate: usize, name: &str, start: Instant, checks: Vec<Check>) -> Self {
        Self {
            gate,
            name: name.to_string(),
            passed: !checks.is_empty() && checks.iter().all(|c| c.passed),
            secs: start.elapsed().as_secs_f64(),
            checks,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- gradients

type Built = (ParamStore, Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>);

struct GradCase {
    name: &'static str,
    /// Coordinates probed per parameter tensor; `None` probes all.
    coords: Option<usize>,
    build: fn(&mut ChaCha8Rng) -> Result<Built>,
}

fn randn(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> crate::tensor::ParamId {
    store.add(name, Tensor::randn(shape, 1.0, rng))
}

/// `Σ y ⊙ w` for a fixed, index-dependent `w`, so every output coordinate
/// carries a distinct weight.
fn readout(g: &mut Graph, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(g.shape(y), |i| (i as f64 * 1.37 + 0.5).sin());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p)?)
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], op: fn(&mut Graph, Var) -> Result<Var>) -> Result<Built> {
    let mut s = ParamStore::new();
    let x = randn(&mut s, "x", shape, rng);
    Ok((
        s,
        Box::new(move |g, st| {
            let xv = g.param(st, x);
            let y = op(g, xv)?;
            readout(g, y)
        }),
    ))
}

fn binary(
    rng: &mut ChaCha8Rng,
    sa: &[usize],
    sb: &[usize],
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Built> {
    let mut s = ParamStore::new();
    let a = randn(&mut s, "a", sa, rng);
    let b = randn(&mut s, "b", sb, rng);
    Ok((
        s,
        Box::new(move |g, st| {
            let (av, bv) = (g.param(st, a), g.param(st, b));
            let y = op(g, av, bv)?;
            readout(g, y)
        }),
    ))
}

fn op_cases() -> Vec<GradCase> {
    fn c(name: &'static str, build: fn(&mut ChaCha8Rng) -> Result<Built>) -> GradCase {
        GradCase { name, coords: None, build }
    }
    vec![
        c("add", |r| binary(r, &[3, 4], &[3, 4], |g, a, b| Ok(g.add(a, b)?))),
        c("sub", |r| binary(r, &[3, 4], &[3, 4], |g, a, b| Ok(g.sub(a, b)?))),
        c("mul", |r| binary(r, &[3, 4], &[3, 4], |g, a, b| Ok(g.mul(a, b)?))),
        c("scale", |r| {
            let k = r.random_range(-3.0..3.0);
            let mut s = ParamStore::new();
            let x = randn(&mut s, "x", &[5], r);
            Ok((s, Box::new(move |g, st| {
                let xv = g.param(st, x);
                let y = g.scale(xv, k)?;
                readout(g, y)
            })))
        }),
        c("mul_const", |r| {
            let mask: Arc<Vec<f64>> = Arc::new((0..6).map(|_| r.random_range(-2.0..2.0)).collect());
            let mut s = ParamStore::new();
            let x = randn(&mut s, "x", &[6], r);
            Ok((s, Box::new(move |g, st| {
                let xv = g.param(st, x);
                let y = g.mul_const(xv, mask.clone())?;
                readout(g, y)
            })))
        }),
        c("dropout", |r| unary(r, &[8], |g, x| Ok(g.dropout(x, 0.3)?))),
        c("matmul", |r| binary(r, &[3, 4], &[4, 2], |g, a, b| Ok(g.matmul(a, b)?))),
        c("add_row_bias", |r| binary(r, &[3, 4], &[4], |g, a, b| Ok(g.add_row_bias(a, b)?))),
        c("linear", |r| {
            let mut s = ParamStore::new();
            let x = randn(&mut s, "x", &[3, 4], r);
            let w = randn(&mut s, "w", &[4, 2], r);
            let b = randn(&mut s, "b", &[2], r);
            Ok((s, Box::new(move |g, st| {
                let (xv, wv, bv) = (g.param(st, x), g.param(st, w), g.param(st, b));
                let y = g.linear(xv, wv, Some(bv))?;
                readout(g, y)
            })))
        }),
        c("transpose", |r| unary(r, &[3, 4], |g, x| Ok(g.transpose(x)?))),
        c("reshape", |r| unary(r, &[3, 4], |g, x| Ok(g.reshape(x, &[2, 6])?))),
        c("conv2d", |r| {
            let mut s = ParamStore::new();
            let x = randn(&mut s, "x", &[2, 5, 5], r);
            let w = randn(&mut s, "w", &[3, 2, 3, 3], r);
            let b = randn(&mut s, "b", &[3], r);
            Ok((s, Box::new(move |g, st| {
                let (xv, wv, bv) = (g.param(st, x), g.param(st, w), g.param(st, b));
                let y = g.conv2d(xv, wv, Some(bv), 1)?;
                readout(g, y)
            })))
        }),
        c("conv2d_depthwise", |r| binary(r, &[2, 5, 5], &[2, 1, 3, 3], |g, a, b| Ok(g.conv2d(a, b, None, 2)?))),
        c("avg_pool2", |r| unary(r, &[2, 4, 4], |g, x| Ok(g.avg_pool2(x)?))),
        c("upsample", |r| unary(r, &[2, 2, 3], |g, x| Ok(g.upsample(x, 2)?))),
        c("concat", |r| binary(r, &[2, 3], &[1, 3], |g, a, b| Ok(g.concat(&[a, b])?))),
        c("relu", |r| unary(r, &[10], |g, x| Ok(g.relu(x)?))),
        c("sigmoid", |r| unary(r, &[10], |g, x| Ok(g.sigmoid(x)?))),
        c("layer_norm", |r| {
            let mut s = ParamStore::new();
            let x = randn(&mut s, "x", &[3, 4], r);
            let gm = randn(&mut s, "gamma", &[4], r);
            let bt = randn(&mut s, "beta", &[4], r);
            Ok((s, Box::new(move |g, st| {
                let (xv, gv, bv) = (g.param(st, x), g.param(st, gm), g.param(st, bt));
                let y = g.layer_norm(xv, gv, bv, 1e-5)?;
                readout(g, y)
            })))
        }),
        c("softmax", |r| unary(r, &[2, 5], |g, x| Ok(g.softmax(x)?))),
        c("cross_entropy", |r| {
            let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
            let mut s = ParamStore::new();
            let x = randn(&mut s, "logits", &[3, 4], r);
            Ok((s, Box::new(move |g, st| {
                let xv = g.param(st, x);
                Ok(g.cross_entropy(xv, &labels)?)
            })))
        }),
        c("kl_div", |r| {
            binary(r, &[2, 4], &[2, 4], |g, a, b| {
                let (p, q) = (g.softmax(a)?, g.softmax(b)?);
                Ok(g.kl_div(p, q)?)
            })
        }),
        c("mse", |r| {
            let mut s = ParamStore::new();
            let a = randn(&mut s, "a", &[3, 4], r);
            let b = randn(&mut s, "b", &[3, 4], r);
            Ok((s, Box::new(move |g, st| {
                let (av, bv) = (g.param(st, a), g.param(st, b));
                Ok(g.mse(av, bv, 7.0)?)
            })))
        }),
        c("sum", |r| {
            unary(r, &[3, 4], |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq)?)
            })
        }),
        c("mean", |r| {
            unary(r, &[3, 4], |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.mean(sq)?)
            })
        }),
        c("gather", |r| {
            let idx: Arc<Vec<usize>> = Arc::new((0..8).map(|_| r.random_range(0..10)).collect());
            let mut s = ParamStore::new();
            let x = randn(&mut s, "x", &[10], r);
            Ok((s, Box::new(move |g, st| {
                let xv = g.param(st, x);
                let y = g.gather(xv, idx.clone(), &[2, 4])?;
                readout(g, y)
            })))
        }),
        c("ssm_scan", |r| {
            let mut s = ParamStore::new();
            let x = randn(&mut s, "x", &[2, 3, 5], r);
            let a = s.add("a", Tensor::uniform(&[3], 0.1, 0.9, r));
            let b = randn(&mut s, "b", &[3], r);
            let cc = randn(&mut s, "c", &[3], r);
            let d = randn(&mut s, "d", &[3], r);
            Ok((s, Box::new(move |g, st| {
                let v = [x, a, b, cc, d].map(|id| g.param(st, id));
                let y = g.ssm_scan(v[0], v[1], v[2], v[3], v[4])?;
                readout(g, y)
            })))
        }),
        c("spatial_mean", |r| unary(r, &[3, 4, 4], |g, x| Ok(g.spatial_mean(x)?))),
        c("bce_with_logits", |r| {
            let targets: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
            let mut s = ParamStore::new();
            let x = s.add("logits", Tensor::randn(&[6], 2.0, r));
            Ok((s, Box::new(move |g, st| {
                let xv = g.param(st, x);
                Ok(g.bce_with_logits(xv, &targets)?)
            })))
        }),
        c("detach", |r| {
            unary(r, &[6], |g, x| {
                let d = g.detach(x);
                Ok(g.mul(x, d)?)
            })
        }),
    ]
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: [2, 4, 4, 4],
        num_classes: 3,
        modalities: ModalityMode::Both,
        use_mamba: true,
        use_ibfm: true,
        fusion: FusionKind::CrossAttention,
        dropout: 0.1,
        discriminator: true,
        ..ModelConfig::default()
    }
}

fn composite_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "mamba_block",
            coords: None,
            build: |r| {
                let mut s = ParamStore::new();
                let block = MambaBlock::new(&mut s, "blk", 3, r);
                let x = Tensor::randn(&[3, 4, 4], 1.0, r);
                let t = Tensor::randn(&[3, 4, 4], 1.0, r);
                Ok((s, Box::new(move |g, st| {
                    let xv = g.constant(x.clone());
                    let y = block.forward(g, st, xv)?;
                    let tv = g.constant(t.clone());
                    Ok(g.mse(y, tv, 1.0)?)
                })))
            },
        },
        GradCase {
            name: "ib_projection",
            coords: None,
            build: |r| {
                let mut s = ParamStore::new();
                let proj = IbProjection::new(&mut s, 4, 2, 0.1, r)?;
                let x = Tensor::randn(&[4, 2, 2], 1.0, r);
                let t = Tensor::randn(&[4, 2, 2], 1.0, r);
                Ok((s, Box::new(move |g, st| {
                    let xv = g.constant(x.clone());
                    let (_, y) = proj.forward(g, st, xv)?;
                    let tv = g.constant(t.clone());
                    Ok(g.mse(y, tv, 1.0)?)
                })))
            },
        },
        GradCase {
            name: "full_objective",
            coords: Some(2),
            build: |r| {
                let model = Model::new(tiny_model_config(), r.random())?;
                let sample = MultimodalSample::new(
                    Tensor::uniform(&[3, 32, 32], 0.0, 1.0, r),
                    Tensor::uniform(&[1, 32, 32], 0.0, 1.0, r),
                    1,
                    None,
                    false,
                )?;
                let clean = model.encode(&sample)?;
                let rect = RelRect::random(r.random_range(0.1..0.4), r);
                let jit = clean
                    .iter()
                    .map(|p| feature_jitter(p, 1.0, Some(rect), r))
                    .collect::<Result<Vec<_>>>()?;
                let mask = jit[0].1.clone();
                let label = r.random_range(0..3);
                let store = model.store.clone();
                Ok((store, Box::new(move |g, st| {
                    let m = model.with_store(st.clone());
                    let inputs: Vec<_> = jit
                        .iter()
                        .zip(&clean)
                        .map(|((a, _), c)| ModalityInputs::constants(g, a, c))
                        .collect();
                    Ok(m.loss(g, &inputs, label, Some(&mask))?.0)
                })))
            },
        },
    ]
}

fn run_grad_case(case: &GradCase, instances: usize) -> Check {
    let mut worst = FdReport::default();
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6ad0 + k as u64);
        let r = (case.build)(&mut rng)
            .and_then(|(store, f)| finite_diff_check_params(&store, f, FD_STEP, case.coords, k as u64));
        match r {
            Ok(r) => {
                worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
                worst.checked += r.checked;
                worst.excluded += r.excluded;
            }
            Err(e) => return check(case.name, false, format!("instance {k}: {e}")),
        }
    }
    check(
        case.name,
        worst.max_rel_err < FD_TOL && worst.checked > 0,
        format!(
            "max rel err {:.2e} over {} coords ({} excluded at kinks)",
            worst.max_rel_err, worst.checked, worst.excluded
        ),
    )
}

/// Every graph op and the composite blocks, `instances` random draws each.
pub fn gradient_gate(instances: usize) -> GateReport {
    let start = Instant::now();
    let checks = op_cases()
        .iter()
        .chain(&composite_cases())
        .map(|c| run_grad_case(c, instances))
        .collect();
    GateReport::new(1, "gradient suite", start, checks)
}

// ---------------------------------------------------------------- information

fn random_dist(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_channel(nf: usize, rng: &mut ChaCha8Rng) -> DeterministicChannel {
    let ng = rng.random_range(1..=nf);
    let mut g_of_f: Vec<usize> = (0..nf).map(|f| if f < ng { f } else { rng.random_range(0..ng) }).collect();
    g_of_f.shuffle(rng);
    DeterministicChannel::new(g_of_f, ng).expect("outputs in range")
}

pub const CHAIN_RULE_TRIALS: usize = 200;
pub const SUFFICIENCY_TRIALS: usize = 1000;

pub fn info_gate() -> GateReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f0);

    let mut worst: f64 = 0.0;
    let mut err = None;
    for _ in 0..CHAIN_RULE_TRIALS {
        let (nf, ny) = (rng.random_range(1..=6), rng.random_range(1..=4));
        let ch = random_channel(nf, &mut rng);
        let pf = random_dist(nf, &mut rng);
        let pyf: Vec<Vec<f64>> = (0..nf).map(|_| random_dist(ny, &mut rng)).collect();
        match verify_corollary1(&pf, &ch, &pyf) {
            Ok(r) => worst = worst.max(r.residual),
            Err(e) => err = Some(e),
        }
    }
    checks.push(match err {
        Some(e) => check("chain rule", false, e.to_string()),
        None => check(
            "chain rule",
            worst < 1e-10,
            format!("max residual {worst:.2e} over {CHAIN_RULE_TRIALS} triples"),
        ),
    });
    let cx = chain_rule_counterexample();
    let resid = (cx.mi_fg() - cx.conditional_mi_fg_given_y() - cx.mi_gy()).abs();
    checks.push(check(
        "chain rule needs a deterministic channel",
        resid > 0.5,
        format!("xor joint residual {resid:.4}"),
    ));

    let (mut sufficient, mut worst_gap, mut min_dpi) = (0usize, 0.0f64, f64::INFINITY);
    let mut err = None;
    for t in 0..SUFFICIENCY_TRIALS {
        let (nf, ny) = (rng.random_range(1..=6), rng.random_range(1..=4));
        let ch = random_channel(nf, &mut rng);
        let pf = random_dist(nf, &mut rng);
        // every other trial shares p(y|f) within each channel fibre
        let fibre: Vec<Vec<f64>> = (0..ch.n_out).map(|_| random_dist(ny, &mut rng)).collect();
        let pyf: Vec<Vec<f64>> = (0..nf)
            .map(|f| if t % 2 == 0 { fibre[ch.g_of_f[f]].clone() } else { random_dist(ny, &mut rng) })
            .collect();
        let r = match verify_corollary2(&pf, &pyf, &ch) {
            Ok(r) => r,
            Err(e) => {
                err = Some(e);
                continue;
            }
        };
        min_dpi = min_dpi.min(r.mi_gap);
        if r.kl_max < 1e-12 {
            sufficient += 1;
            worst_gap = worst_gap.max(r.mi_gap.abs());
        }
    }
    if let Some(e) = err {
        checks.push(check("zero KL preserves label information", false, e.to_string()));
    } else {
        checks.push(check(
            "zero KL preserves label information",
            sufficient > 0 && worst_gap < 1e-10,
            format!("max |I(Y;F) - I(Y;G)| {worst_gap:.2e} over {sufficient} zero-KL trials"),
        ));
        checks.push(check(
            "data processing inequality",
            min_dpi > -1e-12,
            format!("min I(Y;F) - I(Y;G) = {min_dpi:.2e} over {SUFFICIENCY_TRIALS} trials"),
        ));
    }
    GateReport::new(2, "information oracles", start, checks)
}

// ---------------------------------------------------------------- metrics

fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

/// Recomputes FPR and per-region overlap from scratch at every distinct
/// threshold, then integrates with the trapezoid rule up to `limit`.
fn aupro_sweep(map: &[f64], mask: &[bool], h: usize, w: usize, limit: f64) -> f64 {
    let (labels, n) = connected_components(mask, h, w);
    let mut thresholds = map.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let neg = mask.iter().filter(|&&m| !m).count() as f64;
    let sizes: Vec<f64> = (1..=n).map(|r| labels.iter().filter(|&&l| l == r).count() as f64).collect();
    let mut curve = vec![(0.0, 0.0)];
    for t in thresholds {
        let fp = (0..map.len()).filter(|&i| !mask[i] && map[i] >= t).count() as f64;
        let mut pro = 0.0;
        for r in 1..=n {
            let hit = (0..map.len()).filter(|&i| labels[i] == r && map[i] >= t).count() as f64;
            pro += hit / sizes[r - 1];
        }
        curve.push((fp / neg, pro / n as f64));
    }
    let mut area = 0.0;
    for k in 1..curve.len() {
        let ((x0, y0), (x1, y1)) = (curve[k - 1], curve[k]);
        if x0 >= limit {
            break;
        }
        let (xe, ye) = if x1 > limit {
            (limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
        } else {
            (x1, y1)
        };
        area += (xe - x0) * (y0 + ye) * 0.5;
    }
    area / limit
}

/// Forgetting straight from a dense `[step][object]` table (`NaN` = unseen).
fn forgetting_direct(acc: &[Vec<f64>]) -> f64 {
    let last = acc.len() - 1;
    let mut total = 0.0;
    let mut count = 0;
    for o in 0..acc[last].len() {
        let drops: Vec<f64> = (0..last).filter(|&s| !acc[s][o].is_nan()).map(|s| acc[s][o] - acc[last][o]).collect();
        if let Some(m) = drops.into_iter().reduce(f64::max) {
            total += m;
            count += 1;
        }
    }
    total / count as f64
}

fn history_from_table(acc: &[Vec<f64>]) -> MetricsHistory {
    let mut h = MetricsHistory::new();
    for (s, row) in acc.iter().enumerate() {
        for (o, &v) in row.iter().enumerate() {
            if !v.is_nan() {
                h.insert(s, o, ObjectMetrics { iauroc: v, pauroc: v, aupro: v });
            }
        }
    }
    h
}

fn random_history(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let base = rng.random_range(1..6);
    let incr = rng.random_range(1..3);
    let steps = rng.random_range(1..5);
    let n = base + incr * steps;
    (0..=steps)
        .map(|s| {
            let seen = base + incr * s;
            (0..n).map(|o| if o < seen { rng.random_range(40.0..100.0) } else { f64::NAN }).collect()
        })
        .collect()
}

pub fn metric_gate() -> GateReport {
    let start = Instant::now();
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);

    let mut worst: f64 = 0.0;
    let mut failed = None;
    for _ in 0..100 {
        let n = rng.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64 / 7.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        match auroc(&scores, &labels) {
            Ok(a) => worst = worst.max((a - pair_count_auroc(&scores, &labels)).abs()),
            Err(e) => failed = Some(e),
        }
    }
    checks.push(match failed {
        Some(e) => check("auroc vs pair counting", false, e.to_string()),
        None => check("auroc vs pair counting", worst < 1e-9, format!("max |diff| {worst:.2e} over 100 instances")),
    });

    let (h, w) = (16, 16);
    let mut worst: f64 = 0.0;
    let mut failed = None;
    for _ in 0..50 {
        let mut mask = vec![false; h * w];
        for _ in 0..rng.random_range(1..4) {
            let (y0, x0) = (rng.random_range(0..12), rng.random_range(0..12));
            let (dy, dx) = (rng.random_range(1..5), rng.random_range(1..5));
            for y in y0..(y0 + dy).min(h) {
                for x in x0..(x0 + dx).min(w) {
                    mask[y * w + x] = true;
                }
            }
        }
        let map: Vec<f64> = (0..h * w)
            .map(|i| rng.random_range(0..50) as f64 / 50.0 + if mask[i] { 0.3 } else { 0.0 })
            .collect();
        let got = Tensor::new(&[1, h, w], map.clone()).map_err(Error::from).and_then(|m| {
            aupro(&[m], &[Tensor::from_fn(&[1, h, w], |i| f64::from(mask[i]))], 0.3)
        });
        match got {
            Ok(v) => worst = worst.max((v - aupro_sweep(&map, &mask, h, w, 0.3)).abs()),
            Err(e) => failed = Some(e),
        }
    }
    checks.push(match failed {
        Some(e) => check("aupro vs threshold sweep", false, e.to_string()),
        None => check(
            "aupro vs threshold sweep",
            worst < 1e-3,
            format!("max |diff| {worst:.2e} over 50 16x16 instances"),
        ),
    });

    let mut worst: f64 = 0.0;
    let mut failed = None;
    for _ in 0..100 {
        let acc = random_history(&mut rng);
        match forgetting_metric(&history_from_table(&acc), MetricKind::IAuroc) {
            Ok(v) => worst = worst.max((v - forgetting_direct(&acc)).abs()),
            Err(e) => failed = Some(e),
        }
    }
    checks.push(match failed {
        Some(e) => check("forgetting vs direct evaluation", false, e.to_string()),
        None => check(
            "forgetting vs direct evaluation",
            worst < 1e-12,
            format!("max |diff| {worst:.2e} over 100 histories"),
        ),
    });
    GateReport::new(3, "metric oracles", start, checks)
}

// ---------------------------------------------------------------- forgetting examples

/// History where object `o` has one value per step, ending at the last step.
fn staggered(per_object: &[&[f64]]) -> Vec<Vec<f64>> {
    let steps = per_object.iter().map(|v| v.len()).max().unwrap_or(0);
    (0..steps)
        .map(|s| {
            per_object
                .iter()
                .map(|v| {
                    let first = steps - v.len();
                    if s >= first { v[s - first] } else { f64::NAN }
                })
                .collect()
        })
        .collect()
}

pub fn forgetting_examples_gate() -> GateReport {
    let start = Instant::now();
    let cases: [(&str, Vec<&[f64]>, f64); 3] = [
        ("[90, 85, 80] -> 10", vec![&[90.0, 85.0, 80.0]], 10.0),
        ("constant -> 0", vec![&[80.0, 80.0, 80.0]], 0.0),
        ("two objects -> 2.5", vec![&[90.0, 85.0, 80.0], &[70.0, 75.0, 80.0]], 2.5),
    ];
    let checks = cases
        .into_iter()
        .map(|(name, objs, want)| {
            let h = history_from_table(&staggered(&objs));
            match forgetting_metric(&h, MetricKind::IAuroc) {
                Ok(v) => check(name, v == want, format!("got {v}")),
                Err(e) => check(name, false, e.to_string()),
            }
        })
        .collect();
    GateReport::new(4, "forgetting examples", start, checks)
}

pub fn run_all() -> Vec<GateReport> {
    vec![
        gradient_gate(GRAD_INSTANCES),
        info_gate(),
        metric_gate(),
        forgetting_examples_gate(),
    ]
}

/// `Ok` only when every gate passed.
pub fn ensure_passed(gates: &[GateReport]) -> Result<()> {
    let failed: Vec<String> = gates
        .iter()
        .filter(|g| !g.passed)
        .map(|g| format!("gate {} ({})", g.gate, g.name))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_cases_pass_on_two_instances() {
        let g = gradient_gate(2);
        assert!(g.passed, "{:#?}", g.failures().collect::<Vec<_>>());
        assert!(g.checks.len() >= 30);
    }

    #[test]
    fn oracle_gates_pass() {
        for g in [info_gate(), metric_gate(), forgetting_examples_gate()] {
            assert!(g.passed, "{}: {:#?}", g.name, g.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn staggered_histories_start_late() {
        let t = staggered(&[&[1.0, 2.0], &[3.0]]);
        assert_eq!(t[1], vec![2.0, 3.0]);
        assert!(t[0][1].is_nan());
        assert_eq!(forgetting_direct(&t), -1.0);
    }

    #[test]
    fn failing_gate_is_reported() {
        let g = GateReport::new(9, "x", Instant::now(), vec![check("a", true, ""), check("b", false, "bad")]);
        assert!(!g.passed);
        assert!(ensure_passed(&[g]).is_err());
        assert!(ensure_passed(&[forgetting_examples_gate()]).is_ok());
    }
}
