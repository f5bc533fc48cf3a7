//! Mamba-style decoder blocks: depthwise conv residual, a diagonal
//! state-space scan run over stride-2 sub-grids in four directions (ES2D),
//! and token self-attention, plus the per-modality label classifier.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result, TensorError};
use crate::mfen::Modality;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Row-major, left to right.
    Right,
    Left,
    /// Column-major, top to bottom.
    Down,
    Up,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::Right,
        ScanDirection::Left,
        ScanDirection::Down,
        ScanDirection::Up,
    ];
}

/// One scan: a direction over the sub-grid of cells `(2i + row_parity, 2j + col_parity)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub direction: ScanDirection,
    pub row_parity: usize,
    pub col_parity: usize,
}

impl ScanOrder {
    /// Flat `y * W + x` positions of the map visited by this scan, in order.
    pub fn positions(&self, h: usize, w: usize) -> Vec<usize> {
        let (h2, w2) = (h / 2, w / 2);
        let cells: Vec<(usize, usize)> = match self.direction {
            ScanDirection::Right | ScanDirection::Left => {
                (0..h2).flat_map(|i| (0..w2).map(move |j| (i, j))).collect()
            }
            ScanDirection::Down | ScanDirection::Up => {
                (0..w2).flat_map(|j| (0..h2).map(move |i| (i, j))).collect()
            }
        };
        let mut pos: Vec<usize> = cells
            .into_iter()
            .map(|(i, j)| (2 * i + self.row_parity) * w + 2 * j + self.col_parity)
            .collect();
        if matches!(self.direction, ScanDirection::Left | ScanDirection::Up) {
            pos.reverse();
        }
        pos
    }
}

/// Plain per-channel SSM coefficients (decay already in `[0, 1)`).
#[derive(Clone, Debug, PartialEq)]
pub struct SsmCoefficients {
    pub decay: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub skip: Vec<f64>,
}

impl SsmCoefficients {
    pub fn uniform(channels: usize, decay: f64, input: f64, output: f64, skip: f64) -> Self {
        Self {
            decay: vec![decay; channels],
            input: vec![input; channels],
            output: vec![output; channels],
            skip: vec![skip; channels],
        }
    }

    fn channels(&self) -> usize {
        self.decay.len()
    }

    fn to_graph(&self, g: &mut Graph) -> Result<[Var; 4]> {
        let c = self.channels();
        let mk = |g: &mut Graph, v: &[f64]| -> Result<Var> {
            Ok(g.constant(Tensor::new(&[c], v.to_vec())?))
        };
        Ok([
            mk(g, &self.decay)?,
            mk(g, &self.input)?,
            mk(g, &self.output)?,
            mk(g, &self.skip)?,
        ])
    }
}

/// Scan over a `[T, C]` sequence: `h_t = a·h_{t-1} + b·x_t`, `y_t = c·h_t + d·x_t`.
pub fn ssm_scan(x: &Tensor, coeffs: &SsmCoefficients) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[1] != coeffs.channels() {
        return Err(Error::Shape(format!(
            "ssm_scan expects [T, {}], got {s:?}",
            coeffs.channels()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let xt = g.transpose(xv)?;
    let (t, c) = (s[0], s[1]);
    let seq = g.reshape(xt, &[1, c, t])?;
    let [a, b, cc, d] = coeffs.to_graph(&mut g)?;
    let y = g.ssm_scan(seq, a, b, cc, d)?;
    let y = g.reshape(y, &[c, t])?;
    let y = g.transpose(y)?;
    Ok(g.value(y).clone())
}

fn scan_index_maps(c: usize, h: usize, w: usize, dir: ScanDirection) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let hw = h * w;
    let len = hw / 4;
    let mut fwd = vec![0; c * hw];
    let mut inv = vec![0; c * hw];
    for s in 0..4 {
        let order = ScanOrder {
            direction: dir,
            row_parity: s / 2,
            col_parity: s % 2,
        };
        for (t, p) in order.positions(h, w).into_iter().enumerate() {
            for ch in 0..c {
                let seq_idx = (s * c + ch) * len + t;
                fwd[seq_idx] = ch * hw + p;
                inv[ch * hw + p] = seq_idx;
            }
        }
    }
    (Arc::new(fwd), Arc::new(inv))
}

fn check_even(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(Error::Shape(format!("es2d needs [C, H, W] with even H, W, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// One ES2D direction on a graph: scans each of the four stride-2 sub-grids
/// and writes results back to their cells.
pub fn es2d_direction_graph(g: &mut Graph, x: Var, ssm: [Var; 4], dir: ScanDirection) -> Result<Var> {
    let (c, h, w) = check_even(g, x)?;
    let (fwd, inv) = scan_index_maps(c, h, w, dir);
    let seq = g.gather(x, fwd, &[4, c, h * w / 4])?;
    let [a, b, cc, d] = ssm;
    let y = g.ssm_scan(seq, a, b, cc, d)?;
    Ok(g.gather(y, inv, &[c, h, w])?)
}

/// ES2D on a graph: mean of the four direction outputs.
pub fn es2d_graph(g: &mut Graph, x: Var, ssm: [Var; 4]) -> Result<Var> {
    check_even(g, x)?;
    let mut acc: Option<Var> = None;
    for dir in ScanDirection::ALL {
        let y = es2d_direction_graph(g, x, ssm, dir)?;
        acc = Some(match acc {
            Some(a) => g.add(a, y)?,
            None => y,
        });
    }
    Ok(g.scale(acc.unwrap(), 0.25)?)
}

pub fn es2d(x: &Tensor, coeffs: &SsmCoefficients) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ssm = coeffs.to_graph(&mut g)?;
    let y = es2d_graph(&mut g, xv, ssm)?;
    Ok(g.value(y).clone())
}

pub fn es2d_direction(x: &Tensor, coeffs: &SsmCoefficients, dir: ScanDirection) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ssm = coeffs.to_graph(&mut g)?;
    let y = es2d_direction_graph(&mut g, xv, ssm, dir)?;
    Ok(g.value(y).clone())
}

/// `softmax(Q Kᵀ / √d) V Wo` over token rows `[N, C]`.
fn self_attention(g: &mut Graph, tokens: Var, w: &[Var; 4]) -> Result<Var, TensorError> {
    let d = g.shape(tokens)[1] as f64;
    let q = g.matmul(tokens, w[0])?;
    let k = g.matmul(tokens, w[1])?;
    let v = g.matmul(tokens, w[2])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / d.sqrt())?;
    let attn = g.softmax(scores)?;
    let mixed = g.matmul(attn, v)?;
    g.matmul(mixed, w[3])
}

/// `[C, H, W]` → token rows `[H·W, C]`.
pub(crate) fn to_tokens(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Token rows `[H·W, C]` → `[C, H, W]`.
pub(crate) fn from_tokens(g: &mut Graph, t: Var, h: usize, w: usize) -> Result<Var, TensorError> {
    let c = g.shape(t)[1];
    let tt = g.transpose(t)?;
    g.reshape(tt, &[c, h, w])
}

/// Parameters of one decoder block.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub channels: usize,
    dw_res: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    dw_ssm: (ParamId, ParamId),
    /// Free parameter; the decay is `sigmoid(decay_logit)`.
    decay_logit: ParamId,
    ssm_in: ParamId,
    ssm_out: ParamId,
    ssm_skip: ParamId,
    ln2: (ParamId, ParamId),
    attn: [ParamId; 4],
}

fn delta_kernel<R: Rng + ?Sized>(c: usize, noise: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(&[c, 1, 3, 3], noise, rng);
    for ch in 0..c {
        t.data_mut()[ch * 9 + 4] += 1.0;
    }
    t
}

impl MambaBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut R) -> Self {
        let c = channels;
        let p = |s: &str| format!("{prefix}.{s}");
        let attn_std = (1.0 / c as f64).sqrt();
        Self {
            channels,
            dw_res: (
                store.add(p("dw_res.w"), delta_kernel(c, 0.05, rng)),
                store.add(p("dw_res.b"), Tensor::zeros(&[c])),
            ),
            ln1: (
                store.add(p("ln1.g"), Tensor::full(&[c], 1.0)),
                store.add(p("ln1.b"), Tensor::zeros(&[c])),
            ),
            dw_ssm: (
                store.add(p("dw_ssm.w"), delta_kernel(c, 0.05, rng)),
                store.add(p("dw_ssm.b"), Tensor::zeros(&[c])),
            ),
            decay_logit: store.add(p("ssm.decay_logit"), Tensor::uniform(&[c], 0.0, 2.0, rng)),
            ssm_in: store.add(p("ssm.b"), Tensor::uniform(&[c], 0.5, 1.0, rng)),
            ssm_out: store.add(p("ssm.c"), Tensor::uniform(&[c], 0.25, 0.5, rng)),
            ssm_skip: store.add(p("ssm.d"), Tensor::uniform(&[c], 0.0, 0.5, rng)),
            ln2: (
                store.add(p("ln2.g"), Tensor::full(&[c], 1.0)),
                store.add(p("ln2.b"), Tensor::zeros(&[c])),
            ),
            attn: [
                store.add(p("attn.q"), Tensor::randn(&[c, c], attn_std, rng)),
                store.add(p("attn.k"), Tensor::randn(&[c, c], attn_std, rng)),
                store.add(p("attn.v"), Tensor::randn(&[c, c], attn_std, rng)),
                store.add(p("attn.o"), Tensor::randn(&[c, c], 0.5 * attn_std, rng)),
            ],
        }
    }

    /// Every parameter id of this block, in a stable order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![
            self.dw_res.0,
            self.dw_res.1,
            self.ln1.0,
            self.ln1.1,
            self.dw_ssm.0,
            self.dw_ssm.1,
            self.decay_logit,
            self.ssm_in,
            self.ssm_out,
            self.ssm_skip,
            self.ln2.0,
            self.ln2.1,
        ];
        v.extend(self.attn);
        v
    }

    /// `X̂ = DwConv(X)`, `X̃ = ESSM(LN(X))`, `X' = Attention(LN(X̃)) + X̂`,
    /// with `ESSM(u) = ES2D(DwConv(u))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::Shape(format!(
                "mamba block expects [{}, h, w], got {s:?}",
                self.channels
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let pv = |g: &mut Graph, id: ParamId| g.param(store, id);

        let (rw, rb) = (pv(g, self.dw_res.0), pv(g, self.dw_res.1));
        let x_hat = g.conv2d(x, rw, Some(rb), c)?;

        let tokens = to_tokens(g, x)?;
        let (g1, b1) = (pv(g, self.ln1.0), pv(g, self.ln1.1));
        let normed = g.layer_norm(tokens, g1, b1, LN_EPS)?;
        let u = from_tokens(g, normed, h, w)?;
        let (sw, sb) = (pv(g, self.dw_ssm.0), pv(g, self.dw_ssm.1));
        let u = g.conv2d(u, sw, Some(sb), c)?;
        let logit = pv(g, self.decay_logit);
        let decay = g.sigmoid(logit)?;
        let ssm = [
            decay,
            pv(g, self.ssm_in),
            pv(g, self.ssm_out),
            pv(g, self.ssm_skip),
        ];
        let x_tilde = es2d_graph(g, u, ssm)?;

        let t2 = to_tokens(g, x_tilde)?;
        let (g2, b2) = (pv(g, self.ln2.0), pv(g, self.ln2.1));
        let t2 = g.layer_norm(t2, g2, b2, LN_EPS)?;
        let wa = self.attn.map(|id| g.param(store, id));
        let attended = self_attention(g, t2, &wa)?;
        let attended = from_tokens(g, attended, h, w)?;
        Ok(g.add(attended, x_hat)?)
    }
}

/// Linear classifier over globally pooled features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    w: ParamId,
    b: ParamId,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        Self {
            w: store.add(format!("{prefix}.w"), Tensor::randn(&[channels, classes], std, rng)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[classes])),
        }
    }

    pub fn from_ids(w: ParamId, b: ParamId) -> Self {
        Self { w, b }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// Global average pool then linear: `[C, H, W]` → logits `[1, K]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let pooled = g.spatial_mean(x)?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        Ok(g.linear(pooled, w, Some(b))?)
    }
}

/// Four chained blocks for one modality plus its label classifier.
#[derive(Clone, Debug)]
pub struct MambaDecoder {
    pub modality: Modality,
    pub blocks: Vec<MambaBlock>,
    pub classifier: ClassifierHead,
}

impl MambaDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: Modality,
        channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..4)
            .map(|i| MambaBlock::new(store, &format!("mamba.{}.b{}", modality.tag(), i + 1), channels, rng))
            .collect();
        let classifier = ClassifierHead::new(store, &format!("mamba.{}.cls", modality.tag()), channels, classes, rng);
        Self {
            modality,
            blocks,
            classifier,
        }
    }

    /// Runs `X^0 → X^1 → … → X^4`, returning `[X^1, X^2, X^3, X^4]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x0: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut x = x0;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
            out.push(x);
        }
        Ok(out)
    }

    pub fn classify(&self, g: &mut Graph, store: &ParamStore, x4: Var) -> Result<Var> {
        self.classifier.forward(g, store, x4)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.param_ids()).collect();
        v.extend(self.classifier.param_ids());
        v
    }
}

/// Label cross-entropy for the RGB and depth classifiers.
pub fn disentangle_loss(g: &mut Graph, logits_rgb: Var, logits_depth: Var, label: &[usize]) -> Result<(Var, Var)> {
    Ok((g.cross_entropy(logits_rgb, label)?, g.cross_entropy(logits_depth, label)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_params, Sgd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Literal loop-nest reference for ES2D, independent of the gather/scan path.
    fn es2d_reference(x: &Tensor, k: &SsmCoefficients) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, h, w]);
        for pr in 0..2 {
            for pc in 0..2 {
                for dir in 0..4 {
                    for ch in 0..c {
                        let mut cells = Vec::new();
                        if dir < 2 {
                            for i in 0..h2 {
                                for j in 0..w2 {
                                    cells.push((i, j));
                                }
                            }
                        } else {
                            for j in 0..w2 {
                                for i in 0..h2 {
                                    cells.push((i, j));
                                }
                            }
                        }
                        if dir % 2 == 1 {
                            cells.reverse();
                        }
                        let mut state = 0.0;
                        for (i, j) in cells {
                            let (y, xx) = (2 * i + pr, 2 * j + pc);
                            let v = x.at3(ch, y, xx);
                            state = k.decay[ch] * state + k.input[ch] * v;
                            let o = k.output[ch] * state + k.skip[ch] * v;
                            out.data_mut()[(ch * h + y) * w + xx] += 0.25 * o;
                        }
                    }
                }
            }
        }
        out
    }

    fn random_coeffs(c: usize, rng: &mut ChaCha8Rng) -> SsmCoefficients {
        SsmCoefficients {
            decay: (0..c).map(|_| rng.random_range(0.0..0.95)).collect(),
            input: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            output: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            skip: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn scan_examples() {
        let k = SsmCoefficients::uniform(1, 0.5, 1.0, 1.0, 0.0);
        let x = Tensor::new(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(ssm_scan(&x, &k).unwrap().data(), &[1.0, 0.5, 0.25]);

        let z = ssm_scan(&Tensor::zeros(&[5, 2]), &SsmCoefficients::uniform(2, 0.7, 1.0, 1.0, 1.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let memoryless = SsmCoefficients::uniform(1, 0.0, 2.0, 3.0, 0.5);
        let x = Tensor::new(&[3, 1], vec![1.0, -2.0, 4.0]).unwrap();
        let y = ssm_scan(&x, &memoryless).unwrap();
        for (yi, xi) in y.data().iter().zip(x.data()) {
            assert!((yi - (3.0 * 2.0 + 0.5) * xi).abs() < 1e-15);
        }

        let bad = SsmCoefficients::uniform(1, 1.2, 1.0, 1.0, 0.0);
        assert!(ssm_scan(&x, &bad).is_err());
    }

    #[test]
    fn scan_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_coeffs(3, &mut rng);
        let x1 = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let x2 = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = Tensor::from_fn(&[7, 3], |i| a * x1.data()[i] + b * x2.data()[i]);
        let lhs = ssm_scan(&mix, &k).unwrap();
        let y1 = ssm_scan(&x1, &k).unwrap();
        let y2 = ssm_scan(&x2, &k).unwrap();
        for i in 0..21 {
            assert!((lhs.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn es2d_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let k = random_coeffs(3, &mut rng);
            let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
            let got = es2d(&x, &k).unwrap();
            let want = es2d_reference(&x, &k);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let x = Tensor::randn(&[2, 6, 8], 1.0, &mut rng);
        let k = random_coeffs(2, &mut rng);
        let got = es2d(&x, &k).unwrap();
        let want = es2d_reference(&x, &k);
        assert!(got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn es2d_zero_and_odd_inputs() {
        let k = SsmCoefficients::uniform(2, 0.5, 1.0, 1.0, 1.0);
        let z = es2d(&Tensor::zeros(&[2, 4, 4]), &k).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(es2d(&Tensor::zeros(&[2, 3, 4]), &k), Err(Error::Shape(_))));
    }

    #[test]
    fn es2d_is_causal_per_direction() {
        let k = SsmCoefficients::uniform(1, 0.6, 1.0, 1.0, 0.3);
        let (h, w) = (6, 6);
        for cell in [(2usize, 2usize), (3, 4), (0, 5)] {
            let mut x = Tensor::zeros(&[1, h, w]);
            x.data_mut()[cell.0 * w + cell.1] = 1.0;
            for dir in ScanDirection::ALL {
                let y = es2d_direction(&x, &k, dir).unwrap();
                let order = ScanOrder {
                    direction: dir,
                    row_parity: cell.0 % 2,
                    col_parity: cell.1 % 2,
                };
                let pos = order.positions(h, w);
                let at = pos.iter().position(|&p| p == cell.0 * w + cell.1).unwrap();
                for &p in &pos[..at] {
                    assert_eq!(y.data()[p], 0.0);
                }
                // other sub-grids never see the impulse
                for p in 0..h * w {
                    if !pos.contains(&p) {
                        assert_eq!(y.data()[p], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn scan_orders_tile_each_cell_once() {
        let (h, w) = (4, 6);
        for dir in ScanDirection::ALL {
            let mut seen = vec![0; h * w];
            for s in 0..4 {
                let o = ScanOrder {
                    direction: dir,
                    row_parity: s / 2,
                    col_parity: s % 2,
                };
                for p in o.positions(h, w) {
                    seen[p] += 1;
                }
            }
            assert!(seen.iter().all(|&n| n == 1));
        }
    }

    fn zero_block_but_delta(store: &mut ParamStore, block: &MambaBlock) {
        for id in block.param_ids() {
            let t = store.value_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let w = store.value_mut(block.dw_res.0);
        for ch in 0..block.channels {
            w.data_mut()[ch * 9 + 4] = 1.0;
        }
        // LN needs positive eps only; zero affine is fine
    }

    #[test]
    fn residual_only_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let block = MambaBlock::new(&mut store, "blk", 3, &mut rng);
        zero_block_but_delta(&mut store, &block);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[3, 4, 4], 1.0, &mut rng));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn block_is_deterministic_and_shape_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let dec = MambaDecoder::new(&mut store, Modality::Rgb, 4, 3, &mut rng);
        let x = Tensor::randn(&[4, 4, 4], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let xs = dec.forward(&mut g, &store, xv).unwrap();
            xs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|t| t.shape() == [4, 4, 4]));
        assert_eq!(a, run());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        let block = MambaBlock::new(&mut store, "blk", 3, &mut rng);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let target = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let r = finite_diff_check_params(
            &store,
            |g, s| -> Result<Var> {
                let xv = g.constant(x.clone());
                let y = block.forward(g, s, xv)?;
                let t = g.constant(target.clone());
                Ok(g.mse(y, t, 1.0)?)
            },
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.checked > 50);
    }

    #[test]
    fn classifier_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        let b = store.add("b", Tensor::zeros(&[2]));
        let head = ClassifierHead::from_ids(w, b);

        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 2, 2]));
        let logits = head.forward(&mut g, &store, z).unwrap();
        let p = crate::tensor::softmax(g.value(logits).data());
        assert_eq!(p, vec![0.5, 0.5]);

        // pooled = (1, 3): logit0 = 1*1 + 3*0.5 = 2.5, logit1 = -1 + 6 = 5
        let x = g.constant(Tensor::new(&[2, 1, 2], vec![0.0, 2.0, 3.0, 3.0]).unwrap());
        let logits = head.forward(&mut g, &store, x).unwrap();
        let l = g.value(logits).data();
        assert!((l[0] - 2.5).abs() < 1e-12 && (l[1] - 5.0).abs() < 1e-12);
        assert!(l[1] > l[0]);
    }

    #[test]
    fn disentangle_loss_examples() {
        let mut g = Graph::new();
        let perfect = g.constant(Tensor::new(&[1, 3], vec![-900.0, 900.0, -900.0]).unwrap());
        let (lr, ld) = disentangle_loss(&mut g, perfect, perfect, &[1]).unwrap();
        assert_eq!((g.value(lr).item(), g.value(ld).item()), (0.0, 0.0));
        let uni = g.constant(Tensor::zeros(&[1, 10]));
        let (lr, ld) = disentangle_loss(&mut g, uni, uni, &[4]).unwrap();
        assert!((g.value(lr).item() - 10f64.ln()).abs() < 1e-12);
        assert!((g.value(ld).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_sgd_step_reduces_classification_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::new();
        let head = ClassifierHead::new(&mut store, "cls", 2, 2, &mut rng);
        let batch: Vec<(Tensor, usize)> = (0..8)
            .map(|i| {
                let cls = i % 2;
                let mut t = Tensor::randn(&[2, 2, 2], 0.1, &mut rng);
                for v in &mut t.data_mut()[cls * 4..cls * 4 + 4] {
                    *v += 1.0;
                }
                (t, cls)
            })
            .collect();
        let loss = |store: &mut ParamStore, backprop: bool| -> f64 {
            store.zero_grad();
            let mut total = 0.0;
            for (x, y) in &batch {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let l = head.forward(&mut g, store, xv).unwrap();
                let (lr, ld) = disentangle_loss(&mut g, l, l, &[*y]).unwrap();
                let s = g.add(lr, ld).unwrap();
                total += g.value(s).item();
                if backprop {
                    g.backward(s).unwrap();
                    store.accumulate(&g, 1.0 / batch.len() as f64);
                }
            }
            total / batch.len() as f64
        };
        let before = loss(&mut store, true);
        Sgd::new(0.5, 0.0).step(&mut store);
        let after = loss(&mut store, false);
        assert!(after < before, "{after} >= {before}");
    }
}
