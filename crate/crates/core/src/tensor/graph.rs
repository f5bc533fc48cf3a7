use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::TensorError;

type R<T> = Result<T, TensorError>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Vec<f64>>),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    },
    AvgPool2(Var),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Kl(Var, Var),
    Mse {
        a: Var,
        b: Var,
        norm: f64,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    SsmScan {
        x: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
    SpatialMean(Var),
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. Nodes are appended in evaluation order, which is a
/// topological order; backward visits them in reverse exactly once.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    train: bool,
    rng: ChaCha8Rng,
    kink_hash: u64,
    detached: Vec<Tensor>,
    detach_overrides: Option<Vec<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> R<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Graph {
    /// Evaluation-mode graph (dropout disabled).
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Graph in training mode; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    pub fn with_mode(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            kink_hash: 0xcbf2_9ce4_8422_2325,
            detached: Vec::new(),
            detach_overrides: None,
        }
    }

    /// Values produced by every [`Graph::detach`] call so far, in order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    /// Makes the k-th `detach` call return `values[k]` instead of its input.
    /// Gradient checks use this to hold stop-gradient targets fixed while
    /// probing, so the numeric derivative matches the surrogate objective.
    pub fn override_detached(&mut self, values: Vec<Tensor>) {
        self.detach_overrides = Some(values);
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of the sign pattern seen at every ReLU input. Two evaluations with
    /// different hashes straddle a nondifferentiable point.
    pub fn kink_hash(&self) -> u64 {
        self.kink_hash
    }

    pub(crate) fn param_nodes(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, requires_grad, Op::Leaf)
    }

    /// Copies a stored parameter into the graph as a leaf. Frozen parameters
    /// enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), trainable, Op::Leaf);
        if trainable {
            self.params.push((v, id));
        }
        v
    }

    /// Stop-gradient copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let k = self.detached.len();
        let t = match &self.detach_overrides {
            Some(o) if k < o.len() && o[k].shape() == self.shape(x) => o[k].clone(),
            _ => self.value(x).clone(),
        };
        self.detached.push(t.clone());
        self.push(t, false, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> R<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> R<Var> {
        self.same_shape(name, a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(name, &data)?;
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> R<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> R<Var> {
        let t = self.value(x).map(|v| v * s);
        check_finite("scale", t.data())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Scale(x, s)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: Arc<Vec<f64>>) -> R<Var> {
        if mask.len() != self.value(x).len() {
            return Err(TensorError::dim("mul_const", "mask length mismatch"));
        }
        let data: Vec<f64> = self.data(x).iter().zip(mask.iter()).map(|(a, b)| a * b).collect();
        check_finite("mul_const", &data)?;
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::MulConst(x, mask)))
    }

    /// Inverted dropout: identity in evaluation mode or at `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> R<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(TensorError::Parameter(format!("dropout rate {rate} >= 1")));
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.mul_const(x, Arc::new(mask))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> R<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        check_finite("matmul", &out)?;
        let t = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::MatMul(a, b)))
    }

    /// `x[n, d] + bias[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> R<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sx.len() != 2 || sb.iter().product::<usize>() != sx[1] {
            return Err(TensorError::dim("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let d = sx[1];
        let bd = self.data(bias);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        check_finite("add_row_bias", &data)?;
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, rg, Op::AddRowBias(x, bias)))
    }

    /// `x[n, din] · w[din, dout] + b[dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> R<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, x: Var) -> R<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::dim("transpose", format!("{s:?} is not 2-D")));
        }
        let (m, n) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> R<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Grouped 2-D cross-correlation with zero "same" padding.
    /// `x: [C, H, W]`, `w: [C_out, C/groups, kh, kw]` with odd kernel extents.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> R<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(TensorError::dim("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, cig, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || c % groups != 0 || co % groups != 0 || cig != c / groups {
            return Err(TensorError::dim(
                "conv2d",
                format!("groups {groups} incompatible with x {sx:?}, w {sw:?}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::dim("conv2d", "kernel extents must be odd"));
        }
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(TensorError::dim("conv2d", "bias length != C_out"));
            }
        }
        let xd = self.data(x);
        let wdat = self.data(w);
        let cog = co / groups;
        let (ph, pw) = (kh / 2, kw / 2);
        let plane = h * wd;
        let mut out = vec![0.0; co * plane];
        for oc in 0..co {
            let g = oc / cog;
            let o = &mut out[oc * plane..(oc + 1) * plane];
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data()[oc];
                o.iter_mut().for_each(|v| *v = bv);
            }
            for icl in 0..cig {
                let ic = g * cig + icl;
                let inp = &xd[ic * plane..(ic + 1) * plane];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[((oc * cig + icl) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let x_lo = pw.saturating_sub(kx);
                        let x_hi = (wd + pw).saturating_sub(kx).min(wd);
                        if x_lo >= x_hi {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let orow = &mut o[y * wd + x_lo..y * wd + x_hi];
                            let irow = &inp[iy * wd + x_lo + kx - pw..iy * wd + x_hi + kx - pw];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov += wv * iv;
                            }
                        }
                    }
                }
            }
        }
        check_finite("conv2d", &out)?;
        let t = Tensor::new(&[co, h, wd], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, groups }))
    }

    /// 2x2 average pooling on `[C, H, W]` with even H, W.
    pub fn avg_pool2(&mut self, x: Var) -> R<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TensorError::dim("avg_pool2", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w;
                    let s = xd[base + 2 * y * w + 2 * xx]
                        + xd[base + 2 * y * w + 2 * xx + 1]
                        + xd[base + (2 * y + 1) * w + 2 * xx]
                        + xd[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ch * oh + y) * ow + xx] = 0.25 * s;
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::AvgPool2(x)))
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> R<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(TensorError::dim("upsample", format!("{s:?} x{factor}")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xd[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Upsample(x, factor)))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> R<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(TensorError::dim("concat", format!("{s:?} vs [_, {tail:?}]")));
            }
            lead += s[0];
        }
        let mut data = Vec::with_capacity(lead * tail.iter().product::<usize>());
        for &v in xs {
            data.extend_from_slice(self.data(v));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(xs);
        Ok(self.push(t, rg, Op::Concat(xs.to_vec())))
    }

    pub fn relu(&mut self, x: Var) -> R<Var> {
        let mut h = self.kink_hash;
        for &v in self.data(x) {
            let s: u64 = if v > 0.0 {
                1
            } else if v < 0.0 {
                2
            } else {
                3
            };
            h = (h ^ s).wrapping_mul(0x0100_0000_01b3);
        }
        self.kink_hash = h;
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> R<Var> {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Sigmoid(x)))
    }

    /// Normalises each row of `x[n, d]` to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> R<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::dim("layer_norm", format!("{s:?} is not [n, d]")));
        }
        if eps <= 0.0 {
            return Err(TensorError::Parameter("layer_norm eps must be > 0".into()));
        }
        let (n, d) = (s[0], s[1]);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(TensorError::dim("layer_norm", "affine params must have length d"));
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = gd[j] * xh + bd[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let t = Tensor::new(&s, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> R<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(d) {
            out.extend(super::softmax(row));
        }
        check_finite("softmax", &out)?;
        let t = Tensor::new(&s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax(x)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> R<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::dim("cross_entropy", format!("label {bad} >= {k}")));
        }
        let ld = self.data(logits);
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = (loss / b as f64).max(0.0);
        check_finite("cross_entropy", &[loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Batch-mean `KL(p || q)` over rows of two `[B, K]` distribution tensors.
    pub fn kl_div(&mut self, p: Var, q: Var) -> R<Var> {
        self.same_shape("kl_div", p, q)?;
        let s = self.shape(p).to_vec();
        let k = *s.last().unwrap();
        let b = self.value(p).len() / k;
        let mut total = 0.0;
        for (pr, qr) in self.data(p).chunks(k).zip(self.data(q).chunks(k)) {
            let v = super::kl_divergence(pr, qr);
            if v.is_infinite() {
                return Err(TensorError::InfiniteDivergence);
            }
            total += v;
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(Tensor::scalar(total / b as f64), rg, Op::Kl(p, q)))
    }

    /// `Σ (a - b)² / normalizer`.
    pub fn mse(&mut self, a: Var, b: Var, normalizer: f64) -> R<Var> {
        self.same_shape("mse", a, b)?;
        if normalizer <= 0.0 {
            return Err(TensorError::Parameter("mse normalizer must be > 0".into()));
        }
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        let v = s / normalizer;
        check_finite("mse", &[v])?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(v),
            rg,
            Op::Mse {
                a,
                b,
                norm: normalizer,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> R<Var> {
        let v: f64 = self.data(x).iter().sum();
        check_finite("sum", &[v])?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), rg, Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> R<Var> {
        let v: f64 = self.data(x).iter().sum::<f64>() / self.value(x).len() as f64;
        check_finite("mean", &[v])?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), rg, Op::Mean(x)))
    }

    /// `out[i] = x.flat[idx[i]]`, reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> R<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::dim("gather", format!("index {bad} >= {n}")));
        }
        let xd = self.data(x);
        let data: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Gather { x, idx }))
    }

    /// Diagonal linear state-space scan over `x[G, C, T]`, per channel `c`:
    /// `h_t = a·h_{t-1} + b·x_t`, `y_t = c·h_t + d·x_t`, `h_0 = 0`.
    /// Decay `a` must lie in `[0, 1)`.
    pub fn ssm_scan(&mut self, x: Var, a: Var, b: Var, c: Var, d: Var) -> R<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::dim("ssm_scan", format!("{s:?} is not [G, C, T]")));
        }
        let (groups, ch, len) = (s[0], s[1], s[2]);
        for p in [a, b, c, d] {
            if self.value(p).len() != ch {
                return Err(TensorError::dim("ssm_scan", "per-channel params must have length C"));
            }
        }
        if let Some(bad) = self.data(a).iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(TensorError::Parameter(format!("ssm decay {bad} outside [0, 1)")));
        }
        let (xd, ad, bd, cd, dd) = (
            self.data(x),
            self.data(a),
            self.data(b),
            self.data(c),
            self.data(d),
        );
        let mut states = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for g in 0..groups {
            for k in 0..ch {
                let base = (g * ch + k) * len;
                let mut h = 0.0;
                for t in 0..len {
                    let xv = xd[base + t];
                    h = ad[k] * h + bd[k] * xv;
                    states[base + t] = h;
                    out[base + t] = cd[k] * h + dd[k] * xv;
                }
            }
        }
        check_finite("ssm_scan", &out)?;
        let t = Tensor::new(&s, out)?;
        let rg = self.rg(&[x, a, b, c, d]);
        Ok(self.push(
            t,
            rg,
            Op::SsmScan {
                x,
                a,
                b,
                c,
                d,
                states,
            },
        ))
    }

    /// Global average pool of `[C, H, W]` to a `[1, C]` row.
    pub fn spatial_mean(&mut self, x: Var) -> R<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::dim("spatial_mean", format!("{s:?}")));
        }
        let plane = s[1] * s[2];
        let data: Vec<f64> = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(&[1, s[0]], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::SpatialMean(x)))
    }

    /// Mean binary cross-entropy of logits against `{0,1}` (or soft) targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> R<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(TensorError::dim("bce_with_logits", "target length mismatch"));
        }
        let n = targets.len() as f64;
        let v: f64 = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        check_finite("bce_with_logits", &[v])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(v),
            rg,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every node that
    /// requires one become readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> R<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    axpy(gx, g, *s);
                }
            }
            Op::MulConst(x, m) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gv), &mv) in gx.iter_mut().zip(g).zip(m.iter()) {
                        *o += gv * mv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                axpy(&mut gb[p * n..(p + 1) * n], grow, av);
                            }
                        }
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    axpy(gx, g, 1.0);
                }
                let d = nodes[b.0].value.len();
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % d] += gv;
                    }
                }
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (m, n) = (s[0], s[1]);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Conv2d { x, w, b, groups } => {
                conv2d_backward(nodes, *x, *w, *b, *groups, g, grads);
            }
            Op::AvgPool2(x) => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                gx[(ch * h + y) * w + xx] +=
                                    0.25 * g[(ch * oh + y / 2) * ow + xx / 2];
                            }
                        }
                    }
                }
            }
            Op::Upsample(x, f) => {
                let s = nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * f, w * f);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[(ch * h + y / f) * w + xx / f] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = nodes[v.0].value.len();
                    if let Some(gv) = slot(nodes, grads, v) {
                        axpy(gv, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::Relu(x) => {
                let xd = val(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.len();
                let n = xhat.len() / d;
                let gd = val(*gamma);
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (j, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += gv * xh;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % d] += gv;
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxh = vec![0.0; d];
                    for i in 0..n {
                        let gr = &g[i * d..(i + 1) * d];
                        let xr = &xhat[i * d..(i + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gd[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dot(&dxh, xr) / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += inv_std[i] * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *nodes[x.0].value.shape().last().unwrap();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let s = dot(gr, yr);
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    let scale = g[0] / b as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let t = if j == y { 1.0 } else { 0.0 };
                            gl[r * k + j] += scale * (probs[r * k + j] - t);
                        }
                    }
                }
            }
            Op::Kl(p, q) => {
                let k = *nodes[p.0].value.shape().last().unwrap();
                let b = (nodes[p.0].value.len() / k) as f64;
                let (pd, qd) = (val(*p), val(*q));
                if let Some(gp) = slot(nodes, grads, *p) {
                    for ((o, &pv), &qv) in gp.iter_mut().zip(pd).zip(qd) {
                        if pv > 0.0 {
                            *o += g[0] * ((pv / qv).ln() + 1.0) / b;
                        }
                    }
                }
                if let Some(gq) = slot(nodes, grads, *q) {
                    for ((o, &pv), &qv) in gq.iter_mut().zip(pd).zip(qd) {
                        if pv > 0.0 {
                            *o -= g[0] * pv / qv / b;
                        }
                    }
                }
            }
            Op::Mse { a, b, norm } => {
                let (ad, bd) = (val(*a), val(*b));
                let s = 2.0 * g[0] / norm;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(ad).zip(bd) {
                        *o += s * (x - y);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(ad).zip(bd) {
                        *o -= s * (x - y);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Gather { x, idx } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (&j, &gv) in idx.iter().zip(g) {
                        gx[j] += gv;
                    }
                }
            }
            Op::SsmScan {
                x,
                a,
                b,
                c,
                d,
                states,
            } => {
                ssm_backward(nodes, [*x, *a, *b, *c, *d], states, g, grads);
            }
            Op::SpatialMean(x) => {
                let s = nodes[x.0].value.shape();
                let plane = s[1] * s[2];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (ch, chunk) in gx.chunks_mut(plane).enumerate() {
                        let v = g[ch] / plane as f64;
                        chunk.iter_mut().for_each(|o| *o += v);
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let zd = val(*logits);
                let n = targets.len() as f64;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for ((o, &z), &t) in gl.iter_mut().zip(zd).zip(targets) {
                        *o += g[0] * (sigmoid(z) - t) / n;
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn conv2d_backward(
    nodes: &[Node],
    x: Var,
    w: Var,
    b: Option<Var>,
    groups: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let sx = nodes[x.0].value.shape();
    let sw = nodes[w.0].value.shape();
    let (c, h, wd) = (sx[0], sx[1], sx[2]);
    let (co, cig, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
    let cog = co / groups;
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * wd;
    let xd = nodes[x.0].value.data();
    let wdat = nodes[w.0].value.data();

    if let Some(b) = b {
        if nodes[b.0].requires_grad {
            let gb = grads[b.0].get_or_insert_with(|| vec![0.0; co]);
            for oc in 0..co {
                gb[oc] += g[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    let need_x = nodes[x.0].requires_grad;
    let need_w = nodes[w.0].requires_grad;
    let mut gx = need_x.then(|| vec![0.0; c * plane]);
    let mut gw = need_w.then(|| vec![0.0; wdat.len()]);
    for oc in 0..co {
        let grp = oc / cog;
        let go = &g[oc * plane..(oc + 1) * plane];
        for icl in 0..cig {
            let ic = grp * cig + icl;
            let inp = &xd[ic * plane..(ic + 1) * plane];
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((oc * cig + icl) * kh + ky) * kw + kx;
                    let wv = wdat[widx];
                    let x_lo = pw.saturating_sub(kx);
                    let x_hi = (wd + pw).saturating_sub(kx).min(wd);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in 0..h {
                        let iy = y as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let grow = &go[y * wd + x_lo..y * wd + x_hi];
                        let lo = iy * wd + x_lo + kx - pw;
                        let hi = iy * wd + x_hi + kx - pw;
                        if need_w {
                            acc += dot(grow, &inp[lo..hi]);
                        }
                        if let Some(gx) = gx.as_mut() {
                            if wv != 0.0 {
                                let gxr = &mut gx[ic * plane + lo..ic * plane + hi];
                                axpy(gxr, grow, wv);
                            }
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        let slot = grads[x.0].get_or_insert_with(|| vec![0.0; c * plane]);
        axpy(slot, &gx, 1.0);
    }
    if let Some(gw) = gw {
        let slot = grads[w.0].get_or_insert_with(|| vec![0.0; gw.len()]);
        axpy(slot, &gw, 1.0);
    }
}

fn ssm_backward(
    nodes: &[Node],
    vars: [Var; 5],
    states: &[f64],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let [x, a, b, c, d] = vars;
    let s = nodes[x.0].value.shape();
    let (groups, ch, len) = (s[0], s[1], s[2]);
    let xd = nodes[x.0].value.data();
    let (ad, bd, cd, dd) = (
        nodes[a.0].value.data(),
        nodes[b.0].value.data(),
        nodes[c.0].value.data(),
        nodes[d.0].value.data(),
    );
    let mut gx = vec![0.0; xd.len()];
    let mut gp = [vec![0.0; ch], vec![0.0; ch], vec![0.0; ch], vec![0.0; ch]];
    for gi in 0..groups {
        for k in 0..ch {
            let base = (gi * ch + k) * len;
            let mut carry = 0.0;
            for t in (0..len).rev() {
                let dy = g[base + t];
                let h = states[base + t];
                let xv = xd[base + t];
                gp[2][k] += dy * h;
                gp[3][k] += dy * xv;
                let lam = cd[k] * dy + ad[k] * carry;
                let h_prev = if t > 0 { states[base + t - 1] } else { 0.0 };
                gp[0][k] += lam * h_prev;
                gp[1][k] += lam * xv;
                gx[base + t] += lam * bd[k] + dd[k] * dy;
                carry = lam;
            }
        }
    }
    let mut add = |v: Var, src: &[f64]| {
        if nodes[v.0].requires_grad {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; src.len()]);
            axpy(slot, src, 1.0);
        }
    };
    add(x, &gx);
    for (v, src) in [a, b, c, d].into_iter().zip(gp.iter()) {
        add(v, src);
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let v = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let y = g.matmul(m, v).unwrap();
        let oracle = naive_matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], 2, 2, 1);
        assert_eq!(oracle, vec![17.0, 39.0]);
        assert_eq!(g.value(y).data(), &oracle[..]);

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let y = g.matmul(z, m).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        assert!(matches!(
            g.matmul(v, v),
            Err(TensorError::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 5, 5], |i| (i as f64 * 0.37).sin()));
        let mut delta = vec![0.0; 2 * 9];
        delta[4] = 1.0;
        delta[13] = 1.0;
        let w = g.constant(t(&[2, 1, 3, 3], &delta));
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let c = g.constant(Tensor::full(&[2, 5, 5], 1.5));
        let ones = g.constant(Tensor::full(&[2, 1, 3, 3], 1.0));
        let y = g.conv2d(c, ones, None, 2).unwrap();
        assert!((g.value(y).at3(1, 2, 2) - 9.0 * 1.5).abs() < 1e-12);
        // corner sees 4 in-bounds taps
        assert!((g.value(y).at3(0, 0, 0) - 4.0 * 1.5).abs() < 1e-12);

        let z = g.constant(Tensor::zeros(&[2, 5, 5]));
        let y = g.conv2d(z, ones, None, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bad = g.constant(Tensor::full(&[2, 2, 3, 3], 1.0));
        assert!(g.conv2d(x, bad, None, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-10 && (d[1] - 1.0).abs() < 1e-10);

        let c = g.constant(t(&[1, 2], &[4.0, 4.0]));
        let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let five = g.constant(Tensor::full(&[2], 5.0));
        let y = g.layer_norm(x, zero, five, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let confident = g.constant(t(&[1, 3], &[0.0, 800.0, 0.0]));
        let l = g.cross_entropy(confident, &[1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let uniform = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(uniform, &[0, 2, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_op_flags_infinity() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], &[0.5, 0.5]));
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        assert_eq!(g.kl_div(p, q), Err(TensorError::InfiniteDivergence));
    }

    #[test]
    fn mse_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(Tensor::zeros(&[2]));
        let l = g.mse(a, b, 1.0).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
        let l2 = g.mse(b, a, 1.0).unwrap();
        assert_eq!(g.value(l2).item(), 5.0);
    }

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_graph_has_no_grads() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]), true);
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn ssm_scan_unrolls() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3], &[1.0, 0.0, 0.0]));
        let a = g.constant(t(&[1], &[0.5]));
        let one = g.constant(t(&[1], &[1.0]));
        let zero = g.constant(t(&[1], &[0.0]));
        let y = g.ssm_scan(x, a, one, one, zero).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.5, 0.25]);
        let bad = g.constant(t(&[1], &[1.0]));
        assert!(matches!(
            g.ssm_scan(x, bad, one, one, zero),
            Err(TensorError::Parameter(_))
        ));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_unbiased_in_train() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1000], 1.0));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        let mut g = Graph::training(7);
        let x = g.constant(Tensor::full(&[20000], 1.0));
        let y = g.dropout(x, 0.1).unwrap();
        let m = g.value(y).data().iter().sum::<f64>() / 20000.0;
        assert!((m - 1.0).abs() < 0.02);
    }
}
