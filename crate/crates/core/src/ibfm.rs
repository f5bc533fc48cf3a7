//! Bottleneck fusion: cross-modal multiscale fusion, the token-wise
//! bottleneck projection, shared predictive head, and the training losses.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::mamba::{from_tokens, to_tokens, ClassifierHead};
use crate::mrn::ReconstructionVars;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FusionKind {
    /// Sum of 1×1 projections of both scales.
    Addition,
    /// Channel concat followed by a linear layer.
    ConcatFc,
    /// Gated linear unit `σ(W₁x + b₁) ⊙ (W₂x + b₂)` on the channel concat.
    LinearGlu,
    /// Fine-scale projection plus attention from fine tokens to coarse tokens.
    #[default]
    CrossAttention,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Addition,
        FusionKind::ConcatFc,
        FusionKind::LinearGlu,
        FusionKind::CrossAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Addition => "addition",
            FusionKind::ConcatFc => "concatfc",
            FusionKind::LinearGlu => "linearglu",
            FusionKind::CrossAttention => "cross_attention",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion kind {s:?}")))
    }
}

impl TryFrom<String> for FusionKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionKind> for String {
    fn from(k: FusionKind) -> String {
        k.as_str().to_string()
    }
}

/// Attention of `queries [Nq, Cq]` over `keys_values [Nk, Ck]`:
/// `softmax((q Wq)(kv Wk)ᵀ / √d) (kv Wv)`.
pub fn cross_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<Var, TensorError> {
    let d = g.shape(wq)[1] as f64;
    let q = g.matmul(queries, wq)?;
    let k = g.matmul(keys_values, wk)?;
    let v = g.matmul(keys_values, wv)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / d.sqrt())?;
    let a = g.softmax(s)?;
    g.matmul(a, v)
}

/// Channel-concatenates the per-modality reconstructions at each scale:
/// returns `(concat of rec2, concat of rec4)`.
pub fn fusion_inputs(g: &mut Graph, recs: &[&ReconstructionVars]) -> Result<(Var, Var)> {
    if recs.is_empty() {
        return Err(Error::Shape("no reconstructions to fuse".into()));
    }
    let r2: Vec<Var> = recs.iter().map(|r| r.rec2).collect();
    let r4: Vec<Var> = recs.iter().map(|r| r.rec4).collect();
    Ok((g.concat(&r2)?, g.concat(&r4)?))
}

fn linear_param<R: Rng + ?Sized>(store: &mut ParamStore, name: String, din: usize, dout: usize, rng: &mut R) -> ParamId {
    let std = (1.0 / din as f64).sqrt();
    store.add(name, Tensor::randn(&[din, dout], std, rng))
}

/// Combines the fine (`F¹`) and coarse (`F²`) fusion inputs on `F¹`'s grid.
#[derive(Clone, Debug)]
pub struct Fuser {
    pub kind: FusionKind,
    pub fine_channels: usize,
    pub coarse_channels: usize,
    pub out_channels: usize,
    params: Vec<ParamId>,
}

impl Fuser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: FusionKind,
        fine_channels: usize,
        coarse_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let (c1, c2, co) = (fine_channels, coarse_channels, out_channels);
        let n = |s: &str| format!("ibfm.fuse.{s}");
        let params = match kind {
            FusionKind::Addition => vec![
                linear_param(store, n("p1"), c1, co, rng),
                linear_param(store, n("p2"), c2, co, rng),
                store.add(n("b"), Tensor::zeros(&[co])),
            ],
            FusionKind::ConcatFc => vec![
                linear_param(store, n("w"), c1 + c2, co, rng),
                store.add(n("b"), Tensor::zeros(&[co])),
            ],
            FusionKind::LinearGlu => vec![
                linear_param(store, n("gate.w"), c1 + c2, co, rng),
                store.add(n("gate.b"), Tensor::zeros(&[co])),
                linear_param(store, n("value.w"), c1 + c2, co, rng),
                store.add(n("value.b"), Tensor::zeros(&[co])),
            ],
            FusionKind::CrossAttention => vec![
                linear_param(store, n("self.w"), c1, co, rng),
                store.add(n("self.b"), Tensor::zeros(&[co])),
                linear_param(store, n("q"), c1, co, rng),
                linear_param(store, n("k"), c2, co, rng),
                linear_param(store, n("v"), c2, co, rng),
            ],
        };
        Self {
            kind,
            fine_channels,
            coarse_channels,
            out_channels,
            params,
        }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// `fine: [C1, h, w]`, `coarse: [C2, h/f, w/f]` → `[C_out, h, w]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fine: Var, coarse: Var) -> Result<Var> {
        let sf = g.shape(fine).to_vec();
        let sc = g.shape(coarse).to_vec();
        if sf.len() != 3 || sc.len() != 3 || sf[0] != self.fine_channels || sc[0] != self.coarse_channels {
            return Err(Error::Shape(format!(
                "fusion inputs {sf:?} / {sc:?} do not match channels {} / {}",
                self.fine_channels, self.coarse_channels
            )));
        }
        if sc[1] == 0 || sf[1] % sc[1] != 0 || sf[2] % sc[2] != 0 || sf[1] / sc[1] != sf[2] / sc[2] {
            return Err(Error::Shape(format!("coarse grid {sc:?} does not divide fine grid {sf:?}")));
        }
        let (h, w) = (sf[1], sf[2]);
        let factor = h / sc[1];
        let p: Vec<Var> = self.params.iter().map(|&id| g.param(store, id)).collect();
        let t1 = to_tokens(g, fine)?;
        let up = |g: &mut Graph| -> Result<Var, TensorError> {
            let u = if factor > 1 { g.upsample(coarse, factor)? } else { coarse };
            to_tokens(g, u)
        };
        let tokens = match self.kind {
            FusionKind::Addition => {
                let t2 = up(g)?;
                let a = g.matmul(t1, p[0])?;
                let b = g.linear(t2, p[1], Some(p[2]))?;
                g.add(a, b)?
            }
            FusionKind::ConcatFc => {
                let t2 = up(g)?;
                let cat = concat_columns(g, t1, t2)?;
                g.linear(cat, p[0], Some(p[1]))?
            }
            FusionKind::LinearGlu => {
                let t2 = up(g)?;
                let cat = concat_columns(g, t1, t2)?;
                let gate = g.linear(cat, p[0], Some(p[1]))?;
                let gate = g.sigmoid(gate)?;
                let value = g.linear(cat, p[2], Some(p[3]))?;
                g.mul(gate, value)?
            }
            FusionKind::CrossAttention => {
                let t2 = to_tokens(g, coarse)?;
                let own = g.linear(t1, p[0], Some(p[1]))?;
                let attended = cross_attention(g, t1, t2, p[2], p[3], p[4])?;
                g.add(own, attended)?
            }
        };
        Ok(from_tokens(g, tokens, h, w)?)
    }
}

/// `[N, a]`, `[N, b]` → `[N, a + b]`.
fn concat_columns(g: &mut Graph, a: Var, b: Var) -> Result<Var, TensorError> {
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let cat = g.concat(&[at, bt])?;
    g.transpose(cat)
}

/// Token-wise `Linear → Dropout → ReLU → Linear → Dropout → ReLU` through a
/// `d_z`-wide bottleneck.
#[derive(Clone, Debug)]
pub struct IbProjection {
    pub dim: usize,
    pub bottleneck: usize,
    pub dropout: f64,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl IbProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        bottleneck: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::Config(format!(
                "bottleneck width {bottleneck} must be in 1..{dim}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self {
            dim,
            bottleneck,
            dropout,
            w1: store.add("ibfm.proj.w1", Tensor::randn(&[dim, bottleneck], (2.0 / dim as f64).sqrt(), rng)),
            b1: store.add("ibfm.proj.b1", Tensor::full(&[bottleneck], 0.01)),
            w2: store.add(
                "ibfm.proj.w2",
                Tensor::randn(&[bottleneck, dim], (2.0 / bottleneck as f64).sqrt(), rng),
            ),
            b2: store.add("ibfm.proj.b2", Tensor::full(&[dim], 0.01)),
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Returns `(z [N, d_z], F_fu_g [C, H, W])` for `F_fu [C, H, W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_fu: Var) -> Result<(Var, Var)> {
        let s = g.shape(f_fu).to_vec();
        if s.len() != 3 || s[0] != self.dim {
            return Err(Error::Shape(format!("projection expects [{}, h, w], got {s:?}", self.dim)));
        }
        let t = to_tokens(g, f_fu)?;
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        let z = g.linear(t, w1, Some(b1))?;
        let z = g.dropout(z, self.dropout)?;
        let z = g.relu(z)?;
        let y = g.linear(z, w2, Some(b2))?;
        let y = g.dropout(y, self.dropout)?;
        let y = g.relu(y)?;
        Ok((z, from_tokens(g, y, s[1], s[2])?))
    }
}

/// Class distributions of `F_fu` (gradient stopped) and `F_fu_g` through one
/// shared pooled linear head.
pub fn predictive_heads(
    g: &mut Graph,
    store: &ParamStore,
    head: &ClassifierHead,
    f_fu: Var,
    f_fu_g: Var,
) -> Result<(Var, Var)> {
    let lf = head.forward(g, store, f_fu)?;
    let pf = g.softmax(lf)?;
    let pf = g.detach(pf);
    let lg = head.forward(g, store, f_fu_g)?;
    let pg = g.softmax(lg)?;
    Ok((pf, pg))
}

/// Batch-mean `KL(Y_Ffu ‖ Y_Ffug)`.
pub fn ib_loss(g: &mut Graph, y_fu: Var, y_fug: Var) -> Result<Var> {
    Ok(g.kl_div(y_fu, y_fug)?)
}

/// `‖F_org − F_fu_g‖² / (H'·W')`.
pub fn fusion_loss(g: &mut Graph, f_org: Var, f_fu_g: Var) -> Result<Var> {
    let s = g.shape(f_org).to_vec();
    if s.len() != 3 || g.shape(f_fu_g) != s.as_slice() {
        return Err(Error::Shape(format!(
            "fusion loss operands {s:?} and {:?}",
            g.shape(f_fu_g)
        )));
    }
    Ok(g.mse(f_org, f_fu_g, (s[1] * s[2]) as f64)?)
}

/// Loss weights of the two classifiers, the fusion loss, and the KL term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub rgb: f64,
    pub depth: f64,
    pub fusion: f64,
    pub ib: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            depth: 1.0,
            fusion: 1.0,
            ib: 1.0,
        }
    }
}

/// Scalar loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rgb: f64,
    pub depth: f64,
    pub fusion: f64,
    pub ib: f64,
    pub rec: f64,
}

impl LossBundle {
    pub fn total(&self, l: &Lambdas) -> f64 {
        l.rgb * self.rgb + l.depth * self.depth + l.fusion * self.fusion + l.ib * self.ib + self.rec
    }

    pub fn add_scaled(&mut self, o: &LossBundle, w: f64) {
        self.rgb += w * o.rgb;
        self.depth += w * o.depth;
        self.fusion += w * o.fusion;
        self.ib += w * o.ib;
        self.rec += w * o.rec;
    }
}

/// Graph handles of the loss components; absent terms (disabled modules) count as 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub rgb: Option<Var>,
    pub depth: Option<Var>,
    pub fusion: Option<Var>,
    pub ib: Option<Var>,
    pub rec: Option<Var>,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBundle {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBundle {
            rgb: v(self.rgb),
            depth: v(self.depth),
            fusion: v(self.fusion),
            ib: v(self.ib),
            rec: v(self.rec),
        }
    }
}

/// `λ1·L_R + λ2·L_D + λ3·L_Fusion + λ4·L_IB + L_rec` on the graph.
pub fn total_loss(g: &mut Graph, parts: &LossVars, l: &Lambdas) -> Result<Var> {
    let terms = [
        (parts.rgb, l.rgb),
        (parts.depth, l.depth),
        (parts.fusion, l.fusion),
        (parts.ib, l.ib),
        (parts.rec, 1.0),
    ];
    let mut acc: Option<Var> = None;
    for (v, w) in terms {
        let Some(v) = v else { continue };
        let t = g.scale(v, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(0.0)),
    })
}

/// Plain-tensor view of one fusion pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub f_fu: Tensor,
    pub z: Tensor,
    pub f_fu_g: Tensor,
    pub y_fu: Vec<f64>,
    pub y_fug: Vec<f64>,
}
