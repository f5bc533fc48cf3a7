//! Full detector: encoders, per-modality Mamba chains and reconstruction
//! decoders, fusion with the bottleneck projection, and optional
//! per-pixel discriminator, with switches for every ablation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ibfm::{
    fusion_inputs, fusion_loss, ib_loss, predictive_heads, total_loss, FusedFeatures, FusionKind, Fuser,
    IbProjection, Lambdas, LossVars,
};
use crate::mamba::{disentangle_loss, ClassifierHead, MambaDecoder};
use crate::metrics::{anomaly_map, bilinear_resize, gaussian_blur, AnomalyScoreMap};
use crate::mfen::{modality_input, Encoder, FeaturePyramid, JitterMask, Modality, MultimodalSample};
use crate::mrn::{reconstruction_loss_graph, Mrn, RecScales, ReconstructionVars};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityMode {
    Rgb,
    Depth,
    #[default]
    Both,
}

impl ModalityMode {
    pub fn modalities(self) -> Vec<Modality> {
        match self {
            ModalityMode::Rgb => vec![Modality::Rgb],
            ModalityMode::Depth => vec![Modality::Depth],
            ModalityMode::Both => vec![Modality::Rgb, Modality::Depth],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder widths of pyramid levels 1–4.
    pub channels: [usize; 4],
    /// Width of the fused feature; 0 means the level-2 width.
    pub fusion_channels: usize,
    pub num_classes: usize,
    pub modalities: ModalityMode,
    pub use_mamba: bool,
    pub use_ibfm: bool,
    pub fusion: FusionKind,
    /// Bottleneck width; 0 means a quarter of the fused width.
    pub bottleneck: usize,
    pub dropout: f64,
    pub lambdas: Lambdas,
    pub rec_scales: RecScales,
    pub replicate_depth: bool,
    pub train_encoder: bool,
    pub discriminator: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            fusion_channels: 0,
            num_classes: 10,
            modalities: ModalityMode::Both,
            use_mamba: true,
            use_ibfm: true,
            fusion: FusionKind::CrossAttention,
            bottleneck: 0,
            dropout: 0.1,
            lambdas: Lambdas::default(),
            rec_scales: RecScales::Both,
            replicate_depth: false,
            train_encoder: false,
            discriminator: false,
        }
    }
}

impl ModelConfig {
    pub fn fused_width(&self) -> usize {
        if self.fusion_channels == 0 {
            self.channels[1]
        } else {
            self.fusion_channels
        }
    }

    pub fn bottleneck_width(&self) -> usize {
        if self.bottleneck == 0 {
            (self.fused_width() / 4).max(1)
        } else {
            self.bottleneck
        }
    }
}

/// Graph handles for one modality's encoder outputs: jittered input levels
/// and the clean levels used as targets.
#[derive(Clone, Copy, Debug)]
pub struct ModalityInputs {
    pub abn: [Var; 4],
    pub clean: [Var; 4],
}

impl ModalityInputs {
    pub fn constants(g: &mut Graph, abn: &FeaturePyramid, clean: &FeaturePyramid) -> Self {
        let mk = |g: &mut Graph, p: &FeaturePyramid| -> [Var; 4] {
            std::array::from_fn(|i| g.constant(p.levels()[i].clone()))
        };
        Self {
            abn: mk(g, abn),
            clean: mk(g, clean),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub recs: Vec<ReconstructionVars>,
    /// Mamba classifier logits per modality.
    pub logits: Vec<Var>,
    pub f_fu: Var,
    pub z: Option<Var>,
    pub f_fu_g: Var,
    /// `(Y_Ffu, Y_Ffug)` when the bottleneck module is on.
    pub predictions: Option<(Var, Var)>,
    pub f_org: Var,
    pub disc_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<Encoder>,
    pub mamba: Vec<MambaDecoder>,
    pub mrn: Vec<Mrn>,
    pub fuser: Fuser,
    pub projection: Option<IbProjection>,
    pub head: Option<ClassifierHead>,
    org_proj: ParamId,
    disc: Option<(ParamId, ParamId)>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let ch = config.channels;
        if ch.contains(&0) || config.num_classes == 0 {
            return Err(Error::Config("channel widths and class count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mods = config.modalities.modalities();
        let in_ch = |m: Modality| match m {
            Modality::Rgb => 3,
            Modality::Depth if config.replicate_depth => 3,
            Modality::Depth => 1,
        };
        let encoders: Vec<Encoder> = mods
            .iter()
            .map(|&m| Encoder::new(&mut store, m, in_ch(m), ch, config.train_encoder, &mut rng))
            .collect();
        let mamba: Vec<MambaDecoder> = if config.use_mamba {
            mods.iter()
                .map(|&m| MambaDecoder::new(&mut store, m, ch[3], config.num_classes, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let mamba_ch = if config.use_mamba { ch[3] } else { 0 };
        let mrn = mods
            .iter()
            .map(|&m| Mrn::new(&mut store, m, ch, mamba_ch, &mut rng))
            .collect();
        let n = mods.len();
        let cfu = config.fused_width();
        let kind = if config.use_ibfm { config.fusion } else { FusionKind::Addition };
        let fuser = Fuser::new(&mut store, kind, n * ch[1], n * ch[3], cfu, &mut rng);
        let (projection, head) = if config.use_ibfm {
            let p = IbProjection::new(&mut store, cfu, config.bottleneck_width(), config.dropout, &mut rng)?;
            let h = ClassifierHead::new(&mut store, "ibfm.head", cfu, config.num_classes, &mut rng);
            (Some(p), Some(h))
        } else {
            (None, None)
        };
        let org = if cfu == ch[1] {
            Tensor::from_fn(&[cfu, ch[1], 1, 1], |i| f64::from(i / ch[1] == i % ch[1]))
        } else {
            Tensor::randn(&[cfu, ch[1], 1, 1], (1.0 / ch[1] as f64).sqrt(), &mut rng)
        };
        let org_proj = store.add_frozen("org_proj.w", org);
        let disc = config.discriminator.then(|| {
            (
                store.add("disc.w", Tensor::randn(&[1, cfu, 1, 1], 0.1, &mut rng)),
                store.add("disc.b", Tensor::zeros(&[1])),
            )
        });
        Ok(Self {
            config,
            store,
            encoders,
            mamba,
            mrn,
            fuser,
            projection,
            head,
            org_proj,
            disc,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.config.modalities.modalities()
    }

    /// Eval-mode pyramids of every active modality.
    pub fn encode(&self, sample: &MultimodalSample) -> Result<Vec<FeaturePyramid>> {
        self.encoders
            .iter()
            .map(|e| {
                let x = modality_input(sample, e.modality, self.config.replicate_depth);
                e.encode(&self.store, &x)
            })
            .collect()
    }

    /// Encoder outputs recorded on `g` (needed when the encoder trains).
    pub fn encode_on_graph(&self, g: &mut Graph, sample: &MultimodalSample) -> Result<Vec<[Var; 4]>> {
        self.encoders
            .iter()
            .map(|e| {
                let x = g.constant(modality_input(sample, e.modality, self.config.replicate_depth));
                let lv = e.forward(g, &self.store, x)?;
                Ok(lv.try_into().expect("four levels"))
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, inputs: &[ModalityInputs]) -> Result<ForwardVars> {
        if inputs.len() != self.mrn.len() {
            return Err(Error::Shape(format!(
                "{} modality inputs for {} modalities",
                inputs.len(),
                self.mrn.len()
            )));
        }
        let store = &self.store;
        let mut recs = Vec::with_capacity(inputs.len());
        let mut logits = Vec::new();
        for (k, inp) in inputs.iter().enumerate() {
            let xs = if self.config.use_mamba {
                let dec = &self.mamba[k];
                let xs = dec.forward(g, store, inp.abn[3])?;
                logits.push(dec.classify(g, store, xs[3])?);
                Some(xs)
            } else {
                None
            };
            recs.push(self.mrn[k].forward(g, store, &inp.abn, xs.as_deref(), false)?);
        }
        let rec_refs: Vec<&ReconstructionVars> = recs.iter().collect();
        let (fine, coarse) = fusion_inputs(g, &rec_refs)?;
        let f_fu = self.fuser.forward(g, store, fine, coarse)?;
        let (z, f_fu_g, predictions) = match (&self.projection, &self.head) {
            (Some(p), Some(h)) => {
                let (z, fg) = p.forward(g, store, f_fu)?;
                let preds = predictive_heads(g, store, h, f_fu, fg)?;
                (Some(z), fg, Some(preds))
            }
            _ => (None, f_fu, None),
        };
        let w = g.param(store, self.org_proj);
        let f_org = g.conv2d(inputs[0].clean[1], w, None, 1)?;
        let f_org = g.detach(f_org);
        let disc_logits = match self.disc {
            Some((w, b)) => {
                let d = g.sub(f_org, f_fu_g)?;
                let d2 = g.mul(d, d)?;
                let (wv, bv) = (g.param(store, w), g.param(store, b));
                Some(g.conv2d(d2, wv, Some(bv), 1)?)
            }
            None => None,
        };
        Ok(ForwardVars {
            recs,
            logits,
            f_fu,
            z,
            f_fu_g,
            predictions,
            f_org,
            disc_logits,
        })
    }

    /// Training objective for one sample; returns the total and its parts.
    pub fn loss(
        &self,
        g: &mut Graph,
        inputs: &[ModalityInputs],
        label: usize,
        jitter: Option<&JitterMask>,
    ) -> Result<(Var, LossVars)> {
        let fw = self.forward(g, inputs)?;
        let mut parts = LossVars::default();
        if self.config.use_mamba {
            let mods = self.modalities();
            for (k, &m) in mods.iter().enumerate() {
                let ce = g.cross_entropy(fw.logits[k], &[label])?;
                match m {
                    Modality::Rgb => parts.rgb = Some(ce),
                    Modality::Depth => parts.depth = Some(ce),
                }
            }
            if mods.len() == 2 {
                let (lr, ld) = disentangle_loss(g, fw.logits[0], fw.logits[1], &[label])?;
                parts.rgb = Some(lr);
                parts.depth = Some(ld);
            }
        }
        let mut rec_terms = Vec::with_capacity(inputs.len());
        for (rec, inp) in fw.recs.iter().zip(inputs) {
            let c2 = g.detach(inp.clean[1]);
            let c4 = g.detach(inp.clean[3]);
            rec_terms.push(reconstruction_loss_graph(g, rec, c2, c4, self.config.rec_scales)?);
        }
        let mut rec = rec_terms[0];
        for &t in &rec_terms[1..] {
            rec = g.add(rec, t)?;
        }
        if rec_terms.len() > 1 {
            rec = g.scale(rec, 1.0 / rec_terms.len() as f64)?;
        }
        if let Some(d) = fw.disc_logits {
            let target = match jitter {
                Some(m) if !m.is_empty() => m.level_as_f64(2),
                _ => vec![0.0; g.value(d).len()],
            };
            let bce = g.bce_with_logits(d, &target)?;
            rec = g.add(rec, bce)?;
        }
        parts.rec = Some(rec);
        parts.fusion = Some(fusion_loss(g, fw.f_org, fw.f_fu_g)?);
        if let Some((y_fu, y_fug)) = fw.predictions {
            parts.ib = Some(ib_loss(g, y_fu, y_fug)?);
        }
        let total = total_loss(g, &parts, &self.config.lambdas)?;
        Ok((total, parts))
    }

    /// Eval-mode fusion pass on clean (unjittered) pyramids.
    pub fn fused(&self, pyramids: &[FeaturePyramid]) -> Result<(FusedFeatures, Tensor, Option<Tensor>)> {
        let mut g = Graph::new();
        let inputs: Vec<ModalityInputs> = pyramids
            .iter()
            .map(|p| ModalityInputs::constants(&mut g, p, p))
            .collect();
        let fw = self.forward(&mut g, &inputs)?;
        let dist = |v: Option<Var>| v.map(|v| g.value(v).data().to_vec()).unwrap_or_default();
        let fused = FusedFeatures {
            f_fu: g.value(fw.f_fu).clone(),
            z: fw.z.map_or_else(|| Tensor::scalar(0.0), |z| g.value(z).clone()),
            f_fu_g: g.value(fw.f_fu_g).clone(),
            y_fu: dist(fw.predictions.map(|p| p.0)),
            y_fug: dist(fw.predictions.map(|p| p.1)),
        };
        let disc = fw.disc_logits.map(|d| g.value(d).clone());
        Ok((fused, g.value(fw.f_org).clone(), disc))
    }

    /// Anomaly map of a test sample from its clean pyramids.
    pub fn score(&self, pyramids: &[FeaturePyramid], hw: (usize, usize), sigma: f64) -> Result<AnomalyScoreMap> {
        let (fused, f_org, disc) = self.fused(pyramids)?;
        match disc {
            None => anomaly_map(&f_org, &fused.f_fu_g, hw, sigma),
            Some(logits) => {
                let (h, w) = logits.hw();
                let prob: Vec<f64> = logits.data().iter().map(|&z| crate::tensor::sigmoid(z)).collect();
                let up = bilinear_resize(&prob, h, w, hw.0, hw.1);
                let smooth = gaussian_blur(&up, hw.0, hw.1, sigma);
                let image_score = smooth.iter().copied().fold(0.0, f64::max);
                Ok(AnomalyScoreMap {
                    map: Tensor::new(&[1, hw.0, hw.1], smooth)?,
                    image_score,
                })
            }
        }
    }

    /// Same architecture with parameter values taken from `store`.
    pub fn with_store(&self, store: ParamStore) -> Model {
        Model {
            store,
            ..self.clone()
        }
    }

    pub fn trainable_scalars(&self) -> usize {
        self.store
            .trainable_ids()
            .map(|id| self.store.value(id).len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfen::{feature_jitter, RelRect};
    use crate::tensor::finite_diff_check_params;

    fn tiny(modalities: ModalityMode, use_mamba: bool, use_ibfm: bool, fusion: FusionKind) -> ModelConfig {
        ModelConfig {
            channels: [2, 4, 4, 4],
            num_classes: 3,
            modalities,
            use_mamba,
            use_ibfm,
            fusion,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    fn sample(seed: u64, hw: usize) -> MultimodalSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultimodalSample::new(
            Tensor::uniform(&[3, hw, hw], 0.0, 1.0, &mut rng),
            Tensor::uniform(&[1, hw, hw], 0.0, 1.0, &mut rng),
            1,
            None,
            false,
        )
        .unwrap()
    }

    #[test]
    fn every_variant_produces_finite_losses() {
        let s = sample(1, 32);
        for mode in [ModalityMode::Rgb, ModalityMode::Depth, ModalityMode::Both] {
            for (m, i) in [(false, false), (true, false), (false, true), (true, true)] {
                for kind in FusionKind::ALL {
                    let model = Model::new(tiny(mode, m, i, kind), 3).unwrap();
                    let pyr = model.encode(&s).unwrap();
                    let mut g = Graph::training(0);
                    let inputs: Vec<_> = pyr.iter().map(|p| ModalityInputs::constants(&mut g, p, p)).collect();
                    let (total, parts) = model.loss(&mut g, &inputs, 1, None).unwrap();
                    let v = parts.values(&g);
                    assert!(g.value(total).item().is_finite());
                    assert_eq!(v.ib > 0.0 || !i, true, "{mode:?} {m} {i} {kind}");
                    assert_eq!(parts.rgb.is_some(), m && mode != ModalityMode::Depth);
                    let score = model.score(&pyr, (32, 32), 4.0).unwrap();
                    assert!(score.image_score.is_finite());
                }
            }
        }
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let mut cfg = tiny(ModalityMode::Both, true, true, FusionKind::CrossAttention);
        cfg.discriminator = true;
        let model = Model::new(cfg, 5).unwrap();
        let s = sample(2, 32);
        let clean = model.encode(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rect = RelRect {
            x0: 0.0,
            y0: 0.0,
            x1: 0.5,
            y1: 0.5,
        };
        let jit: Vec<_> = clean
            .iter()
            .map(|p| feature_jitter(p, 1.0, Some(rect), &mut rng).unwrap())
            .collect();
        let mask = jit[0].1.clone();
        let r = finite_diff_check_params(
            &model.store,
            |g, store| -> Result<Var> {
                let m = Model {
                    store: store.clone(),
                    ..model.clone()
                };
                let inputs: Vec<_> = jit
                    .iter()
                    .zip(&clean)
                    .map(|((a, _), c)| ModalityInputs::constants(g, a, c))
                    .collect();
                Ok(m.loss(g, &inputs, 2, Some(&mask))?.0)
            },
            1e-5,
            Some(3),
            1,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.checked > 100, "{r:?}");
    }

    #[test]
    fn trainable_encoder_path_matches_cached_path() {
        let mut cfg = tiny(ModalityMode::Both, true, true, FusionKind::ConcatFc);
        cfg.train_encoder = true;
        cfg.dropout = 0.0;
        let model = Model::new(cfg, 7).unwrap();
        let s = sample(3, 32);
        let pyr = model.encode(&s).unwrap();
        let mut g = Graph::new();
        let inputs: Vec<_> = pyr.iter().map(|p| ModalityInputs::constants(&mut g, p, p)).collect();
        let (a, _) = model.loss(&mut g, &inputs, 0, None).unwrap();
        let mut g2 = Graph::new();
        let lv = model.encode_on_graph(&mut g2, &s).unwrap();
        let inputs: Vec<_> = lv.iter().map(|&l| ModalityInputs { abn: l, clean: l }).collect();
        let (b, _) = model.loss(&mut g2, &inputs, 0, None).unwrap();
        assert_eq!(g.value(a).item(), g2.value(b).item());
        g2.backward(b).unwrap();
        let mut store = model.store.clone();
        store.accumulate(&g2, 1.0);
        let enc = model.encoders[0].param_ids()[0];
        assert!(store.grad(enc).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn bad_bottleneck_is_a_config_error() {
        let mut cfg = tiny(ModalityMode::Both, true, true, FusionKind::CrossAttention);
        cfg.bottleneck = 4;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }
}
