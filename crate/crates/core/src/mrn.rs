//! Reconstruction decoder: restores jittered feature pyramids to clean ones,
//! taking the Mamba chain outputs as extra inputs at each stage.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mfen::{FeaturePyramid, Modality};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Which reconstruction scales enter the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecScales {
    #[default]
    Both,
    Two,
    Four,
}

/// Graph handles for one reconstruction pass.
#[derive(Clone, Debug)]
pub struct ReconstructionVars {
    /// Output at the level-2 grid.
    pub rec2: Var,
    /// Output at the level-4 grid.
    pub rec4: Var,
    /// Every evaluated stage, coarse to fine.
    pub stages: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionOutput {
    pub rec2: Tensor,
    pub rec4: Tensor,
    pub stages: Vec<Tensor>,
}

impl ReconstructionOutput {
    pub fn from_graph(g: &Graph, v: &ReconstructionVars) -> Self {
        Self {
            rec2: g.value(v.rec2).clone(),
            rec4: g.value(v.rec4).clone(),
            stages: v.stages.iter().map(|&s| g.value(s).clone()).collect(),
        }
    }
}

/// Four conv3x3+ReLU stages running from the level-4 grid up to level 1.
#[derive(Clone, Debug)]
pub struct Mrn {
    pub modality: Modality,
    /// Encoder widths, level 1 first.
    pub channels: [usize; 4],
    /// Channel width of injected Mamba features; 0 when the chain is off.
    pub mamba_channels: usize,
    stages: Vec<(ParamId, ParamId)>,
}

impl Mrn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: Modality,
        channels: [usize; 4],
        mamba_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::with_capacity(4);
        for k in 0..4 {
            let level = 4 - k;
            let out_ch = channels[level - 1];
            let prev = if k == 0 { 0 } else { channels[level] };
            let in_ch = prev + out_ch + mamba_channels;
            let std = (2.0 / (9 * in_ch) as f64).sqrt();
            let w = store.add(
                format!("mrn.{}.s{}.w", modality.tag(), k + 1),
                Tensor::randn(&[out_ch, in_ch, 3, 3], std, rng),
            );
            let b = store.add(
                format!("mrn.{}.s{}.b", modality.tag(), k + 1),
                Tensor::full(&[out_ch], 0.01),
            );
            stages.push((w, b));
        }
        Self {
            modality,
            channels,
            mamba_channels,
            stages,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Decodes `abn` (level graph handles, level 1 first). Stage `k` sees the
    /// upsampled previous stage, the level `5 − k` skip and `X^k` resized to
    /// that grid. With `all_stages = false` the finest stage, which feeds no
    /// output, is skipped.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        abn: &[Var; 4],
        mamba: Option<&[Var]>,
        all_stages: bool,
    ) -> Result<ReconstructionVars> {
        if self.mamba_channels > 0 && mamba.map(<[Var]>::len) != Some(4) {
            return Err(Error::Shape("reconstruction needs four Mamba features".into()));
        }
        let base = g.shape(abn[3]).to_vec();
        for (i, &v) in abn.iter().enumerate() {
            let s = g.shape(v);
            let f = 1 << (3 - i);
            if s != [self.channels[i], base[1] * f, base[2] * f] {
                return Err(Error::Shape(format!("skip level {} has shape {s:?}", i + 1)));
            }
        }
        let n_stages = if all_stages { 4 } else { 3 };
        let mut stages = Vec::with_capacity(n_stages);
        let mut prev: Option<Var> = None;
        for k in 0..n_stages {
            let level = 4 - k;
            let mut parts = Vec::with_capacity(3);
            if let Some(p) = prev {
                parts.push(g.upsample(p, 2)?);
            }
            parts.push(abn[level - 1]);
            if self.mamba_channels > 0 {
                let x = mamba.unwrap()[k];
                let s = g.shape(x);
                if s != [self.mamba_channels, base[1], base[2]] {
                    return Err(Error::Shape(format!("Mamba feature {} has shape {s:?}", k + 1)));
                }
                parts.push(if k == 0 { x } else { g.upsample(x, 1 << k)? });
            }
            let input = g.concat(&parts)?;
            let (w, b) = self.stages[k];
            let w = g.param(store, w);
            let b = g.param(store, b);
            let y = g.conv2d(input, w, Some(b), 1)?;
            let y = g.relu(y)?;
            stages.push(y);
            prev = Some(y);
        }
        Ok(ReconstructionVars {
            rec4: stages[0],
            rec2: stages[2],
            stages,
        })
    }

    /// Eval-mode convenience over plain tensors.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        abn: &FeaturePyramid,
        mamba: Option<&[Tensor]>,
    ) -> Result<ReconstructionOutput> {
        let mut g = Graph::new();
        let levels: Vec<Var> = abn.levels().iter().map(|t| g.constant(t.clone())).collect();
        let levels: [Var; 4] = levels.try_into().unwrap();
        let m: Option<Vec<Var>> = mamba.map(|xs| xs.iter().map(|t| g.constant(t.clone())).collect());
        let v = self.forward(&mut g, store, &levels, m.as_deref(), true)?;
        Ok(ReconstructionOutput::from_graph(&g, &v))
    }
}

/// Mean over the selected scales of `‖rec − clean‖² / numel`.
pub fn reconstruction_loss_graph(
    g: &mut Graph,
    rec: &ReconstructionVars,
    clean2: Var,
    clean4: Var,
    scales: RecScales,
) -> Result<Var> {
    let per_scale = |g: &mut Graph, r: Var, c: Var| -> Result<Var> {
        let n = g.value(c).len() as f64;
        Ok(g.mse(r, c, n)?)
    };
    Ok(match scales {
        RecScales::Two => per_scale(g, rec.rec2, clean2)?,
        RecScales::Four => per_scale(g, rec.rec4, clean4)?,
        RecScales::Both => {
            let a = per_scale(g, rec.rec2, clean2)?;
            let b = per_scale(g, rec.rec4, clean4)?;
            let s = g.add(a, b)?;
            g.scale(s, 0.5)?
        }
    })
}

pub fn reconstruction_loss(rec: &ReconstructionOutput, clean: &FeaturePyramid, scales: RecScales) -> Result<f64> {
    let mut g = Graph::new();
    let vars = ReconstructionVars {
        rec2: g.constant(rec.rec2.clone()),
        rec4: g.constant(rec.rec4.clone()),
        stages: Vec::new(),
    };
    let c2 = g.constant(clean.level(2).clone());
    let c4 = g.constant(clean.level(4).clone());
    if g.shape(vars.rec2) != g.shape(c2) || g.shape(vars.rec4) != g.shape(c4) {
        return Err(Error::Shape("reconstruction and clean pyramid disagree".into()));
    }
    let l = reconstruction_loss_graph(&mut g, &vars, c2, c4, scales)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba::MambaDecoder;
    use crate::tensor::finite_diff_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CH: [usize; 4] = [2, 3, 3, 4];

    fn pyramid(rng: &mut ChaCha8Rng, hw4: usize) -> FeaturePyramid {
        let levels = (0..4)
            .map(|i| {
                let s = hw4 << (3 - i);
                Tensor::randn(&[CH[i], s, s], 1.0, rng)
            })
            .collect();
        FeaturePyramid::new(levels).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_outputs_of_right_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mrn = Mrn::new(&mut store, Modality::Rgb, CH, 0, &mut rng);
        for id in mrn.param_ids() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = mrn.reconstruct(&store, &pyramid(&mut rng, 2), None).unwrap();
        assert_eq!(out.rec4.shape(), [4, 2, 2]);
        assert_eq!(out.rec2.shape(), [3, 8, 8]);
        assert_eq!(out.stages.len(), 4);
        assert_eq!(out.stages[3].shape(), [2, 16, 16]);
        assert!(out.stages.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mismatched_injection_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mrn = Mrn::new(&mut store, Modality::Rgb, CH, 4, &mut rng);
        let p = pyramid(&mut rng, 2);
        let bad: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(&[4, 3, 3])).collect();
        assert!(matches!(mrn.reconstruct(&store, &p, Some(&bad)), Err(Error::Shape(_))));
        assert!(matches!(mrn.reconstruct(&store, &p, None), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clean = pyramid(&mut rng, 2);
        let same = ReconstructionOutput {
            rec2: clean.level(2).clone(),
            rec4: clean.level(4).clone(),
            stages: vec![],
        };
        assert_eq!(reconstruction_loss(&same, &clean, RecScales::Both).unwrap(), 0.0);
        let shifted = ReconstructionOutput {
            rec2: clean.level(2).map(|v| v + 1.0),
            ..same
        };
        let l = reconstruction_loss(&shifted, &clean, RecScales::Both).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        assert!((reconstruction_loss(&shifted, &clean, RecScales::Two).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(reconstruction_loss(&shifted, &clean, RecScales::Four).unwrap(), 0.0);
    }

    #[test]
    fn training_on_one_object_halves_jittered_reconstruction_error() {
        use crate::mfen::{feature_jitter, Encoder};
        use crate::tensor::Sgd;

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, Modality::Rgb, 3, CH, false, &mut rng);
        let dec = MambaDecoder::new(&mut store, Modality::Rgb, CH[3], 1, &mut rng);
        let mrn = Mrn::new(&mut store, Modality::Rgb, CH, CH[3], &mut rng);
        let x = Tensor::randn(&[3, 32, 32], 0.5, &mut rng);
        let clean = enc.encode(&store, &x).unwrap();
        let (probe, _) = feature_jitter(&clean, 0.5, None, &mut rng).unwrap();

        let eval = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let lv: Vec<Var> = probe.levels().iter().map(|t| g.constant(t.clone())).collect();
            let xs = dec.forward(&mut g, store, lv[3]).unwrap();
            let xs: Vec<Tensor> = xs.iter().map(|&v| g.value(v).clone()).collect();
            let rec = mrn.reconstruct(store, &probe, Some(&xs)).unwrap();
            reconstruction_loss(&rec, &clean, RecScales::Both).unwrap()
        };
        let before = eval(&store);
        let mut opt = Sgd::new(1e-2, 0.9).with_clip_norm(Some(5.0));
        for _ in 0..200 {
            let (abn, _) = feature_jitter(&clean, 0.5, None, &mut rng).unwrap();
            let mut g = Graph::new();
            let lv: Vec<Var> = abn.levels().iter().map(|t| g.constant(t.clone())).collect();
            let lv: [Var; 4] = lv.try_into().unwrap();
            let xs = dec.forward(&mut g, &store, lv[3]).unwrap();
            let rec = mrn.forward(&mut g, &store, &lv, Some(&xs), false).unwrap();
            let c2 = g.constant(clean.level(2).clone());
            let c4 = g.constant(clean.level(4).clone());
            let loss = reconstruction_loss_graph(&mut g, &rec, c2, c4, RecScales::Both).unwrap();
            g.backward(loss).unwrap();
            store.accumulate(&g, 1.0);
            opt.step(&mut store);
            store.zero_grad();
        }
        let after = eval(&store);
        assert!(after <= 0.5 * before, "before {before}, after {after}");
    }

    #[test]
    fn gradients_through_decoder_and_mamba_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let dec = MambaDecoder::new(&mut store, Modality::Rgb, 4, 2, &mut rng);
        let mrn = Mrn::new(&mut store, Modality::Rgb, CH, 4, &mut rng);
        let p = pyramid(&mut rng, 2);
        let target = Tensor::randn(&[4, 2, 2], 1.0, &mut rng);
        let r = finite_diff_check_params(
            &store,
            |g, s| -> Result<Var> {
                let lv: Vec<Var> = p.levels().iter().map(|t| g.constant(t.clone())).collect();
                let lv: [Var; 4] = lv.try_into().unwrap();
                let xs = dec.forward(g, s, lv[3])?;
                let rec = mrn.forward(g, s, &lv, Some(&xs), false)?;
                let t = g.constant(target.clone());
                Ok(g.mse(rec.rec4, t, 16.0)?)
            },
            1e-5,
            Some(4),
            9,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
