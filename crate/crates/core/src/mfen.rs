//! Multimodal feature extraction: per-modality CNN encoders producing
//! four-level feature pyramids, and feature-jitter anomaly synthesis.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

/// Paired RGB image and depth map of one object instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[1, H, W]` in `[0, 1]`; larger is closer to the camera.
    pub depth: Tensor,
    pub object_id: usize,
    /// `[1, H, W]` with entries in `{0, 1}`.
    pub anomaly_mask: Option<Tensor>,
    pub is_anomalous: bool,
}

impl MultimodalSample {
    pub fn new(
        rgb: Tensor,
        depth: Tensor,
        object_id: usize,
        anomaly_mask: Option<Tensor>,
        is_anomalous: bool,
    ) -> Result<Self> {
        let s = Self {
            rgb,
            depth,
            object_id,
            anomaly_mask,
            is_anomalous,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn hw(&self) -> (usize, usize) {
        self.rgb.hw()
    }

    pub fn validate(&self) -> Result<()> {
        let rs = self.rgb.shape();
        let ds = self.depth.shape();
        if rs.len() != 3 || rs[0] != 3 {
            return Err(Error::Shape(format!("rgb must be [3, H, W], got {rs:?}")));
        }
        if ds.len() != 3 || ds[0] != 1 || ds[1..] != rs[1..] {
            return Err(Error::Shape(format!("depth {ds:?} does not pair with rgb {rs:?}")));
        }
        if let Some(m) = &self.anomaly_mask {
            if m.shape() != ds {
                return Err(Error::Shape(format!("mask {:?} vs depth {ds:?}", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Shape("mask entries must be 0 or 1".into()));
            }
            if (m.max() > 0.0) != self.is_anomalous {
                return Err(Error::Shape(
                    "is_anomalous disagrees with the anomaly mask".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Four feature maps, level `i` (1-based) at `H/2^i × W/2^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::Shape(format!("pyramid needs 4 levels, got {}", levels.len())));
        }
        for w in levels.windows(2) {
            let (a, b) = (w[0].hw(), w[1].hw());
            if a.0 != 2 * b.0 || a.1 != 2 * b.1 {
                return Err(Error::Shape(format!("levels {a:?} -> {b:?} do not halve")));
            }
        }
        Ok(Self { levels })
    }

    /// Level `i` in `1..=4`.
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i - 1]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }
}

/// Spatial cells perturbed at each pyramid level (row-major `h × w` flags).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct JitterMask {
    pub levels: Vec<Vec<bool>>,
}

impl JitterMask {
    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.iter().all(|&b| !b))
    }

    /// Level `i` (1-based) as a `{0,1}` float vector.
    pub fn level_as_f64(&self, i: usize) -> Vec<f64> {
        self.levels[i - 1]
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Axis-aligned region in relative image coordinates `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RelRect {
    pub const FULL: RelRect = RelRect {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    fn contains_cell(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let cx = (x as f64 + 0.5) / w as f64;
        let cy = (y as f64 + 0.5) / h as f64;
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }

    /// Random rectangle covering `area` of the unit square.
    pub fn random<R: Rng + ?Sized>(area: f64, rng: &mut R) -> Self {
        let aspect: f64 = rng.random_range(0.5..2.0);
        let w = (area * aspect).sqrt().min(1.0);
        let h = (area / w).min(1.0);
        let x0 = rng.random_range(0.0..=(1.0 - w));
        let y0 = rng.random_range(0.0..=(1.0 - h));
        RelRect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        }
    }
}

/// Adds Gaussian noise with std `alpha · mean(|F_level|)` to every channel of
/// the cells inside `region` (whole map when `None`).
pub fn feature_jitter<R: Rng + ?Sized>(
    pyramid: &FeaturePyramid,
    alpha: f64,
    region: Option<RelRect>,
    rng: &mut R,
) -> Result<(FeaturePyramid, JitterMask)> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("jitter alpha must be >= 0, got {alpha}")));
    }
    let region = region.unwrap_or(RelRect::FULL);
    let mut levels = Vec::with_capacity(4);
    let mut mask = JitterMask::default();
    for lvl in pyramid.levels() {
        let (h, w) = lvl.hw();
        let c = lvl.shape()[0];
        let mut out = lvl.clone();
        let mut cells = vec![false; h * w];
        if alpha > 0.0 {
            let std = alpha * lvl.mean_abs();
            for y in 0..h {
                for x in 0..w {
                    if !region.contains_cell(y, x, h, w) {
                        continue;
                    }
                    cells[y * w + x] = true;
                    for ch in 0..c {
                        let n: f64 = rng.sample(StandardNormal);
                        out.data_mut()[(ch * h + y) * w + x] += std * n;
                    }
                }
            }
        }
        levels.push(out);
        mask.levels.push(cells);
    }
    Ok((FeaturePyramid { levels }, mask))
}

/// Per-sample jitter policy used during training.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterPolicy {
    pub probability: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            probability: 0.5,
            alpha_min: 0.5,
            alpha_max: 2.0,
            area_min: 0.1,
            area_max: 0.4,
        }
    }
}

impl JitterPolicy {
    /// Draws `(alpha, region)` for one sample; `None` leaves it clean.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(f64, RelRect)> {
        if rng.random::<f64>() >= self.probability {
            return None;
        }
        let alpha = rng.random_range(self.alpha_min..=self.alpha_max);
        let area = rng.random_range(self.area_min..=self.area_max);
        Some((alpha, RelRect::random(area, rng)))
    }
}

/// Four-stage CNN: `3×3 conv → ReLU → 2× avg-pool` per stage.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub modality: Modality,
    stages: Vec<(ParamId, ParamId)>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        modality: Modality,
        in_channels: usize,
        channels: [usize; 4],
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut cin = in_channels;
        for (i, &cout) in channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = Tensor::randn(&[cout, cin, 3, 3], std, rng);
            let b = Tensor::zeros(&[cout]);
            let (wn, bn) = (
                format!("enc.{}.s{}.w", modality.tag(), i + 1),
                format!("enc.{}.s{}.b", modality.tag(), i + 1),
            );
            let ids = if trainable {
                (store.add(wn, w), store.add(bn, b))
            } else {
                (store.add_frozen(wn, w), store.add_frozen(bn, b))
            };
            stages.push(ids);
            cin = cout;
        }
        Self { modality, stages }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Records the encoder on `g`, returning the four level outputs.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 {
            return Err(Error::Shape(format!(
                "encoder input must be [C, H, W] with H, W divisible by 16, got {s:?}"
            )));
        }
        let mut h = x;
        let mut out = Vec::with_capacity(4);
        for &(w, b) in &self.stages {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let c = g.conv2d(h, wv, Some(bv), 1)?;
            let r = g.relu(c)?;
            h = g.avg_pool2(r)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Evaluation-mode pyramid for a single input.
    pub fn encode(&self, store: &ParamStore, x: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let levels = self.forward(&mut g, store, v)?;
        FeaturePyramid::new(levels.into_iter().map(|l| g.value(l).clone()).collect())
    }
}

/// Input tensor for an encoder, centered to `[-0.5, 0.5]`: RGB as-is; depth
/// as 1 channel or replicated to 3 channels.
pub fn modality_input(sample: &MultimodalSample, modality: Modality, replicate_depth: bool) -> Tensor {
    let (h, w) = sample.hw();
    match modality {
        Modality::Rgb => sample.rgb.map(|v| v - INPUT_CENTER),
        Modality::Depth if replicate_depth => {
            let d = sample.depth.data();
            Tensor::from_fn(&[3, h, w], |i| d[i % (h * w)] - INPUT_CENTER)
        }
        Modality::Depth => sample.depth.map(|v| v - INPUT_CENTER),
    }
}

pub const INPUT_CENTER: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pyramid(seed: u64) -> FeaturePyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, Modality::Rgb, 3, [4, 4, 8, 8], false, &mut rng);
        let x = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        enc.encode(&store, &x).unwrap()
    }

    #[test]
    fn pyramid_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, Modality::Rgb, 3, [16, 32, 64, 128], false, &mut rng);
        let x = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
        let p = enc.encode(&store, &x).unwrap();
        let spatial: Vec<_> = p.levels().iter().map(|l| l.hw().0).collect();
        assert_eq!(spatial, vec![32, 16, 8, 4]);
        let chans: Vec<_> = p.levels().iter().map(|l| l.shape()[0]).collect();
        assert_eq!(chans, vec![16, 32, 64, 128]);
        assert_eq!(p, enc.encode(&store, &x).unwrap());
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, Modality::Depth, 1, [4, 4, 4, 4], false, &mut rng);
        let p = enc.encode(&store, &Tensor::zeros(&[1, 32, 32])).unwrap();
        assert!(p.levels().iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, Modality::Rgb, 3, [4, 4, 4, 4], false, &mut rng);
        assert!(matches!(
            enc.encode(&store, &Tensor::zeros(&[3, 40, 40])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn encoders_never_share_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let a = Encoder::new(&mut store, Modality::Rgb, 3, [4, 4, 4, 4], true, &mut rng);
        let b = Encoder::new(&mut store, Modality::Depth, 3, [4, 4, 4, 4], true, &mut rng);
        let ia = a.param_ids();
        assert!(b.param_ids().iter().all(|id| !ia.contains(id)));
    }

    #[test]
    fn zero_alpha_is_identity() {
        let p = pyramid(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, m) = feature_jitter(&p, 0.0, None, &mut rng).unwrap();
        assert_eq!(p, q);
        assert!(m.is_empty());
    }

    #[test]
    fn jitter_respects_region() {
        let p = pyramid(6);
        let left = RelRect {
            x0: 0.0,
            y0: 0.0,
            x1: 0.5,
            y1: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, m) = feature_jitter(&p, 1.5, Some(left), &mut rng).unwrap();
        for (i, (a, b)) in p.levels().iter().zip(q.levels()).enumerate() {
            let (h, w) = a.hw();
            for ch in 0..a.shape()[0] {
                for y in 0..h {
                    for x in w / 2..w {
                        assert_eq!(a.at3(ch, y, x).to_bits(), b.at3(ch, y, x).to_bits());
                    }
                }
            }
            assert!(m.levels[i].iter().enumerate().all(|(k, &f)| f == (k % w < w / 2)));
        }
    }

    #[test]
    fn jitter_energy_matches_alpha() {
        // E[(F' - F)^2] = (alpha * mean|F|)^2 for alpha = 1
        let p = pyramid(7);
        for lvl in 1..=4 {
            let target = p.level(lvl).mean_abs().powi(2);
            let mut acc = 0.0;
            for seed in 0..100 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (q, _) = feature_jitter(&p, 1.0, None, &mut rng).unwrap();
                let a = p.level(lvl).data();
                let b = q.level(lvl).data();
                acc += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
            }
            let est = acc / 100.0;
            assert!((est / target - 1.0).abs() < 0.10, "level {lvl}: {est} vs {target}");
        }
    }

    #[test]
    fn sample_validation() {
        let rgb = Tensor::zeros(&[3, 4, 4]);
        let depth = Tensor::zeros(&[1, 4, 4]);
        let mut mask = Tensor::zeros(&[1, 4, 4]);
        mask.data_mut()[3] = 1.0;
        assert!(MultimodalSample::new(rgb.clone(), depth.clone(), 0, Some(mask.clone()), true).is_ok());
        assert!(MultimodalSample::new(rgb.clone(), depth.clone(), 0, Some(mask), false).is_err());
        assert!(MultimodalSample::new(rgb, Tensor::zeros(&[1, 4, 5]), 0, None, false).is_err());
    }
}
