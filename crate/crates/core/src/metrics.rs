//! Anomaly maps from feature residuals, ranking metrics (image/pixel AUROC,
//! AUPRO) and the per-object forgetting measure over an incremental run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SMOOTHING_SIGMA: f64 = 4.0;
pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyScoreMap {
    /// `[1, H, W]` nonnegative scores.
    pub map: Tensor,
    pub image_score: f64,
}

/// Per-location squared L2 distance across channels of two `[C, h, w]` maps.
pub fn residual_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "residual operands {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        let (ra, rb) = (&a.data()[ch * plane..][..plane], &b.data()[ch * plane..][..plane]);
        for ((o, x), y) in out.iter_mut().zip(ra).zip(rb) {
            *o += (x - y).powi(2);
        }
    }
    Ok(Tensor::new(&[1, h, w], out)?)
}

/// Bilinear resize of a `[h, w]` plane with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let axis = |n: usize, tn: usize| -> Vec<(usize, usize, f64)> {
        let scale = n as f64 / tn as f64;
        (0..tn)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, th), axis(w, tw));
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping; `sigma <= 0` is the identity.
pub fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Residual map upsampled to `target_hw` and smoothed; the image score is its max.
pub fn anomaly_map(f_org: &Tensor, f_fu_g: &Tensor, target_hw: (usize, usize), sigma: f64) -> Result<AnomalyScoreMap> {
    let res = residual_map(f_org, f_fu_g)?;
    let (h, w) = (res.shape()[1], res.shape()[2]);
    let (th, tw) = target_hw;
    let up = bilinear_resize(res.data(), h, w, th, tw);
    let smooth = gaussian_blur(&up, th, tw, sigma);
    let image_score = smooth.iter().copied().fold(0.0, f64::max);
    Ok(AnomalyScoreMap {
        map: Tensor::new(&[1, th, tw], smooth)?,
        image_score,
    })
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // rank-sum of positives with average ranks for tied groups
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

fn mask_bits(mask: &Tensor) -> Vec<bool> {
    mask.data().iter().map(|&v| v > 0.5).collect()
}

/// AUROC over the pooled pixels of all maps.
pub fn pixel_auroc(maps: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(mask_bits).collect();
    auroc(&scores, &labels)
}

fn check_pairs(maps: &[Tensor], masks: &[Tensor]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    for (m, k) in maps.iter().zip(masks) {
        if m.len() != k.len() || m.hw() != k.hw() {
            return Err(Error::Shape(format!("map {:?} vs mask {:?}", m.shape(), k.shape())));
        }
    }
    Ok(())
}

/// 8-connected component labels of a binary `[h, w]` mask; 0 is background.
pub fn connected_components(bits: &[bool], h: usize, w: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; h * w];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if bits[q] && labels[q] == 0 {
                        labels[q] = n;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, n)
}

/// Area under `(FPR, PRO)` from 0 to `limit`, by trapezoids, with the
/// final segment interpolated at `limit`.
pub(crate) fn integrate_to_limit(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_lim) / 2.0;
            break;
        }
    }
    area
}

/// Normalized area under the per-region-overlap curve up to `fpr_limit`.
pub fn aupro(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64) -> Result<f64> {
    check_pairs(maps, masks)?;
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr limit {fpr_limit} outside (0, 1]")));
    }
    // per pixel: score and either a region weight or negative marker
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        let (h, w) = k.hw();
        let bits = mask_bits(k);
        let (labels, n) = connected_components(&bits, h, w);
        let offset = region_sizes.len();
        region_sizes.extend(std::iter::repeat_n(0, n));
        for (i, &s) in m.data().iter().enumerate() {
            if labels[i] > 0 {
                let r = offset + labels[i] - 1;
                region_sizes[r] += 1;
                pixels.push((s, Some(r)));
            } else {
                pixels.push((s, None));
            }
        }
    }
    let n_regions = region_sizes.len();
    let n_neg = pixels.iter().filter(|p| p.1.is_none()).count();
    if n_regions == 0 {
        return Err(Error::UndefinedMetric("aupro needs at least one anomalous region".into()));
    }
    if n_neg == 0 {
        return Err(Error::UndefinedMetric("aupro needs normal pixels".into()));
    }
    if pixels.iter().any(|p| p.0.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut pro) = (0usize, 0.0);
    let mut i = 0;
    while i < pixels.len() {
        let t = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == t {
            match pixels[i].1 {
                Some(r) => pro += 1.0 / (region_sizes[r] as f64 * n_regions as f64),
                None => fp += 1,
            }
            i += 1;
        }
        curve.push((fp as f64 / n_neg as f64, pro));
    }
    Ok(integrate_to_limit(&curve, fpr_limit) / fpr_limit)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    IAuroc,
    PAuroc,
    Aupro,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::IAuroc, MetricKind::PAuroc, MetricKind::Aupro];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::IAuroc => "iauroc",
            MetricKind::PAuroc => "pauroc",
            MetricKind::Aupro => "aupro",
        }
    }
}

/// Per-object scores in percentage points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub iauroc: f64,
    pub pauroc: f64,
    pub aupro: f64,
}

impl ObjectMetrics {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::IAuroc => self.iauroc,
            MetricKind::PAuroc => self.pauroc,
            MetricKind::Aupro => self.aupro,
        }
    }
}

/// One row of a [`MetricsHistory`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub object: usize,
    #[serde(flatten)]
    pub metrics: ObjectMetrics,
}

/// `(step, object) → metrics` for every object seen up to each step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<HistoryRecord>", into = "Vec<HistoryRecord>")]
pub struct MetricsHistory {
    records: BTreeMap<(usize, usize), ObjectMetrics>,
}

impl From<Vec<HistoryRecord>> for MetricsHistory {
    fn from(rows: Vec<HistoryRecord>) -> Self {
        let mut h = Self::new();
        for r in rows {
            h.insert(r.step, r.object, r.metrics);
        }
        h
    }
}

impl From<MetricsHistory> for Vec<HistoryRecord> {
    fn from(h: MetricsHistory) -> Self {
        h.records()
            .map(|(step, object, &metrics)| HistoryRecord { step, object, metrics })
            .collect()
    }
}

impl MetricsHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: usize, object: usize, m: ObjectMetrics) {
        self.records.insert((step, object), m);
    }

    pub fn get(&self, step: usize, object: usize) -> Option<&ObjectMetrics> {
        self.records.get(&(step, object))
    }

    /// Records ordered by `(step, object)`.
    pub fn records(&self) -> impl Iterator<Item = (usize, usize, &ObjectMetrics)> {
        self.records.iter().map(|(&(s, o), m)| (s, o, m))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn steps(&self) -> Vec<usize> {
        self.records.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn objects_at(&self, step: usize) -> Vec<usize> {
        self.records.range((step, 0)..=(step, usize::MAX)).map(|(k, _)| k.1).collect()
    }

    /// Every object seen at a step must be present at all later steps.
    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        for pair in steps.windows(2) {
            let later: BTreeSet<usize> = self.objects_at(pair[1]).into_iter().collect();
            if let Some(o) = self.objects_at(pair[0]).into_iter().find(|o| !later.contains(o)) {
                return Err(Error::Precondition(format!(
                    "object {o} missing at step {} after being evaluated at step {}",
                    pair[1], pair[0]
                )));
            }
        }
        Ok(())
    }

    /// Mean of `kind` over objects evaluated at the final step.
    pub fn final_mean(&self, kind: MetricKind) -> Option<f64> {
        let last = *self.steps().last()?;
        let vals: Vec<f64> = self
            .objects_at(last)
            .into_iter()
            .map(|o| self.records[&(last, o)].get(kind))
            .collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Mean over objects first evaluated before the final step of the largest
/// drop `I_{s,o} − I_{N,o}` over earlier steps `s`.
pub fn forgetting_metric(history: &MetricsHistory, kind: MetricKind) -> Result<f64> {
    history.validate()?;
    let steps = history.steps();
    if steps.len() < 2 {
        return Err(Error::UndefinedMetric("forgetting needs at least two steps".into()));
    }
    let last = *steps.last().unwrap();
    let mut total = 0.0;
    let mut count = 0usize;
    for o in history.objects_at(last) {
        let drops: Vec<f64> = steps[..steps.len() - 1]
            .iter()
            .filter_map(|&s| history.get(s, o))
            .map(|m| m.get(kind) - history.records[&(last, o)].get(kind))
            .collect();
        if drops.is_empty() {
            continue;
        }
        total += drops.into_iter().fold(f64::NEG_INFINITY, f64::max);
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no object was evaluated before the final step".into()));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        let v = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auroc(&scores, &labels).unwrap();
            assert!((a - pair_count_auroc(&scores, &labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_auroc_examples() {
        let mask = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(pixel_auroc(&[mask.clone()], &[mask.clone()]).unwrap(), 1.0);
        let map = Tensor::new(&[1, 2, 2], vec![0.3, 0.2, 0.1, 0.9]).unwrap();
        let a = pixel_auroc(&[map.clone()], &[mask.clone()]).unwrap();
        let b = auroc(map.data(), &[false, true, false, true]).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<Tensor> = (0..20).map(|_| Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let masks: Vec<Tensor> = (0..20)
            .map(|_| Tensor::from_fn(&[1, 32, 32], |_| f64::from(rng.random_bool(0.3))))
            .collect();
        assert!((pixel_auroc(&maps, &masks).unwrap() - 0.5).abs() < 0.02);
    }

    /// Recomputes FPR and PRO from scratch at every distinct threshold.
    fn aupro_sweep_oracle(map: &[f64], mask: &[bool], h: usize, w: usize, limit: f64) -> f64 {
        let (labels, n) = connected_components(mask, h, w);
        let mut thresholds: Vec<f64> = map.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let neg = mask.iter().filter(|&&m| !m).count() as f64;
        let mut curve = vec![(0.0, 0.0)];
        for t in thresholds {
            let fp = (0..map.len()).filter(|&i| !mask[i] && map[i] >= t).count() as f64;
            let mut pro = 0.0;
            for r in 1..=n {
                let size = labels.iter().filter(|&&l| l == r).count() as f64;
                let hit = (0..map.len()).filter(|&i| labels[i] == r && map[i] >= t).count() as f64;
                pro += hit / size;
            }
            curve.push((fp / neg, pro / n as f64));
        }
        let mut area = 0.0;
        for k in 1..curve.len() {
            let (x0, y0) = curve[k - 1];
            let (x1, y1) = curve[k];
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

    #[test]
    fn aupro_examples() {
        let mut mask = Tensor::zeros(&[1, 8, 8]);
        for i in [9, 10, 17, 18, 45, 46, 54] {
            mask.data_mut()[i] = 1.0;
        }
        let a = aupro(&[mask.clone()], &[mask.clone()], 0.3).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        let inv = mask.map(|v| 1.0 - v);
        assert_eq!(aupro(&[inv], &[mask.clone()], 0.3).unwrap(), 0.0);
        assert!(matches!(
            aupro(&[mask.clone()], &[Tensor::zeros(&[1, 8, 8])], 0.3),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn aupro_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (h, w) = (16, 16);
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
            let got = aupro(
                &[Tensor::new(&[1, h, w], map.clone()).unwrap()],
                &[Tensor::from_fn(&[1, h, w], |i| f64::from(mask[i]))],
                0.3,
            )
            .unwrap();
            let want = aupro_sweep_oracle(&map, &mask, h, w, 0.3);
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn components_use_eight_connectivity() {
        let bits = [true, false, false, false, true, false, false, false, true];
        let (_, n) = connected_components(&bits, 3, 3);
        assert_eq!(n, 1);
        let bits = [true, false, true, false, false, false, true, false, true];
        assert_eq!(connected_components(&bits, 3, 3).1, 4);
    }

    #[test]
    fn anomaly_map_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let m = anomaly_map(&f, &f, (32, 32), 4.0).unwrap();
        assert_eq!(m.image_score, 0.0);
        assert!(m.map.data().iter().all(|&v| v == 0.0));

        let mut g = f.clone();
        g.data_mut()[16 + 2 * 4 + 1] += 3.0; // channel 1, cell (2, 1)
        let m = anomaly_map(&f, &g, (32, 32), 4.0).unwrap();
        let arg = m
            .map
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let (y, x) = (arg / 32, arg % 32);
        assert!((16..24).contains(&y) && (8..16).contains(&x), "{y} {x}");
        assert_eq!(m.image_score, m.map.max());

        let r1 = residual_map(&f, &g).unwrap();
        let doubled = Tensor::from_fn(&[3, 4, 4], |i| f.data()[i] + 2.0 * (g.data()[i] - f.data()[i]));
        let r2 = residual_map(&f, &doubled).unwrap();
        for (a, b) in r1.data().iter().zip(r2.data()) {
            assert!((4.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass_center() {
        let c = vec![2.5; 100];
        assert!(gaussian_blur(&c, 10, 10, 4.0).iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert_eq!(bilinear_resize(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
    }

    fn history(per_object: &[&[f64]]) -> MetricsHistory {
        let mut h = MetricsHistory::new();
        for (o, vals) in per_object.iter().enumerate() {
            let n = vals.len();
            let first = 3 - n;
            for (k, &v) in vals.iter().enumerate() {
                h.insert(
                    first + k,
                    o,
                    ObjectMetrics {
                        iauroc: v,
                        pauroc: v,
                        aupro: v,
                    },
                );
            }
        }
        h
    }

    #[test]
    fn forgetting_examples() {
        let fm = |h: &MetricsHistory| forgetting_metric(h, MetricKind::IAuroc).unwrap();
        assert_eq!(fm(&history(&[&[90.0, 85.0, 80.0]])), 10.0);
        assert_eq!(fm(&history(&[&[80.0, 80.0, 80.0]])), 0.0);
        assert_eq!(fm(&history(&[&[70.0, 75.0, 80.0]])), -5.0);
        assert_eq!(fm(&history(&[&[90.0, 85.0, 80.0], &[70.0, 75.0, 80.0]])), 2.5);
        // an object introduced only at the final step does not count
        assert_eq!(fm(&history(&[&[90.0, 85.0, 80.0], &[50.0]])), 10.0);
        let single = history(&[&[], &[], &[]]);
        assert!(forgetting_metric(&single, MetricKind::IAuroc).is_err());
        let mut one_step = MetricsHistory::new();
        one_step.insert(
            0,
            0,
            ObjectMetrics {
                iauroc: 1.0,
                pauroc: 1.0,
                aupro: 1.0,
            },
        );
        assert!(matches!(
            forgetting_metric(&one_step, MetricKind::IAuroc),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn history_validation_catches_dropped_objects() {
        let mut h = history(&[&[90.0, 85.0, 80.0]]);
        h.insert(
            1,
            7,
            ObjectMetrics {
                iauroc: 1.0,
                pauroc: 1.0,
                aupro: 1.0,
            },
        );
        assert!(matches!(h.validate(), Err(Error::Precondition(_))));
    }
}
