//! Per-step training on an audited view of the dataset, and per-object
//! evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ObjectData};
use crate::error::{Error, Result};
use crate::metrics::{aupro, auroc, pixel_auroc, AnomalyScoreMap, ObjectMetrics};
use crate::mfen::{feature_jitter, FeaturePyramid, JitterMask, JitterPolicy, MultimodalSample};
use crate::model::{Model, ModalityInputs};
use crate::tensor::{Graph, Sgd, Tensor};

/// Training-split view of a dataset that counts every sample handed out and
/// refuses objects outside the current step.
#[derive(Debug)]
pub struct AuditedData<'a> {
    dataset: &'a Dataset,
    allowed: Vec<bool>,
    reads: Vec<usize>,
}

impl<'a> AuditedData<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        let n = dataset.len();
        Self {
            dataset,
            allowed: vec![false; n],
            reads: vec![0; n],
        }
    }

    /// Opens a training phase for `objects` and zeroes the counters.
    pub fn begin_step(&mut self, objects: &[usize]) -> Result<()> {
        self.allowed.iter_mut().for_each(|a| *a = false);
        self.reads.iter_mut().for_each(|r| *r = 0);
        for &o in objects {
            *self
                .allowed
                .get_mut(o)
                .ok_or_else(|| Error::ingestion(format!("dataset has no object {o}"), Vec::new()))? = true;
        }
        Ok(())
    }

    pub fn train_len(&self, object: usize) -> usize {
        self.dataset.objects.get(object).map_or(0, |o| o.train.len())
    }

    pub fn train_sample(&mut self, object: usize, index: usize) -> Result<&'a MultimodalSample> {
        if !self.allowed.get(object).copied().unwrap_or(false) {
            return Err(Error::Access(format!("object {object} is not part of the current step")));
        }
        let s = self.dataset.objects[object]
            .train
            .get(index)
            .ok_or_else(|| Error::Access(format!("object {object} has no training sample {index}")))?;
        self.reads[object] += 1;
        Ok(s)
    }

    /// Samples read per object since the last [`begin_step`](Self::begin_step).
    pub fn reads(&self) -> &[usize] {
        &self.reads
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub jitter: JitterPolicy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean total loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub updates: usize,
}

fn jittered(
    clean: &[FeaturePyramid],
    policy: &JitterPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<FeaturePyramid>, Option<JitterMask>)> {
    let Some((alpha, region)) = policy.draw(rng) else {
        return Ok((clean.to_vec(), None));
    };
    let mut mask = None;
    let mut out = Vec::with_capacity(clean.len());
    for p in clean {
        let (j, m) = feature_jitter(p, alpha, Some(region), rng)?;
        mask.get_or_insert(m);
        out.push(j);
    }
    Ok((out, mask))
}

fn sample_loss(
    model: &Model,
    g: &mut Graph,
    sample: Option<&MultimodalSample>,
    cached: Option<&[FeaturePyramid]>,
    label: usize,
    policy: &JitterPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (inputs, mask) = match (cached, sample) {
        (Some(clean), _) => {
            let (abn, mask) = jittered(clean, policy, rng)?;
            let inputs: Vec<ModalityInputs> = abn
                .iter()
                .zip(clean)
                .map(|(a, c)| ModalityInputs::constants(g, a, c))
                .collect();
            (inputs, mask)
        }
        (None, Some(s)) => {
            let levels = model.encode_on_graph(g, s)?;
            let clean: Vec<FeaturePyramid> = levels
                .iter()
                .map(|lv| FeaturePyramid::new(lv.iter().map(|&v| g.value(v).clone()).collect()))
                .collect::<Result<_>>()?;
            let (abn, mask) = jittered(&clean, policy, rng)?;
            let mut inputs = Vec::with_capacity(levels.len());
            for ((lv, a), c) in levels.iter().zip(&abn).zip(&clean) {
                let mut abn_vars = *lv;
                for k in 0..4 {
                    let diff = Tensor::from_fn(c.levels()[k].shape(), |i| a.levels()[k].data()[i] - c.levels()[k].data()[i]);
                    let d = g.constant(diff);
                    abn_vars[k] = g.add(lv[k], d)?;
                }
                inputs.push(ModalityInputs { abn: abn_vars, clean: *lv });
            }
            (inputs, mask)
        }
        (None, None) => unreachable!("either a sample or cached features"),
    };
    let (total, _) = model.loss(g, &inputs, label, mask.as_ref())?;
    let value = g.value(total).item();
    if !value.is_finite() {
        return Err(crate::error::TensorError::NonFinite { op: "training loss" }.into());
    }
    g.backward(total)?;
    Ok(value)
}

/// Trains on the training samples of `objects` only. Each sample is labeled
/// with its object id. Gradients of a mini-batch are averaged before one
/// optimizer update.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    data: &mut AuditedData<'_>,
    objects: &[usize],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut items: Vec<(usize, usize)> = objects
        .iter()
        .flat_map(|&o| (0..data.train_len(o)).map(move |i| (o, i)))
        .collect();
    if items.is_empty() {
        return Ok(TrainStats::default());
    }
    if objects.iter().any(|&o| o >= model.config.num_classes) {
        return Err(Error::Config(format!(
            "object ids {objects:?} exceed the classifier's {} classes",
            model.config.num_classes
        )));
    }
    let frozen = !model.config.train_encoder;
    let mut cache = std::collections::HashMap::new();
    if frozen && opts.epochs > 0 {
        for &(o, i) in &items {
            let s = data.train_sample(o, i)?;
            cache.insert((o, i), model.encode(s)?);
        }
    }
    let mut stats = TrainStats::default();
    model.store.zero_grad();
    for _ in 0..opts.epochs {
        items.shuffle(rng);
        let mut epoch_total = 0.0;
        for batch in items.chunks(opts.batch_size) {
            let w = 1.0 / batch.len() as f64;
            for &(o, i) in batch {
                let mut g = Graph::training(rng.random());
                let sample = if frozen { None } else { Some(data.train_sample(o, i)?) };
                let cached = cache.get(&(o, i)).map(Vec::as_slice);
                epoch_total += sample_loss(model, &mut g, sample, cached, o, &opts.jitter, rng)?;
                model.store.accumulate(&g, w);
            }
            opt.step(&mut model.store);
            model.store.zero_grad();
            stats.updates += 1;
        }
        stats.epoch_loss.push(epoch_total / items.len() as f64);
    }
    Ok(stats)
}

/// Scores every test sample of `object`; returns metrics in percent and
/// the per-sample maps in test order.
pub fn evaluate_object(
    model: &Model,
    object: &ObjectData,
    sigma: f64,
    fpr_limit: f64,
) -> Result<(ObjectMetrics, Vec<AnomalyScoreMap>)> {
    let maps: Vec<AnomalyScoreMap> = object
        .test
        .par_iter()
        .map(|s| {
            let p = model.encode(s)?;
            model.score(&p, s.hw(), sigma)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = object.test.iter().map(|s| s.is_anomalous).collect();
    let scores: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
    let masks: Vec<Tensor> = object
        .test
        .iter()
        .map(|s| {
            let (h, w) = s.hw();
            s.anomaly_mask.clone().unwrap_or_else(|| Tensor::zeros(&[1, h, w]))
        })
        .collect();
    let pixel_maps: Vec<Tensor> = maps.iter().map(|m| m.map.clone()).collect();
    let metrics = ObjectMetrics {
        iauroc: 100.0 * auroc(&scores, &labels)?,
        pauroc: 100.0 * pixel_auroc(&pixel_maps, &masks)?,
        aupro: 100.0 * aupro(&pixel_maps, &masks, fpr_limit)?,
    };
    Ok((metrics, maps))
}

/// Deterministic per-(seed, step) generator.
pub(crate) fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step as u64 + 1);
    r
}
