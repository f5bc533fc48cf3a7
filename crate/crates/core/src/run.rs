//! Full incremental protocol: train each step on its objects only, then
//! evaluate every object seen so far.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_checkpoint;
use crate::config::{ExperimentConfig, InjectionSpec};
use crate::data::{generate_synthetic_dataset, inject_redundant, inject_spurious, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{forgetting_metric, MetricKind, MetricsHistory, ObjectMetrics};
use crate::model::{Model, ModelConfig};
use crate::report::metrics_csv;
use crate::schedule::{build_schedule, IncrementalSchedule};
use crate::tensor::Tensor;
use crate::train::{evaluate_object, step_rng, train_step, AuditedData, TrainOptions, TrainStats};

/// Name of the environment variable that caps worker threads.
pub const THREADS_ENV: &str = "IUMAD_THREADS";

/// Training-phase read counts of one step, indexed by object id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub step: usize,
    pub objects: Vec<usize>,
    pub reads: Vec<usize>,
}

impl StepAudit {
    /// Reads of objects that are not part of this step.
    pub fn foreign_reads(&self) -> usize {
        self.reads
            .iter()
            .enumerate()
            .filter(|(o, _)| !self.objects.contains(o))
            .map(|(_, &r)| r)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub object: usize,
    pub index: usize,
    pub rgb: Tensor,
    pub map: Tensor,
    pub mask: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerMetric<T> {
    pub iauroc: T,
    pub pauroc: T,
    pub aupro: T,
}

impl<T: Copy> PerMetric<T> {
    pub fn from_fn(mut f: impl FnMut(MetricKind) -> T) -> Self {
        Self {
            iauroc: f(MetricKind::IAuroc),
            pauroc: f(MetricKind::PAuroc),
            aupro: f(MetricKind::Aupro),
        }
    }

    pub fn get(&self, kind: MetricKind) -> T {
        match kind {
            MetricKind::IAuroc => self.iauroc,
            MetricKind::PAuroc => self.pauroc,
            MetricKind::Aupro => self.aupro,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub history: MetricsHistory,
    /// `None` when forgetting is undefined (a single step).
    pub forgetting: PerMetric<Option<f64>>,
    pub final_mean: PerMetric<f64>,
    pub audit: Vec<StepAudit>,
    pub train: Vec<TrainStats>,
    #[serde(skip)]
    pub heatmaps: Vec<Heatmap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub object_names: Vec<String>,
    pub schedule: IncrementalSchedule,
    pub seeds: Vec<SeedRun>,
    pub final_mean: PerMetric<MeanStd>,
    pub forgetting: PerMetric<Option<MeanStd>>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// SHA-256 over every seed's metrics CSV; independent of wall-clock.
    pub fn metrics_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.seeds {
            h.update(s.seed.to_le_bytes());
            h.update(metrics_csv(&s.history).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Rayon pool sized by `IUMAD_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Applies the injection spec to every train and test sample. Spurious
/// content for object `o` comes from the training samples of object `o + 1`
/// (cyclically).
pub fn apply_injection(ds: &Dataset, spec: &InjectionSpec) -> Result<Dataset> {
    if spec.is_identity() {
        return Ok(ds.clone());
    }
    let n = ds.len();
    let mut out = ds.clone();
    for (o, obj) in out.objects.iter_mut().enumerate() {
        let sources = &ds.objects[(o + 1) % n].train;
        for (split, samples) in [&mut obj.train, &mut obj.test].into_iter().enumerate() {
            for (i, s) in samples.iter_mut().enumerate() {
                if spec.spurious_strength > 0.0 && n > 1 {
                    *s = inject_spurious(s, &sources[i % sources.len()], spec.spurious_strength)?;
                }
                if spec.noise_intensity > 0.0 {
                    let seed = mix(spec.seed, &[o as u64, split as u64, i as u64]);
                    *s = inject_redundant(s, spec.noise_intensity, seed)?;
                }
            }
        }
    }
    Ok(out)
}

/// Loads or generates the dataset named by `cfg`, without injection.
pub fn base_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset_dir() {
        Some(dir) => load_dataset(&dir),
        None => generate_synthetic_dataset(&cfg.synth),
    }
}

/// [`base_dataset`] with the configured injection applied.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    apply_injection(&base_dataset(cfg)?, &cfg.injection)
}

/// Model settings with one class per dataset object.
pub fn model_config_for(cfg: &ExperimentConfig, n_objects: usize) -> ModelConfig {
    ModelConfig {
        num_classes: n_objects,
        ..cfg.model.clone()
    }
}

#[derive(Clone, Debug, Default)]
pub struct SeedOptions<'a> {
    pub evaluate: bool,
    pub heatmaps_per_object: usize,
    /// Writes `step_<k>.ckpt` after each step's training.
    pub checkpoint_dir: Option<&'a Path>,
}

pub fn run_seed(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    schedule: &IncrementalSchedule,
    seed: u64,
    opts: &SeedOptions<'_>,
) -> Result<SeedRun> {
    let mut model = Model::new(model_config_for(cfg, ds.len()), seed)?;
    let mut opt = cfg.optimizer();
    let mut data = AuditedData::new(ds);
    let mut history = MetricsHistory::new();
    let mut audit = Vec::with_capacity(schedule.steps.len());
    let mut train = Vec::with_capacity(schedule.steps.len());
    let mut heatmaps = Vec::new();
    let last = schedule.steps.len() - 1;
    for (step, objects) in schedule.steps.iter().enumerate() {
        if cfg.reset_optimizer {
            opt.reset();
        }
        data.begin_step(objects)?;
        let topts = TrainOptions {
            epochs: schedule.epochs(step),
            batch_size: cfg.batch_size,
            jitter: cfg.jitter,
        };
        let mut rng = step_rng(seed, step);
        train.push(train_step(&mut model, &mut opt, &mut data, objects, &topts, &mut rng)?);
        audit.push(StepAudit {
            step,
            objects: objects.clone(),
            reads: data.reads().to_vec(),
        });
        if let Some(dir) = opts.checkpoint_dir {
            save_checkpoint(&model.store, &dir.join(format!("step_{step}.ckpt")), &cfg.hash())?;
        }
        if !opts.evaluate {
            continue;
        }
        for o in schedule.seen(step) {
            let (m, maps) = evaluate_object(&model, &ds.objects[o], cfg.smoothing_sigma, cfg.fpr_limit)?;
            history.insert(step, o, m);
            if step == last {
                let picks = ds.objects[o]
                    .test
                    .iter()
                    .zip(maps)
                    .enumerate()
                    .filter(|(_, (s, _))| s.is_anomalous)
                    .take(opts.heatmaps_per_object);
                for (index, (s, m)) in picks {
                    heatmaps.push(Heatmap {
                        object: o,
                        index,
                        rgb: s.rgb.clone(),
                        map: m.map,
                        mask: s.anomaly_mask.clone(),
                    });
                }
            }
        }
    }
    let forgetting = PerMetric::from_fn(|k| forgetting_metric(&history, k).ok());
    let final_mean = PerMetric::from_fn(|k| history.final_mean(k).unwrap_or(f64::NAN));
    Ok(SeedRun {
        seed,
        history,
        forgetting,
        final_mean,
        audit,
        train,
        heatmaps,
    })
}

pub fn summarize(seeds: &[SeedRun]) -> (PerMetric<MeanStd>, PerMetric<Option<MeanStd>>) {
    let finals = PerMetric::from_fn(|k| MeanStd::of(&seeds.iter().map(|s| s.final_mean.get(k)).collect::<Vec<_>>()));
    let fm = PerMetric::from_fn(|k| {
        let v: Option<Vec<f64>> = seeds.iter().map(|s| s.forgetting.get(k)).collect();
        v.map(|v| MeanStd::of(&v))
    });
    (finals, fm)
}

/// Runs every configured seed on `ds` (in parallel) and aggregates.
pub fn run_incremental_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let schedule = build_schedule(ds.len(), &cfg.setting, cfg.base_epochs, cfg.incr_epochs)?;
    let pool = thread_pool()?;
    let seeds: Vec<SeedRun> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .enumerate()
            .map(|(k, &seed)| {
                let opts = SeedOptions {
                    evaluate: true,
                    heatmaps_per_object: if k == 0 { cfg.heatmaps_per_object } else { 0 },
                    checkpoint_dir: None,
                };
                run_seed(cfg, ds, &schedule, seed, &opts)
            })
            .collect::<Result<_>>()
    })?;
    let (final_mean, forgetting) = summarize(&seeds);
    Ok(RunReport {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        object_names: ds.names().into_iter().map(String::from).collect(),
        schedule,
        seeds,
        final_mean,
        forgetting,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn run_incremental(cfg: &ExperimentConfig) -> Result<RunReport> {
    let ds = prepare_dataset(cfg)?;
    run_incremental_on(cfg, &ds)
}

/// Mean of each object's metrics at `step` (for charts).
pub fn step_means(history: &MetricsHistory) -> BTreeMap<usize, ObjectMetrics> {
    history
        .steps()
        .into_iter()
        .map(|s| {
            let objs = history.objects_at(s);
            let n = objs.len() as f64;
            let sum = |k: MetricKind| objs.iter().map(|&o| history.get(s, o).unwrap().get(k)).sum::<f64>() / n;
            (
                s,
                ObjectMetrics {
                    iauroc: sum(MetricKind::IAuroc),
                    pauroc: sum(MetricKind::PAuroc),
                    aupro: sum(MetricKind::Aupro),
                },
            )
        })
        .collect()
}
