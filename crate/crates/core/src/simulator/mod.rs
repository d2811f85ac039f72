//! Crowded-scene simulator and the experiments built on it.
//!
//! Trained networks are replaced by an explicit query noise model (see
//! [`queries`]), so every experiment reproduces qualitative trends only. Each
//! experiment is a pure function of its [`SimConfig`] and seed list: seeds are
//! evaluated in parallel and results are merged in seed order.

pub mod queries;
pub mod report;
pub mod rng;
pub mod scene;
pub mod toy;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::assignment::CostWeights;
use crate::error::{Error, Result};
use crate::losses::gradient_ratio;
use crate::metrics::{evaluate, recall_at_k, Detection, GroundTruths, DEFAULT_RECALL_KS};
use crate::selection::{distinct_query_selection, topk_per_level, QuerySet, DEFAULT_TOPK, DQS_THRESH_FCN};

pub use queries::{
    generate_dense_queries, generate_sampled_queries, generate_sparse_queries, PyramidConfig, QueryNoiseModel,
    SimQueries,
};
pub use report::{summarize, Cell, ExperimentReport, Summary};
pub use scene::{generate_scene, generate_scene_at, mean_neighbor_iou, Scene, SceneConfig};
pub use toy::{train_toy, DqsConfig, ToyRun, ToyScene, TrainingConfig};

/// A DQS threshold in a sweep, or DQS switched off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepThreshold {
    Iou(f64),
    Disabled,
}

impl SweepThreshold {
    pub fn label(&self) -> String {
        match self {
            Self::Iou(t) => report::format_sig9(*t),
            Self::Disabled => "none".into(),
        }
    }
}

impl Serialize for SweepThreshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Iou(t) => s.serialize_f64(*t),
            Self::Disabled => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for SweepThreshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => Ok(Self::Iou(t)),
            Raw::Text(s) if s == "none" => Ok(Self::Disabled),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"none\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySweepConfig {
    pub counts: Vec<usize>,
    /// Duplicate correlation used for the sweep, overriding the noise model's.
    pub rho: f64,
    pub topk: Option<usize>,
}

impl Default for QuerySweepConfig {
    fn default() -> Self {
        Self {
            counts: vec![30, 100, 300, 1000, 2000, 4000, 8000],
            rho: 1.0,
            topk: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSweepConfig {
    pub thresholds: Vec<SweepThreshold>,
}

impl Default for ThresholdSweepConfig {
    fn default() -> Self {
        Self {
            thresholds: [0.5, 0.6, 0.7, 0.8, 0.9]
                .into_iter()
                .map(SweepThreshold::Iou)
                .chain([SweepThreshold::Disabled])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallConfig {
    pub sparse_queries: usize,
    pub ks: Vec<usize>,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            sparse_queries: 300,
            ks: DEFAULT_RECALL_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientConfig {
    pub p_grid: Vec<f64>,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            p_grid: (1..100).map(|i| i as f64 / 100.0).collect(),
        }
    }
}

/// Everything an experiment needs besides its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub scene: SceneConfig,
    pub scenes_per_seed: usize,
    pub pyramid: PyramidConfig,
    pub noise: QueryNoiseModel,
    pub cost: CostWeights,
    pub dqs: DqsConfig,
    /// Which of with-DQS (`true`) and without-DQS (`false`) the query sweep and
    /// toy training run, in this order.
    pub dqs_modes: Vec<bool>,
    pub training: TrainingConfig,
    pub query_sweep: QuerySweepConfig,
    pub threshold_sweep: ThresholdSweepConfig,
    pub recall: RecallConfig,
    pub gradient: GradientConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::crowd_preset()
    }
}

impl SimConfig {
    /// Crowded scenes (23 objects, mean neighbour IoU 0.3) with fully correlated
    /// duplicates.
    pub fn crowd_preset() -> Self {
        Self {
            scene: SceneConfig::crowd_preset(),
            scenes_per_seed: 2,
            pyramid: PyramidConfig::default(),
            noise: QueryNoiseModel::default(),
            cost: CostWeights::default(),
            dqs: DqsConfig {
                thresh: DQS_THRESH_FCN,
                topk: Some(DEFAULT_TOPK),
            },
            dqs_modes: vec![true, false],
            training: TrainingConfig::default(),
            query_sweep: QuerySweepConfig::default(),
            threshold_sweep: ThresholdSweepConfig::default(),
            recall: RecallConfig::default(),
            gradient: GradientConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.cost.validate()?;
        self.dqs.validate()?;
        self.training.validate()?;
        if self.dqs_modes.is_empty() {
            return Err(Error::Config("dqs_modes must not be empty".into()));
        }
        if self.scenes_per_seed == 0 {
            return Err(Error::Config("scenes_per_seed must be at least 1".into()));
        }
        crate::pyramid::PyramidLayout::for_image(self.scene.image_w, self.scene.image_h, &self.pyramid.strides)?;
        if !(0.0..=1.0).contains(&self.query_sweep.rho) {
            return Err(Error::Config(format!(
                "query_sweep: rho {} outside [0, 1]",
                self.query_sweep.rho
            )));
        }
        if self.query_sweep.counts.contains(&0) {
            return Err(Error::Config("query_sweep: counts must be positive".into()));
        }
        for t in &self.threshold_sweep.thresholds {
            if let SweepThreshold::Iou(v) = t {
                if !(*v > 0.0 && *v <= 1.0) {
                    return Err(Error::Config(format!("threshold_sweep: threshold {v} outside (0, 1]")));
                }
            }
        }
        if self.recall.sparse_queries == 0 || self.recall.ks.contains(&0) {
            return Err(Error::Config("recall: sparse_queries and ks must be positive".into()));
        }
        if self.gradient.p_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("gradient: grid points must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn scenes(&self, seed: u64) -> Result<Vec<Scene>> {
        let cfg = SceneConfig {
            seed,
            ..self.scene.clone()
        };
        (0..self.scenes_per_seed as u64)
            .map(|i| generate_scene_at(&cfg, seed, i))
            .collect()
    }
}

fn non_empty(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::Config("at least one seed is required".into()))
    } else {
        Ok(())
    }
}

/// Where the toy head's queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// One per feature point of the configured pyramid.
    Dense,
    /// A fixed number of scene-independent anchor positions.
    Sampled(usize),
}

/// Simulated scenes of one seed, prepared for toy training.
pub fn toy_scenes(cfg: &SimConfig, seed: u64, source: QuerySource, noise: &QueryNoiseModel) -> Result<Vec<ToyScene>> {
    cfg.scenes(seed)?
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let i = i as u64;
            let q = match source {
                QuerySource::Dense => generate_dense_queries(scene, &cfg.pyramid, noise, i)?,
                QuerySource::Sampled(n) => generate_sampled_queries(scene, &cfg.pyramid, n, noise, i)?,
            };
            ToyScene::new(scene, &q, &cfg.cost, i)
        })
        .collect()
}

/// Trains one toy head; errors when the gradient check fails.
pub fn toy_run(
    cfg: &SimConfig,
    seed: u64,
    source: QuerySource,
    noise: &QueryNoiseModel,
    dqs: Option<&DqsConfig>,
) -> Result<ToyRun> {
    let mut scenes = toy_scenes(cfg, seed, source, noise)?;
    let run = train_toy(&mut scenes, &cfg.training, dqs, &cfg.cost, seed)?;
    if run.grad_check_max_rel_err > toy::GRAD_CHECK_TOL {
        return Err(Error::GradientCheck {
            seed,
            rel_err: run.grad_check_max_rel_err,
        });
    }
    Ok(run)
}

/// Analytic and finite-difference gradient ratio over a grid of probabilities.
pub fn run_gradient_demo(p_grid: &[f64]) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("gradient-demo", &["p", "alpha", "fd_alpha", "regime"], &[]);
    for &p in p_grid {
        let r = gradient_ratio(p)?;
        report.push(vec![
            r.p.into(),
            r.alpha.into(),
            r.fd_alpha.into(),
            r.regime.to_string().into(),
        ]);
    }
    Ok(report)
}

/// A finished toy run tagged with whether DQS was applied and its seed.
pub type TaggedRun = (bool, u64, ToyRun);

/// Toy training with and without DQS on dense queries, one row per mode and seed.
pub fn run_toy_training(cfg: &SimConfig, seeds: &[u64]) -> Result<(ExperimentReport, Vec<TaggedRun>)> {
    cfg.validate()?;
    non_empty(seeds)?;
    let jobs: Vec<(bool, u64)> = cfg
        .dqs_modes
        .iter()
        .copied()
        .flat_map(|d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(with_dqs, seed)| {
            toy_run(cfg, seed, QuerySource::Dense, &cfg.noise, with_dqs.then_some(&cfg.dqs))
                .map(|r| (with_dqs, seed, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ExperimentReport::new(
        "train-toy",
        &[
            "dqs",
            "seed",
            "steps_to_target",
            "final_loss",
            "final_recall",
            "final_precision",
            "ap50",
            "grad_check_max_rel_err",
        ],
        seeds,
    );
    for (with_dqs, seed, run) in &runs {
        let fin = run.final_point();
        report.push(vec![
            (*with_dqs).into(),
            (*seed).into(),
            run.steps_to_target.into(),
            run.final_loss().into(),
            fin.recall.into(),
            fin.precision.into(),
            run.ap50.into(),
            run.grad_check_max_rel_err.into(),
        ]);
    }
    Ok((report, runs))
}

/// Per-step loss and operating point of every toy run.
pub fn toy_curves(runs: &[TaggedRun]) -> ExperimentReport {
    let seeds: Vec<u64> = runs.iter().map(|r| r.1).collect();
    let mut report = ExperimentReport::new(
        "train-toy-curve",
        &["dqs", "seed", "step", "loss", "recall", "precision"],
        &seeds,
    );
    for (with_dqs, seed, run) in runs {
        for (step, point) in run.curve.iter().enumerate() {
            report.push(vec![
                (*with_dqs).into(),
                (*seed).into(),
                step.into(),
                run.loss.get(step).copied().into(),
                point.recall.into(),
                point.precision.into(),
            ]);
        }
    }
    report
}

/// Final toy-head recall against the number of sampled queries, with and without DQS.
pub fn run_query_sweep(cfg: &SimConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    non_empty(seeds)?;
    if cfg.query_sweep.counts.is_empty() {
        return Err(Error::Config("query_sweep: no counts given".into()));
    }
    let noise = QueryNoiseModel {
        rho: cfg.query_sweep.rho,
        ..cfg.noise.clone()
    };
    let dqs = DqsConfig {
        thresh: cfg.dqs.thresh,
        topk: cfg.query_sweep.topk,
    };
    let mut jobs = Vec::new();
    for &count in &cfg.query_sweep.counts {
        for &with_dqs in &cfg.dqs_modes {
            for &seed in seeds {
                jobs.push((count, with_dqs, seed));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(count, with_dqs, seed)| {
            toy_run(cfg, seed, QuerySource::Sampled(count), &noise, with_dqs.then_some(&dqs)).map(|r| r.final_point())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ExperimentReport::new(
        "query-sweep",
        &[
            "query_count",
            "dqs",
            "recall_mean",
            "recall_sd",
            "recall_median",
            "precision_mean",
            "n_seeds",
        ],
        seeds,
    );
    for (chunk, job) in results.chunks(seeds.len()).zip(jobs.chunks(seeds.len())) {
        let (count, with_dqs, _) = job[0];
        let recall = summarize(&chunk.iter().map(|p| p.recall).collect::<Vec<_>>());
        let precision = summarize(&chunk.iter().map(|p| p.precision).collect::<Vec<_>>());
        report.push(vec![
            count.into(),
            with_dqs.into(),
            recall.mean.into(),
            recall.sd.into(),
            recall.median.into(),
            precision.mean.into(),
            seeds.len().into(),
        ]);
    }
    Ok(report)
}

/// Toy-pipeline AP for each DQS threshold (`none` disables DQS).
pub fn run_threshold_sweep(cfg: &SimConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    non_empty(seeds)?;
    let thresholds = &cfg.threshold_sweep.thresholds;
    if thresholds.is_empty() {
        return Err(Error::Config("threshold_sweep: no thresholds given".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..thresholds.len())
        .flat_map(|t| seeds.iter().map(move |&s| (t, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(t, seed)| {
            let dqs = match thresholds[t] {
                SweepThreshold::Iou(thresh) => Some(DqsConfig { thresh, ..cfg.dqs }),
                SweepThreshold::Disabled => None,
            };
            toy_run(cfg, seed, QuerySource::Dense, &cfg.noise, dqs.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ExperimentReport::new(
        "threshold-sweep",
        &[
            "threshold",
            "ap50_mean",
            "ap50_sd",
            "map_mean",
            "recall_mean",
            "n_seeds",
        ],
        seeds,
    );
    for (t, chunk) in thresholds.iter().zip(results.chunks(seeds.len())) {
        let ap50 = summarize(&chunk.iter().map(|r| r.ap50).collect::<Vec<_>>());
        let map = summarize(&chunk.iter().map(|r| r.map).collect::<Vec<_>>());
        let recall = summarize(&chunk.iter().map(|r| r.final_point().recall).collect::<Vec<_>>());
        report.push(vec![
            t.label().into(),
            ap50.mean.into(),
            ap50.sd.into(),
            map.mean.into(),
            recall.mean.into(),
            seeds.len().into(),
        ]);
    }
    Ok(report)
}

/// Detection sources compared by the recall study and the simulated evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorKind {
    Sparse,
    Dense,
    DenseDqs,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [DetectorKind::Sparse, DetectorKind::Dense, DetectorKind::DenseDqs];

    pub fn label(&self, cfg: &SimConfig) -> String {
        match self {
            Self::Sparse => format!("sparse-{}", cfg.recall.sparse_queries),
            Self::Dense => "dense".into(),
            Self::DenseDqs => format!("dense+dqs-{}", report::format_sig9(cfg.dqs.thresh)),
        }
    }
}

/// Untrained detections of one simulated scene: queries scored by the noise model.
pub fn simulated_detections(
    cfg: &SimConfig,
    scene: &Scene,
    index: u64,
    image_id: u64,
    kind: DetectorKind,
) -> Result<Vec<Detection>> {
    let set: QuerySet = match kind {
        DetectorKind::Sparse => {
            generate_sparse_queries(scene, &cfg.scene, cfg.recall.sparse_queries, &cfg.noise, index)?.set
        }
        DetectorKind::Dense => generate_dense_queries(scene, &cfg.pyramid, &cfg.noise, index)?.set,
        DetectorKind::DenseDqs => {
            let dense = generate_dense_queries(scene, &cfg.pyramid, &cfg.noise, index)?.set;
            let pool = match cfg.dqs.topk {
                Some(k) => topk_per_level(&dense, k),
                None => dense,
            };
            distinct_query_selection(&pool, cfg.dqs.thresh)
        }
    };
    Ok(set.iter().map(|q| Detection::new(image_id, q.bbox, q.score)).collect())
}

/// AR@k of sparse, dense and dense+DQS queries, mean and sd over seeds.
pub fn run_recall_study(cfg: &SimConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    non_empty(seeds)?;
    let ks = &cfg.recall.ks;
    // per seed: per kind: per k
    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<Vec<f64>>> {
            let scenes = cfg.scenes(seed)?;
            let gts: GroundTruths = scenes
                .iter()
                .enumerate()
                .map(|(i, s)| (i as u64, s.boxes.clone()))
                .collect();
            DetectorKind::ALL
                .iter()
                .map(|&kind| {
                    let mut dets = Vec::new();
                    for (i, scene) in scenes.iter().enumerate() {
                        dets.extend(simulated_detections(cfg, scene, i as u64, i as u64, kind)?);
                    }
                    Ok(ks.iter().map(|&k| recall_at_k(&dets, &gts, k, 0.5)).collect())
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut columns = vec!["method".to_string()];
    for k in ks {
        columns.push(format!("ar{k}_mean"));
        columns.push(format!("ar{k}_sd"));
    }
    columns.push("n_seeds".into());
    let column_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut report = ExperimentReport::new("recall", &column_refs, seeds);
    for (ki, kind) in DetectorKind::ALL.iter().enumerate() {
        let mut row: Vec<Cell> = vec![kind.label(cfg).into()];
        for kk in 0..ks.len() {
            let s = summarize(&per_seed.iter().map(|v| v[ki][kk]).collect::<Vec<_>>());
            row.push(s.mean.into());
            row.push(s.sd.into());
        }
        row.push(seeds.len().into());
        report.push(row);
    }
    Ok(report)
}

/// Full metrics of untrained detections pooled over every seed's scenes.
pub fn run_simulated_eval(cfg: &SimConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    cfg.validate()?;
    non_empty(seeds)?;
    let per_seed = seeds
        .par_iter()
        .enumerate()
        .map(|(si, &seed)| -> Result<(GroundTruths, Vec<Vec<Detection>>)> {
            let scenes = cfg.scenes(seed)?;
            let base = (si * cfg.scenes_per_seed) as u64;
            let gts = scenes
                .iter()
                .enumerate()
                .map(|(i, s)| (base + i as u64, s.boxes.clone()))
                .collect();
            let dets = DetectorKind::ALL
                .iter()
                .map(|&kind| {
                    let mut all = Vec::new();
                    for (i, scene) in scenes.iter().enumerate() {
                        all.extend(simulated_detections(cfg, scene, i as u64, base + i as u64, kind)?);
                    }
                    Ok(all)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((gts, dets))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gts = GroundTruths::new();
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); DetectorKind::ALL.len()];
    for (g, d) in per_seed {
        gts.extend(g);
        for (all, part) in dets.iter_mut().zip(d) {
            all.extend(part);
        }
    }
    let mut report = eval_report_header(&cfg.recall.ks, seeds);
    for (kind, d) in DetectorKind::ALL.iter().zip(&dets) {
        push_eval_row(&mut report, &kind.label(cfg), d, &gts, &cfg.recall.ks)?;
    }
    Ok(report)
}

/// Columns of an evaluation report for the given AR cut-offs.
pub fn eval_report_header(ks: &[usize], seeds: &[u64]) -> ExperimentReport {
    let mut columns = vec!["source".to_string(), "ap50".into(), "map".into()];
    columns.extend(ks.iter().map(|k| format!("ar{k}")));
    columns.extend(["mmr", "tp", "fp", "fn"].map(String::from));
    let refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    ExperimentReport::new("eval", &refs, seeds)
}

pub fn push_eval_row(
    report: &mut ExperimentReport,
    source: &str,
    dets: &[Detection],
    gts: &GroundTruths,
    ks: &[usize],
) -> Result<()> {
    let r = evaluate(dets, gts, ks)?;
    let mut row: Vec<Cell> = vec![source.into(), r.ap50.into(), r.map.into()];
    row.extend(ks.iter().map(|k| Cell::from(r.recall_at[k])));
    row.extend([
        r.mmr.into(),
        r.counts.tp.into(),
        r.counts.fp.into(),
        r.counts.fn_.into(),
    ]);
    report.push(row);
    Ok(())
}

/// Report rows keyed by a column value; handy for consumers checking trends.
pub fn rows_by<'a>(report: &'a ExperimentReport, key: &str) -> BTreeMap<String, &'a [Cell]> {
    let Some(k) = report.column(key) else {
        return BTreeMap::new();
    };
    report
        .rows
        .iter()
        .map(|row| {
            let name = match &row[k] {
                Cell::Text(s) => s.clone(),
                Cell::Float(v) => report::format_sig9(*v),
                Cell::Int(v) => v.to_string(),
                Cell::Empty => String::new(),
            };
            (name, row.as_slice())
        })
        .collect()
}
