//! A trainable classification-only head over frozen simulated queries.
//!
//! Each query carries a small feature vector; the head scores it with
//! `sigmoid(w . x)`. One training step re-scores every query, optionally runs
//! distinct query selection, assigns one positive per ground truth by bipartite
//! matching on the current scores, and takes a gradient step on the mean binary
//! cross-entropy of the selected queries.

use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::queries::SimQueries;
use super::rng::{substream, Purpose};
use super::scene::Scene;
use crate::assignment::{solve_rows, CostWeights};
use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::metrics::{average_precision, greedy_match, mean_average_precision, Detection, GroundTruths};
use crate::selection::{distinct_indices, rank_order, topk_per_level, Query, QuerySet};

pub const N_FEATURES: usize = 4;
/// Relative finite-difference tolerance for the gradient check.
pub const GRAD_CHECK_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub lr: f64,
    /// Detections need at least this score to count towards recall/precision.
    pub score_thresh: f64,
    pub target_recall: f64,
    /// Detections kept per image at evaluation.
    pub max_dets: usize,
    /// Number of steps at which the analytic gradient is checked.
    pub grad_checks: usize,
    /// Initial weights for `[bias, quality, distance, scale mismatch]`.
    pub init_weights: [f64; N_FEATURES],
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 4.0,
            score_thresh: 0.4,
            target_recall: 0.9,
            max_dets: 100,
            grad_checks: 10,
            init_weights: [-3.0, 2.0, 0.0, 0.0],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("training: lr must be positive, got {}", self.lr)));
        }
        if self.max_dets == 0 {
            return Err(Error::Config("training: max_dets must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) || !(0.0..=1.0).contains(&self.target_recall) {
            return Err(Error::Config(
                "training: score_thresh and target_recall must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Distinct query selection as used by the toy pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqsConfig {
    pub thresh: f64,
    /// Per-level pre-selection before NMS; `None` skips it.
    pub topk: Option<usize>,
}

impl DqsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.thresh > 0.0 && self.thresh <= 1.0) {
            return Err(Error::Config(format!("dqs: threshold {} outside (0, 1]", self.thresh)));
        }
        if self.topk == Some(0) {
            return Err(Error::Config("dqs: topk must be at least 1".into()));
        }
        Ok(())
    }
}

/// One simulated image prepared for training.
#[derive(Debug, Clone)]
pub struct ToyScene {
    gts: Vec<BBox>,
    queries: Vec<Query>,
    features: Vec<[f64; N_FEATURES]>,
    /// `w.l1 * L1 / diag - w.giou * giou`, frozen because boxes are.
    box_cost: Array2<f64>,
    image_id: u64,
}

impl ToyScene {
    pub fn new(scene: &Scene, queries: &SimQueries, cost: &CostWeights, image_id: u64) -> Result<Self> {
        cost.validate()?;
        let qs = queries.set.queries();
        let diag = scene.image_diag();
        let mut box_cost = Array2::zeros((scene.boxes.len(), qs.len()));
        for (g, gt) in scene.boxes.iter().enumerate() {
            for (j, q) in qs.iter().enumerate() {
                // Degenerate predictions get the worst GIoU.
                let gi = giou(&q.bbox, gt).unwrap_or(-1.0);
                box_cost[[g, j]] = cost.l1 * q.bbox.l1_distance(gt) / diag - cost.giou * gi;
            }
        }
        let features = queries
            .origins
            .iter()
            .map(|o| features(o.raw_score, o.distance, o.scale_mismatch))
            .collect();
        Ok(Self {
            gts: scene.boxes.clone(),
            queries: qs.to_vec(),
            features,
            box_cost,
            image_id,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn features(&self) -> &[[f64; N_FEATURES]] {
        &self.features
    }
}

/// `[1, quality, distance, scale mismatch]`, the last two squashed into `[0, 1]`.
pub fn features(raw_score: f64, distance: f64, scale_mismatch: f64) -> [f64; N_FEATURES] {
    [
        1.0,
        raw_score.clamp(0.0, 1.0),
        (distance / 2.0).min(1.0),
        (scale_mismatch / 3.0).min(1.0),
    ]
}

fn logit(w: &[f64; N_FEATURES], x: &[f64; N_FEATURES]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `softplus(z) - y z`, the binary cross-entropy of `sigmoid(z)` against `y`.
fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

/// The toy detector's selection stage.
fn select(queries: &[Query], dqs: Option<&DqsConfig>) -> Vec<usize> {
    match dqs {
        None => (0..queries.len()).collect(),
        Some(cfg) => {
            let pool: Vec<Query> = match cfg.topk {
                Some(k) => topk_per_level(&QuerySet::from_trusted(queries.to_vec()), k).into_queries(),
                None => queries.to_vec(),
            };
            // Query ids are indices into the scene's query list.
            distinct_indices(&pool, cfg.thresh)
                .into_iter()
                .map(|i| pool[i].id as usize)
                .collect()
        }
    }
}

/// Training labels for one scene: selected query indices and 0/1 targets.
#[derive(Debug, Clone)]
struct Batch {
    selected: Vec<usize>,
    targets: Vec<f64>,
}

fn label(scene: &ToyScene, dqs: Option<&DqsConfig>, cost: &CostWeights) -> Result<Batch> {
    let selected = select(&scene.queries, dqs);
    let g = scene.gts.len();
    let mut m = Array2::zeros((g, selected.len()));
    for gi in 0..g {
        for (c, &j) in selected.iter().enumerate() {
            m[[gi, c]] = scene.box_cost[[gi, j]] - cost.cls * scene.queries[j].score;
        }
    }
    let mut targets = vec![0.0; selected.len()];
    if selected.len() >= g {
        for c in solve_rows(m.view())? {
            targets[c] = 1.0;
        }
    } else {
        // Too few queries to cover every object: each query gets its own object.
        solve_rows(m.t())?;
        targets.fill(1.0);
    }
    Ok(Batch { selected, targets })
}

fn loss_and_grad(scenes: &[ToyScene], batches: &[Batch], w: &[f64; N_FEATURES]) -> (f64, [f64; N_FEATURES]) {
    let mut loss = 0.0;
    let mut grad = [0.0; N_FEATURES];
    let mut n = 0usize;
    for (scene, batch) in scenes.iter().zip(batches) {
        for (&j, &y) in batch.selected.iter().zip(&batch.targets) {
            let x = &scene.features[j];
            let z = logit(w, x);
            loss += bce_logit(z, y);
            let r = sigmoid(z) - y;
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += r * xi;
            }
        }
        n += batch.selected.len();
    }
    let n = n.max(1) as f64;
    (loss / n, grad.map(|g| g / n))
}

fn loss_only(scenes: &[ToyScene], batches: &[Batch], w: &[f64; N_FEATURES]) -> f64 {
    loss_and_grad(scenes, batches, w).0
}

/// Max-norm relative error between the analytic gradient and central differences.
fn gradient_check(scenes: &[ToyScene], batches: &[Batch], w: &[f64; N_FEATURES]) -> f64 {
    let (_, analytic) = loss_and_grad(scenes, batches, w);
    let mut numeric = [0.0; N_FEATURES];
    for k in 0..N_FEATURES {
        let (mut plus, mut minus) = (*w, *w);
        plus[k] += FD_STEP;
        minus[k] -= FD_STEP;
        numeric[k] = (loss_only(scenes, batches, &plus) - loss_only(scenes, batches, &minus)) / (2.0 * FD_STEP);
    }
    let err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        err / scale
    }
}

fn rescore(scenes: &mut [ToyScene], w: &[f64; N_FEATURES]) {
    for scene in scenes {
        for (q, x) in scene.queries.iter_mut().zip(&scene.features) {
            q.score = sigmoid(logit(w, x));
        }
    }
}

/// Inference output of one scene: selection, then the best `max_dets` by score.
fn detections(scene: &ToyScene, dqs: Option<&DqsConfig>, max_dets: usize) -> Vec<Detection> {
    let mut kept: Vec<&Query> = select(&scene.queries, dqs)
        .into_iter()
        .map(|i| &scene.queries[i])
        .collect();
    kept.sort_by(|a, b| rank_order(a, b));
    kept.truncate(max_dets);
    kept.into_iter()
        .map(|q| Detection::new(scene.image_id, q.bbox, q.score))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OperatingPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Recall and precision at IoU 0.5 of detections scoring at least `score_thresh`.
fn operating_point(scenes: &[ToyScene], dqs: Option<&DqsConfig>, cfg: &TrainingConfig) -> OperatingPoint {
    let (mut tp, mut n_dets, mut n_gts) = (0usize, 0usize, 0usize);
    for scene in scenes {
        let dets: Vec<Detection> = detections(scene, dqs, cfg.max_dets)
            .into_iter()
            .filter(|d| d.score >= cfg.score_thresh)
            .collect();
        tp += greedy_match(&dets, &scene.gts, 0.5)
            .iter()
            .filter(|m| m.is_some())
            .count();
        n_dets += dets.len();
        n_gts += scene.gts.len();
    }
    OperatingPoint {
        recall: if n_gts == 0 { 1.0 } else { tp as f64 / n_gts as f64 },
        precision: if n_dets == 0 { 0.0 } else { tp as f64 / n_dets as f64 },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub weights: [f64; N_FEATURES],
    /// Loss before each update; empty when `steps == 0`.
    pub loss: Vec<f64>,
    /// Operating point after `t` updates, for `t = 0..=steps`.
    pub curve: Vec<OperatingPoint>,
    pub steps_to_target: Option<usize>,
    /// Worst relative gradient error over the checked steps.
    pub grad_check_max_rel_err: f64,
    pub grad_checks_run: usize,
    pub ap50: f64,
    pub map: f64,
}

impl ToyRun {
    pub fn final_point(&self) -> OperatingPoint {
        *self.curve.last().expect("curve has the initial point")
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss.last().copied()
    }
}

/// Trains the head on `scenes` and reports its curve. `seed` only picks the
/// gradient-check steps.
pub fn train_toy(
    scenes: &mut [ToyScene],
    cfg: &TrainingConfig,
    dqs: Option<&DqsConfig>,
    cost: &CostWeights,
    seed: u64,
) -> Result<ToyRun> {
    cfg.validate()?;
    if let Some(d) = dqs {
        d.validate()?;
    }
    let checks: Vec<usize> = if cfg.steps == 0 {
        Vec::new()
    } else {
        let mut rng = substream(seed, 0, Purpose::GradientChecks);
        let mut v = sample(&mut rng, cfg.steps, cfg.grad_checks.min(cfg.steps)).into_vec();
        v.sort_unstable();
        v
    };
    let mut w = cfg.init_weights;
    rescore(scenes, &w);
    let mut curve = vec![operating_point(scenes, dqs, cfg)];
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut worst = 0.0f64;
    for step in 0..cfg.steps {
        let batches = scenes.iter().map(|s| label(s, dqs, cost)).collect::<Result<Vec<_>>>()?;
        let (loss, grad) = loss_and_grad(scenes, &batches, &w);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        if checks.binary_search(&step).is_ok() {
            worst = worst.max(gradient_check(scenes, &batches, &w));
        }
        loss_curve.push(loss);
        for (wi, gi) in w.iter_mut().zip(grad) {
            *wi -= cfg.lr * gi;
        }
        rescore(scenes, &w);
        curve.push(operating_point(scenes, dqs, cfg));
    }
    let steps_to_target = curve.iter().position(|p| p.recall >= cfg.target_recall);
    let (ap50, map) = average_precisions(scenes, dqs, cfg.max_dets);
    Ok(ToyRun {
        weights: w,
        loss: loss_curve,
        curve,
        steps_to_target,
        grad_check_max_rel_err: worst,
        grad_checks_run: checks.len(),
        ap50,
        map,
    })
}

/// AP at IoU 0.5 and COCO mAP of the current inference output.
pub fn average_precisions(scenes: &[ToyScene], dqs: Option<&DqsConfig>, max_dets: usize) -> (f64, f64) {
    let mut dets = Vec::new();
    let mut gts = GroundTruths::new();
    for scene in scenes {
        dets.extend(detections(scene, dqs, max_dets));
        gts.insert(scene.image_id, scene.gts.clone());
    }
    (average_precision(&dets, &gts, 0.5), mean_average_precision(&dets, &gts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_logit_matches_probability_form() {
        for z in [-4.0, -0.3, 0.0, 0.7, 3.0] {
            for y in [0.0, 1.0] {
                let p: f64 = sigmoid(z);
                let direct = -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
                assert!((bce_logit(z, y) - direct).abs() < 1e-12);
            }
        }
        assert!(bce_logit(-800.0, 1.0).is_finite());
    }

    #[test]
    fn features_are_bounded() {
        let f = features(1.3, 10.0, 8.0);
        assert_eq!(f, [1.0, 1.0, 1.0, 1.0]);
        let f = features(-0.2, 0.0, 0.0);
        assert_eq!(f, [1.0, 0.0, 0.0, 0.0]);
    }
}
