//! Detection metrics: COCO-style AP and mAP, AR@k, and the log-average miss rate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Miss-rate floor inside the log-average.
pub const MISS_RATE_FLOOR: f64 = 1e-4;
/// Number of log-spaced FPPI reference points in `[1e-2, 1]`.
pub const FPPI_POINTS: usize = 9;
/// Recall thresholds for interpolated precision: `0, 0.01, ..., 1`.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub image_id: u64,
}

impl Detection {
    pub fn new(image_id: u64, bbox: BBox, score: f64) -> Self {
        Self { bbox, score, image_id }
    }
}

/// Ground-truth boxes per image. Images listed with no boxes still count as images.
pub type GroundTruths = BTreeMap<u64, Vec<BBox>>;

/// Matches detections of a single image to ground truths in descending score
/// order; each detection takes the highest-IoU unmatched ground truth with
/// `IoU >= iou_thresh`. Returns the matched ground-truth index per detection, in
/// input order.
pub fn greedy_match(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// Detections flagged TP/FP, sorted by descending score across all images.
struct Ranked {
    score: f64,
    tp: bool,
}

fn group_by_image(dets: &[Detection]) -> BTreeMap<u64, Vec<Detection>> {
    let mut by_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_image.entry(d.image_id).or_default().push(*d);
    }
    by_image
}

fn rank_detections(dets: &[Detection], gts: &GroundTruths, iou_thresh: f64) -> Vec<Ranked> {
    let mut ranked: Vec<(f64, u64, usize, bool)> = Vec::with_capacity(dets.len());
    for (image, image_dets) in group_by_image(dets) {
        let image_gts = gts.get(&image).map(Vec::as_slice).unwrap_or(&[]);
        let matched = greedy_match(&image_dets, image_gts, iou_thresh);
        for (i, (d, m)) in image_dets.iter().zip(matched).enumerate() {
            ranked.push((d.score, image, i, m.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    ranked
        .into_iter()
        .map(|(score, _, _, tp)| Ranked { score, tp })
        .collect()
}

fn total_gts(gts: &GroundTruths) -> usize {
    gts.values().map(Vec::len).sum()
}

/// Area under the 101-point interpolated precision/recall curve.
///
/// With no ground truths the result is 1 when there are also no detections and
/// 0 otherwise.
pub fn average_precision(dets: &[Detection], gts: &GroundTruths, iou_thresh: f64) -> f64 {
    let npos = total_gts(gts);
    if npos == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let ranked = rank_detections(dets, gts, iou_thresh);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for r in &ranked {
        if r.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..RECALL_POINTS {
        let threshold = k as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < threshold {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Mean AP over the COCO IoU thresholds.
pub fn mean_average_precision(dets: &[Detection], gts: &GroundTruths) -> f64 {
    let ts = coco_iou_thresholds();
    ts.iter().map(|&t| average_precision(dets, gts, t)).sum::<f64>() / ts.len() as f64
}

/// Recall using the `k` best-scored detections of every image. 1 when there are
/// no ground truths.
pub fn recall_at_k(dets: &[Detection], gts: &GroundTruths, k: usize, iou_thresh: f64) -> f64 {
    let npos = total_gts(gts);
    if npos == 0 {
        return 1.0;
    }
    let mut tp = 0;
    for (image, mut image_dets) in group_by_image(dets) {
        let Some(image_gts) = gts.get(&image) else {
            continue;
        };
        image_dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        image_dets.truncate(k);
        tp += greedy_match(&image_dets, image_gts, iou_thresh)
            .iter()
            .filter(|m| m.is_some())
            .count();
    }
    tp as f64 / npos as f64
}

/// FPPI reference points `10^(-2 + 2i/8)`.
pub fn fppi_reference_points() -> [f64; FPPI_POINTS] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (FPPI_POINTS - 1) as f64))
}

/// Log-average miss rate over FPPI in `[1e-2, 1]` at IoU 0.5.
///
/// Operating points are score thresholds between distinct scores, plus the empty
/// detector. At each reference FPPI the miss rate of the most permissive operating
/// point with `FPPI <= reference` is used.
pub fn mmr(dets: &[Detection], gts: &GroundTruths) -> Result<f64> {
    mmr_at(dets, gts, 0.5)
}

pub fn mmr_at(dets: &[Detection], gts: &GroundTruths, iou_thresh: f64) -> Result<f64> {
    let npos = total_gts(gts);
    if npos == 0 {
        return Err(Error::UndefinedMetric(
            "miss rate needs at least one ground truth".into(),
        ));
    }
    let images: BTreeSet<u64> = gts.keys().copied().chain(dets.iter().map(|d| d.image_id)).collect();
    let n_images = images.len() as f64;

    let ranked = rank_detections(dets, gts, iou_thresh);
    // (fppi, miss rate) with fppi non-decreasing.
    let mut points = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, r) in ranked.iter().enumerate() {
        if r.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let boundary = ranked.get(i + 1).is_none_or(|next| next.score != r.score);
        if boundary {
            points.push((fp as f64 / n_images, 1.0 - tp as f64 / npos as f64));
        }
    }
    let mut log_sum = 0.0;
    for reference in fppi_reference_points() {
        let miss = points
            .iter()
            .take_while(|(fppi, _)| *fppi <= reference)
            .last()
            .map_or(1.0, |p| p.1);
        log_sum += miss.max(MISS_RATE_FLOOR).ln();
    }
    Ok((log_sum / FPPI_POINTS as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub map: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub mmr: f64,
    pub counts: MatchCounts,
}

/// Default AR cut-offs.
pub const DEFAULT_RECALL_KS: [usize; 3] = [100, 200, 300];

pub fn evaluate(dets: &[Detection], gts: &GroundTruths, recall_ks: &[usize]) -> Result<EvalReport> {
    if recall_ks.contains(&0) {
        return Err(Error::UndefinedMetric("recall cut-off k must be at least 1".into()));
    }
    let ranked = rank_detections(dets, gts, 0.5);
    let tp = ranked.iter().filter(|r| r.tp).count();
    Ok(EvalReport {
        ap50: average_precision(dets, gts, 0.5),
        map: mean_average_precision(dets, gts),
        recall_at: recall_ks.iter().map(|&k| (k, recall_at_k(dets, gts, k, 0.5))).collect(),
        mmr: mmr(dets, gts)?,
        counts: MatchCounts {
            tp,
            fp: ranked.len() - tp,
            fn_: total_gts(gts) - tp,
        },
    })
}
