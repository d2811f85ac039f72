//! Brute-force reference implementations shared by the oracle tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use ddq::geometry::{iou, BBox};
use ddq::metrics::{Detection, GroundTruths};
use ddq::selection::{Query, QuerySet};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- assignment

/// Minimum over every injective row-to-column map, summed in row order.
pub fn brute_force_min_cost(cost: &Array2<f64>) -> f64 {
    fn go(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.ncols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[[row, c]], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}

pub fn random_cost_matrix(r: &mut ChaCha8Rng) -> Array2<f64> {
    let q = r.random_range(1..=8);
    let g = r.random_range(0..=q.min(7));
    Array2::from_shape_fn((g, q), |_| r.random_range(-10.0..=10.0))
}

// ---------------------------------------------------------------- selection

pub fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = r.random_range(0.0..extent);
    let y1 = r.random_range(0.0..extent);
    let w = r.random_range(1.0..extent / 3.0);
    let h = r.random_range(1.0..extent / 3.0);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Clustered boxes so that many pairs overlap; scores repeat to exercise ties.
pub fn random_query_set(r: &mut ChaCha8Rng, max_len: usize) -> QuerySet {
    let n = r.random_range(0..=max_len);
    let centers: Vec<BBox> = (0..r.random_range(1..=8)).map(|_| random_box(r, 100.0)).collect();
    let queries = (0..n)
        .map(|i| {
            let c = centers[r.random_range(0..centers.len())];
            let j = |r: &mut ChaCha8Rng| r.random_range(-3.0..3.0);
            let x1 = c.x1 + j(r);
            let y1 = c.y1 + j(r);
            let b = BBox::new(x1, y1, x1.max(c.x2 + j(r)), y1.max(c.y2 + j(r))).unwrap();
            let score = (r.random_range(0..=20) as f64) / 20.0;
            Query::new(i as u64, b, score, r.random_range(0..5))
        })
        .collect();
    QuerySet::new(queries).unwrap()
}

/// Checks the DQS post-conditions of `kept` against its input; returns a
/// description of the first violation.
pub fn check_dqs(input: &QuerySet, kept: &QuerySet, thresh: f64) -> Result<(), String> {
    let ids: BTreeSet<u64> = kept.iter().map(|q| q.id).collect();
    for (i, a) in kept.iter().enumerate() {
        for b in &kept.queries()[i + 1..] {
            let v = iou(&a.bbox, &b.bbox);
            if v > thresh {
                return Err(format!("kept {} and {} overlap with IoU {v}", a.id, b.id));
            }
        }
    }
    for q in input.iter().filter(|q| !ids.contains(&q.id)) {
        let dominated = kept.iter().any(|k| {
            let higher = k.score > q.score || (k.score == q.score && k.id < q.id);
            higher && iou(&k.bbox, &q.bbox) > thresh
        });
        if !dominated {
            return Err(format!("query {} was dropped without a dominating survivor", q.id));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- metrics

pub struct MicroScene {
    pub dets: Vec<Detection>,
    pub gts: GroundTruths,
}

/// One or two images, at most 6 ground truths and 10 detections in total, with
/// distinct scores. Detections are either jittered ground truths or clutter.
pub fn micro_scene(r: &mut ChaCha8Rng) -> MicroScene {
    let images: u64 = r.random_range(1..=2);
    let mut gts = GroundTruths::new();
    let n_gts = r.random_range(1..=6);
    for i in 0..n_gts {
        gts.entry(i as u64 % images).or_default().push(random_box(r, 40.0));
    }
    for img in 0..images {
        gts.entry(img).or_default();
    }
    let n_dets = r.random_range(0..=10);
    let mut scores: Vec<f64> = (1..=n_dets).map(|k| k as f64 / (n_dets + 1) as f64).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, r.random_range(0..=i));
    }
    let dets = scores
        .into_iter()
        .map(|score| {
            let image = r.random_range(0..images);
            let image_gts = &gts[&image];
            let bbox = if !image_gts.is_empty() && r.random_bool(0.7) {
                let g = image_gts[r.random_range(0..image_gts.len())];
                let s = 0.25 * g.width().min(g.height());
                let x1 = g.x1 + r.random_range(-s..s);
                let y1 = g.y1 + r.random_range(-s..s);
                BBox::new(
                    x1,
                    y1,
                    x1.max(g.x2 + r.random_range(-s..s)),
                    y1.max(g.y2 + r.random_range(-s..s)),
                )
                .unwrap()
            } else {
                random_box(r, 40.0)
            };
            Detection::new(image, bbox, score)
        })
        .collect();
    MicroScene { dets, gts }
}

/// True positives of the detections scoring at least `tau`, matching image by
/// image from scratch: best score first, each taking its highest-IoU free box.
fn true_positives(dets: &[Detection], gts: &GroundTruths, tau: f64, thr: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut n = 0;
    for (image, boxes) in gts {
        let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.image_id == *image && d.score >= tau).collect();
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut free = vec![true; boxes.len()];
        for d in mine {
            n += 1;
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in boxes.iter().enumerate() {
                let v = iou(&d.bbox, b);
                if free[g] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                free[g] = false;
                tp += 1;
            }
        }
    }
    (tp, n)
}

fn npos(gts: &GroundTruths) -> usize {
    gts.values().map(Vec::len).sum()
}

/// 101-point interpolated AP: for each recall level, the best precision among
/// all score cut-offs reaching it.
pub fn oracle_ap(s: &MicroScene, thr: f64) -> f64 {
    let total = npos(&s.gts) as f64;
    let cutoffs: Vec<(f64, f64)> = s
        .dets
        .iter()
        .map(|d| {
            let (tp, n) = true_positives(&s.dets, &s.gts, d.score, thr);
            (tp as f64 / total, tp as f64 / n as f64)
        })
        .collect();
    (0..=100)
        .map(|k| {
            cutoffs
                .iter()
                .filter(|(rec, _)| *rec >= k as f64 / 100.0)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

pub fn oracle_recall_at_k(s: &MicroScene, k: usize, thr: f64) -> f64 {
    let mut kept = Vec::new();
    for image in s.gts.keys() {
        let mut mine: Vec<Detection> = s.dets.iter().filter(|d| d.image_id == *image).copied().collect();
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        mine.truncate(k);
        kept.extend(mine);
    }
    true_positives(&kept, &s.gts, f64::NEG_INFINITY, thr).0 as f64 / npos(&s.gts) as f64
}

/// Log-average miss rate: at each reference FPPI, the lowest miss rate among
/// all score thresholds (including "nothing") whose FPPI stays within it.
pub fn oracle_mmr(s: &MicroScene) -> f64 {
    let images = s.gts.len() as f64;
    let total = npos(&s.gts) as f64;
    let mut taus: Vec<f64> = s.dets.iter().map(|d| d.score).collect();
    taus.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = taus
        .iter()
        .map(|&tau| {
            let (tp, n) = true_positives(&s.dets, &s.gts, tau, 0.5);
            ((n - tp) as f64 / images, 1.0 - tp as f64 / total)
        })
        .collect();
    let mut log_sum = 0.0;
    for i in 0..9 {
        let reference = 10f64.powf(-2.0 + 0.25 * i as f64);
        let miss = points
            .iter()
            .filter(|(f, _)| *f <= reference)
            .map(|p| p.1)
            .fold(1.0, f64::min);
        log_sum += miss.max(1e-4).ln();
    }
    (log_sum / 9.0).exp()
}
