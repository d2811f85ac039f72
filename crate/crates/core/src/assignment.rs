//! One-to-one bipartite assignment and the auxiliary soft one-to-many assignment.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, iou, BBox};
use crate::selection::{Query, QuerySet};

/// Positives per ground truth for the auxiliary head of the convolutional detector.
pub const AUX_K_FCN: usize = 8;
/// Positives per ground truth for the auxiliary head of the transformer detector.
pub const AUX_K_DETR: usize = 4;
/// IoU exponent inside the soft target.
const SOFT_IOU_POWER: i32 = 6;

/// Matching cost weights. Defaults follow DETR: `(1, 5, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.l1, self.giou];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Assignment(format!(
                "cost weights must be non-negative, got {all:?}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Assignment("cost weights are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

impl GroundTruth {
    pub fn new(bbox: BBox) -> Self {
        Self { bbox, class: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `(gt_index, query_id)`, sorted by gt index.
    pub pairs: Vec<(usize, u64)>,
    pub positives: BTreeSet<u64>,
    pub negatives: BTreeSet<u64>,
    pub total_cost: f64,
}

impl AssignmentResult {
    pub fn query_for_gt(&self, gt: usize) -> Option<u64> {
        self.pairs.iter().find(|(g, _)| *g == gt).map(|(_, q)| *q)
    }
}

/// `w.cls * -p + w.l1 * L1 / image_diag + w.giou * -giou`.
pub fn match_cost(query: &Query, gt: &GroundTruth, w: &CostWeights, image_diag: f64) -> Result<f64> {
    if image_diag.is_nan() || image_diag <= 0.0 {
        return Err(Error::Assignment(format!(
            "image diagonal must be positive, got {image_diag}"
        )));
    }
    let p = query.class_score(gt.class).ok_or(Error::MissingClassScore {
        query_id: query.id,
        class: gt.class,
    })?;
    let l1 = query.bbox.l1_distance(&gt.bbox) / image_diag;
    let g = giou(&query.bbox, &gt.bbox)?;
    Ok(-w.cls * p + w.l1 * l1 - w.giou * g)
}

/// Builds the `G x Q` cost matrix.
pub fn cost_matrix(qs: &[Query], gts: &[GroundTruth], w: &CostWeights, image_diag: f64) -> Result<Array2<f64>> {
    let mut cost = Array2::zeros((gts.len(), qs.len()));
    for (g, gt) in gts.iter().enumerate() {
        for (j, q) in qs.iter().enumerate() {
            cost[[g, j]] = match_cost(q, gt, w, image_diag)?;
        }
    }
    Ok(cost)
}

/// Minimum-cost injective map from rows to columns. `result[g]` is the column of row `g`.
///
/// Shortest augmenting paths with row/column potentials, `O(G^2 Q)`.
pub fn solve_rows(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if m < n {
        return Err(Error::Infeasible {
            ground_truths: n,
            queries: m,
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Assignment("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based: column 0 is the virtual source, row_of[j] = 0 means free.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            assign[row_of[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Sum of `cost[g, cols[g]]` in row order.
pub fn assignment_cost(cost: ArrayView2<'_, f64>, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(g, &j)| cost[[g, j]]).sum()
}

/// Solves a bare cost matrix; query ids are column indices.
pub fn hungarian(cost: ArrayView2<'_, f64>) -> Result<AssignmentResult> {
    let ids: Vec<u64> = (0..cost.ncols() as u64).collect();
    assemble(cost, &ids)
}

fn assemble(cost: ArrayView2<'_, f64>, ids: &[u64]) -> Result<AssignmentResult> {
    let cols = solve_rows(cost)?;
    let pairs: Vec<(usize, u64)> = cols.iter().enumerate().map(|(g, &j)| (g, ids[j])).collect();
    let positives: BTreeSet<u64> = pairs.iter().map(|p| p.1).collect();
    let negatives = ids.iter().copied().filter(|id| !positives.contains(id)).collect();
    Ok(AssignmentResult {
        total_cost: assignment_cost(cost, &cols),
        pairs,
        positives,
        negatives,
    })
}

/// Each ground truth gets exactly one positive query; everything else is negative.
pub fn one_to_one_assign(
    qs: &QuerySet,
    gts: &[GroundTruth],
    w: &CostWeights,
    image_diag: f64,
) -> Result<AssignmentResult> {
    w.validate()?;
    if qs.len() < gts.len() {
        return Err(Error::Infeasible {
            ground_truths: gts.len(),
            queries: qs.len(),
        });
    }
    let cost = cost_matrix(qs.queries(), gts, w, image_diag)?;
    assemble(cost.view(), &qs.ids())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftTarget {
    pub query_id: u64,
    /// Classification target in `[0, 1]`.
    pub target: f64,
    /// GIoU loss weight; equal to the target.
    pub weight: f64,
}

/// Soft targets aligned with the input query order.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargets {
    pub targets: Vec<SoftTarget>,
}

impl SoftTargets {
    pub fn get(&self, query_id: u64) -> Option<&SoftTarget> {
        self.targets.iter().find(|t| t.query_id == query_id)
    }
}

/// Targets for one positive set from `(score, iou)` pairs:
/// `s_i * iou_i^6 / max_j(s_j * iou_j^6) * max_j(iou_j)`, or all zero when the
/// denominator vanishes.
pub fn soft_targets_for_group(members: &[(f64, f64)]) -> Vec<f64> {
    let quality: Vec<f64> = members.iter().map(|&(s, u)| s * u.powi(SOFT_IOU_POWER)).collect();
    let max_quality = quality.iter().copied().fold(0.0, f64::max);
    let max_iou = members.iter().map(|m| m.1).fold(0.0, f64::max);
    if max_quality <= 0.0 {
        return vec![0.0; members.len()];
    }
    quality.iter().map(|q| q / max_quality * max_iou).collect()
}

/// Selects the `k` cheapest queries per ground truth and assigns soft targets. A
/// query positive for several ground truths keeps its largest target.
pub fn soft_one_to_many_assign(
    qs: &QuerySet,
    gts: &[GroundTruth],
    w: &CostWeights,
    k: usize,
    image_diag: f64,
) -> Result<SoftTargets> {
    if k == 0 {
        return Err(Error::Assignment("K must be at least 1".into()));
    }
    w.validate()?;
    let queries = qs.queries();
    let cost = cost_matrix(queries, gts, w, image_diag)?;
    let mut best = vec![0.0f64; queries.len()];
    for (g, gt) in gts.iter().enumerate() {
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.sort_by(|&a, &b| cost[[g, a]].total_cmp(&cost[[g, b]]).then(a.cmp(&b)));
        order.truncate(k);
        let members: Vec<(f64, f64)> = order
            .iter()
            .map(|&j| {
                let s = queries[j].class_score(gt.class).unwrap_or(0.0);
                (s, iou(&queries[j].bbox, &gt.bbox))
            })
            .collect();
        for (&j, t) in order.iter().zip(soft_targets_for_group(&members)) {
            best[j] = best[j].max(t);
        }
    }
    Ok(SoftTargets {
        targets: queries
            .iter()
            .zip(best)
            .map(|(q, t)| SoftTarget {
                query_id: q.id,
                target: t,
                weight: t,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn cost_of_perfect_match() {
        let b = bx(0., 0., 4., 4.);
        let gt = GroundTruth::new(b);
        let w = CostWeights::default();
        let q = Query::new(0, b, 1.0, 0);
        assert!((match_cost(&q, &gt, &w, 10.0).unwrap() + 3.0).abs() < 1e-12);
        let q = Query::new(0, b, 0.0, 0);
        assert!((match_cost(&q, &gt, &w, 10.0).unwrap() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn cost_of_offset_box() {
        let q = Query::new(0, bx(0., 0., 2., 2.), 0.5, 0);
        let gt = GroundTruth::new(bx(1., 1., 3., 3.));
        let c = match_cost(&q, &gt, &CostWeights::default(), 10.0).unwrap();
        let expected = -0.5 + 5.0 * (4.0 / 10.0) + 2.0 * (5.0 / 63.0);
        assert!((c - expected).abs() < 1e-12);
        assert!((c - 1.6587).abs() < 1e-4);
    }

    #[test]
    fn cost_errors() {
        let q = Query::new(3, bx(0., 0., 2., 2.), 0.5, 0);
        let gt = GroundTruth {
            bbox: bx(0., 0., 2., 2.),
            class: 2,
        };
        assert_eq!(
            match_cost(&q, &gt, &CostWeights::default(), 1.0),
            Err(Error::MissingClassScore { query_id: 3, class: 2 })
        );
        let q = q.with_class_scores(vec![0.1, 0.2, 0.3]);
        assert!(match_cost(&q, &gt, &CostWeights::default(), 1.0).is_ok());
        assert!(match_cost(&q, &gt, &CostWeights::default(), 0.0).is_err());
    }

    #[test]
    fn cost_monotone_in_class_probability() {
        let gt = GroundTruth::new(bx(0., 0., 5., 5.));
        let w = CostWeights::default();
        let mut last = f64::INFINITY;
        for i in 0..=10 {
            let q = Query::new(0, bx(1., 1., 4., 6.), i as f64 / 10.0, 0);
            let c = match_cost(&q, &gt, &w, 7.0).unwrap();
            assert!(c < last);
            last = c;
        }
    }

    #[test]
    fn hungarian_examples() {
        let r = hungarian(array![[3.0]].view()).unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total_cost, 3.0);

        let r = hungarian(array![[1.0, 2.0], [2.0, 4.0]].view()).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(r.total_cost, 4.0);

        let r = hungarian(array![[5.0, 1.0, 9.0], [1.0, 9.0, 9.0]].view()).unwrap();
        assert_eq!(r.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(r.total_cost, 2.0);
        assert_eq!(r.negatives.iter().copied().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn hungarian_infeasible_and_empty() {
        let cost = Array2::<f64>::zeros((3, 2));
        assert_eq!(
            hungarian(cost.view()),
            Err(Error::Infeasible {
                ground_truths: 3,
                queries: 2
            })
        );
        let r = hungarian(Array2::<f64>::zeros((0, 4)).view()).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.negatives.len(), 4);
        assert!(hungarian(array![[f64::NAN]].view()).is_err());
    }

    #[test]
    fn one_to_one_with_no_ground_truths() {
        let qs = QuerySet::new(vec![Query::new(5, bx(0., 0., 1., 1.), 0.4, 0)]).unwrap();
        let r = one_to_one_assign(&qs, &[], &CostWeights::default(), 10.0).unwrap();
        assert!(r.pairs.is_empty() && r.positives.is_empty());
        assert_eq!(r.negatives.iter().copied().collect::<Vec<_>>(), vec![5]);
    }

    #[test]
    fn one_to_one_picks_exact_queries() {
        let gts = [
            GroundTruth::new(bx(0., 0., 10., 10.)),
            GroundTruth::new(bx(50., 50., 70., 80.)),
        ];
        let qs = QuerySet::new(vec![
            Query::new(10, bx(45., 50., 70., 80.), 0.3, 0),
            Query::new(11, gts[1].bbox, 1.0, 0),
            Query::new(12, bx(1., 1., 9., 12.), 0.5, 0),
            Query::new(13, gts[0].bbox, 1.0, 0),
        ])
        .unwrap();
        let r = one_to_one_assign(&qs, &gts, &CostWeights::default(), 100.0).unwrap();
        assert_eq!(r.pairs, vec![(0, 13), (1, 11)]);
        assert_eq!(r.negatives.iter().copied().collect::<Vec<_>>(), vec![10, 12]);
    }

    #[test]
    fn one_to_one_infeasible() {
        let gts = [GroundTruth::new(bx(0., 0., 1., 1.)); 2];
        let qs = QuerySet::new(vec![Query::new(0, bx(0., 0., 1., 1.), 0.5, 0)]).unwrap();
        assert!(matches!(
            one_to_one_assign(&qs, &gts, &CostWeights::default(), 1.0),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn soft_targets_examples() {
        assert_eq!(soft_targets_for_group(&[(0.7, 0.6)]), vec![0.6]);
        let t = soft_targets_for_group(&[(0.9, 0.5), (0.5, 0.8)]);
        assert!((t[0] - 0.0140625 / 0.131072 * 0.8).abs() < 1e-12);
        assert!((t[0] - 0.08583).abs() < 1e-5);
        assert!((t[1] - 0.8).abs() < 1e-12);
        assert_eq!(soft_targets_for_group(&[(0.9, 0.0), (0.2, 0.0)]), vec![0.0, 0.0]);
    }

    #[test]
    fn soft_assign_selects_k_cheapest() {
        let gt = GroundTruth::new(bx(0., 0., 10., 10.));
        let qs = QuerySet::new(vec![
            Query::new(0, bx(0., 0., 10., 10.), 0.9, 0),
            Query::new(1, bx(1., 0., 10., 10.), 0.8, 0),
            Query::new(2, bx(30., 30., 40., 40.), 0.9, 0),
        ])
        .unwrap();
        let st = soft_one_to_many_assign(&qs, &[gt], &CostWeights::default(), 2, 20.0).unwrap();
        assert_eq!(st.get(0).unwrap().target, 1.0);
        let t1 = st.get(1).unwrap();
        assert!(t1.target > 0.0 && t1.target < 1.0);
        assert_eq!(t1.weight, t1.target);
        assert_eq!(st.get(2).unwrap().target, 0.0);
        assert!(soft_one_to_many_assign(&qs, &[gt], &CostWeights::default(), 0, 20.0).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(CostWeights {
            cls: 0.0,
            l1: 0.0,
            giou: 0.0
        }
        .validate()
        .is_err());
        assert!(CostWeights {
            cls: -1.0,
            l1: 0.0,
            giou: 1.0
        }
        .validate()
        .is_err());
        assert!(CostWeights::default().validate().is_ok());
    }
}
