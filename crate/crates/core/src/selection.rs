//! Queries, per-level top-k pre-selection and distinct query selection.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Per-level pre-selection size of the fully convolutional detector.
pub const DEFAULT_TOPK: usize = 1000;
/// DQS threshold for the convolutional and two-stage variants.
pub const DQS_THRESH_FCN: f64 = 0.7;
/// DQS threshold for the transformer variant.
pub const DQS_THRESH_DETR: f64 = 0.8;

/// A candidate detection.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub bbox: BBox,
    /// Class-agnostic score in `[0, 1]`.
    pub score: f64,
    pub class_scores: Option<Vec<f64>>,
    pub level: usize,
    pub id: u64,
}

impl Query {
    pub fn new(id: u64, bbox: BBox, score: f64, level: usize) -> Self {
        Self {
            bbox,
            score,
            class_scores: None,
            level,
            id,
        }
    }

    /// Sets per-class scores; the class-agnostic score becomes their maximum.
    pub fn with_class_scores(mut self, scores: Vec<f64>) -> Self {
        self.score = scores.iter().copied().fold(0.0, f64::max);
        self.class_scores = Some(scores);
        self
    }

    /// Score for `class`. Queries without per-class scores are single-class.
    pub fn class_score(&self, class: usize) -> Option<f64> {
        match &self.class_scores {
            Some(s) => s.get(class).copied(),
            None if class == 0 => Some(self.score),
            None => None,
        }
    }
}

/// Ordered queries with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    queries: Vec<Query>,
}

impl QuerySet {
    pub fn new(queries: Vec<Query>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(queries.len());
        for q in &queries {
            if !seen.insert(q.id) {
                return Err(Error::Selection(format!("duplicate query id {}", q.id)));
            }
            if !(0.0..=1.0).contains(&q.score) {
                return Err(Error::Selection(format!(
                    "query {} has score {} outside [0, 1]",
                    q.id, q.score
                )));
            }
            if !q.bbox.is_valid() {
                return Err(Error::Selection(format!("query {} has an invalid box", q.id)));
            }
        }
        Ok(Self { queries })
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_trusted(queries: Vec<Query>) -> Self {
        Self { queries }
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn into_queries(self) -> Vec<Query> {
        self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.queries.iter().map(|q| q.id).collect()
    }
}

/// Descending score, lower id first on ties.
pub fn rank_order(a: &Query, b: &Query) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// Keeps the `k` best-scored queries of every level, levels in ascending order.
pub fn topk_per_level(qs: &QuerySet, k: usize) -> QuerySet {
    let max_level = qs.queries.iter().map(|q| q.level).max();
    let Some(max_level) = max_level else {
        return QuerySet::default();
    };
    let mut by_level: Vec<Vec<&Query>> = vec![Vec::new(); max_level + 1];
    for q in &qs.queries {
        by_level[q.level].push(q);
    }
    let mut out = Vec::new();
    for mut level in by_level {
        level.sort_by(|a, b| rank_order(a, b));
        out.extend(level.into_iter().take(k).cloned());
    }
    QuerySet::from_trusted(out)
}

/// Class-agnostic greedy NMS. A query is dropped iff its IoU with an already kept
/// query is strictly greater than `iou_thresh`. Output is in rank order.
pub fn distinct_query_selection(qs: &QuerySet, iou_thresh: f64) -> QuerySet {
    let keep = distinct_indices(qs.queries(), iou_thresh);
    QuerySet::from_trusted(keep.into_iter().map(|i| qs.queries[i].clone()).collect())
}

/// Indices into `queries` of the DQS survivors, in rank order.
pub fn distinct_indices(queries: &[Query], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by(|&a, &b| rank_order(&queries[a], &queries[b]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &queries[i].bbox;
        if kept.iter().all(|&k| iou(&queries[k].bbox, b) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
