//! Classification and box losses, and the gradient analysis of a duplicated query pair.
//!
//! With two identical queries under one-to-one assignment one is labelled
//! foreground and the other background, so their joint loss is
//! `L1 = -log(p1) - log(1 - p2)` evaluated at `p1 = p2 = p`. Compared to the
//! lone-query loss `L0 = -log(p)` the gradient is scaled by
//! `alpha = 1 - p / (1 - p)`: damped below `p = 0.5`, reversed above it.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::assignment::{AssignmentResult, GroundTruth, SoftTargets};
use crate::error::{Error, Result};
use crate::geometry::{giou, iou, BBox};
use crate::selection::QuerySet;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Quality focal loss exponent.
pub const DEFAULT_QFOCAL_BETA: f64 = 2.0;
/// `|alpha|` at or below this counts as the zero-gradient regime.
pub const ALPHA_ZERO_TOL: f64 = 1e-9;

/// Main-loss weights: GIoU 2, classification 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub giou: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { giou: 2.0, cls: 1.0 }
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// `|y - p|^beta * bce(p, y)`.
pub fn qfocal(p: f64, y: f64, beta: f64) -> f64 {
    let modulation = if beta == 0.0 {
        1.0
    } else {
        (y - clamp_prob(p)).abs().powf(beta)
    };
    modulation * bce(p, y)
}

pub fn giou_loss(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(1.0 - giou(a, b)?)
}

/// Loss of a duplicated pair: the first query positive, the second negative.
pub fn duplicated_pair_loss(p1: f64, p2: f64) -> f64 {
    -clamp_prob(p1).ln() - (1.0 - clamp_prob(p2)).ln()
}

/// Loss of the same query without a duplicate.
pub fn single_query_loss(p: f64) -> f64 {
    bce(p, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientRegime {
    Suppressed,
    Zero,
    NegativeTraining,
}

impl fmt::Display for GradientRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Suppressed => "suppressed",
            Self::Zero => "zero",
            Self::NegativeTraining => "negative-training",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientRatioReport {
    pub p: f64,
    pub alpha: f64,
    pub fd_alpha: f64,
    pub regime: GradientRegime,
}

pub fn analytic_alpha(p: f64) -> f64 {
    1.0 - p / (1.0 - p)
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Gradient ratio of a duplicated pair against a lone query, analytic and by
/// central finite differences.
pub fn gradient_ratio(p: f64) -> Result<GradientRatioReport> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(p));
    }
    let alpha = analytic_alpha(p);
    let h = 1e-5 * p.min(1.0 - p);
    let d_dup = central_difference(|x| duplicated_pair_loss(x, x), p, h);
    let d_single = central_difference(single_query_loss, p, h);
    let regime = if alpha.abs() <= ALPHA_ZERO_TOL {
        GradientRegime::Zero
    } else if alpha < 0.0 {
        GradientRegime::NegativeTraining
    } else {
        GradientRegime::Suppressed
    };
    Ok(GradientRatioReport {
        p,
        alpha,
        fd_alpha: d_dup / d_single,
        regime,
    })
}

/// How main-head positives are labelled for the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveTarget {
    /// IoU between the positive's box and its ground truth.
    #[default]
    Iou,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub cls: f64,
    pub giou: f64,
    pub total: f64,
}

/// Main loss over the selected queries: `w.giou * sum(giou_loss over positives) +
/// w.cls * sum(qfocal over every selected query)`.
pub fn main_loss(
    selected: &QuerySet,
    gts: &[GroundTruth],
    assignment: &AssignmentResult,
    weights: &LossWeights,
    target: PositiveTarget,
    beta: f64,
) -> Result<LossBreakdown> {
    let matched: HashMap<u64, usize> = assignment.pairs.iter().map(|&(g, q)| (q, g)).collect();
    let mut cls = 0.0;
    let mut box_loss = 0.0;
    for q in selected.iter() {
        let y = match matched.get(&q.id) {
            Some(&g) => {
                let gt = gts
                    .get(g)
                    .ok_or_else(|| Error::Assignment(format!("pair refers to missing ground truth {g}")))?;
                box_loss += giou_loss(&q.bbox, &gt.bbox)?;
                match target {
                    PositiveTarget::Iou => iou(&q.bbox, &gt.bbox),
                    PositiveTarget::Hard => 1.0,
                }
            }
            None => 0.0,
        };
        cls += qfocal(q.score, y, beta);
    }
    Ok(LossBreakdown {
        cls,
        giou: box_loss,
        total: weights.cls * cls + weights.giou * box_loss,
    })
}

/// Auxiliary loss over dense queries with soft targets; GIoU terms are weighted by
/// the targets and paired with the ground truth of highest IoU.
pub fn auxiliary_loss(
    dense: &QuerySet,
    gts: &[GroundTruth],
    targets: &SoftTargets,
    weights: &LossWeights,
    beta: f64,
) -> Result<LossBreakdown> {
    if targets.targets.len() != dense.len() {
        return Err(Error::Assignment(
            "soft targets are not aligned with the queries".into(),
        ));
    }
    let mut cls = 0.0;
    let mut box_loss = 0.0;
    for (q, t) in dense.iter().zip(&targets.targets) {
        cls += qfocal(q.score, t.target, beta);
        if t.weight > 0.0 {
            let gt = gts
                .iter()
                .max_by(|a, b| iou(&q.bbox, &a.bbox).total_cmp(&iou(&q.bbox, &b.bbox)))
                .ok_or_else(|| Error::Assignment("positive target without ground truths".into()))?;
            box_loss += t.weight * giou_loss(&q.bbox, &gt.bbox)?;
        }
    }
    Ok(LossBreakdown {
        cls,
        giou: box_loss,
        total: weights.cls * cls + weights.giou * box_loss,
    })
}
