//! Synthetic single-class scenes with controllable crowding.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::rng::{substream, Purpose};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Crowding tolerance: the measured mean neighbour IoU must land within this of the target.
pub const CROWDING_TOLERANCE: f64 = 0.05;
const MAX_ATTEMPTS: usize = 60;
const MAX_BIAS: f64 = 0.9;
const RAY_STEPS: usize = 24;
/// Share of placements that target a heavy overlap, IoU in [0.5, 0.7).
const HEAVY_FRACTION: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub image_w: u32,
    pub image_h: u32,
    pub n_objects: usize,
    /// Target mean over objects of the largest IoU with any other object.
    pub crowding: f64,
    /// Box side `sqrt(w * h)` is log-uniform in `[min_side, max_side]`.
    pub min_side: f64,
    pub max_side: f64,
    /// Height over width, uniform in `[min_aspect, max_aspect]`.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// About two dozen heavily overlapping pedestrian-shaped boxes.
    pub fn crowd_preset() -> Self {
        Self {
            image_w: 384,
            image_h: 384,
            n_objects: 23,
            crowding: 0.3,
            min_side: 24.0,
            max_side: 80.0,
            min_aspect: 1.2,
            max_aspect: 2.4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        if self.image_w == 0 || self.image_h == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.crowding >= 0.0 && self.crowding < 1.0) {
            return bad(format!("crowding {} outside [0, 1)", self.crowding));
        }
        if !(self.min_side > 0.0 && self.max_side >= self.min_side) {
            return bad(format!("side range [{}, {}] is invalid", self.min_side, self.max_side));
        }
        if !(self.min_aspect > 0.0 && self.max_aspect >= self.min_aspect) {
            return bad(format!(
                "aspect range [{}, {}] is invalid",
                self.min_aspect, self.max_aspect
            ));
        }
        let longest = self.max_side * self.max_aspect.max(1.0 / self.min_aspect).sqrt();
        if longest > self.image_w.min(self.image_h) as f64 {
            return bad(format!("boxes up to {longest:.1}px do not fit the image"));
        }
        Ok(())
    }

    pub fn image_diag(&self) -> f64 {
        (self.image_w as f64).hypot(self.image_h as f64)
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::crowd_preset()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_w: u32,
    pub image_h: u32,
    pub boxes: Vec<BBox>,
    pub seed: u64,
}

impl Scene {
    pub fn image_diag(&self) -> f64 {
        (self.image_w as f64).hypot(self.image_h as f64)
    }
}

/// Mean over boxes of the largest IoU with any other box; 0 for fewer than two.
pub fn mean_neighbor_iou(boxes: &[BBox]) -> f64 {
    if boxes.len() < 2 {
        return 0.0;
    }
    let total: f64 = boxes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            boxes
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| iou(a, b))
                .fold(0.0, f64::max)
        })
        .sum();
    total / boxes.len() as f64
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    generate_scene_at(cfg, cfg.seed, 0)
}

/// Scene `index` of the experiment seeded with `seed`.
///
/// Objects are placed one at a time; after the first, each is dropped next to a
/// random earlier object, at the nearest offset whose largest IoU with the boxes
/// placed so far drops to a sampled level around an internal bias. Whole scenes
/// are redrawn while the bias is bisected until the measured crowding is in range.
pub fn generate_scene_at(cfg: &SceneConfig, seed: u64, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = substream(seed, index, Purpose::Scene);
    let n = cfg.n_objects;
    let scene = |boxes| Scene {
        image_w: cfg.image_w,
        image_h: cfg.image_h,
        boxes,
        seed,
    };
    if n < 2 {
        return Ok(scene((0..n).map(|_| free_box(cfg, &mut rng)).collect()));
    }
    // Measured crowding grows with the placement bias, so bisect on the bias.
    let (mut lo, mut hi) = (0.0, MAX_BIAS);
    let mut bias = if cfg.crowding == 0.0 {
        0.0
    } else {
        cfg.crowding.min(MAX_BIAS)
    };
    let mut last = f64::NAN;
    for _ in 0..MAX_ATTEMPTS {
        let boxes = place_boxes(cfg, bias, &mut rng);
        last = mean_neighbor_iou(&boxes);
        if (last - cfg.crowding).abs() <= CROWDING_TOLERANCE {
            return Ok(scene(boxes));
        }
        if last < cfg.crowding {
            lo = bias;
        } else {
            hi = bias;
        }
        if hi - lo < 1e-3 {
            // Re-open the bracket so sampling noise cannot trap the search.
            lo = (lo - 0.1).max(0.0);
            hi = (hi + 0.1).min(MAX_BIAS);
        }
        bias = 0.5 * (lo + hi);
    }
    Err(Error::Generation(format!(
        "could not reach crowding {:.3} with {n} objects after {MAX_ATTEMPTS} attempts (last {last:.3}, bias {bias:.3})",
        cfg.crowding
    )))
}

fn sample_size(cfg: &SceneConfig, rng: &mut ChaCha12Rng) -> (f64, f64) {
    let side = (rng.random_range(cfg.min_side.ln()..=cfg.max_side.ln())).exp();
    let aspect = rng.random_range(cfg.min_aspect..=cfg.max_aspect);
    (side / aspect.sqrt(), side * aspect.sqrt())
}

fn fit_inside(cfg: &SceneConfig, cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    let cx = cx.clamp(0.5 * w, cfg.image_w as f64 - 0.5 * w);
    let cy = cy.clamp(0.5 * h, cfg.image_h as f64 - 0.5 * h);
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

fn free_box(cfg: &SceneConfig, rng: &mut ChaCha12Rng) -> BBox {
    let (w, h) = sample_size(cfg, rng);
    let cx = rng.random_range(0.5 * w..=cfg.image_w as f64 - 0.5 * w);
    let cy = rng.random_range(0.5 * h..=cfg.image_h as f64 - 0.5 * h);
    fit_inside(cfg, cx, cy, w, h)
}

fn place_boxes(cfg: &SceneConfig, bias: f64, rng: &mut ChaCha12Rng) -> Vec<BBox> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(cfg.n_objects);
    boxes.push(free_box(cfg, rng));
    while boxes.len() < cfg.n_objects {
        if bias <= 0.0 {
            // Prefer non-overlapping placements, give up after a few tries.
            let mut b = free_box(cfg, rng);
            for _ in 0..50 {
                if boxes.iter().all(|o| iou(o, &b) == 0.0) {
                    break;
                }
                b = free_box(cfg, rng);
            }
            boxes.push(b);
            continue;
        }
        let anchor = boxes[rng.random_range(0..boxes.len())];
        let target = if rng.random_bool(HEAVY_FRACTION) {
            rng.random_range(0.5..0.7)
        } else {
            (bias + rng.random_range(-0.1..=0.1)).clamp(0.01, MAX_BIAS)
        };
        let (w, h) = sample_size(cfg, rng);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (ax, ay) = anchor.center();
        let (dx, dy) = (angle.cos(), angle.sin());
        let at = |d: f64| fit_inside(cfg, ax + d * dx, ay + d * dy, w, h);
        let crowd = |b: &BBox| boxes.iter().map(|o| iou(o, b)).fold(0.0, f64::max);
        // March outwards to the first offset at or below the target, then bisect.
        let reach = anchor.width() + anchor.height() + w + h;
        let mut prev = 0.0;
        let mut found = reach;
        for i in 0..=RAY_STEPS {
            let d = reach * i as f64 / RAY_STEPS as f64;
            if crowd(&at(d)) <= target {
                found = d;
                break;
            }
            prev = d;
        }
        let (mut lo, mut hi) = (prev, found);
        if crowd(&at(lo)) > target {
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                if crowd(&at(mid)) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo = hi;
        }
        boxes.push(at(lo));
    }
    boxes
}
