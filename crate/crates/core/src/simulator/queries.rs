//! Query generators driven by an explicit noise model.
//!
//! A query anchored at a site predicts the ground truth that owns it, with
//! a jitter that grows with the anchor's distance from that object and with the
//! mismatch between object size and the level's stride. Its score is the IoU of
//! the prediction with the object plus Gaussian noise. The jitter and score
//! noise of anchors that predict the same object on the same level are mixed
//! from a shared draw with weight `rho`, so `rho = 1` makes neighbouring anchors
//! emit near-identical predictions.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::{substream, Purpose};
use super::scene::{Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::pyramid::{AnchorSite, PyramidLayout, DEFAULT_STRIDES};
use crate::selection::{Query, QuerySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryNoiseModel {
    /// Base box jitter as a fraction of object size.
    pub box_sigma: f64,
    /// Jitter growth per object-size unit of anchor distance.
    pub distance_gain: f64,
    /// Jitter growth per octave of scale mismatch between object and level.
    pub scale_gain: f64,
    pub score_sigma: f64,
    /// Weight of the per-object shared noise draw, in `[0, 1]`.
    pub rho: f64,
}

impl Default for QueryNoiseModel {
    fn default() -> Self {
        Self {
            box_sigma: 0.04,
            distance_gain: 0.6,
            scale_gain: 0.5,
            score_sigma: 0.05,
            rho: 1.0,
        }
    }
}

impl QueryNoiseModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.box_sigma, self.distance_gain, self.scale_gain, self.score_sigma];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("noise: sigmas and gains must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("noise: rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }

    pub fn noiseless() -> Self {
        Self {
            box_sigma: 0.0,
            score_sigma: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub strides: Vec<u32>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            strides: DEFAULT_STRIDES.to_vec(),
        }
    }
}

/// Simulator-side facts about one query, aligned with the query set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOrigin {
    /// Ground truth the query predicts (highest IoU for scene-independent boxes).
    pub gt: Option<usize>,
    /// Anchor distance to the object center over object size.
    pub distance: f64,
    /// Octaves between object size and the level's nominal size.
    pub scale_mismatch: f64,
    /// Score before clamping.
    pub raw_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimQueries {
    pub set: QuerySet,
    pub origins: Vec<QueryOrigin>,
}

impl SimQueries {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

fn side(b: &BBox) -> f64 {
    b.area().sqrt().max(1e-9)
}

/// Octaves between an object of `size` pixels and the nominal size `4 * stride`.
fn scale_mismatch(size: f64, stride: u32) -> f64 {
    (size / (4.0 * stride as f64)).log2().abs()
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn mix(rho: f64, shared: f64, own: f64) -> f64 {
    rho.sqrt() * shared + (1.0 - rho).sqrt() * own
}

/// Per (object, level) shared draws: box (dx, dy, dw, dh) and score.
struct SharedNoise {
    levels: usize,
    draws: Vec<[f64; 5]>,
}

impl SharedNoise {
    fn new(scene: &Scene, levels: usize, seed: u64, index: u64) -> Self {
        let mut rng = substream(seed, index, Purpose::SharedNoise);
        let draws = (0..scene.boxes.len() * levels)
            .map(|_| std::array::from_fn(|_| normal(&mut rng)))
            .collect();
        Self { levels, draws }
    }

    fn get(&self, gt: usize, level: usize) -> &[f64; 5] {
        &self.draws[gt * self.levels + level.min(self.levels - 1)]
    }
}

/// The object an anchor predicts: the smallest one containing it, otherwise the
/// nearest by center distance in units of object side. Returns that distance too.
fn owner_gt(scene: &Scene, x: f64, y: f64) -> Option<(usize, f64)> {
    let distance = |b: &BBox| {
        let (cx, cy) = b.center();
        (x - cx).hypot(y - cy) / side(b)
    };
    let containing = scene
        .boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.contains_point(x, y))
        .min_by(|a, b| a.1.area().total_cmp(&b.1.area()).then(a.0.cmp(&b.0)));
    if let Some((g, b)) = containing {
        return Some((g, distance(b)));
    }
    scene
        .boxes
        .iter()
        .enumerate()
        .map(|(g, b)| (g, distance(b)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

fn clip_to_image(b: BBox, w: u32, h: u32) -> BBox {
    let (w, h) = (w as f64, h as f64);
    let x1 = b.x1.clamp(0.0, w);
    let y1 = b.y1.clamp(0.0, h);
    BBox {
        x1,
        y1,
        x2: b.x2.clamp(x1, w),
        y2: b.y2.clamp(y1, h),
    }
}

/// One query per anchor site. Anchors with no object in the scene predict an
/// empty box at the anchor with score 0.
pub fn anchor_queries(
    scene: &Scene,
    sites: &[AnchorSite],
    levels: usize,
    noise: &QueryNoiseModel,
    seed: u64,
    index: u64,
) -> Result<SimQueries> {
    noise.validate()?;
    let shared = SharedNoise::new(scene, levels.max(1), seed, index);
    let mut rng = substream(seed, index, Purpose::AnchorNoise);
    let mut queries = Vec::with_capacity(sites.len());
    let mut origins = Vec::with_capacity(sites.len());
    for (i, site) in sites.iter().enumerate() {
        let own: [f64; 5] = std::array::from_fn(|_| normal(&mut rng));
        let Some((g, distance)) = owner_gt(scene, site.x, site.y) else {
            let b = BBox {
                x1: site.x,
                y1: site.y,
                x2: site.x,
                y2: site.y,
            };
            queries.push(Query::new(i as u64, b, 0.0, site.level));
            origins.push(QueryOrigin {
                gt: None,
                distance: f64::INFINITY,
                scale_mismatch: 0.0,
                raw_score: 0.0,
            });
            continue;
        };
        let gt = scene.boxes[g];
        let mismatch = scale_mismatch(side(&gt), site.stride);
        let sigma = noise.box_sigma * (1.0 + noise.distance_gain * distance + noise.scale_gain * mismatch);
        let s = shared.get(g, site.level);
        let e: [f64; 5] = std::array::from_fn(|k| mix(noise.rho, s[k], own[k]));
        let (cx, cy) = gt.center();
        let (w, h) = (gt.width(), gt.height());
        let pred = BBox::from_center(
            cx + e[0] * sigma * w,
            cy + e[1] * sigma * h,
            w * (e[2] * sigma).exp(),
            h * (e[3] * sigma).exp(),
        )?;
        let pred = clip_to_image(pred, scene.image_w, scene.image_h);
        let raw = iou(&pred, &gt) + noise.score_sigma * e[4];
        queries.push(Query::new(i as u64, pred, raw.clamp(0.0, 1.0), site.level));
        origins.push(QueryOrigin {
            gt: Some(g),
            distance,
            scale_mismatch: mismatch,
            raw_score: raw,
        });
    }
    Ok(SimQueries {
        set: QuerySet::new(queries)?,
        origins,
    })
}

/// One query per feature point of the pyramid laid over the scene.
pub fn generate_dense_queries(
    scene: &Scene,
    pyramid: &PyramidConfig,
    noise: &QueryNoiseModel,
    index: u64,
) -> Result<SimQueries> {
    let layout = PyramidLayout::for_image(scene.image_w, scene.image_h, &pyramid.strides)?;
    let anchors = layout.anchors();
    anchor_queries(scene, &anchors.sites, layout.levels.len(), noise, scene.seed, index)
}

/// `n` anchors at uniform positions, each on a level drawn with the pyramid's
/// density (a level with stride `s` has weight `1 / s^2`). Draws are sequential,
/// so the first `m` anchors of a larger sample are exactly the sample of size `m`.
pub fn sampled_anchor_sites(scene: &Scene, pyramid: &PyramidConfig, n: usize, index: u64) -> Vec<AnchorSite> {
    let mut rng = substream(scene.seed, index, Purpose::SampledAnchors);
    let weights: Vec<f64> = pyramid.strides.iter().map(|&s| 1.0 / (s as f64 * s as f64)).collect();
    let total: f64 = weights.iter().sum();
    (0..n)
        .map(|i| {
            let x = rng.random_range(0.0..scene.image_w as f64);
            let y = rng.random_range(0.0..scene.image_h as f64);
            let mut u = rng.random_range(0.0..total);
            let mut level = weights.len() - 1;
            for (l, w) in weights.iter().enumerate() {
                if u < *w {
                    level = l;
                    break;
                }
                u -= w;
            }
            AnchorSite {
                x,
                y,
                level,
                stride: pyramid.strides[level],
                index: i,
            }
        })
        .collect()
}

/// Queries at `n` scene-independent anchor positions (see [`sampled_anchor_sites`]).
pub fn generate_sampled_queries(
    scene: &Scene,
    pyramid: &PyramidConfig,
    n: usize,
    noise: &QueryNoiseModel,
    index: u64,
) -> Result<SimQueries> {
    let sites = sampled_anchor_sites(scene, pyramid, n, index);
    anchor_queries(scene, &sites, pyramid.strides.len(), noise, scene.seed, index)
}

/// `n` boxes from a scene-independent prior: uniform centers and the scene's size
/// distribution. Each is scored by IoU with its best-overlapping object plus noise.
pub fn generate_sparse_queries(
    scene: &Scene,
    size_prior: &SceneConfig,
    n: usize,
    noise: &QueryNoiseModel,
    index: u64,
) -> Result<SimQueries> {
    if n == 0 {
        return Err(Error::Config("sparse query count must be at least 1".into()));
    }
    noise.validate()?;
    let mut rng = substream(scene.seed, index, Purpose::SparseQueries);
    let mut queries = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    let (iw, ih) = (scene.image_w as f64, scene.image_h as f64);
    for i in 0..n {
        let s = (rng.random_range(size_prior.min_side.ln()..=size_prior.max_side.ln())).exp();
        let aspect = rng.random_range(size_prior.min_aspect..=size_prior.max_aspect);
        let (w, h) = ((s / aspect.sqrt()).min(iw), (s * aspect.sqrt()).min(ih));
        let cx = rng.random_range(0.5 * w..=iw - 0.5 * w);
        let cy = rng.random_range(0.5 * h..=ih - 0.5 * h);
        let b = BBox::from_center(cx, cy, w, h)?;
        let best = scene
            .boxes
            .iter()
            .enumerate()
            .map(|(g, gt)| (g, iou(&b, gt)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let overlap = best.map_or(0.0, |(_, v)| v);
        let raw = overlap + noise.score_sigma * normal(&mut rng);
        queries.push(Query::new(i as u64, b, raw.clamp(0.0, 1.0), 0));
        origins.push(QueryOrigin {
            gt: best.map(|(g, _)| g),
            distance: best.map_or(f64::INFINITY, |(g, _)| {
                let (ax, ay) = scene.boxes[g].center();
                (cx - ax).hypot(cy - ay) / side(&scene.boxes[g])
            }),
            scale_mismatch: 0.0,
            raw_score: raw,
        });
    }
    Ok(SimQueries {
        set: QuerySet::new(queries)?,
        origins,
    })
}
