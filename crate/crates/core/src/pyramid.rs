//! Feature pyramids, bilinear resampling, pyramid shuffle and dense query sites.
//!
//! A pyramid is an ordered list of levels with strictly increasing strides. Each
//! level stores an `H x W x C` array; all levels share `C`.
//!
//! Pyramid shuffle moves `S` channels between adjacent levels. The slot layout is
//! fixed:
//!
//! * interior level `i`: channels `[0, S)` come from level `i - 1` (its `[0, S)`),
//!   channels `[S, 2S)` come from level `i + 1` (its `[S, 2S)`);
//! * an edge level has a single neighbour and exchanges only the `[0, S)` block
//!   with that neighbour's `[0, S)` block, leaving `[S, 2S)` as its own.
//!
//! All reads see the pre-shuffle pyramid, and neighbour channels are resized to the
//! receiving level with half-pixel (align-corners-false) bilinear sampling.

use ndarray::{s, Array3, ArrayView3};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// FCOS-style P3 to P7 strides.
pub const DEFAULT_STRIDES: [u32; 5] = [8, 16, 32, 64, 128];

/// Channels exchanged per neighbour direction in the reference detector.
pub const DEFAULT_SHUFFLE_CHANNELS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub stride: u32,
    /// `height x width x channels`.
    pub data: Array3<f64>,
}

impl Level {
    pub fn new(stride: u32, data: Array3<f64>) -> Self {
        Self { stride, data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Level>,
}

impl FeaturePyramid {
    /// Validates shared channel count, increasing strides and stride-consistent sizes.
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Pyramid("pyramid has no levels".into()))?;
        let channels = first.channels();
        if channels == 0 {
            return Err(Error::Pyramid("channel count must be positive".into()));
        }
        let img_h = first.height() as u64 * first.stride as u64;
        let img_w = first.width() as u64 * first.stride as u64;
        for (i, level) in levels.iter().enumerate() {
            if level.stride == 0 {
                return Err(Error::Pyramid(format!("level {i} has stride 0")));
            }
            if level.height() == 0 || level.width() == 0 {
                return Err(Error::Pyramid(format!("level {i} is empty")));
            }
            if level.channels() != channels {
                return Err(Error::Pyramid(format!(
                    "level {i} has {} channels, expected {channels}",
                    level.channels()
                )));
            }
            if i > 0 && level.stride <= levels[i - 1].stride {
                return Err(Error::Pyramid(format!(
                    "strides must increase: level {i} has {} after {}",
                    level.stride,
                    levels[i - 1].stride
                )));
            }
            let s = level.stride as u64;
            let (eh, ew) = (img_h.div_ceil(s), img_w.div_ceil(s));
            if (level.height() as u64).abs_diff(eh) > 1 || (level.width() as u64).abs_diff(ew) > 1 {
                return Err(Error::Pyramid(format!(
                    "level {i} is {}x{}, expected about {eh}x{ew} for stride {s}",
                    level.height(),
                    level.width()
                )));
            }
        }
        Ok(Self { levels })
    }

    /// A zero-filled pyramid laid out for an image of the given size.
    pub fn zeros(layout: &PyramidLayout, channels: usize) -> Result<Self> {
        Self::new(
            layout
                .levels
                .iter()
                .map(|l| Level::new(l.stride, Array3::zeros((l.height, l.width, channels))))
                .collect(),
        )
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn layout(&self) -> Vec<LevelShape> {
        self.levels
            .iter()
            .map(|l| LevelShape {
                stride: l.stride,
                height: l.height(),
                width: l.width(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelShape {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
}

/// Spatial layout of a pyramid without feature data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidLayout {
    pub levels: Vec<LevelShape>,
}

impl PyramidLayout {
    /// Level sizes `ceil(image / stride)` for each stride.
    pub fn for_image(image_w: u32, image_h: u32, strides: &[u32]) -> Result<Self> {
        if image_w == 0 || image_h == 0 {
            return Err(Error::Pyramid("image size must be positive".into()));
        }
        if strides.is_empty() {
            return Err(Error::Pyramid("no strides given".into()));
        }
        if strides.contains(&0) || strides.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Pyramid(format!(
                "strides {strides:?} must be positive and increasing"
            )));
        }
        Ok(Self {
            levels: strides
                .iter()
                .map(|&s| LevelShape {
                    stride: s,
                    height: image_h.div_ceil(s) as usize,
                    width: image_w.div_ceil(s) as usize,
                })
                .collect(),
        })
    }

    pub fn num_sites(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }

    pub fn anchors(&self) -> AnchorQueryInit {
        anchors_for(&self.levels)
    }
}

/// Channels moved per neighbour direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleSpec {
    pub channels: usize,
}

impl ShuffleSpec {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }

    pub fn validate(&self, pyramid_channels: usize) -> Result<()> {
        if 2 * self.channels > pyramid_channels {
            Err(Error::ShuffleSpec {
                shuffle: self.channels,
                channels: pyramid_channels,
            })
        } else {
            Ok(())
        }
    }
}

impl Default for ShuffleSpec {
    fn default() -> Self {
        Self::new(DEFAULT_SHUFFLE_CHANNELS)
    }
}

/// One dense query site: a feature point and its anchor in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorSite {
    pub x: f64,
    pub y: f64,
    pub level: usize,
    pub stride: u32,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorQueryInit {
    pub sites: Vec<AnchorSite>,
}

impl AnchorQueryInit {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

fn anchors_for(levels: &[LevelShape]) -> AnchorQueryInit {
    let mut sites = Vec::with_capacity(levels.iter().map(|l| l.height * l.width).sum());
    for (li, l) in levels.iter().enumerate() {
        let stride = l.stride as f64;
        for row in 0..l.height {
            for col in 0..l.width {
                sites.push(AnchorSite {
                    x: (col as f64 + 0.5) * stride,
                    y: (row as f64 + 0.5) * stride,
                    level: li,
                    stride: l.stride,
                    index: sites.len(),
                });
            }
        }
    }
    AnchorQueryInit { sites }
}

/// One query site per feature point: levels in order, row-major inside a level.
pub fn dense_query_init(p: &FeaturePyramid) -> AnchorQueryInit {
    anchors_for(&p.layout())
}

/// Half-pixel bilinear resampling of an `H x W x k` array.
pub fn bilinear_resize(src: ArrayView3<'_, f64>, target_h: usize, target_w: usize) -> Result<Array3<f64>> {
    let (h, w, k) = src.dim();
    if target_h == 0 || target_w == 0 {
        return Err(Error::EmptyResize {
            height: target_h,
            width: target_w,
        });
    }
    if h == 0 || w == 0 || k == 0 {
        return Err(Error::Pyramid(format!("cannot resize an empty {h}x{w}x{k} array")));
    }
    if (h, w) == (target_h, target_w) {
        return Ok(src.to_owned());
    }
    let ys: Vec<_> = (0..target_h).map(|i| sample_coord(i, h, target_h)).collect();
    let xs: Vec<_> = (0..target_w).map(|j| sample_coord(j, w, target_w)).collect();
    let mut out = Array3::zeros((target_h, target_w, k));
    for (i, &(y0, y1, ay)) in ys.iter().enumerate() {
        for (j, &(x0, x1, ax)) in xs.iter().enumerate() {
            for c in 0..k {
                // Lerp form keeps constant inputs exact.
                let top = lerp(src[[y0, x0, c]], src[[y0, x1, c]], ax);
                let bottom = lerp(src[[y1, x0, c]], src[[y1, x1, c]], ax);
                out[[i, j, c]] = lerp(top, bottom, ay);
            }
        }
    }
    Ok(out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Source indices and weight for output index `i` when mapping `n_in` cells to `n_out`.
fn sample_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    let t = if hi == lo { 0.0 } else { src - lo as f64 };
    (lo, hi, t)
}

/// Exchanges `spec.channels` channels between adjacent levels (see module docs).
pub fn pyramid_shuffle(p: &FeaturePyramid, spec: &ShuffleSpec) -> Result<FeaturePyramid> {
    spec.validate(p.channels())?;
    let s = spec.channels;
    if s == 0 || p.levels.len() == 1 {
        return Ok(p.clone());
    }
    let n = p.levels.len();
    let levels = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Level> {
            let own = &p.levels[i];
            let mut data = own.data.clone();
            let (h, w) = (own.height(), own.width());
            let below = i.checked_sub(1).map(|b| &p.levels[b]);
            let above = p.levels.get(i + 1);
            match (below, above) {
                (Some(b), Some(a)) => {
                    let from_below = bilinear_resize(b.data.slice(s![.., .., 0..s]), h, w)?;
                    let from_above = bilinear_resize(a.data.slice(s![.., .., s..2 * s]), h, w)?;
                    data.slice_mut(s![.., .., 0..s]).assign(&from_below);
                    data.slice_mut(s![.., .., s..2 * s]).assign(&from_above);
                }
                (Some(only), None) | (None, Some(only)) => {
                    let moved = bilinear_resize(only.data.slice(s![.., .., 0..s]), h, w)?;
                    data.slice_mut(s![.., .., 0..s]).assign(&moved);
                }
                (None, None) => {}
            }
            Ok(Level::new(own.stride, data))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid { levels })
}
