use thiserror::Error;

/// Errors raised by the library. Messages carry the originating module as a prefix.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("geometry: invalid box [{x1}, {y1}, {x2}, {y2}]")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("geometry: GIoU undefined for two degenerate boxes")]
    UndefinedGeometry,

    #[error("pyramid: {0}")]
    Pyramid(String),

    #[error("pyramid: resize target {height}x{width} is empty")]
    EmptyResize { height: usize, width: usize },

    #[error("pyramid: shuffle needs 2*S <= C, got S = {shuffle} with C = {channels}")]
    ShuffleSpec { shuffle: usize, channels: usize },

    #[error("selection: {0}")]
    Selection(String),

    #[error("assignment: {queries} queries cannot cover {ground_truths} ground truths")]
    Infeasible { ground_truths: usize, queries: usize },

    #[error("assignment: query {query_id} has no score for class {class}")]
    MissingClassScore { query_id: u64, class: usize },

    #[error("assignment: {0}")]
    Assignment(String),

    #[error("losses: probability {0} outside (0, 1)")]
    Domain(f64),

    #[error("metrics: {0}")]
    UndefinedMetric(String),

    #[error("simulator: {0}")]
    Generation(String),

    #[error("simulator: training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("simulator: gradient check failed for seed {seed} (relative error {rel_err:e})")]
    GradientCheck { seed: u64, rel_err: f64 },

    #[error("simulator: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
