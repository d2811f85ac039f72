//! Argument parsing, configuration resolution and report output for the `ddq`
//! binary.
//!
//! A run is described by a [`RunConfig`]. It is resolved from built-in
//! defaults, then an optional JSON config file, then command-line flags, then
//! `--set key=value` overrides, and echoed next to the CSV report as a JSON
//! sidecar. Feeding the sidecar back through `--config` reproduces the report.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use ddq::metrics::{Detection, GroundTruths};
use ddq::simulator::{self, report::SIMULATION_NOTE, DetectorKind, ExperimentReport, Scene, SimConfig};
use ddq::BBox;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "DDQ_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GradientDemo,
    QuerySweep,
    ThresholdSweep,
    Recall,
    TrainToy,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::GradientDemo => "gradient-demo",
            Self::QuerySweep => "query-sweep",
            Self::ThresholdSweep => "threshold-sweep",
            Self::Recall => "recall",
            Self::TrainToy => "train-toy",
            Self::Eval => "eval",
        }
    }

    /// Seeds used when neither the config file nor `--seeds` gives any.
    pub fn default_seeds(self) -> Vec<u64> {
        match self {
            Self::GradientDemo => vec![0],
            Self::QuerySweep | Self::TrainToy => (0..10).collect(),
            Self::ThresholdSweep | Self::Recall | Self::Eval => (0..20).collect(),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inputs of `eval` when scoring files instead of simulated scenes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalInputs {
    /// Scene JSON files; image ids are positions in this list.
    pub scenes: Vec<PathBuf>,
    /// Detections JSON. Without it the simulated detectors are run on the scenes.
    pub detections: Option<PathBuf>,
}

/// A fully resolved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub command: Command,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub sim: SimConfig,
    #[serde(default)]
    pub eval: EvalInputs,
    #[serde(default = "default_note")]
    pub note: String,
    /// Worker threads from `DDQ_THREADS`; not part of the reproducible config.
    #[serde(skip)]
    pub threads: Option<usize>,
}

fn default_note() -> String {
    SIMULATION_NOTE.to_owned()
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command,
            out: PathBuf::from(format!("{}.csv", command.name())),
            seeds: command.default_seeds(),
            sim: SimConfig::crowd_preset(),
            eval: EvalInputs::default(),
            note: default_note(),
            threads: None,
        }
    }

    /// Where the resolved config is written: the report path with `.json` appended.
    pub fn sidecar_path(&self) -> PathBuf {
        let mut s = self.out.clone().into_os_string();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Per-step toy-training curves, next to the report.
    pub fn curve_path(&self) -> PathBuf {
        self.out.with_extension("curve.csv")
    }
}

/// A command-line or configuration problem; the process exits with code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UsageError {
    /// Help or version output requested; not an error, exits 0.
    Info(String),
    Invalid(String),
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Info(s) | Self::Invalid(s) => f.write_str(s),
        }
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError::Invalid(msg.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "ddq",
    version,
    about = "Dense distinct query experiments on simulated crowded scenes"
)]
struct Cli {
    /// Experiment to run.
    command: Command,
    /// JSON config file (a previous run's sidecar works too).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// CSV report path; the resolved config goes to `<out>.json`.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Seed list such as `0..20`, `1..=5` or `3,7,11`.
    #[arg(long, value_name = "LIST")]
    seeds: Option<String>,
    /// Override a config value, e.g. `dqs.thresh=0.8` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Scene JSON to evaluate (eval only, repeatable).
    #[arg(long = "scene", value_name = "FILE")]
    scenes: Vec<PathBuf>,
    /// Detections JSON matching the `--scene` files (eval only).
    #[arg(long, value_name = "FILE")]
    detections: Option<PathBuf>,
}

/// Parses a seed list: comma-separated seeds and ranges `a..b` / `a..=b`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, UsageError> {
    let bad = || usage(format!("invalid seed list '{spec}'"));
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..=") {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            seeds.extend(a..=b);
        } else if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            seeds.extend(a..b);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    if seeds.is_empty() {
        return Err(usage(format!("seed list '{spec}' is empty")));
    }
    Ok(seeds)
}

/// Recursively merges `patch` into `base`; objects merge key by key, anything
/// else is replaced. Keys unknown to `base` are kept so that typed parsing can
/// reject them.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

const TOP_LEVEL_KEYS: [&str; 7] = ["schema_version", "command", "out", "seeds", "sim", "eval", "note"];

/// Applies one `key=value` override. Keys are dotted paths into the simulator
/// config (`dqs.thresh`), or into the run itself when they start with a
/// top-level key (`seeds`, `eval.detections`). Values are JSON, falling back
/// to a plain string.
fn apply_override(root: &mut Value, token: &str) -> Result<(), UsageError> {
    let malformed = |why: &str| usage(format!("malformed override '{token}': {why}"));
    let (key, raw) = token.split_once('=').ok_or_else(|| malformed("expected KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(malformed("empty key"));
    }
    let mut path: Vec<&str> = key.split('.').collect();
    if !TOP_LEVEL_KEYS.contains(&path[0]) {
        path.insert(0, "sim");
    }
    let mut slot = &mut *root;
    for segment in &path {
        slot = match slot {
            Value::Object(map) => map.get_mut(*segment),
            Value::Array(items) => segment.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| malformed(&format!("unknown key '{key}'")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

fn read_json(path: &Path, what: &str) -> Result<Value, UsageError> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} '{}': {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{what} '{}' is not valid JSON: {e}", path.display())))
}

fn check_schema(doc: &Value, path: &Path) -> Result<(), UsageError> {
    match doc.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == SCHEMA_VERSION as u64 => Ok(()),
        Some(v) => Err(usage(format!(
            "'{}' has schema_version {v}, expected {SCHEMA_VERSION}",
            path.display()
        ))),
        None => Err(usage(format!("'{}' lacks a schema_version field", path.display()))),
    }
}

fn threads_from_env() -> Result<Option<usize>, UsageError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

/// Parses `argv` (without the program name) into a validated [`RunConfig`].
pub fn parse_args<I, S>(argv: I) -> Result<RunConfig, UsageError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once(std::ffi::OsString::from("ddq")).chain(argv.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => UsageError::Info(e.to_string()),
        _ => usage(e.to_string().trim_end()),
    })?;

    let mut doc = serde_json::to_value(RunConfig::defaults(cli.command)).expect("config serializes");
    if let Some(path) = &cli.config {
        let file = read_json(path, "config")?;
        check_schema(&file, path)?;
        merge(&mut doc, file);
    }
    let top = doc.as_object_mut().expect("config is an object");
    top.insert(
        "command".into(),
        serde_json::to_value(cli.command).expect("command serializes"),
    );
    if let Some(out) = &cli.out {
        top.insert("out".into(), Value::String(out.to_string_lossy().into_owned()));
    }
    if let Some(spec) = &cli.seeds {
        top.insert(
            "seeds".into(),
            serde_json::to_value(parse_seeds(spec)?).expect("seeds serialize"),
        );
    }
    if !cli.scenes.is_empty() || cli.detections.is_some() {
        let mut eval = Map::new();
        eval.insert(
            "scenes".into(),
            serde_json::to_value(&cli.scenes).expect("paths serialize"),
        );
        eval.insert(
            "detections".into(),
            serde_json::to_value(&cli.detections).expect("path serializes"),
        );
        top.insert("eval".into(), Value::Object(eval));
    }
    for token in &cli.overrides {
        apply_override(&mut doc, token)?;
    }

    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| usage(format!("invalid config: {e}")))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(usage(format!("schema_version must be {SCHEMA_VERSION}")));
    }
    if cfg.seeds.is_empty() {
        return Err(usage("seed list is empty"));
    }
    cfg.sim.validate().map_err(|e| usage(format!("invalid config: {e}")))?;
    for path in cfg.eval.scenes.iter().chain(&cfg.eval.detections) {
        if !path.is_file() {
            return Err(usage(format!("no such file '{}'", path.display())));
        }
    }
    if cfg.eval.detections.is_some() && cfg.eval.scenes.is_empty() {
        return Err(usage("--detections needs the matching --scene files"));
    }
    cfg.threads = threads_from_env()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- file formats

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSize {
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema_version: u32,
    pub image: ImageSize,
    pub objects: Vec<BBox>,
    pub seed: u64,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            image: ImageSize {
                w: s.image_w,
                h: s.image_h,
            },
            objects: s.boxes.clone(),
            seed: s.seed,
        }
    }
}

impl SceneFile {
    pub fn into_scene(self) -> Result<Scene, String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if let Some(b) = self.objects.iter().find(|b| !b.is_valid()) {
            return Err(format!("invalid box {:?}", b.to_array()));
        }
        Ok(Scene {
            image_w: self.image.w,
            image_h: self.image.h,
            boxes: self.objects,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    /// Position of the image in the scene list.
    pub image: u64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    pub schema_version: u32,
    pub detections: Vec<DetectionRecord>,
}

pub fn write_scene(path: &Path, scene: &Scene) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(&SceneFile::from(scene)).expect("scene serializes");
    fs::write(path, text + "\n")
}

pub fn read_scene(path: &Path) -> Result<Scene, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read scene '{}': {e}", path.display()))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| format!("scene '{}': {e}", path.display()))?;
    file.into_scene()
        .map_err(|e| format!("scene '{}': {e}", path.display()))
}

pub fn read_detections(path: &Path, n_images: usize) -> Result<Vec<Detection>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read detections '{}': {e}", path.display()))?;
    let file: DetectionsFile =
        serde_json::from_str(&text).map_err(|e| format!("detections '{}': {e}", path.display()))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(format!("detections '{}': unsupported schema_version", path.display()));
    }
    file.detections
        .iter()
        .map(|d| {
            if d.image as usize >= n_images {
                return Err(format!(
                    "detection refers to image {} but only {n_images} scenes were given",
                    d.image
                ));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(format!("detection score {} outside [0, 1]", d.score));
            }
            let bbox = BBox::new(d.x1, d.y1, d.x2, d.y2).map_err(|e| e.to_string())?;
            Ok(Detection::new(d.image, bbox, d.score))
        })
        .collect()
}

// ---------------------------------------------------------------- running

/// Any failure while running an experiment or writing its output.
#[derive(Debug)]
pub struct RunError(String);

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<ddq::Error> for RunError {
    fn from(e: ddq::Error) -> Self {
        Self(e.to_string())
    }
}

impl From<String> for RunError {
    fn from(e: String) -> Self {
        Self(e)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunError(format!("cannot create '{}': {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| RunError(format!("cannot write '{}': {e}", path.display())))
}

fn eval_files(cfg: &RunConfig) -> Result<ExperimentReport, RunError> {
    let scenes = cfg
        .eval
        .scenes
        .iter()
        .map(|p| read_scene(p))
        .collect::<Result<Vec<_>, _>>()?;
    let gts: GroundTruths = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| (i as u64, s.boxes.clone()))
        .collect();
    let ks = &cfg.sim.recall.ks;
    let mut report = simulator::eval_report_header(ks, &cfg.seeds);
    match &cfg.eval.detections {
        Some(path) => {
            let dets = read_detections(path, scenes.len())?;
            simulator::push_eval_row(&mut report, "detections", &dets, &gts, ks)?;
        }
        None => {
            for kind in DetectorKind::ALL {
                let mut dets = Vec::new();
                for (i, scene) in scenes.iter().enumerate() {
                    dets.extend(simulator::simulated_detections(
                        &cfg.sim, scene, i as u64, i as u64, kind,
                    )?);
                }
                simulator::push_eval_row(&mut report, &kind.label(&cfg.sim), &dets, &gts, ks)?;
            }
        }
    }
    Ok(report)
}

fn execute(cfg: &RunConfig) -> Result<ExperimentReport, RunError> {
    let sim = &cfg.sim;
    let seeds = &cfg.seeds;
    Ok(match cfg.command {
        Command::GradientDemo => simulator::run_gradient_demo(&sim.gradient.p_grid)?,
        Command::QuerySweep => simulator::run_query_sweep(sim, seeds)?,
        Command::ThresholdSweep => simulator::run_threshold_sweep(sim, seeds)?,
        Command::Recall => simulator::run_recall_study(sim, seeds)?,
        Command::TrainToy => {
            let (report, runs) = simulator::run_toy_training(sim, seeds)?;
            write_file(&cfg.curve_path(), &simulator::toy_curves(&runs).to_csv())?;
            report
        }
        Command::Eval if cfg.eval.scenes.is_empty() => simulator::run_simulated_eval(sim, seeds)?,
        Command::Eval => eval_files(cfg)?,
    })
}

/// Runs the experiment and writes the report and its sidecar.
pub fn run_config(cfg: &RunConfig) -> Result<ExperimentReport, RunError> {
    let report = match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| RunError(format!("cannot start {n} worker threads: {e}")))?
            .install(|| execute(cfg))?,
        None => execute(cfg)?,
    };
    write_file(&cfg.out, &report.to_csv())?;
    let sidecar = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_file(&cfg.sidecar_path(), &(sidecar + "\n"))?;
    Ok(report)
}

/// Runs `cfg`, reporting to stderr; returns the process exit code.
pub fn run(cfg: &RunConfig) -> i32 {
    match run_config(cfg) {
        Ok(report) => {
            eprintln!(
                "{}: wrote {} rows to {} ({} seeds)",
                cfg.command,
                report.rows.len(),
                cfg.out.display(),
                cfg.seeds.len()
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Full entry point: parse, run, exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match parse_args(argv) {
        Ok(cfg) => run(&cfg),
        Err(UsageError::Info(text)) => {
            print!("{text}");
            EXIT_OK
        }
        Err(UsageError::Invalid(msg)) => {
            eprintln!("{msg}");
            EXIT_USAGE
        }
    }
}
