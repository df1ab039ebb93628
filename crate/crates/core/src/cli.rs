//! Command implementations behind the `ehoi` binary: config loading with
//! dot-path overrides, output locking, manifests and report emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::annotations::{compute_stats, parse_dataset, resolve_asset, write_dataset, Dataset};
use crate::augval::{filter_directories, AugvalConfig};
use crate::error::{Error, Result};
use crate::matching::MatchConfig;
use crate::metrics::{evaluate, hand_pr_curve, AttrSet, EvalConfig, MetricsReport, RunOutput};
use crate::net::checkpoint;
use crate::net::infer::to_image_predictions;
use crate::net::train::deterministic_mode;
use crate::net::{
    load_samples, run_inference, samples_from_scenes, ContactSource, InferMode, InferOptions, Model, ModelConfig, Regime, Sample, TrainConfig, TrainData,
};
use crate::plot;
use crate::synthgen::{generate_dataset, generate_scenes, SceneConfig};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const LATENCY: &str = "latency.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const PREDICTIONS: &str = "predictions.json";
pub const LOCK: &str = ".lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives scene generation, initialization, batch order and subsets.
    pub seed: u64,
    /// Every artifact of a command goes here.
    pub out_dir: PathBuf,
    pub synth_gen: SynthGenConfig,
    pub aug_validate: AugValidateConfig,
    pub stats: StatsConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub infer: InferSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            synth_gen: SynthGenConfig::default(),
            aug_validate: AugValidateConfig::default(),
            stats: StatsConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            infer: InferSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthGenConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// `scene.seed` is replaced by the run seed.
    pub scene: SceneConfig,
}

impl Default for SynthGenConfig {
    fn default() -> Self {
        SynthGenConfig { n_train: 2000, n_val: 200, n_test: 500, scene: SceneConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugValidateConfig {
    /// Split file describing the original images.
    pub dataset: Option<PathBuf>,
    pub original_dir: Option<PathBuf>,
    pub augmented_dir: Option<PathBuf>,
    pub augval: AugvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub splits: Vec<PathBuf>,
    pub per_split: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { splits: Vec::new(), per_split: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub regime: Regime,
    pub synth: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledCheckpoint {
    pub label: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Several checkpoints compared side by side.
    pub runs: Vec<LabeledCheckpoint>,
    /// Evaluate an existing run output instead of running a model.
    pub predictions: Option<PathBuf>,
    pub infer: InferOptions,
    pub matching: MatchConfig,
    pub metrics: EvalConfig,
    /// Also score the appearance-only contact stream and record the
    /// comparison with the fused one.
    pub compare_contact: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub infer: InferOptions,
    pub matching: MatchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Untrained weights from the run seed when absent.
    pub checkpoint: Option<PathBuf>,
    /// Rendered scenes when absent.
    pub dataset: Option<PathBuf>,
    pub warmup: usize,
    pub frames: usize,
    pub mode: InferMode,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { checkpoint: None, dataset: None, warmup: 5, frames: 50, mode: InferMode::Detector }
    }
}

/// Sets `value` at a dot path, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "empty path segment"));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(Error::config(parts[..i].join("."), "is not an object"));
        }
        let map = cur.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// `--a.b value` or `--a.b=value` pairs; values parse as JSON, falling back to
/// plain strings.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").ok_or_else(|| Error::config(a, "expected an override of the form --key value"))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (key.to_string(), it.next().ok_or_else(|| Error::config(key, "missing value"))?.clone()),
        };
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        out.push((key, value));
    }
    Ok(out)
}

/// Reads the JSON config (or defaults), applies overrides and validates the
/// schema with field-level error paths.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Malformed { path: p.to_path_buf(), message: e.to_string() })?
        }
        None => Value::Object(Default::default()),
    };
    for (k, v) in parse_overrides(overrides)? {
        set_path(&mut root, &k, v)?;
    }
    config_from_value(root)
}

pub fn config_from_value(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let field = e.path().to_string();
        Error::config(if field == "." { String::new() } else { field }, e.into_inner().to_string())
    })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<OutputLock> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileHash { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    pub config: RunConfig,
    pub inputs: Vec<FileHash>,
    pub artifacts: Vec<FileHash>,
    /// Findings worth a reader's attention, such as soft-criterion outcomes.
    pub notes: Vec<String>,
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    SynthGen,
    AugValidate,
    Stats,
    Train,
    Eval,
    Infer,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::AugValidate => "aug-validate",
            Command::Stats => "stats",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Infer => "infer",
            Command::Bench => "bench",
        }
    }
}

/// Runs one command under the output lock and writes its manifest.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome> {
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    let outcome = match cmd {
        Command::SynthGen => cmd_synth_gen(cfg),
        Command::AugValidate => cmd_aug_validate(cfg),
        Command::Stats => cmd_stats(cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Infer => cmd_infer(cfg),
        Command::Bench => cmd_bench(cfg),
    }?;
    let manifest = Manifest {
        command: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        deterministic: deterministic_mode(),
        config: cfg.clone(),
        inputs: outcome.inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
        artifacts: outcome.artifacts.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
        notes: outcome.notes.clone(),
    };
    write_json(&cfg.out_dir.join(MANIFEST), &manifest)?;
    Ok(outcome)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| Error::config(field, "required for this command"))?;
    existing(p)
}

fn existing(p: &Path) -> Result<&Path> {
    if !p.exists() {
        return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "path does not exist")));
    }
    Ok(p)
}

fn load_split(path: &Path) -> Result<(Dataset, Vec<Sample>)> {
    let (ds, warnings) = parse_dataset(path)?;
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    let samples = load_samples(&ds, path)?;
    Ok((ds, samples))
}

pub fn cmd_synth_gen(cfg: &RunConfig) -> Result<Outcome> {
    let s = &cfg.synth_gen;
    let scene = SceneConfig { seed: cfg.seed, ..s.scene.clone() };
    let splits = generate_dataset(&scene, s.n_train, s.n_val, s.n_test, &cfg.out_dir)?;
    let mut out = Outcome::default();
    for d in &splits {
        out.artifacts.push(cfg.out_dir.join(format!("{}.json", d.split.as_deref().unwrap_or("split"))));
    }
    let report = compute_stats(&splits, true);
    out.summary = report.to_string();
    Ok(out)
}

pub fn cmd_aug_validate(cfg: &RunConfig) -> Result<Outcome> {
    let a = &cfg.aug_validate;
    let split = required(&a.dataset, "aug_validate.dataset")?;
    let orig = required(&a.original_dir, "aug_validate.original_dir")?;
    let aug = required(&a.augmented_dir, "aug_validate.augmented_dir")?;
    let (ds, _) = parse_dataset(split)?;
    let (report, mut filtered) = filter_directories(&ds, orig, aug, &a.augval)?;
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    for r in filtered.images.iter_mut() {
        let name = Path::new(&r.rgb_path).file_name().unwrap_or_default().to_owned();
        r.rgb_path = abs(&aug.join(name)).to_string_lossy().into_owned();
        for p in [&mut r.depth_path, &mut r.mask_path].into_iter().flatten() {
            *p = abs(&resolve_asset(split, p)).to_string_lossy().into_owned();
        }
    }
    let report_path = cfg.out_dir.join("aug_report.json");
    write_json(&report_path, &report)?;
    let stem = split.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "split".into());
    let filtered_path = cfg.out_dir.join(format!("{stem}.filtered.json"));
    write_dataset(&filtered_path, &filtered)?;
    let kept = report.kept_ids().len();
    let rate = report.keep_rate.map(|r| format!("{:.2}%", 100.0 * r)).unwrap_or_else(|| "n/a".into());
    Ok(Outcome {
        inputs: vec![split.to_path_buf()],
        artifacts: vec![report_path, filtered_path],
        notes: Vec::new(),
        summary: format!("kept {kept} of {} pairs (keep rate {rate})", report.pairs.len()),
    })
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<Outcome> {
    if cfg.stats.splits.is_empty() {
        return Err(Error::config("stats.splits", "at least one split file is required"));
    }
    let mut splits = Vec::new();
    for p in &cfg.stats.splits {
        existing(p)?;
        splits.push(parse_dataset(p)?.0);
    }
    let report = compute_stats(&splits, cfg.stats.per_split);
    let path = cfg.out_dir.join("stats.json");
    write_json(&path, &report)?;
    Ok(Outcome { inputs: cfg.stats.splits.clone(), artifacts: vec![path], notes: Vec::new(), summary: report.to_string() })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let t = &cfg.train;
    let mut inputs = Vec::new();
    let mut load = |p: &Option<PathBuf>, field: &str| -> Result<Option<Vec<Sample>>> {
        match p {
            None => Ok(None),
            Some(_) => {
                let path = required(p, field)?;
                inputs.push(path.to_path_buf());
                Ok(Some(load_split(path)?.1))
            }
        }
    };
    let synth = load(&t.synth, "train.synth")?;
    let real = load(&t.real, "train.real")?;
    let val = load(&t.val, "train.val")?;
    let data = TrainData { synth: synth.as_deref(), real: real.as_deref(), val: val.as_deref() };

    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut write_err = None;
    let outcome = crate::net::train(&data, t.regime, &t.model, &t.schedule, cfg.seed, &mut |rec| {
        let line = serde_json::to_string(rec).expect("serializable");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    drop(log);

    let ckpt = cfg.out_dir.join(CHECKPOINT);
    let meta = serde_json::json!({ "seed": cfg.seed, "regime": t.regime, "schedule": t.schedule });
    checkpoint::save(&ckpt, &outcome.model, &meta)?;
    let mut artifacts = vec![ckpt, log_path];
    if let (Some(idx), Some(real)) = (&outcome.real_subset, &real) {
        let ids: Vec<&str> = idx.iter().map(|&i| real[i].record.image_id.as_str()).collect();
        let p = cfg.out_dir.join("real_subset.json");
        write_json(&p, &ids)?;
        artifacts.push(p);
    }
    let last = outcome.log.last();
    let summary = match last {
        Some(r) => format!(
            "{} epochs, final loss {:.4}{}",
            outcome.log.len(),
            r.loss.l_total,
            r.val.map(|v| format!("\n{v}")).unwrap_or_default()
        ),
        None => "no epochs run".into(),
    };
    Ok(Outcome { inputs, artifacts, notes: Vec::new(), summary })
}

fn load_model(p: &Path) -> Result<Model> {
    Ok(checkpoint::load(p)?.0)
}

/// Runs inference and evaluation for one model.
pub fn evaluate_model(model: &Model, samples: &[Sample], gt: &Dataset, e: &EvalSection) -> Result<(RunOutput, MetricsReport)> {
    let run = run_inference(model, samples, &e.infer, &e.matching)?;
    let report = evaluate(&run, gt, &e.metrics)?;
    Ok((run, report))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let e = &cfg.eval;
    let split = required(&e.dataset, "eval.dataset")?;
    let mut out = Outcome { inputs: vec![split.to_path_buf()], ..Outcome::default() };
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    let mut curves = Vec::new();

    if let Some(pred) = &e.predictions {
        let pred = existing(pred)?;
        let (gt, _) = parse_dataset(split)?;
        let text = std::fs::read_to_string(pred).map_err(|err| Error::io(pred, err))?;
        let run: RunOutput = serde_json::from_str(&text).map_err(|err| Error::Malformed { path: pred.to_path_buf(), message: err.to_string() })?;
        let report = evaluate(&run, &gt, &e.metrics)?;
        curves.push(("run".to_string(), hand_pr_curve(&run.images, &gt, AttrSet::NONE, &e.metrics)));
        out.inputs.push(pred.to_path_buf());
        reports.push(("run".into(), report));
    } else {
        let mut runs = e.runs.clone();
        if let Some(c) = &e.checkpoint {
            runs.insert(0, LabeledCheckpoint { label: "model".into(), checkpoint: c.clone() });
        }
        if runs.is_empty() {
            return Err(Error::config("eval.checkpoint", "a checkpoint, runs or predictions is required"));
        }
        let (gt, samples) = load_split(split)?;
        for r in &runs {
            let path = existing(&r.checkpoint)?;
            out.inputs.push(path.to_path_buf());
            let model = load_model(path)?;
            let (run, report) = evaluate_model(&model, &samples, &gt, e)?;
            if e.compare_contact {
                let app = EvalSection { infer: InferOptions { contact: ContactSource::Appearance, ..e.infer }, ..e.clone() };
                let (_, app_report) = evaluate_model(&model, &samples, &gt, &app)?;
                let verdict = if report.ap_hand_state >= app_report.ap_hand_state { "PASS" } else { "MISS" };
                out.notes.push(format!(
                    "fusion trend [{}]: fused ap_hand_state {:.2} vs appearance-only {:.2}: {verdict}",
                    r.label, report.ap_hand_state, app_report.ap_hand_state
                ));
            }
            curves.push((r.label.clone(), hand_pr_curve(&run.images, &gt, AttrSet::NONE, &e.metrics)));
            if runs.len() == 1 {
                let p = cfg.out_dir.join(PREDICTIONS);
                write_json(&p, &run)?;
                out.artifacts.push(p);
            }
            reports.push((r.label.clone(), report));
        }
    }

    let metrics_path = cfg.out_dir.join(METRICS);
    if reports.len() == 1 {
        write_json(&metrics_path, &reports[0].1)?;
    } else {
        let map: serde_json::Map<String, Value> = reports.iter().map(|(l, r)| (l.clone(), serde_json::to_value(r).unwrap())).collect();
        write_json(&metrics_path, &map)?;
        let groups: Vec<String> = ["HAND", "SIDE", "GLOVE", "STATE", "OBJ", "ALL"].iter().map(|s| s.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = reports
            .iter()
            .map(|(l, r)| (l.clone(), vec![r.ap_hand, r.ap_hand_side, r.ap_hand_glove, r.ap_hand_state, r.map_hand_obj, r.map_hand_all]))
            .collect();
        let p = cfg.out_dir.join("regime_comparison.png");
        plot::bar_chart(&p, "AP BY RUN", "AP", &groups, &series, 100.0)?;
        out.artifacts.push(p);
    }
    out.artifacts.insert(0, metrics_path);
    let curve_series: Vec<(String, Vec<(f64, f64)>)> = curves.into_iter().map(|(l, pts)| (l, pts)).collect();
    let pr = cfg.out_dir.join("pr_curve.png");
    plot::line_chart(&pr, "HAND PRECISION-RECALL", "RECALL", "PRECISION", &curve_series)?;
    out.artifacts.push(pr);
    out.summary = reports.iter().map(|(l, r)| format!("[{l}]\n{r}")).collect::<Vec<_>>().join("\n");
    for n in &out.notes {
        out.summary.push_str(&format!("\n{n}"));
    }
    Ok(out)
}

/// Per-hand details written next to the run output.
#[derive(Clone, Debug, Serialize)]
struct HandDetail<'a> {
    image_id: &'a str,
    id: u64,
    bbox: [f64; 4],
    confidence: f64,
    p_contact: f64,
    p_contact_appearance: f64,
    p_contact_multimodal: f64,
    offset: [f64; 3],
    keypoints: &'a [[f64; 2]],
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<Outcome> {
    let i = &cfg.infer;
    let split = required(&i.dataset, "infer.dataset")?;
    let ckpt = required(&i.checkpoint, "infer.checkpoint")?;
    let model = load_model(ckpt)?;
    let (_, samples) = load_split(split)?;
    let details_path = cfg.out_dir.join("detections.jsonl");
    let mut details = BufWriter::new(File::create(&details_path).map_err(|e| Error::io(&details_path, e))?);
    let mut images = Vec::with_capacity(samples.len());
    for s in &samples {
        let dets = model.infer(s, &i.infer)?;
        for d in &dets {
            if let Some(h) = &d.hand {
                let o = h.offset;
                let line = HandDetail {
                    image_id: &s.record.image_id,
                    id: d.id,
                    bbox: d.bbox.as_array(),
                    confidence: d.confidence,
                    p_contact: h.p_contact,
                    p_contact_appearance: h.p_contact_appearance,
                    p_contact_multimodal: h.p_contact_multimodal,
                    offset: [o.v_x, o.v_y, o.m],
                    keypoints: &h.keypoints.coords,
                };
                writeln!(details, "{}", serde_json::to_string(&line).unwrap()).map_err(|e| Error::io(&details_path, e))?;
            }
        }
        images.push(to_image_predictions(&s.record.image_id, &dets, s.record.width as f64, s.record.height as f64, &i.matching));
    }
    details.flush().map_err(|e| Error::io(&details_path, e))?;
    drop(details);
    let run = RunOutput { images };
    let p = cfg.out_dir.join(PREDICTIONS);
    write_json(&p, &run)?;
    let n: usize = run.images.iter().map(|i| i.hands.len()).sum();
    Ok(Outcome {
        inputs: vec![split.to_path_buf(), ckpt.to_path_buf()],
        artifacts: vec![p, details_path],
        notes: Vec::new(),
        summary: format!("{} images, {n} hands", run.images.len()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: InferMode,
    pub width: u32,
    pub height: u32,
    pub warmup: usize,
    pub frames: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// `1000 / mean_ms`.
    pub fps: f64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn latency_report(times_ms: &[f64], mode: InferMode, width: u32, height: u32, warmup: usize) -> LatencyReport {
    let mut sorted = times_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len().max(1) as f64;
    LatencyReport {
        mode,
        width,
        height,
        warmup,
        frames: sorted.len(),
        threads: rayon::current_num_threads(),
        mean_ms: mean,
        median_ms: percentile(&sorted, 50.0),
        p90_ms: percentile(&sorted, 90.0),
        p99_ms: percentile(&sorted, 99.0),
        min_ms: sorted.first().copied().unwrap_or(0.0),
        max_ms: sorted.last().copied().unwrap_or(0.0),
        fps: if mean > 0.0 { 1000.0 / mean } else { 0.0 },
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Outcome> {
    let b = &cfg.bench;
    if b.frames == 0 {
        return Err(Error::config("bench.frames", "must be positive"));
    }
    let mut inputs = Vec::new();
    let model = match &b.checkpoint {
        Some(_) => {
            let p = required(&b.checkpoint, "bench.checkpoint")?;
            inputs.push(p.to_path_buf());
            load_model(p)?
        }
        None => Model::new(ModelConfig::default(), cfg.seed)?,
    };
    let samples = match &b.dataset {
        Some(_) => {
            let p = required(&b.dataset, "bench.dataset")?;
            inputs.push(p.to_path_buf());
            load_split(p)?.1
        }
        None => {
            let scene = SceneConfig { seed: cfg.seed, ..SceneConfig::default() };
            samples_from_scenes(&generate_scenes(&scene, 0..(b.frames + b.warmup).min(64) as u64)?)
        }
    };
    if samples.is_empty() {
        return Err(Error::config("bench.dataset", "contains no images"));
    }
    let opts = InferOptions { mode: b.mode, ..InferOptions::default() };
    let mut times = Vec::with_capacity(b.frames);
    for k in 0..b.warmup + b.frames {
        let s = &samples[k % samples.len()];
        let t0 = Instant::now();
        let dets = model.infer(s, &opts)?;
        let _ = to_image_predictions(&s.record.image_id, &dets, s.record.width as f64, s.record.height as f64, &MatchConfig::default());
        let ms = t0.elapsed().as_secs_f64() * 1000.0;
        if k >= b.warmup {
            times.push(ms);
        }
    }
    let (w, h) = (samples[0].record.width, samples[0].record.height);
    let report = latency_report(&times, b.mode, w, h, b.warmup);
    let p = cfg.out_dir.join(LATENCY);
    write_json(&p, &report)?;
    Ok(Outcome {
        inputs,
        artifacts: vec![p],
        notes: Vec::new(),
        summary: format!("{:.2} ms/frame (median {:.2}, p90 {:.2}), {:.2} FPS over {} frames", report.mean_ms, report.median_ms, report.p90_ms, report.fps, report.frames),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_at_dot_paths() {
        let args: Vec<String> = ["--seed", "7", "--train.schedule.batch_size=4", "--train.regime", "real_only", "--out_dir", "x/y"].iter().map(|s| s.to_string()).collect();
        let cfg = load_config(None, &args).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.schedule.batch_size, 4);
        assert_eq!(cfg.train.regime, Regime::RealOnly);
        assert_eq!(cfg.out_dir, PathBuf::from("x/y"));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let args: Vec<String> = ["--train.schedule.batch_sise", "4"].iter().map(|s| s.to_string()).collect();
        match load_config(None, &args) {
            Err(Error::Config { field, .. }) => assert!(field.starts_with("train.schedule"), "{field}"),
            other => panic!("{other:?}"),
        }
        let args: Vec<String> = ["--seed", "\"abc\""].iter().map(|s| s.to_string()).collect();
        assert!(matches!(load_config(None, &args), Err(Error::Config { field, .. }) if field == "seed"));
        assert!(matches!(parse_overrides(&["--seed".to_string()]), Err(Error::Config { .. })));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        let err = OutputLock::acquire(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        drop(a);
        OutputLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn fps_is_reciprocal_of_mean() {
        let r = latency_report(&[10.0, 20.0, 30.0, 40.0], InferMode::Detector, 96, 96, 0);
        assert_eq!(r.mean_ms, 25.0);
        assert_eq!(r.fps, 1000.0 / 25.0);
        assert_eq!(r.median_ms, 20.0);
        assert_eq!(r.max_ms, 40.0);
    }
}
