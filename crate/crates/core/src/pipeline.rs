//! End-to-end commands: generate data, train, evaluate and visualize.
//!
//! Each command reads a [`RunConfig`] and owns its output location. Outputs
//! depend only on the config and input files, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorConfig};
use crate::iterdet::{infer, IterConfig, IterMode, IterResult};
use crate::metrics::{crowding_stats, pr_curve, CrowdingStats, EvalSample, MetricsReport, ReportTable, CROWDING_THRESHOLDS};
use crate::nn::Checkpoint;
use crate::synthetic::{generate_range, load_split, read_png, save_split, SceneSample, SceneSpec};
use crate::train::{TrainConfig, Trainer};
use crate::viz::render_svg;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 2000, n_val: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            checkpoint: "model.ckpt.json".into(),
            eval_dir: "eval".into(),
        }
    }
}

/// Everything a run needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub scene: SceneSpec,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub iter: IterConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            scene: SceneSpec::default(),
            detector: DetectorConfig::default(),
            iter: IterConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.scene.validate()?;
        self.detector.validate()?;
        self.iter.validate()?;
        self.train.validate()?;
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return Err(Error::Config("data: n_train and n_val must be positive".into()));
        }
        Ok(())
    }

    /// One seed for scene generation, weight init and training order.
    pub fn set_seed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.detector.init_seed = seed;
        self.train.seed = seed;
    }
}

/// Parses `"2"`, `"1,2,3"` or `"1..3"` (inclusive) into iteration counts.
pub fn parse_iterations(text: &str) -> Result<Vec<u32>> {
    let bad = || Error::Config(format!("invalid iteration list {text:?}"));
    let num = |s: &str| s.trim().parse::<u32>().ok().filter(|&m| m > 0).ok_or_else(bad);
    let list = if let Some((a, b)) = text.split_once("..") {
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<u32>>>()?
    };
    Ok(list)
}

/// Parses a CLI mode name.
pub fn parse_mode(text: &str) -> Result<IterMode> {
    match text {
        "standard" => Ok(IterMode::Standard),
        "one-per-iter" | "one-per-iteration" | "one_per_iteration" => Ok(IterMode::OnePerIteration),
        other => Err(Error::Config(format!("unknown mode {other:?} (standard | one-per-iter)"))),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Crowding statistics for both splits of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train: CrowdingStats,
    pub val: CrowdingStats,
}

impl DatasetStats {
    pub fn to_text(&self) -> String {
        format!("train\n{}val\n{}", self.train.to_text(), self.val.to_text())
    }
}

fn stats_of(samples: &[SceneSample]) -> CrowdingStats {
    crowding_stats(samples.iter().map(|s| s.boxes.as_slice()), &CROWDING_THRESHOLDS)
}

/// Scenes `first..first + n`, split across `threads` workers. The result
/// does not depend on the thread count.
fn generate_parallel(spec: &SceneSpec, first: u64, n: usize, threads: usize) -> Vec<SceneSample> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return generate_range(spec, spec.seed, first, n);
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let len = chunk.min(n - start);
                s.spawn(move || generate_range(spec, spec.seed, first + start as u64, len))
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread panicked")).collect()
    })
}

/// Writes `train/` and `val/` under `out_dir` plus `crowding.json` and
/// `crowding.txt`. Train uses scene indices `0..n_train`, val the next
/// `n_val`.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path, threads: usize) -> Result<DatasetStats> {
    cfg.validate()?;
    let train = generate_parallel(&cfg.scene, 0, cfg.data.n_train, threads);
    let val = generate_parallel(&cfg.scene, cfg.data.n_train as u64, cfg.data.n_val, threads);
    for (name, split) in [("train", &train), ("val", &val)] {
        let dir = out_dir.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        save_split(split, &dir)?;
    }
    let stats = DatasetStats {
        train: stats_of(&train),
        val: stats_of(&val),
    };
    write_file(&out_dir.join("crowding.json"), &serde_json::to_string_pretty(&stats).expect("stats serialize"))?;
    write_file(&out_dir.join("crowding.txt"), &stats.to_text())?;
    Ok(stats)
}

/// Fails unless the checkpoint's architecture matches `cfg`. Inference
/// thresholds may differ and are taken from `cfg`.
pub fn check_compatible(stored: &DetectorConfig, cfg: &DetectorConfig) -> Result<()> {
    let arch = |c: &DetectorConfig| {
        [
            c.stem_channels,
            c.trunk_depth,
            c.stem_kernel,
            c.stem_stride,
            c.history_kernel,
            c.history_stride,
            c.head_stride,
        ]
    };
    if arch(stored) != arch(cfg) {
        return Err(Error::Config(format!(
            "checkpoint/config mismatch: checkpoint architecture {:?}, config {:?} \
             (stem_channels, trunk_depth, stem_kernel, stem_stride, history_kernel, history_stride, head_stride)",
            arch(stored),
            arch(cfg)
        )));
    }
    Ok(())
}

/// Loads a checkpoint as a detector using `cfg`'s inference thresholds.
pub fn load_detector(cfg: &RunConfig, ckpt_path: &Path) -> Result<Detector> {
    let mut det = Detector::from_checkpoint(&Checkpoint::load(ckpt_path)?)?;
    check_compatible(&det.config, &cfg.detector)?;
    det.config.score_threshold = cfg.detector.score_threshold;
    det.config.nms_iou = cfg.detector.nms_iou;
    Ok(det)
}

/// Path of the per-epoch loss log written next to a checkpoint.
pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let name = ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".json").unwrap_or(&name);
    ckpt.with_file_name(format!("{stem}.loss.csv"))
}

fn read_loss_rows(path: &Path, keep: u32) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else { return Vec::new() };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<u32>().ok()).is_some_and(|e| e <= keep))
        .map(str::to_string)
        .collect()
}

/// Trains on `data_dir/train` until `cfg.train.epochs` epochs are done,
/// checkpointing to `ckpt_out` after every epoch. With `resume`, training
/// continues from that checkpoint's weights, moments and epoch count.
/// Returns the mean loss of each epoch run in this call.
pub fn train(cfg: &RunConfig, data_dir: &Path, ckpt_out: &Path, resume: Option<&Path>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let scenes = load_split(&data_dir.join("train"))?;
    if scenes.is_empty() {
        return Err(Error::data(data_dir.join("train"), "no training scenes"));
    }
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(path)?, Some(cfg.train.clone()))?;
            check_compatible(&t.detector.config, &cfg.detector)?;
            t
        }
        None => Trainer::new(cfg.detector.clone(), cfg.train.clone())?,
    };
    let csv_path = loss_csv_path(ckpt_out);
    let mut rows = if resume.is_some() {
        read_loss_rows(&csv_path, trainer.epochs_completed)
    } else {
        Vec::new()
    };
    let mut losses = Vec::new();
    while trainer.epochs_completed < cfg.train.epochs {
        let loss = trainer.train_epoch(&scenes)?;
        log::info!("epoch {} loss {loss:.6}", trainer.epochs_completed);
        rows.push(format!("{},{loss:.12}", trainer.epochs_completed));
        losses.push(loss);
        let ckpt = trainer.to_checkpoint();
        if let Some(dir) = ckpt_out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        ckpt.save(ckpt_out)?;
        write_file(&csv_path, &format!("epoch,loss\n{}\n", rows.join("\n")))?;
    }
    if losses.is_empty() && !ckpt_out.exists() {
        trainer.to_checkpoint().save(ckpt_out)?;
    }
    Ok(losses)
}

/// Runs inference on every scene and pairs detections (clipped to the
/// image) with ground truth.
pub fn detect_all(detector: &Detector, scenes: &[SceneSample], iter: &IterConfig) -> Result<Vec<EvalSample>> {
    scenes
        .iter()
        .map(|s| {
            let r = infer(&s.image, detector, iter)?;
            Ok(EvalSample::new(r.boxes, s.boxes.clone()).clip_detections(s.width(), s.height()))
        })
        .collect()
}

/// Label of an evaluation row.
pub fn row_label(mode: IterMode, m: u32) -> String {
    match mode {
        IterMode::Standard => format!("iterdet m={m}"),
        IterMode::OnePerIteration => "iterdet one-per-iter".to_string(),
    }
}

/// Evaluates on `data_dir/val` and writes `report.json`, `report.txt`,
/// `pr.csv` (for the last row) and, when several iteration counts are
/// given, `iterations.csv`.
///
/// In standard mode one pass with the largest `m` is truncated to each
/// requested count, which equals running each count separately. The
/// one-per-iteration mode ignores `iterations` and yields a single row.
pub fn evaluate(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, out_dir: &Path, iterations: &[u32]) -> Result<ReportTable> {
    cfg.validate()?;
    let detector = load_detector(cfg, ckpt)?;
    let scenes = load_split(&data_dir.join("val"))?;
    let mode = cfg.iter.mode;
    let iterations: Vec<u32> = match mode {
        IterMode::OnePerIteration => vec![cfg.iter.max_iterations],
        IterMode::Standard if iterations.is_empty() => vec![cfg.iter.max_iterations],
        IterMode::Standard => iterations.to_vec(),
    };
    let max_m = iterations.iter().copied().max().unwrap_or(1);
    let iter_cfg = IterConfig { max_iterations: max_m, ..cfg.iter.clone() };
    let samples = detect_all(&detector, &scenes, &iter_cfg)?;

    let mut table = ReportTable::default();
    let mut last = Vec::new();
    for &m in &iterations {
        let subset: Vec<EvalSample> = match mode {
            IterMode::Standard => samples.iter().map(|s| s.up_to_iteration(m)).collect(),
            IterMode::OnePerIteration => samples.clone(),
        };
        let per_iter = if mode == IterMode::Standard { m } else { 0 };
        table.rows.push(MetricsReport::evaluate(row_label(mode, m), &subset, per_iter)?);
        last = subset;
    }
    write_file(&out_dir.join("report.json"), &table.to_json())?;
    write_file(&out_dir.join("report.txt"), &table.to_text())?;
    write_file(&out_dir.join("pr.csv"), &pr_curve(&last))?;
    if iterations.len() > 1 {
        write_file(&out_dir.join("iterations.csv"), &table.iterations_csv(&iterations))?;
    }
    Ok(table)
}

/// Runs iterative inference on one PNG and writes the SVG overlay.
pub fn viz(cfg: &RunConfig, ckpt: &Path, image_path: &Path, out_svg: &Path) -> Result<IterResult> {
    cfg.validate()?;
    let detector = load_detector(cfg, ckpt)?;
    let image = read_png(image_path)?;
    let result = infer(&image, &detector, &cfg.iter)?;
    write_file(out_svg, &render_svg(&image, &result.boxes)?)?;
    Ok(result)
}
