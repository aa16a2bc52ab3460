//! The iterative scheme: random history splits for training, and inference
//! loops that feed every earlier detection back as a history map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{self, Detector};
use crate::geometry::{clip_box, BBox, HistoryMap, ScoredBox};
use crate::nn::Tensor;
use crate::synthetic::SceneSample;
use crate::{Error, Result};

/// Anything that maps an image plus history map to detections.
pub trait HistoryAwareDetector {
    /// Final detections for one pass (after suppression).
    fn detect(&self, image: &Tensor, history: &HistoryMap) -> Result<Vec<ScoredBox>>;

    /// Pre-suppression candidates; defaults to [`detect`](Self::detect).
    fn candidates(&self, image: &Tensor, history: &HistoryMap) -> Result<Vec<ScoredBox>> {
        self.detect(image, history)
    }
}

impl HistoryAwareDetector for Detector {
    fn detect(&self, image: &Tensor, history: &HistoryMap) -> Result<Vec<ScoredBox>> {
        Ok(detector::decode(&self.forward(image, history)?, &self.config))
    }

    fn candidates(&self, image: &Tensor, history: &HistoryMap) -> Result<Vec<ScoredBox>> {
        Ok(detector::candidates(&self.forward(image, history)?, &self.config))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IterMode {
    #[default]
    Standard,
    OnePerIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterConfig {
    pub max_iterations: u32,
    /// Detections below this score do not count toward `|B_t|`.
    pub stop_score: f64,
    pub mode: IterMode,
    /// Cap on total boxes in one-per-iteration mode.
    pub max_detections: usize,
}

impl Default for IterConfig {
    fn default() -> Self {
        IterConfig {
            max_iterations: 2,
            stop_score: 0.05,
            mode: IterMode::Standard,
            max_detections: 64,
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("iterations: max_iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stop_score) {
            return Err(Error::Config("iterations: stop_score must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterResult {
    /// Union of all passes, each tagged with the iteration that found it.
    pub boxes: Vec<ScoredBox>,
    /// `|B_t|` for every pass that ran, including a final empty one.
    pub per_iteration_counts: Vec<usize>,
    pub iterations_run: u32,
}

impl IterResult {
    /// Number of passes that produced at least one box.
    pub fn productive_iterations(&self) -> usize {
        self.per_iteration_counts.iter().filter(|&&c| c > 0).count()
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    let (_, h, w) = image.dims3()?;
    Ok((h, w))
}

/// Runs up to `max_iterations` passes, stopping early at the first pass that
/// yields nothing at or above `stop_score`. Results are the plain union.
pub fn infer_iterative<D: HistoryAwareDetector + ?Sized>(
    image: &Tensor,
    detector: &D,
    config: &IterConfig,
) -> Result<IterResult> {
    config.validate()?;
    let (h, w) = image_dims(image)?;
    let mut history = HistoryMap::empty(w, h);
    let mut boxes = Vec::new();
    let mut counts = Vec::new();
    let mut iterations_run = 0;
    for t in 1..=config.max_iterations {
        iterations_run = t;
        let found: Vec<ScoredBox> = detector
            .detect(image, &history)?
            .into_iter()
            .filter(|b| b.score >= config.stop_score)
            .map(|b| ScoredBox { iteration: t, ..b })
            .collect();
        counts.push(found.len());
        if found.is_empty() {
            break;
        }
        for b in &found {
            history.add_box(&b.bbox);
        }
        boxes.extend(found);
    }
    Ok(IterResult {
        boxes,
        per_iteration_counts: counts,
        iterations_run,
    })
}

/// One box per pass: suppression is replaced by taking the single most
/// confident candidate. Stops when the best score falls below `stop_score`
/// or `max_detections` boxes have been found.
pub fn infer_one_per_iteration<D: HistoryAwareDetector + ?Sized>(
    image: &Tensor,
    detector: &D,
    config: &IterConfig,
) -> Result<IterResult> {
    config.validate()?;
    let (h, w) = image_dims(image)?;
    let mut history = HistoryMap::empty(w, h);
    let mut boxes: Vec<ScoredBox> = Vec::new();
    let mut counts = Vec::new();
    let mut t = 0;
    while boxes.len() < config.max_detections {
        t += 1;
        let cands = detector.candidates(image, &history)?;
        let best = cands
            .iter()
            .enumerate()
            .fold(None::<usize>, |best, (i, c)| match best {
                Some(b) if cands[b].score >= c.score => Some(b),
                _ => Some(i),
            })
            .map(|i| cands[i])
            .filter(|b| b.score >= config.stop_score);
        match best {
            Some(b) => {
                let b = ScoredBox { iteration: t, ..b };
                history.add_box(&b.bbox);
                boxes.push(b);
                counts.push(1);
            }
            None => {
                counts.push(0);
                break;
            }
        }
    }
    Ok(IterResult {
        boxes,
        per_iteration_counts: counts,
        iterations_run: t,
    })
}

/// Dispatches on `config.mode`.
pub fn infer<D: HistoryAwareDetector + ?Sized>(image: &Tensor, detector: &D, config: &IterConfig) -> Result<IterResult> {
    match config.mode {
        IterMode::Standard => infer_iterative(image, detector, config),
        IterMode::OnePerIteration => infer_one_per_iteration(image, detector, config),
    }
}

/// Partition of the ground truth into history and prediction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSplit {
    pub old: Vec<BBox>,
    pub new: Vec<BBox>,
}

/// Puts each box into the history set independently with probability `q`.
pub fn split_with_fraction<R: Rng + ?Sized>(all: &[BBox], q: f64, rng: &mut R) -> GroundTruthSplit {
    let mut old = Vec::new();
    let mut new = Vec::new();
    for b in all {
        if rng.random::<f64>() < q {
            old.push(*b);
        } else {
            new.push(*b);
        }
    }
    GroundTruthSplit { old, new }
}

/// Random split with the history fraction `q` itself drawn uniformly from
/// `[0, 1]`, so empty and nearly full histories both occur.
pub fn split_ground_truth<R: Rng + ?Sized>(all: &[BBox], rng: &mut R) -> GroundTruthSplit {
    let q: f64 = rng.random();
    split_with_fraction(all, q, rng)
}

/// Geometric augmentation applied to an image and its boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub zoom: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flip: false, zoom: 1.0 };
    pub const ZOOM_RANGE: (f64, f64) = (0.75, 1.25);

    /// Horizontal flip with probability 1/2, zoom uniform in `[0.75, 1.25]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augmentation {
            flip: rng.random_bool(0.5),
            zoom: rng.random_range(Self::ZOOM_RANGE.0..=Self::ZOOM_RANGE.1),
        }
    }

    /// Output has the input's size. Zoom scales about the top-left pixel
    /// with bilinear sampling; samples falling outside read as zero.
    pub fn apply_image(&self, image: &Tensor) -> Result<Tensor> {
        let (c, h, w) = image.dims3()?;
        let src = image.data();
        let mut out = vec![0.0; c * h * w];
        let inv = 1.0 / self.zoom;
        for y in 0..h {
            for x in 0..w {
                let sx = if self.flip { (w - 1 - x) as f64 } else { x as f64 } * inv;
                let sy = y as f64 * inv;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let taps = [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x0 + 1, y0, fx * (1.0 - fy)), (x0, y0 + 1, (1.0 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)];
                for ch in 0..c {
                    let mut v = 0.0;
                    for &(tx, ty, wgt) in &taps {
                        if wgt != 0.0 && tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                            v += wgt * src[(ch * h + ty as usize) * w + tx as usize];
                        }
                    }
                    out[(ch * h + y) * w + x] = v;
                }
            }
        }
        Tensor::from_vec(vec![c, h, w], out)
    }

    /// Zoom then flip; boxes with no area left inside the image are dropped.
    pub fn apply_boxes(&self, boxes: &[BBox], width: usize, height: usize) -> Vec<BBox> {
        boxes
            .iter()
            .map(|b| {
                let z = b.scaled(self.zoom);
                if self.flip {
                    z.flipped_horizontally(width)
                } else {
                    z
                }
            })
            .filter(|b| clip_box(b, width, height).is_some())
            .collect()
    }
}

/// Inputs and targets for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub image: Tensor,
    pub history: HistoryMap,
    /// Boxes the detector must find (`B_new`).
    pub targets: Vec<BBox>,
    /// Boxes rendered into `history` (`B_old`).
    pub history_boxes: Vec<BBox>,
}

/// Augments, splits with a fixed history fraction, and rasterizes `B_old`.
pub fn make_training_example_with<R: Rng + ?Sized>(
    scene: &SceneSample,
    augmentation: Augmentation,
    history_fraction: f64,
    rng: &mut R,
) -> Result<TrainingExample> {
    let (w, h) = (scene.width(), scene.height());
    let image = if augmentation == Augmentation::IDENTITY {
        scene.image.clone()
    } else {
        augmentation.apply_image(&scene.image)?
    };
    let boxes = augmentation.apply_boxes(&scene.boxes, w, h);
    let split = split_with_fraction(&boxes, history_fraction, rng);
    let history = crate::geometry::rasterize_history(&split.old, w, h);
    Ok(TrainingExample {
        image,
        history,
        targets: split.new,
        history_boxes: split.old,
    })
}

/// Random flip and zoom, random history fraction, random split.
pub fn make_training_example<R: Rng + ?Sized>(scene: &SceneSample, rng: &mut R) -> Result<TrainingExample> {
    let aug = Augmentation::sample(rng);
    let q: f64 = rng.random();
    make_training_example_with(scene, aug, q, rng)
}
