//! Tiny history-aware dense detector.
//!
//! The image passes through a strided stem convolution, the history count
//! map through its own strided convolution; the two outputs are summed and
//! rectified once. A short convolutional trunk follows, then two heads: one
//! objectness logit and four log-distances (left, top, right, bottom) per
//! output location.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, HistoryMap, ScoredBox};
use crate::nms::greedy_nms;
use crate::nn::{
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, Checkpoint, ConvLayer, NamedTensor, Tensor,
};
use crate::nn::conv::conv2d_backward_params;
use crate::{Error, Result};

/// Objectness prior used to initialize the score-head bias.
const SCORE_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub stem_channels: usize,
    pub trunk_depth: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub history_kernel: usize,
    pub history_stride: usize,
    /// Total stride from input pixels to output locations.
    pub head_stride: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            stem_channels: 16,
            trunk_depth: 3,
            stem_kernel: 7,
            stem_stride: 2,
            history_kernel: 3,
            history_stride: 2,
            head_stride: 4,
            score_threshold: 0.05,
            nms_iou: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            init_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("detector: {m}")));
        if self.stem_channels == 0 {
            return fail("stem_channels must be positive".into());
        }
        for (name, k) in [("stem_kernel", self.stem_kernel), ("history_kernel", self.history_kernel)] {
            if k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        if self.stem_stride == 0 || self.head_stride == 0 {
            return fail("strides must be positive".into());
        }
        // With half-kernel padding both stems produce floor((n-1)/s)+1
        // outputs per axis, so equal strides give equal shapes.
        if self.history_stride != self.stem_stride {
            return fail(format!(
                "history_stride {} must equal stem_stride {} so the stem outputs align",
                self.history_stride, self.stem_stride
            ));
        }
        if !self.head_stride.is_multiple_of(self.stem_stride) {
            return fail("head_stride must be a multiple of stem_stride".into());
        }
        if self.trunk_stride() > 1 && self.trunk_depth == 0 {
            return fail("head_stride > stem_stride needs at least one trunk layer".into());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return fail("score_threshold and nms_iou must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn trunk_stride(&self) -> usize {
        self.head_stride / self.stem_stride
    }

    /// Image-space point at the center of output location `(row, col)`.
    pub fn location_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.head_stride as f64;
        let off = (s - 1.0) / 2.0;
        (col as f64 * s + off, row as f64 * s + off)
    }
}

/// All learnable weights. Also used to carry gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub image_stem: ConvLayer,
    pub history_stem: ConvLayer,
    pub trunk: Vec<ConvLayer>,
    pub score_head: ConvLayer,
    pub box_head: ConvLayer,
}

impl DetectorParams {
    /// Seeded Glorot initialization. The history stem starts at zero so the
    /// untrained detector ignores history entirely.
    pub fn init(config: &DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let c = config.stem_channels;
        let image_stem = ConvLayer::glorot(3, c, config.stem_kernel, config.stem_stride, config.stem_kernel / 2, &mut rng)?;
        let history_stem =
            ConvLayer::zeros(1, c, config.history_kernel, config.history_stride, config.history_kernel / 2)?;
        let trunk = (0..config.trunk_depth)
            .map(|i| {
                let stride = if i == 0 { config.trunk_stride() } else { 1 };
                ConvLayer::glorot(c, c, 3, stride, 1, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut score_head = ConvLayer::glorot(c, 1, 3, 1, 1, &mut rng)?;
        score_head.bias = Tensor::full(vec![1], -((1.0 - SCORE_PRIOR) / SCORE_PRIOR).ln());
        let mut box_head = ConvLayer::glorot(c, 4, 3, 1, 1, &mut rng)?;
        box_head.bias = Tensor::full(vec![4], (config.head_stride as f64).ln());
        Ok(DetectorParams {
            image_stem,
            history_stem,
            trunk,
            score_head,
            box_head,
        })
    }

    fn layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = vec![
            ("image_stem".to_string(), &self.image_stem),
            ("history_stem".to_string(), &self.history_stem),
        ];
        out.extend(self.trunk.iter().enumerate().map(|(i, l)| (format!("trunk.{i}"), l)));
        out.push(("score_head".to_string(), &self.score_head));
        out.push(("box_head".to_string(), &self.box_head));
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut out = vec![&mut self.image_stem, &mut self.history_stem];
        out.extend(self.trunk.iter_mut());
        out.push(&mut self.score_head);
        out.push(&mut self.box_head);
        out
    }

    /// Parameter names in [`tensors`](Self::tensors) order.
    pub fn names(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .flat_map(|(n, _)| [format!("{n}.weight"), format!("{n}.bias")])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers()
            .into_iter()
            .flat_map(|(_, l)| [&l.weights, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Same structure with every tensor replaced, in [`tensors`](Self::tensors) order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::shape("DetectorParams::with_tensors", &[slots.len()], &[tensors.len()]));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("DetectorParams::with_tensors", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        let zeros: Vec<Tensor> = self.tensors().into_iter().map(Tensor::zeros_like).collect();
        self.with_tensors(&zeros).expect("same structure")
    }

    pub fn add_assign(&mut self, other: &DetectorParams) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names()
            .into_iter()
            .zip(self.tensors())
            .map(|(n, t)| NamedTensor::new(n, t))
            .collect()
    }

    /// Rebuilds parameters for `config` from named tensors.
    pub fn from_named(config: &DetectorConfig, named: &[NamedTensor]) -> Result<Self> {
        let template = DetectorParams::init(config)?;
        let names = template.names();
        let mut tensors = Vec::with_capacity(names.len());
        for name in &names {
            let t = named
                .iter()
                .find(|n| &n.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            tensors.push(t.to_tensor()?);
        }
        if named.len() != names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, configuration expects {}",
                named.len(),
                names.len()
            )));
        }
        template.with_tensors(&tensors).map_err(|e| Error::Config(format!("checkpoint/config mismatch: {e}")))
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput {
    /// `[1, H', W']`
    pub score_logits: Tensor,
    /// `[4, H', W']`, log of (left, top, right, bottom) distances.
    pub box_distances: Tensor,
}

impl DenseOutput {
    pub fn dims(&self) -> (usize, usize) {
        (self.score_logits.shape()[1], self.score_logits.shape()[2])
    }
}

struct ForwardCache {
    stem_sum: Tensor,
    /// Post-ReLU features: stem output, then one per trunk layer.
    activations: Vec<Tensor>,
    /// Pre-ReLU trunk outputs.
    trunk_pre: Vec<Tensor>,
}

pub fn history_tensor(history: &HistoryMap) -> Tensor {
    Tensor::from_vec(vec![1, history.height(), history.width()], history.to_f64()).expect("map sized to grid")
}

fn check_inputs(image: &Tensor, history: &HistoryMap) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("detector image", &[3, h, w], image.shape()));
    }
    if history.width() != w || history.height() != h {
        return Err(Error::shape(
            "detector history",
            &[h, w],
            &[history.height(), history.width()],
        ));
    }
    Ok(())
}

fn run(image: &Tensor, history: Option<&Tensor>, params: &DetectorParams) -> Result<(DenseOutput, ForwardCache)> {
    let mut stem_sum = conv2d_forward(image, &params.image_stem)?;
    if let Some(h) = history {
        stem_sum.add_assign(&conv2d_forward(h, &params.history_stem)?)?;
    }
    let mut activations = vec![relu_forward(&stem_sum)];
    let mut trunk_pre = Vec::with_capacity(params.trunk.len());
    for layer in &params.trunk {
        let z = conv2d_forward(activations.last().expect("non-empty"), layer)?;
        activations.push(relu_forward(&z));
        trunk_pre.push(z);
    }
    let features = activations.last().expect("non-empty");
    let out = DenseOutput {
        score_logits: conv2d_forward(features, &params.score_head)?,
        box_distances: conv2d_forward(features, &params.box_head)?,
    };
    Ok((
        out,
        ForwardCache {
            stem_sum,
            activations,
            trunk_pre,
        },
    ))
}

/// Dense outputs for an image and its history map.
pub fn forward(image: &Tensor, history: &HistoryMap, params: &DetectorParams) -> Result<DenseOutput> {
    check_inputs(image, history)?;
    Ok(run(image, Some(&history_tensor(history)), params)?.0)
}

/// Forward pass with the history branch removed altogether.
pub fn forward_without_history(image: &Tensor, params: &DetectorParams) -> Result<DenseOutput> {
    Ok(run(image, None, params)?.0)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Every location scoring at least `score_threshold`, before suppression,
/// in row-major location order. Boxes are tagged iteration 1.
pub fn candidates(out: &DenseOutput, config: &DetectorConfig) -> Vec<ScoredBox> {
    let (h, w) = out.dims();
    let plane = h * w;
    let d = out.box_distances.data();
    let mut boxes = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let score = sigmoid(out.score_logits.data()[i]);
            if score < config.score_threshold {
                continue;
            }
            let (cx, cy) = config.location_center(row, col);
            let [l, t, r, b] = [0, 1, 2, 3].map(|c| d[c * plane + i].exp());
            let bbox = BBox::new(cx - l, cy - t, l + r, t + b);
            if bbox.is_valid() {
                boxes.push(ScoredBox::new(bbox, score, 1));
            }
        }
    }
    boxes
}

/// Thresholded candidates followed by greedy NMS at `config.nms_iou`.
pub fn decode(out: &DenseOutput, config: &DetectorConfig) -> Vec<ScoredBox> {
    greedy_nms(&candidates(out, config), config.nms_iou)
}

/// Index of the target assigned to each output location: the smallest-area
/// target whose interior strictly contains the location center, ties to
/// the lower index.
pub fn assign_targets(targets: &[BBox], h: usize, w: usize, config: &DetectorConfig) -> Vec<Option<usize>> {
    let mut out = vec![None; h * w];
    for row in 0..h {
        for col in 0..w {
            let (cx, cy) = config.location_center(row, col);
            let mut best: Option<usize> = None;
            for (k, t) in targets.iter().enumerate() {
                if t.contains_strict(cx, cy) && best.is_none_or(|b| t.area() < targets[b].area()) {
                    best = Some(k);
                }
            }
            out[row * w + col] = best;
        }
    }
    out
}

/// Loss value plus the gradients of the loss with respect to the raw outputs.
pub fn dense_loss(out: &DenseOutput, targets: &[BBox], config: &DetectorConfig) -> (f64, DenseOutput) {
    let (h, w) = out.dims();
    let plane = h * w;
    let assignment = assign_targets(targets, h, w, config);
    let positives = assignment.iter().filter(|a| a.is_some()).count();
    let norm = 1.0 / positives.max(1) as f64;
    let (alpha, gamma) = (config.focal_alpha, config.focal_gamma);

    let mut loss = 0.0;
    let mut g_score = vec![0.0; plane];
    let mut g_box = vec![0.0; 4 * plane];
    let logits = out.score_logits.data();
    let dist = out.box_distances.data();
    for i in 0..plane {
        let x = logits[i];
        let p = sigmoid(x);
        let log_p = -softplus(-x);
        let log_q = -softplus(x);
        match assignment[i] {
            Some(k) => {
                let q = 1.0 - p;
                let qg = q.powf(gamma);
                loss += -alpha * qg * log_p * norm;
                g_score[i] = alpha * qg * (gamma * p * log_p - q) * norm;

                let t = &targets[k];
                let (row, col) = (i / w, i % w);
                let (cx, cy) = config.location_center(row, col);
                let want = [cx - t.x, cy - t.y, t.right() - cx, t.bottom() - cy];
                for (c, d) in want.into_iter().enumerate() {
                    let diff = dist[c * plane + i] - d.ln();
                    loss += diff.abs() * norm;
                    g_box[c * plane + i] = diff.signum() * if diff == 0.0 { 0.0 } else { norm };
                }
            }
            None => {
                let pg = p.powf(gamma);
                loss += -(1.0 - alpha) * pg * log_q * norm;
                g_score[i] = (1.0 - alpha) * pg * (p - gamma * (1.0 - p) * log_q) * norm;
            }
        }
    }
    let grads = DenseOutput {
        score_logits: Tensor::from_vec(vec![1, h, w], g_score).expect("sized"),
        box_distances: Tensor::from_vec(vec![4, h, w], g_box).expect("sized"),
    };
    (loss, grads)
}

/// Focal objectness loss plus L1 log-distance regression on positives, with
/// exact gradients for every parameter. Locations outside `targets`,
/// including those covered only by history boxes, are negatives.
pub fn loss_and_grads(
    image: &Tensor,
    history: &HistoryMap,
    targets: &[BBox],
    params: &DetectorParams,
    config: &DetectorConfig,
) -> Result<(f64, DetectorParams)> {
    check_inputs(image, history)?;
    let hist = history_tensor(history);
    let (out, cache) = run(image, Some(&hist), params)?;
    let (loss, g_out) = dense_loss(&out, targets, config);
    if !loss.is_finite() {
        return Err(Error::NonFinite("detector loss".into()));
    }

    let features = cache.activations.last().expect("non-empty");
    let score = conv2d_backward(features, &params.score_head, &g_out.score_logits)?;
    let boxes = conv2d_backward(features, &params.box_head, &g_out.box_distances)?;
    let mut g_act = score.input.add(&boxes.input)?;

    let mut trunk_grads = Vec::with_capacity(params.trunk.len());
    for (i, layer) in params.trunk.iter().enumerate().rev() {
        let g_pre = relu_backward(&cache.trunk_pre[i], &g_act)?;
        let g = conv2d_backward(&cache.activations[i], layer, &g_pre)?;
        g_act = g.input;
        trunk_grads.push((g.weights, g.bias));
    }
    trunk_grads.reverse();

    let g_stem = relu_backward(&cache.stem_sum, &g_act)?;
    let (iw, ib) = conv2d_backward_params(image, &params.image_stem, &g_stem)?;
    let (hw, hb) = conv2d_backward_params(&hist, &params.history_stem, &g_stem)?;

    let mut tensors = vec![iw, ib, hw, hb];
    for (w, b) in trunk_grads {
        tensors.push(w);
        tensors.push(b);
    }
    tensors.extend([score.weights, score.bias, boxes.weights, boxes.bias]);
    Ok((loss, params.with_tensors(&tensors)?))
}

/// Loss only; used by finite-difference checks.
pub fn loss(
    image: &Tensor,
    history: &HistoryMap,
    targets: &[BBox],
    params: &DetectorParams,
    config: &DetectorConfig,
) -> Result<f64> {
    check_inputs(image, history)?;
    let (out, _) = run(image, Some(&history_tensor(history)), params)?;
    Ok(dense_loss(&out, targets, config).0)
}

/// A configured detector with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: DetectorParams,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        let params = DetectorParams::init(&config)?;
        Ok(Detector { config, params })
    }

    pub fn forward(&self, image: &Tensor, history: &HistoryMap) -> Result<DenseOutput> {
        forward(image, history, &self.params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            serde_json::to_value(&self.config).expect("config serializes"),
            self.params.to_named(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: DetectorConfig = serde_json::from_value(ckpt.header.clone())
            .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
        let params = DetectorParams::from_named(&config, &ckpt.params)?;
        Ok(Detector { config, params })
    }
}
