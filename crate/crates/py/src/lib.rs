//! Python module `iterdet`: boxes, history maps, suppression, metrics,
//! scene generation, the detector and the end-to-end commands.
//!
//! Images cross the boundary as flat channel-major float lists plus
//! `(height, width)`; boxes as `(x, y, w, h)` tuples.

use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use iterdet::detector::{Detector, DetectorConfig};
use iterdet::geometry::{self, BBox, ScoredBox};
use iterdet::iterdet::{infer, IterConfig};
use iterdet::metrics::{self, EvalSample, CROWDING_THRESHOLDS};
use iterdet::nn::{Checkpoint, Tensor};
use iterdet::pipeline::{self, parse_mode, RunConfig};
use iterdet::synthetic::{self, generate_scene, scene_rng, SceneSpec};
use iterdet::{nms, Error};

type BoxTuple = (f64, f64, f64, f64);
type ScoredTuple = (f64, f64, f64, f64, f64);
type TaggedTuple = (f64, f64, f64, f64, f64, u32);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Data { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_box(t: BoxTuple) -> BBox {
    BBox::new(t.0, t.1, t.2, t.3)
}

fn to_scored(t: ScoredTuple) -> ScoredBox {
    ScoredBox::new(to_box((t.0, t.1, t.2, t.3)), t.4, 1)
}

fn from_scored(b: &ScoredBox) -> TaggedTuple {
    (b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h, b.score, b.iteration)
}

fn from_box(b: &BBox) -> BoxTuple {
    (b.x, b.y, b.w, b.h)
}

fn image_tensor(data: Vec<f64>, height: usize, width: usize) -> PyResult<Tensor> {
    Tensor::from_vec(vec![3, height, width], data).map_err(py_err)
}

fn run_config(json: Option<&str>) -> PyResult<RunConfig> {
    json.map_or_else(|| Ok(RunConfig::default()), |j| RunConfig::from_json(j).map_err(py_err))
}

/// Axis-aligned box covering pixels `x <= px <= x + w`, `y <= py <= y + h`.
#[pyclass(name = "BBox", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        PyBBox(BBox::new(x, y, w, h))
    }

    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }

    #[getter]
    fn w(&self) -> f64 {
        self.0.w
    }

    #[getter]
    fn h(&self) -> f64 {
        self.0.h
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBBox) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn as_tuple(&self) -> BoxTuple {
        from_box(&self.0)
    }

    fn __repr__(&self) -> String {
        format!("BBox(x={}, y={}, w={}, h={})", self.0.x, self.0.y, self.0.w, self.0.h)
    }
}

#[pyfunction]
fn iou(a: BoxTuple, b: BoxTuple) -> f64 {
    geometry::iou(&to_box(a), &to_box(b))
}

/// Per-pixel box counts as a list of rows.
#[pyfunction]
fn rasterize_history(boxes: Vec<BoxTuple>, width: usize, height: usize) -> Vec<Vec<u32>> {
    let boxes: Vec<BBox> = boxes.into_iter().map(to_box).collect();
    let map = geometry::rasterize_history(&boxes, width, height);
    map.counts().chunks(width.max(1)).map(<[u32]>::to_vec).collect()
}

#[pyfunction]
#[pyo3(signature = (boxes, iou_threshold=0.5))]
fn greedy_nms(boxes: Vec<ScoredTuple>, iou_threshold: f64) -> Vec<ScoredTuple> {
    let boxes: Vec<ScoredBox> = boxes.into_iter().map(to_scored).collect();
    nms::greedy_nms(&boxes, iou_threshold)
        .iter()
        .map(|b| (b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h, b.score))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (boxes, iou_threshold=0.3, final_threshold=0.001))]
fn soft_nms_linear(boxes: Vec<ScoredTuple>, iou_threshold: f64, final_threshold: f64) -> Vec<ScoredTuple> {
    let boxes: Vec<ScoredBox> = boxes.into_iter().map(to_scored).collect();
    nms::soft_nms_linear(&boxes, iou_threshold, final_threshold)
        .iter()
        .map(|b| (b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h, b.score))
        .collect()
}

fn eval_samples(samples: Vec<(Vec<ScoredTuple>, Vec<BoxTuple>)>) -> Vec<EvalSample> {
    samples
        .into_iter()
        .map(|(d, g)| EvalSample::new(d.into_iter().map(to_scored).collect(), g.into_iter().map(to_box).collect()))
        .collect()
}

/// AP in percent over `[(detections, ground_truth), ...]` per image.
#[pyfunction]
fn average_precision(samples: Vec<(Vec<ScoredTuple>, Vec<BoxTuple>)>) -> PyResult<f64> {
    metrics::average_precision(&eval_samples(samples)).map_err(py_err)
}

/// Log-average miss rate in percent over FPPI in [1e-2, 1].
#[pyfunction]
fn mmr(samples: Vec<(Vec<ScoredTuple>, Vec<BoxTuple>)>) -> PyResult<f64> {
    metrics::mmr(&eval_samples(samples)).map_err(py_err)
}

#[pyfunction]
fn recall_at(samples: Vec<(Vec<ScoredTuple>, Vec<BoxTuple>)>, score_threshold: f64) -> PyResult<f64> {
    metrics::recall_at(&eval_samples(samples), score_threshold).map_err(py_err)
}

/// Objects per image and overlapping pairs per image at IoU 0.3..0.6.
#[pyfunction]
fn crowding_stats<'py>(py: Python<'py>, images: Vec<Vec<BoxTuple>>) -> PyResult<Bound<'py, PyDict>> {
    let boxes: Vec<Vec<BBox>> = images.into_iter().map(|b| b.into_iter().map(to_box).collect()).collect();
    let stats = metrics::crowding_stats(boxes.iter().map(Vec::as_slice), &CROWDING_THRESHOLDS);
    let d = PyDict::new(py);
    d.set_item("images", stats.images)?;
    d.set_item("objects_per_image", stats.objects_per_image)?;
    d.set_item("thresholds", stats.thresholds)?;
    d.set_item("pairs_per_image", stats.pairs_per_image)?;
    Ok(d)
}

/// Scene `index` of the stream for `seed`: `(image, height, width, boxes)`.
/// `spec_json` overrides generator settings.
#[pyfunction]
#[pyo3(signature = (seed, index, spec_json=None))]
fn generate(seed: u64, index: u64, spec_json: Option<&str>) -> PyResult<(Vec<f64>, usize, usize, Vec<BoxTuple>)> {
    let spec: SceneSpec = match spec_json {
        Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => SceneSpec::default(),
    };
    spec.validate().map_err(py_err)?;
    let s = generate_scene(&spec, &mut scene_rng(seed, index));
    let (h, w) = (s.height(), s.width());
    Ok((s.image.into_data(), h, w, s.boxes.iter().map(from_box).collect()))
}

/// Reads a PNG as `(image, height, width)`.
#[pyfunction]
fn read_png(path: &str) -> PyResult<(Vec<f64>, usize, usize)> {
    let t = synthetic::read_png(Path::new(path)).map_err(py_err)?;
    let (_, h, w) = t.dims3().map_err(py_err)?;
    Ok((t.into_data(), h, w))
}

/// History-aware detector.
#[pyclass(name = "Detector")]
struct PyDetector(Detector);

#[pymethods]
impl PyDetector {
    /// Freshly initialized detector; `config_json` overrides defaults.
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let config: DetectorConfig = match config_json {
            Some(j) => serde_json::from_str(j).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => DetectorConfig::default(),
        };
        Ok(PyDetector(Detector::new(config).map_err(py_err)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(Path::new(path)).map_err(py_err)?;
        Ok(PyDetector(Detector::from_checkpoint(&ckpt).map_err(py_err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.to_checkpoint().save(Path::new(path)).map_err(py_err)
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.0.config).expect("config serializes")
    }

    fn parameter_count(&self) -> usize {
        self.0.params.count()
    }

    /// One pass given already-detected boxes; returns scored boxes.
    #[pyo3(signature = (image, height, width, history=Vec::new()))]
    fn detect(&self, image: Vec<f64>, height: usize, width: usize, history: Vec<BoxTuple>) -> PyResult<Vec<TaggedTuple>> {
        let image = image_tensor(image, height, width)?;
        let boxes: Vec<BBox> = history.into_iter().map(to_box).collect();
        let map = geometry::rasterize_history(&boxes, width, height);
        let out = self.0.forward(&image, &map).map_err(py_err)?;
        Ok(::iterdet::detector::decode(&out, &self.0.config).iter().map(from_scored).collect())
    }

    /// Iterative inference; boxes come back as `(x, y, w, h, score, iteration)`.
    #[pyo3(signature = (image, height, width, iterations=2, mode="standard", stop_score=0.05))]
    fn infer(
        &self,
        image: Vec<f64>,
        height: usize,
        width: usize,
        iterations: u32,
        mode: &str,
        stop_score: f64,
    ) -> PyResult<Vec<TaggedTuple>> {
        let image = image_tensor(image, height, width)?;
        let cfg = IterConfig {
            max_iterations: iterations,
            stop_score,
            mode: parse_mode(mode).map_err(py_err)?,
            ..Default::default()
        };
        cfg.validate().map_err(py_err)?;
        let r = infer(&image, &self.0, &cfg).map_err(py_err)?;
        Ok(r.boxes.iter().map(from_scored).collect())
    }
}

/// Default run config as JSON.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Writes train/ and val/ and returns the crowding table.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json=None, jobs=1))]
fn gen_data(out_dir: &str, config_json: Option<&str>, jobs: usize) -> PyResult<String> {
    let cfg = run_config(config_json)?;
    Ok(pipeline::gen_data(&cfg, Path::new(out_dir), jobs).map_err(py_err)?.to_text())
}

/// Trains and returns per-epoch mean losses.
#[pyfunction]
#[pyo3(signature = (data_dir, checkpoint, config_json=None, resume=None))]
fn train(data_dir: &str, checkpoint: &str, config_json: Option<&str>, resume: Option<&str>) -> PyResult<Vec<f64>> {
    let cfg = run_config(config_json)?;
    pipeline::train(&cfg, Path::new(data_dir), Path::new(checkpoint), resume.map(Path::new)).map_err(py_err)
}

/// Evaluates on val/ and returns the report JSON.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, out_dir, iterations=vec![1, 2], config_json=None))]
fn evaluate(checkpoint: &str, data_dir: &str, out_dir: &str, iterations: Vec<u32>, config_json: Option<&str>) -> PyResult<String> {
    let cfg = run_config(config_json)?;
    let table = pipeline::evaluate(&cfg, Path::new(checkpoint), Path::new(data_dir), Path::new(out_dir), &iterations)
        .map_err(py_err)?;
    Ok(table.to_json())
}

/// Writes an SVG overlay and returns the number of boxes found.
#[pyfunction]
#[pyo3(signature = (checkpoint, image, out_svg, config_json=None))]
fn viz(checkpoint: &str, image: &str, out_svg: &str, config_json: Option<&str>) -> PyResult<usize> {
    let cfg = run_config(config_json)?;
    let r = pipeline::viz(&cfg, Path::new(checkpoint), Path::new(image), Path::new(out_svg)).map_err(py_err)?;
    Ok(r.boxes.len())
}

#[pymodule]
#[pyo3(name = "iterdet")]
fn iterdet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize_history, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_nms, m)?)?;
    m.add_function(wrap_pyfunction!(soft_nms_linear, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(mmr, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at, m)?)?;
    m.add_function(wrap_pyfunction!(crowding_stats, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(read_png, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(viz, m)?)?;
    Ok(())
}
