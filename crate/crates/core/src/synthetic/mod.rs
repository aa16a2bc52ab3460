//! Crowded synthetic scenes: colored disks, squares and triangles with
//! controlled count and overlap, plus exact ground-truth boxes.

mod io;

pub use io::{
    load_annotations, load_split, png_to_tensor, read_png, save_split, tensor_to_png, write_png, Annotation,
    AnnotationFile, ANNOTATION_FILE, DATASET_VERSION,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::metrics::CROWDING_THRESHOLDS;
use crate::nn::Tensor;
use crate::{Error, Result};

const BACKGROUND: f64 = 0.12;
const PLACEMENT_TRIES: usize = 50;
const IOU_TOLERANCE: f64 = 0.05;
const TARGET_IOU: (f64, f64) = (0.3, 0.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    /// Pixel mask on an `size x size` local grid, row-major.
    pub fn mask(self, size: usize) -> Vec<bool> {
        let s = size as f64;
        let half = s / 2.0;
        let mut mask = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                let (cy, cx) = (i as f64 + 0.5, j as f64 + 0.5);
                mask[i * size + j] = match self {
                    Shape::Square => true,
                    Shape::Disk => (cx - half).powi(2) + (cy - half).powi(2) <= half * half,
                    Shape::Triangle => (cx - half).abs() <= 0.5 * cy,
                };
            }
        }
        mask
    }
}

/// Tight bound of the set pixels of `mask` placed with its local origin at
/// `(x0, y0)`, in pixel-as-point coordinates.
pub fn mask_bounds(mask: &[bool], size: usize, x0: i64, y0: i64) -> Option<BBox> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for i in 0..size {
        for j in 0..size {
            if mask[i * size + j] {
                let b = bounds.get_or_insert((j, j, i, i));
                b.0 = b.0.min(j);
                b.1 = b.1.max(j);
                b.2 = b.2.min(i);
                b.3 = b.3.max(i);
            }
        }
    }
    let (j0, j1, i0, i1) = bounds?;
    Some(BBox::new(
        (x0 + j0 as i64) as f64,
        (y0 + i0 as i64) as f64,
        (j1 - j0) as f64,
        (i1 - i0) as f64,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_size_min: usize,
    pub object_size_max: usize,
    /// Probability that a new object is placed to overlap an existing one.
    pub overlap_boost: f64,
    pub shape_set: Vec<Shape>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            objects_min: 6,
            objects_max: 16,
            object_size_min: 8,
            object_size_max: 20,
            overlap_boost: 0.6,
            shape_set: vec![Shape::Disk, Shape::Square, Shape::Triangle],
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.image_size == 0 {
            return fail("image_size must be positive");
        }
        if self.objects_max < self.objects_min {
            return fail("objects_max < objects_min");
        }
        if self.object_size_min < 2 || self.object_size_max < self.object_size_min {
            return fail("object sizes must satisfy 2 <= min <= max");
        }
        if self.object_size_max >= self.image_size {
            return fail("object_size_max must be smaller than image_size");
        }
        if !(0.0..=1.0).contains(&self.overlap_boost) {
            return fail("overlap_boost must lie in [0, 1]");
        }
        if self.shape_set.is_empty() {
            return fail("shape_set is empty");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }
}

/// Generation metadata for one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub size: usize,
    pub x0: i64,
    pub y0: i64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
    /// Unordered ground-truth pairs above each of `CROWDING_THRESHOLDS`.
    pub crowding: Vec<usize>,
    /// Empty for scenes loaded from disk.
    pub objects: Vec<SceneObject>,
}

impl SceneSample {
    pub fn new(image: Tensor, boxes: Vec<BBox>) -> Self {
        let crowding = pair_counts(&boxes);
        SceneSample {
            image,
            boxes,
            crowding,
            objects: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }
}

fn pair_counts(boxes: &[BBox]) -> Vec<usize> {
    let mut counts = vec![0; CROWDING_THRESHOLDS.len()];
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let o = iou(&boxes[i], &boxes[j]);
            for (c, &t) in counts.iter_mut().zip(&CROWDING_THRESHOLDS) {
                if o > t {
                    *c += 1;
                }
            }
        }
    }
    counts
}

/// Deterministic generator for scene `index` of a corpus seeded with `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(b"toycrowd");
    ChaCha8Rng::from_seed(key)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Distinct colors: hues from a shuffled set of evenly spaced bins.
fn distinct_colors<R: Rng>(n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let mut bins: Vec<usize> = (0..n.max(1)).collect();
    bins.shuffle(rng);
    let offset: f64 = rng.random();
    bins.into_iter()
        .take(n)
        .map(|b| {
            let hue = offset + (b as f64 + rng.random_range(0.0..0.5)) / n as f64;
            hsv_to_rgb(hue, rng.random_range(0.55..1.0), rng.random_range(0.6..1.0))
        })
        .collect()
}

/// Renders one scene. Boxes are the tight bounds of each full shape, so
/// occluded objects keep their complete extent.
pub fn generate_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> SceneSample {
    let n = rng.random_range(spec.objects_min..=spec.objects_max);
    let colors = distinct_colors(n, rng);
    let size = spec.image_size as i64;

    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for color in colors {
        let shape = spec.shape_set[rng.random_range(0..spec.shape_set.len())];
        let s = rng.random_range(spec.object_size_min..=spec.object_size_max);
        let mask = shape.mask(s);
        let local = mask_bounds(&mask, s, 0, 0).expect("shapes have at least one pixel");
        let margin = s as i64 / 4;
        let (lo, hi) = (-margin, size + margin - s as i64);
        let place = |x0: i64, y0: i64| BBox::new(local.x + x0 as f64, local.y + y0 as f64, local.w, local.h);

        let mut position = None;
        if !boxes.is_empty() && rng.random_bool(spec.overlap_boost) {
            let anchor = boxes[rng.random_range(0..boxes.len())];
            let target = rng.random_range(TARGET_IOU.0..TARGET_IOU.1);
            let reach = s as i64;
            for _ in 0..PLACEMENT_TRIES {
                let x0 = anchor.x as i64 + rng.random_range(-reach..=reach);
                let y0 = anchor.y as i64 + rng.random_range(-reach..=reach);
                if x0 < lo || x0 > hi || y0 < lo || y0 > hi {
                    continue;
                }
                if (iou(&place(x0, y0), &anchor) - target).abs() <= IOU_TOLERANCE {
                    position = Some((x0, y0));
                    break;
                }
            }
        }
        let (x0, y0) = position.unwrap_or_else(|| (rng.random_range(lo..=hi), rng.random_range(lo..=hi)));
        boxes.push(place(x0, y0));
        objects.push(SceneObject {
            shape,
            size: s,
            x0,
            y0,
            color,
        });
    }

    let hw = spec.image_size * spec.image_size;
    let mut pixels = vec![BACKGROUND; 3 * hw];
    for obj in &objects {
        let mask = obj.shape.mask(obj.size);
        for i in 0..obj.size {
            for j in 0..obj.size {
                let (py, px) = (obj.y0 + i as i64, obj.x0 + j as i64);
                if !mask[i * obj.size + j] || px < 0 || py < 0 || px >= size || py >= size {
                    continue;
                }
                let idx = py as usize * spec.image_size + px as usize;
                for (c, &v) in obj.color.iter().enumerate() {
                    pixels[c * hw + idx] = v;
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for p in &mut pixels {
            *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }

    let image = Tensor::from_vec(vec![3, spec.image_size, spec.image_size], pixels).expect("buffer sized to image");
    let mut sample = SceneSample::new(image, boxes);
    sample.objects = objects;
    sample
}

/// `n` independent scenes; scene `i` uses [`scene_rng`]`(seed, first + i)`.
pub fn generate_range(spec: &SceneSpec, seed: u64, first: u64, n: usize) -> Vec<SceneSample> {
    (0..n as u64)
        .map(|i| generate_scene(spec, &mut scene_rng(seed, first + i)))
        .collect()
}

/// Scenes `0..n` for the given seed.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    Ok(generate_range(spec, seed, 0, n))
}

/// Train split takes indices `0..n_train`, validation the next `n_val`.
pub fn generate_split(spec: &SceneSpec, n_train: usize, n_val: usize) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    spec.validate()?;
    Ok((
        generate_range(spec, spec.seed, 0, n_train),
        generate_range(spec, spec.seed, n_train as u64, n_val),
    ))
}
