//! On-disk dataset layout: one directory per split holding 8-bit RGB PNGs
//! and a single `annotations.json`.
//!
//! Pixel values are quantized to `round(v * 255) / 255` when written, so a
//! saved-then-loaded image equals the original after that quantization.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::SceneSample;
use crate::geometry::BBox;
use crate::nn::Tensor;
use crate::{Error, Result};

pub const DATASET_VERSION: &str = "toy-crowd-1";
pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub file: String,
    pub width: usize,
    pub height: usize,
    /// `[x, y, w, h]` per object.
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: String,
    pub images: Vec<Annotation>,
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_png(image: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_png", &[3, h, w], image.shape()));
    }
    let hw = h * w;
    let data = image.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(data[i]), quantize(data[hw + i]), quantize(data[2 * hw + i])])
    }))
}

pub fn png_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = w * h;
    let mut data = vec![0.0; 3 * hw];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("buffer sized to image")
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::data(path, e))?;
    Ok(png_to_tensor(&img.to_rgb8()))
}

pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    tensor_to_png(image)?
        .save(path)
        .map_err(|e| Error::data(path, e))
}

/// Writes every sample as `NNNNN.png` plus `annotations.json` into `dir`.
pub fn save_split(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:05}.png");
        write_png(&s.image, &dir.join(&file))?;
        images.push(Annotation {
            file,
            width: s.width(),
            height: s.height(),
            boxes: s.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
        });
    }
    let doc = AnnotationFile {
        version: DATASET_VERSION.to_string(),
        images,
    };
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::data(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_annotations(dir: &Path) -> Result<AnnotationFile> {
    let path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::data(&path, e))?;
    if doc.version != DATASET_VERSION {
        return Err(Error::data(
            &path,
            format!("unsupported version {:?}, expected {DATASET_VERSION:?}", doc.version),
        ));
    }
    Ok(doc)
}

pub fn load_split(dir: &Path) -> Result<Vec<SceneSample>> {
    let doc = load_annotations(dir)?;
    let mut out = Vec::with_capacity(doc.images.len());
    for ann in doc.images {
        let path = dir.join(&ann.file);
        let image = read_png(&path)?;
        if image.shape() != [3, ann.height, ann.width] {
            return Err(Error::data(
                &path,
                format!("image is {:?}, annotation says {}x{}", &image.shape()[1..], ann.width, ann.height),
            ));
        }
        let boxes: Vec<BBox> = ann.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect();
        if let Some(bad) = boxes.iter().find(|b| !b.is_valid()) {
            return Err(Error::data(&path, format!("invalid box {bad:?}")));
        }
        out.push(SceneSample::new(image, boxes));
    }
    Ok(out)
}
