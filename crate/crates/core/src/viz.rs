//! SVG overlays of tagged detections on top of the input image.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::ImageFormat;
use std::io::Cursor;

use crate::geometry::ScoredBox;
use crate::nn::Tensor;
use crate::synthetic::tensor_to_png;
use crate::{Error, Result};

/// Boxes scoring below this are left out of the overlay.
pub const VIZ_SCORE_THRESHOLD: f64 = 0.1;

const LATER_COLORS: [&str; 5] = ["#ff3b30", "#2f7fff", "#ff2fd5", "#00e5e5", "#ff8c00"];

/// Stroke color for boxes found at `iteration`: green, then yellow, then a
/// fixed cycle of other hues.
pub fn iteration_color(iteration: u32) -> &'static str {
    match iteration {
        0 | 1 => "#00d000",
        2 => "#ffe600",
        t => LATER_COLORS[(t as usize - 3) % LATER_COLORS.len()],
    }
}

/// Class attribute of a detection rectangle.
pub fn rect_class(iteration: u32) -> String {
    format!("det iter-{iteration}")
}

fn png_data_uri(image: &Tensor) -> Result<String> {
    let png = tensor_to_png(image)?;
    let mut buf = Vec::new();
    png.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)
        .map_err(|e| Error::data("<svg background>", e))?;
    Ok(format!("data:image/png;base64,{}", STANDARD.encode(&buf)))
}

/// Renders `boxes` scoring at least [`VIZ_SCORE_THRESHOLD`] over `image`.
///
/// Pixel `(x, y)` occupies the unit square at `(x, y)`, so a box is drawn
/// through the centers of its extreme pixels.
pub fn render_svg(image: &Tensor, boxes: &[ScoredBox]) -> Result<String> {
    let (_, h, w) = image.dims3()?;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    out += &format!(
        "  <image class=\"background\" x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" href=\"{}\"/>\n",
        png_data_uri(image)?
    );
    for b in boxes.iter().filter(|b| b.score >= VIZ_SCORE_THRESHOLD) {
        let r = &b.bbox;
        out += &format!(
            "  <rect class=\"{}\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"{}\" stroke-width=\"0.5\" data-score=\"{:.3}\"/>\n",
            rect_class(b.iteration),
            r.x + 0.5,
            r.y + 0.5,
            r.w,
            r.h,
            iteration_color(b.iteration),
            b.score
        );
    }
    out += "</svg>\n";
    Ok(out)
}
