//! Axis-aligned boxes, overlap, and the history count map.
//!
//! Coordinates follow the pixel-as-point convention: pixel `(x, y)` sits at
//! integer coordinates equal to its column and row index. A box
//! `(x, y, w, h)` covers every pixel with `x <= px <= x + w` and
//! `y <= py <= y + h`, so a box of width `w` spans `w + 1` pixel columns.

use serde::{Deserialize, Serialize};

/// Axis-aligned box given by its top-left corner and extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    /// Builds a box from corner coordinates.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// True when the box satisfies `w > 0`, `h > 0` and all fields are finite.
    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Strict interior test, used for positive-location assignment.
    pub fn contains_strict(&self, px: f64, py: f64) -> bool {
        px > self.x && px < self.right() && py > self.y && py < self.bottom()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let h = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        w * h
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(
            self.x * factor,
            self.y * factor,
            self.w * factor,
            self.h * factor,
        )
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn flipped_horizontally(&self, width: usize) -> BBox {
        BBox::new(width as f64 - 1.0 - self.right(), self.y, self.w, self.h)
    }

    /// Inclusive integer pixel range covered along x, before clipping.
    fn pixel_span_x(&self) -> (i64, i64) {
        (self.x.ceil() as i64, self.right().floor() as i64)
    }

    fn pixel_span_y(&self) -> (i64, i64) {
        (self.y.ceil() as i64, self.bottom().floor() as i64)
    }
}

/// A detection: box plus confidence plus the iteration that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "bbox")]
    pub bbox: BBox,
    pub score: f64,
    pub iteration: u32,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, iteration: u32) -> Self {
        ScoredBox {
            bbox,
            score,
            iteration,
        }
    }
}

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Per-pixel count of boxes covering that pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryMap {
    width: usize,
    height: usize,
    counts: Vec<u32>,
}

impl HistoryMap {
    pub fn empty(width: usize, height: usize) -> Self {
        HistoryMap {
            width,
            height,
            counts: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    /// Row-major counts, `y * width + x`.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Adds one box to the map. Pixels outside the grid are dropped.
    pub fn add_box(&mut self, b: &BBox) {
        if let Some((x0, x1, y0, y1)) = self.clipped_span(b) {
            for y in y0..=y1 {
                let row = &mut self.counts[y * self.width..(y + 1) * self.width];
                for c in &mut row[x0..=x1] {
                    *c += 1;
                }
            }
        }
    }

    /// Inclusive pixel block of `b` intersected with the grid.
    pub fn clipped_span(&self, b: &BBox) -> Option<(usize, usize, usize, usize)> {
        if self.width == 0 || self.height == 0 {
            return None;
        }
        let (x0, x1) = b.pixel_span_x();
        let (y0, y1) = b.pixel_span_y();
        let x0 = x0.max(0);
        let y0 = y0.max(0);
        let x1 = x1.min(self.width as i64 - 1);
        let y1 = y1.min(self.height as i64 - 1);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }

    /// Counts as floats, one channel, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn mirrored_horizontally(&self) -> HistoryMap {
        let mut out = HistoryMap::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.counts[y * self.width + x] = self.get(self.width - 1 - x, y);
            }
        }
        out
    }

    /// Elementwise sum of two maps of equal size.
    pub fn add(&self, other: &HistoryMap) -> Option<HistoryMap> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        Some(HistoryMap {
            width: self.width,
            height: self.height,
            counts,
        })
    }
}

/// Rasterizes a set of boxes into a count map with inclusive bounds on both
/// sides of each box.
pub fn rasterize_history<'a, I>(boxes: I, width: usize, height: usize) -> HistoryMap
where
    I: IntoIterator<Item = &'a BBox>,
{
    let mut map = HistoryMap::empty(width, height);
    for b in boxes {
        map.add_box(b);
    }
    map
}

/// Intersection of `b` with the image extent `[0, width-1] x [0, height-1]`.
/// Returns `None` when the intersection has zero area.
pub fn clip_box(b: &BBox, width: usize, height: usize) -> Option<BBox> {
    let max_x = width.saturating_sub(1) as f64;
    let max_y = height.saturating_sub(1) as f64;
    let x1 = b.x.clamp(0.0, max_x);
    let y1 = b.y.clamp(0.0, max_y);
    let x2 = b.right().clamp(0.0, max_x);
    let y2 = b.bottom().clamp(0.0, max_y);
    if x2 > x1 && y2 > y1 {
        Some(BBox::from_corners(x1, y1, x2, y2))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(boxes: &[BBox], width: usize, height: usize) -> Vec<u32> {
        let mut out = vec![0u32; width * height];
        for y in 0..height {
            for x in 0..width {
                let (fx, fy) = (x as f64, y as f64);
                out[y * width + x] = boxes
                    .iter()
                    .filter(|b| b.x <= fx && fx <= b.right() && b.y <= fy && fy <= b.bottom())
                    .count() as u32;
            }
        }
        out
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(
            iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(5.0, 5.0, 1.0, 1.0)),
            0.0
        );
        let b = BBox::new(1.0, 0.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_history_is_zero() {
        let map = rasterize_history(&[], 4, 4);
        assert!(map.is_empty());
        assert_eq!(map.counts().len(), 16);
    }

    #[test]
    fn single_box_covers_inclusive_block() {
        let map = rasterize_history(&[BBox::new(0.0, 0.0, 2.0, 2.0)], 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let expected = u32::from(x <= 2 && y <= 2);
                assert_eq!(map.get(x, y), expected, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn two_boxes_overlap_block() {
        let boxes = [BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(1.0, 1.0, 2.0, 2.0)];
        let map = rasterize_history(&boxes, 8, 8);
        assert_eq!(map.counts(), brute_force(&boxes, 8, 8).as_slice());
        for y in 0..8 {
            for x in 0..8 {
                let in_overlap = (1..=2).contains(&x) && (1..=2).contains(&y);
                assert_eq!(map.get(x, y) == 2, in_overlap, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn out_of_grid_contributions_are_clipped() {
        let map = rasterize_history(&[BBox::new(-5.0, -5.0, 6.0, 6.0)], 4, 4);
        assert_eq!(map.total(), 4);
        let off = rasterize_history(&[BBox::new(10.0, 10.0, 3.0, 3.0)], 4, 4);
        assert!(off.is_empty());
    }

    #[test]
    fn clip_examples() {
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert_eq!(clip_box(&b, 10, 10), Some(b));
        assert_eq!(
            clip_box(&BBox::new(-2.0, -2.0, 4.0, 4.0), 10, 10),
            Some(BBox::new(0.0, 0.0, 2.0, 2.0))
        );
        assert_eq!(clip_box(&BBox::new(20.0, 20.0, 2.0, 2.0), 10, 10), None);
    }

    #[test]
    fn flip_mirrors_history() {
        let boxes = [BBox::new(1.3, 2.0, 4.2, 3.0), BBox::new(-2.0, 5.0, 6.0, 2.5)];
        let flipped: Vec<BBox> = boxes.iter().map(|b| b.flipped_horizontally(12)).collect();
        assert_eq!(
            rasterize_history(&flipped, 12, 10),
            rasterize_history(&boxes, 12, 10).mirrored_horizontally()
        );
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-20.0..140.0f64, -20.0..140.0f64, 0.1..60.0f64, 0.1..60.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn rasterize_matches_brute_force(
            boxes in prop::collection::vec(arb_box(), 0..50),
            width in 1usize..128,
            height in 1usize..128,
        ) {
            let map = rasterize_history(&boxes, width, height);
            let expected = brute_force(&boxes, width, height);
            prop_assert_eq!(map.counts(), expected.as_slice());
        }

        #[test]
        fn total_equals_sum_of_clipped_blocks(
            boxes in prop::collection::vec(arb_box(), 0..30),
            width in 1usize..96,
            height in 1usize..96,
        ) {
            let map = rasterize_history(&boxes, width, height);
            let expected: u64 = boxes
                .iter()
                .filter_map(|b| map.clipped_span(b))
                .map(|(x0, x1, y0, y1)| ((x1 - x0 + 1) * (y1 - y0 + 1)) as u64)
                .sum();
            prop_assert_eq!(map.total(), expected);
        }

        #[test]
        fn history_is_additive(
            a in prop::collection::vec(arb_box(), 0..20),
            b in prop::collection::vec(arb_box(), 0..20),
        ) {
            let union: Vec<BBox> = a.iter().chain(&b).copied().collect();
            let sum = rasterize_history(&a, 64, 48).add(&rasterize_history(&b, 64, 48)).unwrap();
            prop_assert_eq!(rasterize_history(&union, 64, 48), sum);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}
