//! Iterative, history-aware object detection for crowded scenes.
//!
//! A small dense detector receives, next to the image, a per-pixel count of
//! boxes it has already found. Inference runs it repeatedly, each pass
//! seeing the union of all earlier detections; training teaches it to
//! report only objects missing from a randomly sampled history.

pub mod detector;
mod error;
pub mod geometry;
pub mod iterdet;
pub mod metrics;
pub mod nms;
pub mod nn;
pub mod synthetic;
pub mod pipeline;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
