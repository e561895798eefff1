//! Dataset discovery, splitting, decoding and batching.

pub mod batch;
pub mod image;
pub mod manifest;

pub use batch::{Batch, BatchLoader};
pub use image::ImageBuffer;
pub use manifest::{DatasetManifest, Record, Split};
