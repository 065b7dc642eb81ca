//! Semi-supervised semantic segmentation for off-road scenes: sparse label
//! generation, diverse subset selection, two complementary decoders on a
//! frozen ViT encoder, and pseudo-labels from their agreement.

pub mod coarsify;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod pseudo;
pub mod report;
pub mod select;
pub mod synthset;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
