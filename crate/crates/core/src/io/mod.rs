//! File formats, run configuration and synthetic data.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod epfm;
pub mod netpbm;
pub mod synth;

pub use config::RunConfig;
pub use netpbm::{load_image, save_edge_map};
