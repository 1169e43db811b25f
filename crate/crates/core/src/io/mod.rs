//! File formats: raster images and sinograms, experiment configs,
//! checkpoints, dataset folders and JSON-lines logs.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod log;
pub mod raster;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use dataset::{load_split, write_dataset, Manifest};
pub use log::{read_jsonl, JsonlWriter, RunEvent};
pub use raster::{load_image, load_sinogram, save_image, save_sinogram, RasterFile};
