//! Image I/O, preprocessing, run configuration and batch orchestration.

pub mod batch;
pub mod config;
pub mod io;

pub use batch::{run_ablation, run_batch, AblationRow, BatchOutcome};
pub use config::{Precision, Preset, RunConfig};
pub use io::{load_image, preprocess, read_label_png, write_label_png, ImageSample};
