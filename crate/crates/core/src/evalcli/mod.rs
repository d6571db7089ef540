//! Dataset generation and ingestion, preprocessing, the AP evaluator and
//! run configuration files.

mod config;
mod data;
mod letterbox;
mod metrics;

pub use config::RunConfig;
pub use data::{
    gen_synthetic, load_coco_json, load_ppm, read_ppm, save_ppm, write_ppm, Dataset, Image, Sample,
    Shape, SynthConfig,
};
pub use letterbox::{letterbox, LetterboxTransform, PAD_VALUE};
pub use metrics::{evaluate_ap, interpolated_ap, iou_thresholds, EvalReport, MAX_DETS};

#[cfg(test)]
mod tests;
