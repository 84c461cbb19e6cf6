//! Dataset ingestion, synthetic data generation, augmentation, batching.

mod augment;
mod dataset;
mod image_ops;
mod synthetic;

pub use augment::{augment_views, AugmentationConfig};
pub use dataset::{load_dataset, make_batches, Batch, Dataset, ImageRecord};
pub use image_ops::{resize_bilinear, stack_images};
pub use synthetic::{export_dataset, generate_synthetic_dataset, SyntheticSpec};
