//! Bit-exact file formats: tensor containers, model weights, datasets and register caches.

mod cache;
mod container;
mod dataset;
mod model;

pub use cache::{load_register_cache, read_register_cache, save_register_cache, write_register_cache, CACHE_VERSION};
pub use container::{ManifestRecord, TensorContainer, MAGIC};
pub use dataset::{resolve, Dataset, DatasetManifest, ImageLayout, LayoutTag, Sample, SampleRecord};
pub use model::{load_model, load_model_files, model_to_container, parse_config, save_model_files};
