//! Pre-norm ViT encoder with activation taps, KV-prefix injection and token deletion.

mod forward;
mod model;
mod site;

pub use forward::{attention, ActivationTap, FeatureModel, ForwardOptions, ForwardOutput, KvPrefix};
pub use model::{BlockWeights, EncoderConfig, EncoderModel, Pooling};
pub use site::{LayerSite, SiteKind};
