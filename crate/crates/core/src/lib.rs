//! Outlier analysis and register-cache mitigation for quantized ViT encoders.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fixture;
pub mod io;
pub mod ops;
pub mod quant;
pub mod regcache;
pub mod rng;
pub mod scalar;
pub mod sensitivity;
pub mod tensor;

pub use encoder::{
    ActivationTap, EncoderConfig, EncoderModel, FeatureModel, ForwardOptions, ForwardOutput, KvPrefix, LayerSite,
    Pooling, SiteKind,
};
pub use error::{Error, Result};
pub use quant::{build_quant_view, qdq, QuantSpec, QuantizedModelView};
pub use regcache::{DeletionRule, RegisterCache};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Encoder32 = EncoderModel<f32>;
pub type Encoder64 = EncoderModel<f64>;
pub type Dataset32 = io::Dataset<f32>;
pub type Dataset64 = io::Dataset<f64>;
pub type RegisterCache32 = RegisterCache<f32>;
