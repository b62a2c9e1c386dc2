//! Dynamic backward attention segmentation network, its training harness
//! and an interpretability toolkit, built on `dbat-tensor`.

pub mod analysis;
pub mod attention;
pub mod config;
pub mod dba;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod merge;
pub mod model;
pub mod seghead;
pub mod train;

pub use config::{Ablation, DbaConfig, Downsampler, EncoderConfig, MaskPredictor, MergeConfig, MergeMode, ModelConfig};
pub use error::{DbatError, Result};
pub use model::{Dbat, ForwardOutput};

pub use dbat_tensor as tensor;
