//! Toy transformer encoder classifier.

mod config;
mod encoder;
mod init;
mod layer;

pub use config::EncoderConfig;
pub use encoder::{count_flops, layer_flops, ClassifierHead, Embeddings, EncoderModel};
pub use init::truncated_normal;
pub use layer::{Dropout, TransformerLayer, LAYER_NORM_EPS};
