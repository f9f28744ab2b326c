//! Encoder building blocks.

pub mod attention;
pub mod embedding;
pub mod ffn;
pub mod norm;
pub mod params;
pub mod swishrnn;

pub use attention::{
    bucket_matrix, relative_position_bucket, scaled_dot_attention, Attention, AttentionLayout, AttentionParams,
    RelativeBias,
};
pub use embedding::Embeddings;
pub use ffn::Ffn;
pub use norm::{add_norm, NormParams, LN_EPS};
pub use params::{Param, ParamId, ParamStore};
pub use swishrnn::{
    scan_backward, scan_forward, scan_forward_into, swish, swishrnn_scan, GateActivation, ScanGrads, SwishRnn,
    SwishRnnParams,
};
