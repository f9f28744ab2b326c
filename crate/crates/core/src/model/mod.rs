//! Encoder assembly for the three variants, sizing and parameter accounting.

mod config;
mod encoder;

pub use config::{solve_inner_dim, step_size_schedule, ModelConfig, Variant};
pub use encoder::{block_matrix_params, count_params, Block, EncoderLayer, EncoderModel};
