//! Masked-LM pretraining: masking, loss, Adam with decoupled weight decay,
//! the learning-rate schedule, the loop and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod hyper;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod train_loop;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use hyper::{lr_schedule, TrainHyper};
pub use loss::{masked_lm_loss, mlm_loss};
pub use masking::{mask_count, mask_tokens, Masked};
pub use metrics::{strip_timing, MetricsWriter, StepRecord, METRICS_HEADER};
pub use train_loop::{evaluate, stream_rng, train_loop, TrainSummary};

#[cfg(test)]
mod tests;
