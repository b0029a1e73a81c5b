//! Two-tower contrastive model: parameters, forward pass, losses and checkpoints.

mod batch;
pub mod checkpoint;
mod config;
mod forward;
mod params;

pub use batch::{Batch, TokenMatrix};
pub use config::{ModelConfig, LOGIT_SCALE_MAX};
pub use forward::{
    accuracy, argmax_rows, class_logits, classification_loss, contrastive_loss, encode, encode_image,
    encode_text, loss_and_grads, predict, Bound, Objective, ENCODE_CHUNK,
};
pub use params::{
    param_count, param_shapes, path, DualEncoderParams, ParamPath, Tower, INIT_STD, IN_PROJ_BIAS,
    IN_PROJ_WEIGHT, LOGIT_SCALE, OUT_PROJ_BIAS, OUT_PROJ_WEIGHT,
};
