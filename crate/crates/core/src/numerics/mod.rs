//! Dense tensors, reverse-mode differentiation, attention layers and Adam.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{
    attention_core, dropout, ffn, multi_head_attention, xavier_uniform, AttentionParams, FfnParams, Linear,
};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{l2_normalize_rows, DEGENERATE_NORM, layer_norm, matmul, matmul_t, softmax_rows, Tensor};
