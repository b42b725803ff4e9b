//! Double-precision reference implementations of the Unmasking Attention
//! block and deformable patch embedding, with hand-written backward passes
//! checked against central differences.

mod backbone;
mod dpe;
mod gradcheck;
mod layers;
mod tensor;
mod ua;

pub use backbone::{
    parse_dpe_stages, Backbone, BackboneConfig, EmbedKind, Stage, StageConfig, StageEmbed, DEFAULT_DPE_STAGES,
    NUM_STAGES,
};
pub use dpe::{
    clamp_offset, dpe_backward, dpe_embed, dpe_embed_with_offsets, dpe_grid, dpe_kink_margin, dpe_offsets,
    dpe_raw_offsets, patch_embed, DpeParams, PatchGeometry,
};
pub use gradcheck::{grad_check, grad_check_fault_injected, GradBlock, GradCheckReport};
pub use layers::{gelu, gelu_grad, sigmoid, softmax_rows, LayerNorm, Linear, Params, LAYER_NORM_EPS};
pub use tensor::Tensor;
pub use ua::{
    apply_gate, global_avg_pool, global_avg_pool_backward, occlusion_mask, pooling_attention,
    pooling_attention_backward, self_attention, self_attention_weights, ua_block, ua_block_backward, MlpParams,
    PoolingParams, SelfAttnParams, UaParams,
};
