//! Convolution-free Swin-Unet: window attention with cyclic shifts, patch
//! merging/expanding, and the U-shaped encoder–bottleneck–decoder.

mod block;
mod params;
mod unet;
mod window;

pub use block::{
    linear, mhsa, norm, patch_expanding, patch_merging, patchify, swin_block, swin_block_pair, unpatchify, GridVar,
};
pub use params::{
    BlockPair, DecoderStage, EncoderStage, LayerNormParams, Linear, ParamInit, SwinBlockParams, SwinUnetParams,
    UnetGeometry,
};
pub use unet::swin_unet_forward;
pub use window::{
    cyclic_shift, shifted_window_mask, window_index, window_partition, window_reverse, TokenGrid, WindowSpec, MASK_NEG,
};
