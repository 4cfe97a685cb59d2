//! Streaming tracker over synthetic videos.
//!
//! Each frame is encoded, fused with the memory bank, decoded to a mask, and
//! turned into a new frame memory that is optionally compressed before it
//! enters the bank.

mod config;
mod engine;
mod stubs;
mod video;

pub use config::{EngineConfig, MemoryMode, IMAGE_STRIDE};
pub use engine::{
    distill_losses, read_trace, run_video, teacher_config, write_trace, Engine, EngineState,
    StepOutput, TraceRow, VideoRun,
};
pub use stubs::{
    decode_mask, encode_image, Decoded, EncodedImage, ImageEncoder, MaskDecoder, Prompt,
};
pub use video::{SyntheticVideo, VideoFrame, VideoSpec};
