//! Ladder self-attention: windows and shifts, per-branch attention, light
//! feed-forward, fusion, and the assembled block.

pub mod attention;
pub mod block;
pub mod ffn;
pub mod fusion;
pub mod window;

pub use attention::BranchAttention;
pub use block::{BlockTrace, LadderBlock, LadderBlockConfig};
pub use ffn::{FeedForward, FfnKind};
pub use fusion::{Fusion, FusionKind};
pub use window::ShiftSpec;
