//! Gated self/cross window attention and the dual-stream transformer block.

pub mod block;
pub mod gate;
pub mod heads;
pub mod kernels;

pub use block::{BlockContext, BlockDims, DualStreamBlock};
pub use gate::{builtin_gates, DynGateMixer, GateMixer, GateRegistry, GateState, MixOnTape};
pub use heads::{
    attention_scores, gated_head, mlp_block, multi_head_attention, AttentionRecord, GatingLevel, HeadConfig,
    MhaVars, Partition, PartitionAssignment,
};
pub use kernels::{sigmoid, HeadLayout};
