//! Gated linear attention: reference kernels, the transformer block used by
//! every network in the crate, and a scaling benchmark.

mod bench;
mod block;
mod kernels;

pub use bench::{bench_scaling, fit_slope, BenchDims, BenchRecord, BenchReport, Method};
pub use block::{gla_attention, BlockConfig, GlaBlock};
pub use kernels::{
    gla_forward_chunked, gla_forward_quadratic, gla_forward_recurrent, gla_recurrent_step,
    softmax_attention_causal, AttnInputs, ChunkPlan, DecayState,
};
