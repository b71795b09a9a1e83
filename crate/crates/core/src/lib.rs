//! Memory planning, batch scheduling, and serving simulation for
//! variable-length transformer inference, at desk scale.
//!
//! Serving transformer models means every request can carry a different
//! sequence length, so intermediate tensor sizes change per inference and
//! batches of mixed lengths pay for zero-padding. This crate implements the
//! pieces needed to study those effects without a GPU:
//!
//! * [`graph`] — the fused encoder computation graph, tensor usage records,
//!   and GEMM FLOP accounting.
//! * [`planner`] — a sequence-length-aware chunked memory planner with GSOC
//!   and caching-allocator baselines, plus a plan soundness verifier.
//! * [`cost`] — the latency oracle: analytic model, warm-up tables, and
//!   bilinear interpolation.
//! * [`scheduler`] — the dynamic-programming variable-length batch scheduler,
//!   naive/no-batch baselines, and trigger policies.
//! * [`reduce`] — batched softmax/layernorm reference kernels, generic over
//!   the element type.
//! * [`sim`] — a discrete-event serving simulator producing throughput and
//!   latency reports.
//! * [`exhaustive`] — brute-force searches used as ground truth on tiny
//!   instances.

pub mod cost;
pub mod exhaustive;
pub mod graph;
pub mod planner;
pub mod reduce;
pub mod scheduler;
pub mod sim;

pub use cost::{analytic_cost, warmup, CostCoeffs, CostProvider, CostTable, Latency};
pub use graph::{
    build_encoder_graph, build_encoder_layer_graph, flops, FusedGraph, ModelConfig,
    TensorUsageRecord,
};
pub use planner::{
    caching_allocator_sim, find_gap_from_chunk, mem_allocate, plan_gsoc, verify_plan, AllocStats,
    Chunk, MemoryPlan, PlannerConfig, PlannerSession, ReleasePolicy,
};
pub use reduce::{
    batched_layernorm_onepass, batched_layernorm_twopass, batched_softmax,
    simulated_block_reduce, Batch2D, Scalar,
};
pub use scheduler::{
    dp_schedule, naive_schedule, nobatch_schedule, should_trigger, BatchPlan, Request,
    TriggerPolicy,
};
pub use sim::{find_critical_point, run_sim, simulate, SchedulerAlgo, SimConfig, SimReport, Workload};

/// Single-precision batch, the serving-side element type.
pub type Batch2D32 = reduce::Batch2D<f32>;
/// Double-precision batch, used by oracles and error studies.
pub type Batch2D64 = reduce::Batch2D<f64>;
