//! Flat GEMM kernel and the cost model that picks its tiling.

mod cost;
mod flat;

pub use cost::{
    arithmetic_intensity, b_n_candidates, default_parallel_target, select_tile, tiled_intensity, CostEstimate,
    TileConfig, DEFAULT_B_K, MAX_B_N, MICRO_N, M_PAD,
};
pub(crate) use flat::micro_panel;
pub use flat::{flat_gemm, trace_pipeline, PipelineEvent, PipelineObserver};
