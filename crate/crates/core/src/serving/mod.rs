//! Inference serving: wire protocol, dynamic batching, the two-stage
//! scoring pipeline (threaded server and deterministic simulator), the
//! load generator, and peak-QPS search.

pub mod batcher;
pub mod client;
pub mod frame;
pub mod percentile;
pub mod server;
pub mod sim;

pub use batcher::{Batch, Batcher, BatcherConfig, Pending};
pub use client::{client_chunks, loadgen_live, ScoringClient};
pub use frame::{ScoreRequest, ScoreResponse};
pub use percentile::{nearest_rank, LatencyReport};
pub use server::{start, ServerConfig, ServerHandle};
pub use sim::{
    loadgen_sim, peak_qps_search, poisson_arrivals, qps_table_csv, simulate, QpsRow,
    SimArrival, SimLoadConfig, StageCost,
};
