//! Desk-scale conversion-rate ranking workbench.
//!
//! Everything needed to study how listwise CVR rankers behave as the
//! backbone, the embeddings, and the data grow: a small f64 autodiff
//! engine, four interaction backbones plus ensembling, a multi-gate
//! mixture-of-experts head, listwise softmax training with warmstart
//! checkpoints, mAP evaluation with permutation feature importance, a
//! deterministic synthetic dataset generator, a dynamic-batching inference
//! server with a staged pipeline, and the experiment harness that ties the
//! sweeps together.

pub mod backbones;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod gradcheck;
pub mod features;
pub mod harness;
pub mod hash;
pub mod mmoe;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod train;
pub mod serving;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use tensor::Tensor;
