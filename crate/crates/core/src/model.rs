//! Full ranking model: feature assembly, backbone, and multi-task head.

use serde::{Deserialize, Serialize};

use crate::backbones::{backbone_forward, init_backbone_params, BackboneConfig};
use crate::error::Result;
use crate::features::{
    assemble_matrix, EmbeddingTables, FeatureRecord, FeatureSchema, NormStats,
};
use crate::graph::{Graph, Var};
use crate::mmoe::{init_mmoe_params, mmoe_forward, MmoeConfig};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// The task whose logit is the serving score and whose labels gate mAP.
pub const PRIMARY_TASK: &str = "purchase";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mmoe: MmoeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.mmoe.validate()
    }
}

/// A scorable model instance: weights plus the frozen feature-side state
/// (embedding tables and normalization constants).
#[derive(Debug, Clone)]
pub struct Model {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub tables: EmbeddingTables,
    pub stats: NormStats,
}

impl Model {
    /// Fresh model with all weights drawn from `(seed, parameter name)`
    /// streams. Normalization stats start empty; estimate them from the
    /// training split before scoring.
    pub fn init(
        schema: FeatureSchema,
        config: ModelConfig,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        let d = schema.total_width();
        let mut params = ParamStore::new();
        init_backbone_params(&config.backbone, d, "", &mut params, seed)?;
        init_mmoe_params(&config.mmoe, config.backbone.hidden_width(), "", &mut params, seed)?;
        let tables = EmbeddingTables::init(&schema, seed);
        Ok(Model {
            schema,
            config,
            params,
            tables,
            stats: NormStats::default(),
        })
    }

    /// Forward from an already-bound graph input: `[B x D]` to logits
    /// `[B x T]` in task order.
    pub fn forward(&self, g: &mut Graph, x0: Var, bound: &BoundParams) -> Result<Var> {
        let hidden = backbone_forward(g, x0, &self.config.backbone, "", bound)?;
        let out = mmoe_forward(g, hidden, &self.config.mmoe, "", bound)?;
        Ok(out.logits)
    }

    /// Inference on pre-assembled inputs: `[n x D]` to `[n x T]` logits.
    pub fn score_matrix(&self, x0: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x0.clone());
        let bound = BoundParams::frozen(&mut g, &self.params);
        let logits = self.forward(&mut g, xv, &bound)?;
        Ok(g.value(logits).clone())
    }

    /// Assemble raw records and score them; returns `[n x T]` logits.
    pub fn score_records(&self, records: &[FeatureRecord]) -> Result<Tensor> {
        let x0 = assemble_matrix(records, &self.schema, &self.tables, &self.stats)?;
        self.score_matrix(&x0)
    }

    /// Primary-task scores for raw records.
    pub fn primary_scores(&self, records: &[FeatureRecord]) -> Result<Vec<f64>> {
        let t = self.config.mmoe.task_index(PRIMARY_TASK)?;
        let logits = self.score_records(records)?;
        let n_tasks = self.config.mmoe.tasks.len();
        Ok(logits
            .data()
            .chunks(n_tasks)
            .map(|row| row[t])
            .collect())
    }

    /// Digest over weights and tables (order-sensitive, bit-exact).
    pub fn digest(&self) -> u64 {
        let mut h = crate::hash::Fnv1a::new();
        h.write(&self.params.digest().to_le_bytes());
        h.write(&crate::features::tables_digest(&self.tables).to_le_bytes());
        h.finish()
    }
}
