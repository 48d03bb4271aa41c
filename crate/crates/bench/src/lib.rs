//! Shared fixtures for the workbench benchmarks.

use cvr_core::backbones::BackboneConfig;
use cvr_core::mmoe::MmoeConfig;
use cvr_core::model::{Model, ModelConfig, PRIMARY_TASK};
use cvr_core::synth::CLICK_TASK;
use cvr_core::features::{FeatureKind, FeatureSchema, FeatureSpec};
use cvr_core::rng::Rng;
use cvr_core::tensor::Tensor;

/// A mid-size schema (D = 38, matching the canonical dataset layout).
pub fn bench_schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        FeatureSpec { name: "price".into(), kind: FeatureKind::Numerical },
        FeatureSpec { name: "quality".into(), kind: FeatureKind::Numerical },
        FeatureSpec { name: "noise_num".into(), kind: FeatureKind::Numerical },
        FeatureSpec {
            name: "category".into(),
            kind: FeatureKind::Categorical { vocab_size: 50, embed_dim: 8 },
        },
        FeatureSpec {
            name: "item_id".into(),
            kind: FeatureKind::Categorical { vocab_size: 500, embed_dim: 8 },
        },
        FeatureSpec {
            name: "title".into(),
            kind: FeatureKind::Text { ngram_n: 3, vocab_size: 200, embed_dim: 8 },
        },
        FeatureSpec {
            name: "recent_items".into(),
            kind: FeatureKind::Sequential { max_len: 8, embed_dim: 8 },
        },
    ])
    .unwrap()
}

pub fn bench_model(backbone: BackboneConfig) -> Model {
    let hidden = backbone.hidden_width();
    let mut m = Model::init(
        bench_schema(),
        ModelConfig {
            backbone,
            mmoe: MmoeConfig {
                n_experts: 4,
                expert_dim: hidden,
                tasks: vec![PRIMARY_TASK.into(), CLICK_TASK.into()],
            },
        },
        7,
    )
    .unwrap();
    for name in ["price", "quality", "noise_num"] {
        m.stats.stats.insert(name.into(), (0.0, 1.0));
    }
    m
}

pub fn bench_input(d: usize, batch: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::randn(vec![batch, d], 1.0, &mut rng)
}
