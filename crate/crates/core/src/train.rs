//! Listwise multi-task training loop.
//!
//! Batches are a fixed number of query groups; the loss is computed per
//! group (softmax over that group's items, per task), summed over tasks,
//! and averaged over the groups in the batch. Groups without a positive
//! for an auxiliary task contribute zero for that task.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbones::{count_flops, BackboneConfig};
use crate::error::{Error, Result};
use crate::features::{assemble_matrix, FeatureRecord, NormStats};
use crate::graph::Graph;
use crate::loss::listwise_loss_graph;
use crate::mmoe::MmoeConfig;
use crate::model::{Model, ModelConfig, PRIMARY_TASK};
use crate::optim::{AdamState, LrSchedule};
use crate::params::BoundParams;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One query's items and per-task binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingGroup {
    pub query_id: u64,
    pub records: Vec<FeatureRecord>,
    /// task name -> 0/1 label per item.
    pub labels: BTreeMap<String, Vec<u8>>,
}

impl RankingGroup {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::contract(format!("group {} has no items", self.query_id)));
        }
        for (task, ys) in &self.labels {
            if ys.len() != self.records.len() {
                return Err(Error::contract(format!(
                    "group {}: task {task} has {} labels for {} items",
                    self.query_id,
                    ys.len(),
                    self.records.len()
                )));
            }
        }
        let primary = self.primary_labels()?;
        if primary.iter().all(|&y| y == 0) {
            return Err(Error::contract(format!(
                "group {}: no positive {PRIMARY_TASK} label",
                self.query_id
            )));
        }
        Ok(())
    }

    pub fn primary_labels(&self) -> Result<&Vec<u8>> {
        self.labels
            .get(PRIMARY_TASK)
            .ok_or_else(|| Error::contract(format!("group {} lacks {PRIMARY_TASK} labels", self.query_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_peak: f64,
    pub lr_final: f64,
    /// Fraction of total steps spent on linear warmup.
    pub warmup_frac: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { lr_peak: 3e-3, lr_final: 3e-5, warmup_frac: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// A complete training-run declaration (the config document the CLI
/// reads). Its digest is stable under key reordering in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_path: String,
    pub backbone: BackboneConfig,
    pub mmoe: MmoeConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch_groups")]
    pub batch_groups: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Train on the most recent N days of the dataset.
    #[serde(default)]
    pub data_days: Option<usize>,
    #[serde(default)]
    pub warmstart_from: Option<String>,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_batch_groups() -> usize {
    32
}

fn default_epochs() -> usize {
    5
}

impl RunConfig {
    /// The default desk-scale run: a two-branch MaskNet with width-64
    /// cross/deep layers and a 4-expert head over purchase + click.
    pub fn default_masknet(schema_path: impl Into<String>) -> RunConfig {
        RunConfig {
            schema_path: schema_path.into(),
            backbone: BackboneConfig::Masknet {
                cross_width: 64,
                deep_width: 64,
                parallel_blocks: 2,
                sequential_blocks: 0,
            },
            mmoe: MmoeConfig {
                n_experts: 4,
                expert_dim: 64,
                tasks: vec![PRIMARY_TASK.to_string(), crate::synth::CLICK_TASK.to_string()],
            },
            schedule: ScheduleConfig::default(),
            batch_groups: default_batch_groups(),
            epochs: default_epochs(),
            seed: 7,
            data_days: None,
            warmstart_from: None,
            adam: AdamConfig::default(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { backbone: self.backbone.clone(), mmoe: self.mmoe.clone() }
    }

    /// FNV-1a over the canonical (sorted-key, compact) JSON form.
    pub fn digest(&self) -> u64 {
        let value = serde_json::to_value(self).expect("serializable");
        crate::hash::fnv1a(value.to_string().as_bytes())
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad run config: {e}")))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_groups: usize,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Steps between metrics rows.
    pub log_interval: usize,
}

impl TrainOptions {
    pub fn from_run_config(rc: &RunConfig) -> TrainOptions {
        TrainOptions {
            epochs: rc.epochs,
            batch_groups: rc.batch_groups,
            schedule: rc.schedule.clone(),
            adam: rc.adam.clone(),
            seed: rc.seed,
            log_interval: 20,
        }
    }
}

/// One metrics-log row (written as CSV
/// `step,lr,loss_total,loss_<task>...,groups_per_sec`).
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub per_task: Vec<f64>,
    pub groups_per_sec: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub steps: u64,
    /// Wall-clock training throughput, first 10% of steps excluded.
    pub groups_per_sec: f64,
}

/// Estimate normalization stats for any numerical feature the model does
/// not already carry stats for (warmstart keeps surviving features').
pub fn ensure_stats(model: &mut Model, groups: &[RankingGroup]) {
    let fresh = NormStats::estimate(&model.schema, groups.iter().flat_map(|g| g.records.iter()));
    for (name, ms) in fresh.stats {
        model.stats.stats.entry(name).or_insert(ms);
    }
}

/// Train `model` on `groups`. Fully deterministic given (model, groups,
/// options): batch order, init, and accumulation are all seeded.
pub fn train(mut model: Model, groups: &[RankingGroup], opts: &TrainOptions) -> Result<TrainOutput> {
    for g in groups {
        g.validate()?;
    }
    if groups.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    ensure_stats(&mut model, groups);

    // pre-assemble x0 once; features are frozen during training
    let x0: Vec<Tensor> = groups
        .iter()
        .map(|g| assemble_matrix(&g.records, &model.schema, &model.tables, &model.stats))
        .collect::<Result<_>>()?;

    let batches_per_epoch = groups.len().div_ceil(opts.batch_groups);
    let total_steps = (opts.epochs * batches_per_epoch) as u64;
    let tasks = model.config.mmoe.tasks.clone();

    let mut metrics = Vec::new();
    if total_steps == 0 {
        return Ok(TrainOutput { model, metrics, steps: 0, groups_per_sec: 0.0 });
    }

    let warmup = ((opts.schedule.warmup_frac * total_steps as f64).round() as u64).min(total_steps);
    let schedule = LrSchedule::new(warmup, total_steps, opts.schedule.lr_peak, opts.schedule.lr_final)?;
    let mut adam = AdamState::new(&model.params.shapes())
        .with_hyper(opts.adam.beta1, opts.adam.beta2, opts.adam.eps);

    let warmup_cutoff = (total_steps as f64 * 0.1).ceil() as u64;
    let mut measured_groups = 0usize;
    let mut measured_start: Option<Instant> = None;
    let mut interval_groups = 0usize;
    let mut interval_start = Instant::now();

    let mut step: u64 = 0;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        Rng::stream(opts.seed, &format!("epoch/{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(opts.batch_groups) {
            step += 1;
            let lr = schedule.lr_at(step)?;

            let mut g = Graph::new();
            let bound = BoundParams::trainable(&mut g, &model.params);

            // one stacked forward over every item in the batch
            let d = model.schema.total_width();
            let total_items: usize = chunk.iter().map(|&i| x0[i].shape()[0]).sum();
            let mut stacked = Vec::with_capacity(total_items * d);
            for &i in chunk {
                stacked.extend_from_slice(x0[i].data());
            }
            let xv = g.constant(Tensor::new(vec![total_items, d], stacked)?);
            let logits = model.forward(&mut g, xv, &bound)?;

            let mut task_losses: Vec<Option<crate::graph::Var>> = vec![None; tasks.len()];
            let mut row = 0usize;
            for &i in chunk {
                let n = x0[i].shape()[0];
                let group_logits = g.slice_rows(logits, row, n)?;
                row += n;
                for (t, task) in tasks.iter().enumerate() {
                    let Some(ys) = groups[i].labels.get(task) else {
                        continue;
                    };
                    if ys.iter().all(|&y| y == 0) {
                        continue; // zero-positive auxiliary group: skip
                    }
                    let col = g.slice_last(group_logits, t, 1)?;
                    let scores = g.reshape(col, vec![1, n])?;
                    let l = listwise_loss_graph(&mut g, scores, ys)?;
                    task_losses[t] = Some(match task_losses[t] {
                        None => l,
                        Some(acc) => g.add(acc, l)?,
                    });
                }
            }

            let inv = 1.0 / chunk.len() as f64;
            let mut total: Option<crate::graph::Var> = None;
            let mut per_task_vals = vec![0.0; tasks.len()];
            for (t, tl) in task_losses.iter().enumerate() {
                if let Some(l) = tl {
                    per_task_vals[t] = g.value(*l).scalar_value()? * inv;
                    total = Some(match total {
                        None => *l,
                        Some(acc) => g.add(acc, *l)?,
                    });
                }
            }
            let total = match total {
                Some(t) => g.scale_const(t, inv),
                None => g.constant(Tensor::scalar(0.0)),
            };
            let loss_value = g.value(total).scalar_value()?;
            if !loss_value.is_finite() {
                // identify the offending group for the diagnostic
                for &i in chunk {
                    let logits = model.score_matrix(&x0[i])?;
                    if !logits.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss at step {step}, group {}",
                            groups[i].query_id
                        )));
                    }
                }
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }

            g.backward(total)?;
            let grads = bound.grads(&g, &model.params);
            adam.step(model.params.tensors_mut(), &grads, lr)?;

            // throughput bookkeeping
            if step == warmup_cutoff + 1 && measured_start.is_none() {
                measured_start = Some(Instant::now());
            }
            if step > warmup_cutoff {
                measured_groups += chunk.len();
            }
            interval_groups += chunk.len();

            if step % opts.log_interval as u64 == 0 || step == total_steps {
                let dt = interval_start.elapsed().as_secs_f64().max(1e-9);
                metrics.push(MetricsRow {
                    step,
                    lr,
                    loss_total: loss_value,
                    per_task: per_task_vals.clone(),
                    groups_per_sec: interval_groups as f64 / dt,
                });
                interval_groups = 0;
                interval_start = Instant::now();
            }
        }
    }

    let groups_per_sec = match measured_start {
        Some(t0) if measured_groups > 0 => {
            measured_groups as f64 / t0.elapsed().as_secs_f64().max(1e-9)
        }
        _ => 0.0,
    };
    Ok(TrainOutput { model, metrics, steps: step, groups_per_sec })
}

/// Mean total loss over a whole dataset with frozen weights (an
/// apples-to-apples number; per-batch losses fluctuate with the number of
/// positive labels drawn into each batch).
pub fn dataset_loss(model: &Model, groups: &[RankingGroup]) -> Result<f64> {
    let tasks = &model.config.mmoe.tasks;
    let mut total = 0.0;
    for g in groups {
        let logits = model.score_records(&g.records)?;
        let n_tasks = tasks.len();
        for (t, task) in tasks.iter().enumerate() {
            if let Some(ys) = g.labels.get(task) {
                let scores: Vec<f64> = logits.data().chunks(n_tasks).map(|row| row[t]).collect();
                total += crate::loss::listwise_loss(&scores, ys)?;
            }
        }
    }
    Ok(total / groups.len() as f64)
}

/// Render metrics rows as the CSV log.
pub fn metrics_csv(tasks: &[String], rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,lr,loss_total");
    for t in tasks {
        out.push_str(&format!(",loss_{t}"));
    }
    out.push_str(",groups_per_sec\n");
    for r in rows {
        out.push_str(&format!("{},{},{}", r.step, r.lr, r.loss_total));
        for v in &r.per_task {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.groups_per_sec));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub groups_per_sec: f64,
    pub flops_per_sec: f64,
    pub steps_measured: u64,
}

/// Measure wall-clock training throughput over `steps` batches (cycling
/// the dataset), discarding the first 10% as warmup. Fewer than 10 steps
/// cannot clear the warmup threshold and is an error.
pub fn measure_throughput(
    model: &Model,
    groups: &[RankingGroup],
    steps: usize,
    opts: &TrainOptions,
) -> Result<ThroughputReport> {
    if steps < 10 {
        return Err(Error::contract(format!(
            "throughput measurement needs >= 10 steps to exclude warmup, got {steps}"
        )));
    }
    // size the epoch count so at least `steps` batches run
    let batches_per_epoch = groups.len().div_ceil(opts.batch_groups);
    let epochs = steps.div_ceil(batches_per_epoch);
    let mut run_opts = opts.clone();
    run_opts.epochs = epochs;
    let out = train(model.clone(), groups, &run_opts)?;
    let d = model.schema.total_width();
    let avg_group: f64 =
        groups.iter().map(|g| g.records.len() as f64).sum::<f64>() / groups.len() as f64;
    let flops = count_flops(&model.config.backbone, d, 1)? as f64;
    Ok(ThroughputReport {
        groups_per_sec: out.groups_per_sec,
        flops_per_sec: flops * out.groups_per_sec * avg_group,
        steps_measured: out.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureKind, FeatureSchema, FeatureSpec, FeatureValue};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec { name: "x".into(), kind: FeatureKind::Numerical },
            FeatureSpec { name: "y".into(), kind: FeatureKind::Numerical },
        ])
        .unwrap()
    }

    fn model() -> Model {
        Model::init(
            schema(),
            ModelConfig {
                backbone: BackboneConfig::Masknet {
                    cross_width: 8,
                    deep_width: 8,
                    parallel_blocks: 1,
                    sequential_blocks: 0,
                },
                mmoe: MmoeConfig {
                    n_experts: 2,
                    expert_dim: 8,
                    tasks: vec![PRIMARY_TASK.to_string(), "click".to_string()],
                },
            },
            7,
        )
        .unwrap()
    }

    /// Learnable toy data: purchase goes to the item with the largest x.
    fn toy_groups(n: usize, seed: u64) -> Vec<RankingGroup> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|q| {
                let items = 4;
                let xs: Vec<f64> = (0..items).map(|_| rng.next_range(-1.0, 1.0)).collect();
                let best = xs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                let records = xs
                    .iter()
                    .map(|&x| FeatureRecord {
                        values: vec![
                            FeatureValue::Numerical(x),
                            FeatureValue::Numerical(rng.next_range(-1.0, 1.0)),
                        ],
                    })
                    .collect();
                let mut labels = BTreeMap::new();
                labels.insert(
                    PRIMARY_TASK.to_string(),
                    (0..items).map(|i| (i == best) as u8).collect(),
                );
                labels.insert(
                    "click".to_string(),
                    (0..items).map(|i| (xs[i] > 0.0) as u8).collect(),
                );
                RankingGroup { query_id: q as u64, records, labels }
            })
            .collect()
    }

    fn opts(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_groups: 8,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            seed: 3,
            log_interval: 5,
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let m = model();
        let d0 = m.digest();
        let out = train(m, &toy_groups(10, 1), &opts(0)).unwrap();
        assert_eq!(out.model.digest(), d0);
        assert!(out.metrics.is_empty());
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn same_seed_bit_identical_checkpoints() {
        let groups = toy_groups(20, 1);
        let a = train(model(), &groups, &opts(2)).unwrap();
        let b = train(model(), &groups, &opts(2)).unwrap();
        assert_eq!(a.model.digest(), b.model.digest());
        // metric values identical too (loss path is deterministic)
        let la: Vec<f64> = a.metrics.iter().map(|r| r.loss_total).collect();
        let lb: Vec<f64> = b.metrics.iter().map(|r| r.loss_total).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn training_descends_on_learnable_data() {
        let groups = toy_groups(200, 7);
        let mut init = model();
        ensure_stats(&mut init, &groups);
        let before = dataset_loss(&init, &groups).unwrap();
        let out = train(init, &groups, &opts(5)).unwrap();
        let after = dataset_loss(&out.model, &groups).unwrap();
        assert!(after < before, "no descent: before {before}, after {after}");
    }

    #[test]
    fn group_validation_rejects_missing_primary_positive() {
        let mut g = toy_groups(1, 1).remove(0);
        g.labels.get_mut(PRIMARY_TASK).unwrap().fill(0);
        assert!(g.validate().is_err());
    }

    #[test]
    fn throughput_guard_and_measurement() {
        let groups = toy_groups(40, 2);
        let m = model();
        assert!(measure_throughput(&m, &groups, 5, &opts(1)).is_err());
        let r = measure_throughput(&m, &groups, 10, &opts(1)).unwrap();
        assert!(r.groups_per_sec > 0.0);
        assert!(r.flops_per_sec > r.groups_per_sec);
        assert!(r.steps_measured >= 10);
    }

    #[test]
    fn run_config_digest_stable_under_key_order() {
        let a = r#"{"schema_path":"s.txt","backbone":{"family":"masknet","cross_width":8,"deep_width":8,"parallel_blocks":1,"sequential_blocks":0},"mmoe":{"n_experts":2,"expert_dim":8,"tasks":["purchase"]},"seed":7}"#;
        let b = r#"{"seed":7,"mmoe":{"tasks":["purchase"],"n_experts":2,"expert_dim":8},"backbone":{"deep_width":8,"family":"masknet","sequential_blocks":0,"parallel_blocks":1,"cross_width":8},"schema_path":"s.txt"}"#;
        let ca = RunConfig::from_json(a).unwrap();
        let cb = RunConfig::from_json(b).unwrap();
        assert_eq!(ca.digest(), cb.digest());
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricsRow {
            step: 1,
            lr: 0.001,
            loss_total: 0.5,
            per_task: vec![0.3, 0.2],
            groups_per_sec: 100.0,
        }];
        let csv = metrics_csv(&["purchase".into(), "click".into()], &rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,lr,loss_total,loss_purchase,loss_click,groups_per_sec"
        );
        assert_eq!(lines.next().unwrap(), "1,0.001,0.5,0.3,0.2,100");
    }
}
