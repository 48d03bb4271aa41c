//! `cvr` — desk-scale CVR ranking workbench.
//!
//! Subcommands cover the full experiment loop: synthesize data, train,
//! evaluate, sweep scaling factors and data windows, measure additivity,
//! feature importance, warmstart economics, and serve/benchmark the
//! scoring server.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cvr_core::checkpoint;
use cvr_core::eval::{self, evaluate_model, normalize_importance, perm_importance};
use cvr_core::features::FeatureSchema;
use cvr_core::harness;
use cvr_core::model::Model;
use cvr_core::serving::{
    self, loadgen_live, loadgen_sim, peak_qps_search, qps_table_csv, BatcherConfig, LatencyReport,
    ServerConfig, SimLoadConfig, StageCost,
};
use cvr_core::synth::{self, SynthSpec};
use cvr_core::train::{train, RankingGroup, RunConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "cvr", about = "CVR ranking scaling workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic day-partitioned dataset.
    Synth(SynthArgs),
    /// Train a model from a run-config document.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's held-out split.
    Eval(EvalArgs),
    /// Sweep one scaling factor (mean over replicate seeds).
    Grid(GridArgs),
    /// Sweep training-data windows and fit the log-linear trend.
    DataSweep(DataSweepArgs),
    /// Measure per-dimension gains and their additivity residual.
    Additivity(AdditivityArgs),
    /// Permutation feature importance on the held-out split.
    Importance(ImportanceArgs),
    /// Warmstarted fine-tune vs from-scratch comparison.
    WarmstartCompare(WarmstartArgs),
    /// Serve a checkpoint over TCP with dynamic batching.
    Serve(ServeArgs),
    /// Generate load against a live server, or simulate one.
    Loadgen(LoadgenArgs),
    /// Peak-QPS-vs-batch-timeout sweep under the simulated clock.
    QpsSweep(QpsSweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset spec JSON; omit for the canonical desk-scale spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Seed override (applies to the canonical spec).
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config JSON document.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics-log CSV output path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Scaling factor name declared by the config's backbone family.
    #[arg(long)]
    factor: String,
    /// Comma-separated factor values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    /// Comma-separated replicate seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataSweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated window sizes in days.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdditivityArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Days for the data-scaling arm (base uses the config's data_days).
    #[arg(long)]
    data_days: usize,
    /// Factor and value for the backbone-scaling arm, e.g. cross_width=128.
    #[arg(long)]
    backbone_factor: String,
    /// Embedding-dimension multiplier for the embedding arm.
    #[arg(long, default_value_t = 2)]
    embed_scale: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Features to shuffle; `a` for first-order, `a:b` for a pair.
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WarmstartArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Features absent from the base model (the "new" ones).
    #[arg(long, value_delimiter = ',')]
    new_features: Vec<String>,
    #[arg(long, default_value_t = 2)]
    warm_epochs: usize,
    #[arg(long, default_value_t = 5)]
    scratch_epochs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Schema file; must match the checkpoint's fingerprint.
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    batch_timeout_ms: f64,
    #[arg(long, default_value_t = 256)]
    max_batch_items: usize,
    #[arg(long, default_value_t = 1024)]
    queue_capacity: usize,
    /// Preprocess-stage cost model `fixed_ms,per_item_ms`.
    #[arg(long, default_value = "0,0")]
    stage_a_cost: String,
    /// Backbone-stage cost model `fixed_ms,per_item_ms`.
    #[arg(long, default_value = "0,0")]
    stage_b_cost: String,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    /// Deterministic scoring mode: stage-cost sleeps and the batching
    /// timeout are disabled (timing experiments use `qps-sweep`, which
    /// runs the same pipeline under a simulated clock).
    #[arg(long, default_value_t = false)]
    sim_clock: bool,
}

#[derive(Args)]
struct LoadgenArgs {
    /// Live server address (`host:port`). Omit with --sim-clock.
    #[arg(long)]
    addr: Option<String>,
    /// Dataset directory; eval-split records form the request pool.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    qps: f64,
    #[arg(long, default_value_t = 10.0)]
    duration_s: f64,
    /// Items per request.
    #[arg(long, default_value_t = 8)]
    items: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Annotate the report with a pass/fail against this p99 bound.
    #[arg(long)]
    latency_bound_ms: Option<f64>,
    /// Run the peak-QPS sweep over these timeouts (simulated clock only).
    #[arg(long, value_delimiter = ',')]
    timeout_sweep: Option<Vec<f64>>,
    /// Use the in-process simulated clock instead of a live server.
    #[arg(long, default_value_t = false)]
    sim_clock: bool,
    #[arg(long, default_value = "5,0.1")]
    stage_a_cost: String,
    #[arg(long, default_value = "5,0.1")]
    stage_b_cost: String,
    #[arg(long, default_value_t = 10.0)]
    batch_timeout_ms: f64,
    #[arg(long, default_value_t = 256)]
    max_batch_items: usize,
    #[arg(long, default_value_t = 4096)]
    queue_capacity: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QpsSweepArgs {
    #[arg(long, default_value_t = 50.0)]
    latency_bound_ms: f64,
    /// First value is the no-batching baseline row.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20,30")]
    timeouts: Vec<f64>,
    #[arg(long, default_value = "5,0.1")]
    stage_a_cost: String,
    #[arg(long, default_value = "5,0.1")]
    stage_b_cost: String,
    #[arg(long, default_value_t = 5.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 1)]
    items: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    max_batch_items: usize,
    #[arg(long, default_value_t = 4096)]
    queue_capacity: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Grid(a) => cmd_grid(a),
        Command::DataSweep(a) => cmd_data_sweep(a),
        Command::Additivity(a) => cmd_additivity(a),
        Command::Importance(a) => cmd_importance(a),
        Command::WarmstartCompare(a) => cmd_warmstart(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Loadgen(a) => cmd_loadgen(a),
        Command::QpsSweep(a) => cmd_qps_sweep(a),
    }
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_json(&text)?)
}

/// Load the dataset and the training window/eval split for a run config.
fn load_training_data(
    config: &RunConfig,
    data: &Path,
) -> Result<(synth::Dataset, Vec<RankingGroup>, Vec<RankingGroup>)> {
    let dataset = synth::load_dataset(data)?;
    let days = config.data_days.unwrap_or(dataset.spec.n_days);
    let train_groups = dataset.window_groups(days)?;
    let eval_groups = dataset.eval_groups();
    Ok((dataset, train_groups, eval_groups))
}

/// Project dataset groups onto the configured schema when it is a subset
/// of the dataset's (the warmstart flow trains on fewer features).
fn project_groups(
    groups: Vec<RankingGroup>,
    from: &FeatureSchema,
    to: &FeatureSchema,
) -> Result<Vec<RankingGroup>> {
    if from == to {
        return Ok(groups);
    }
    groups
        .into_iter()
        .map(|g| {
            Ok(RankingGroup {
                records: g
                    .records
                    .iter()
                    .map(|r| r.project(from, to))
                    .collect::<std::result::Result<_, _>>()?,
                ..g
            })
        })
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(path) => SynthSpec::from_json(&std::fs::read_to_string(path)?)?,
        None => SynthSpec::canonical(a.seed),
    };
    let dataset = synth::generate(&spec)?;
    synth::write_dataset(&dataset, &a.out)?;
    eprintln!(
        "dataset {:016x}: {} train days + {} eval days x {} groups -> {}",
        spec.digest(),
        spec.n_days,
        spec.eval_days,
        spec.groups_per_day,
        a.out.display()
    );
    eprintln!("oracle mAP on eval split: {:.4}", dataset.oracle_map()?);
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let config = load_run_config(&a.config)?;
    let (dataset, train_groups, _) = load_training_data(&config, &a.data)?;
    let schema = FeatureSchema::from_text(
        &std::fs::read_to_string(&config.schema_path)
            .with_context(|| format!("reading schema {}", config.schema_path))?,
    )?;
    let train_groups = project_groups(train_groups, &dataset.spec.schema, &schema)?;

    let model = match &config.warmstart_from {
        Some(source) => {
            let ckpt = checkpoint::load(Path::new(source))?;
            checkpoint::warmstart_load(&ckpt, schema, config.model_config(), config.seed)?
        }
        None => Model::init(schema, config.model_config(), config.seed)?,
    };
    let opts = TrainOptions::from_run_config(&config);
    let out = train(model, &train_groups, &opts)?;
    checkpoint::save(
        &a.out,
        &out.model,
        config.digest(),
        checkpoint::Meta { steps: out.steps, seed: config.seed },
    )?;
    if let Some(metrics_path) = &a.metrics {
        std::fs::write(
            metrics_path,
            cvr_core::train::metrics_csv(&config.mmoe.tasks, &out.metrics),
        )?;
    }
    eprintln!(
        "trained {} steps at {:.1} groups/s -> {}",
        out.steps,
        out.groups_per_sec,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let config_digest = ckpt.config_digest;
    let model = ckpt.into_model()?;
    let dataset = synth::load_dataset(&a.data)?;
    let eval_groups = project_groups(dataset.eval_groups(), &dataset.spec.schema, &model.schema)?;
    let summary = evaluate_model(&model, &eval_groups)?;
    let mut csv = format!("# config_digest={config_digest:016x}\nmetric,value\n");
    for (k, v) in eval::summary_rows(&summary) {
        csv.push_str(&format!("{k},{v}\n"));
    }
    emit(a.out.as_deref(), &csv)
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let config = load_run_config(&a.config)?;
    let dataset = synth::load_dataset(&a.data)?;
    let grid = harness::GridSpec {
        base: config,
        factor: a.factor,
        values: a.values,
        replicate_seeds: a.seeds,
    };
    let report = harness::run_grid(&grid, &dataset)?;
    emit(a.out.as_deref(), &harness::grid_csv(&report))
}

fn cmd_data_sweep(a: DataSweepArgs) -> Result<()> {
    let config = load_run_config(&a.config)?;
    let dataset = synth::load_dataset(&a.data)?;
    let report = harness::data_sweep(&config, &dataset, &a.windows, &a.seeds)?;
    emit(a.out.as_deref(), &harness::data_sweep_csv(&report))
}

fn cmd_additivity(a: AdditivityArgs) -> Result<()> {
    let base = load_run_config(&a.config)?;
    let dataset = synth::load_dataset(&a.data)?;
    let (factor, value) = a
        .backbone_factor
        .split_once('=')
        .context("--backbone-factor must be name=value")?;
    let value: usize = value.parse().context("factor value")?;

    let eval_groups = dataset.eval_groups();
    let run = |config: &RunConfig, schema: &FeatureSchema| -> Result<f64> {
        let days = config.data_days.unwrap_or(dataset.spec.n_days);
        let groups =
            project_groups(dataset.window_groups(days)?, &dataset.spec.schema, schema)?;
        let eval_groups =
            project_groups(eval_groups.clone(), &dataset.spec.schema, schema)?;
        let model = Model::init(schema.clone(), config.model_config(), a.seed)?;
        let mut opts = TrainOptions::from_run_config(config);
        opts.seed = a.seed;
        let out = train(model, &groups, &opts)?;
        Ok(evaluate_model(&out.model, &eval_groups)?.map)
    };

    let base_schema = dataset.spec.schema.clone();
    let scaled_schema = harness::scale_embedding_dims(&base_schema, a.embed_scale)?;

    let base_map = run(&base, &base_schema)?;
    let mut data_cfg = base.clone();
    data_cfg.data_days = Some(a.data_days);
    let data_map = run(&data_cfg, &base_schema)?;
    let mut backbone_cfg = base.clone();
    backbone_cfg.backbone = base.backbone.with_factor(factor, value)?;
    let backbone_map = run(&backbone_cfg, &base_schema)?;
    let embedding_map = run(&base, &scaled_schema)?;
    let mut combined_cfg = backbone_cfg.clone();
    combined_cfg.data_days = Some(a.data_days);
    let combined_map = run(&combined_cfg, &scaled_schema)?;

    let report =
        harness::additivity_report(base_map, data_map, backbone_map, embedding_map, combined_map);
    emit(a.out.as_deref(), &harness::additivity_csv(&report, base.digest()))
}

fn cmd_importance(a: ImportanceArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let config_digest = ckpt.config_digest;
    let model = ckpt.into_model()?;
    let dataset = synth::load_dataset(&a.data)?;
    let eval_groups = project_groups(dataset.eval_groups(), &dataset.spec.schema, &model.schema)?;
    if a.features.is_empty() {
        bail!("--features requires at least one entry");
    }
    let mut drops = Vec::new();
    for entry in &a.features {
        let parts: Vec<&str> = entry.split(':').collect();
        let result = perm_importance(
            &model,
            &eval_groups,
            &parts.iter().map(|s| *s).collect::<Vec<_>>(),
            a.repeats,
            a.seed,
        )?;
        drops.push((entry.clone(), result.mean_drop()));
    }
    let normalized = normalize_importance(&drops)?;
    emit(
        a.out.as_deref(),
        &harness::importance_csv(&normalized.shares, config_digest, normalized.degenerate),
    )
}

fn cmd_warmstart(a: WarmstartArgs) -> Result<()> {
    let config = load_run_config(&a.config)?;
    let dataset = synth::load_dataset(&a.data)?;
    if a.new_features.is_empty() {
        bail!("--new-features requires at least one feature name");
    }
    let keep: Vec<&str> = dataset
        .spec
        .schema
        .specs()
        .iter()
        .map(|s| s.name.as_str())
        .filter(|n| !a.new_features.iter().any(|f| f == n))
        .collect();
    let base_schema = dataset.spec.schema.project(&keep)?;
    let cmp = harness::warmstart_compare(
        &dataset,
        &base_schema,
        &config,
        a.warm_epochs,
        a.scratch_epochs,
        a.seed,
    )?;
    let csv = format!(
        "# config_digest={:016x}\nmetric,value\nwarm_map,{:.6}\nscratch_map,{:.6}\ndelta_map_abs,{:.6}\nwarm_secs,{:.3}\nscratch_secs,{:.3}\ntime_ratio,{:.3}\n",
        config.digest(),
        cmp.warm_map,
        cmp.scratch_map,
        cmp.delta_map_abs(),
        cmp.warm_secs,
        cmp.scratch_secs,
        cmp.time_ratio()
    );
    emit(a.out.as_deref(), &csv)
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let schema_text = std::fs::read_to_string(&a.schema)?;
    let schema = FeatureSchema::from_text(&schema_text)?;
    let fingerprint = ckpt.schema_fingerprint;
    let model = ckpt.into_model()?;
    // refuse to serve on any schema mismatch
    serving::server::verify_servable(&model, schema.fingerprint())?;
    let (timeout_ms, stage_a, stage_b) = if a.sim_clock {
        // deterministic scoring mode: no sleeps, immediate dispatch
        (0.0, StageCost::zero(), StageCost::zero())
    } else {
        (
            a.batch_timeout_ms,
            StageCost::parse(&a.stage_a_cost)?,
            StageCost::parse(&a.stage_b_cost)?,
        )
    };
    let handle = serving::start(
        ServerConfig {
            model: Arc::new(model),
            batcher: BatcherConfig::from_ms(timeout_ms, a.max_batch_items, a.queue_capacity),
            stage_a,
            stage_b,
        },
        a.port,
    )?;
    eprintln!(
        "serving checkpoint (schema {fingerprint:016x}) on {} (timeout {timeout_ms}ms, max batch {} items)",
        handle.addr, a.max_batch_items
    );
    // serve until interrupted
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn report_csv(report: &LatencyReport, bound_ms: Option<f64>) -> String {
    let mut csv = format!("{}\n{}\n", LatencyReport::csv_header(), report.csv_row());
    if let Some(bound) = bound_ms {
        let ok = report.valid && report.p99_ms() <= bound;
        csv.push_str(&format!("# p99_within_{bound}ms={ok}\n"));
    }
    csv
}

fn cmd_loadgen(a: LoadgenArgs) -> Result<()> {
    if a.sim_clock {
        let cfg = SimLoadConfig {
            duration_s: a.duration_s,
            items_per_request: a.items,
            stage_a: StageCost::parse(&a.stage_a_cost)?,
            stage_b: StageCost::parse(&a.stage_b_cost)?,
            max_batch_items: a.max_batch_items,
            queue_capacity: a.queue_capacity,
            seed: a.seed,
        };
        if let Some(timeouts) = &a.timeout_sweep {
            let bound = a
                .latency_bound_ms
                .context("--timeout-sweep needs --latency-bound-ms")?;
            let rows = peak_qps_search(bound, timeouts, &cfg)?;
            return emit(a.out.as_deref(), &qps_table_csv(&rows));
        }
        let report = loadgen_sim(a.qps, a.batch_timeout_ms, &cfg)?;
        return emit(a.out.as_deref(), &report_csv(&report, a.latency_bound_ms));
    }

    if a.timeout_sweep.is_some() {
        bail!("--timeout-sweep requires --sim-clock (the sweep drives the simulated pipeline)");
    }
    let addr = a.addr.as_deref().context("--addr required without --sim-clock")?;
    let data = a.data.as_deref().context("--data required without --sim-clock")?;
    let dataset = synth::load_dataset(data)?;
    let pool: Vec<_> = dataset
        .eval_groups()
        .iter()
        .flat_map(|g| g.records.iter().cloned())
        .collect();
    let report = loadgen_live(
        addr,
        &dataset.spec.schema,
        &pool,
        a.qps,
        a.duration_s,
        a.items,
        a.seed,
    )?;
    emit(a.out.as_deref(), &report_csv(&report, a.latency_bound_ms))
}

fn cmd_qps_sweep(a: QpsSweepArgs) -> Result<()> {
    let cfg = SimLoadConfig {
        duration_s: a.duration_s,
        items_per_request: a.items,
        stage_a: StageCost::parse(&a.stage_a_cost)?,
        stage_b: StageCost::parse(&a.stage_b_cost)?,
        max_batch_items: a.max_batch_items,
        queue_capacity: a.queue_capacity,
        seed: a.seed,
    };
    let rows = peak_qps_search(a.latency_bound_ms, &a.timeouts, &cfg)?;
    emit(a.out.as_deref(), &qps_table_csv(&rows))
}
