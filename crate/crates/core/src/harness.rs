//! Experiment harness: scaling-factor grids, data-window sweeps,
//! compound-scaling additivity, warmstart comparisons, and importance
//! reports. Every report is CSV with a leading comment line embedding
//! the digest of the configuration that produced it.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbones::count_flops;
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::features::{FeatureKind, FeatureSchema};
use crate::hash::Fnv1a;
use crate::model::Model;
use crate::synth::Dataset;
use crate::train::{train, RankingGroup, RunConfig, TrainOptions};

/// One scaling-factor sweep over a base run.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub base: RunConfig,
    pub factor: String,
    pub values: Vec<usize>,
    pub replicate_seeds: Vec<u64>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.replicate_seeds.is_empty() {
            return Err(Error::contract("grid needs values and seeds"));
        }
        // the factor must be declared by the base family
        self.base.backbone.factor(&self.factor)?;
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&self.base.digest().to_le_bytes());
        h.write(self.factor.as_bytes());
        for v in &self.values {
            h.write(&(*v as u64).to_le_bytes());
        }
        for s in &self.replicate_seeds {
            h.write(&s.to_le_bytes());
        }
        h.finish()
    }
}

/// One grid row; deltas are percentages relative to the base cell.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub factor_value: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub delta_map_pct: f64,
    pub throughput_mean: f64,
    pub delta_throughput_pct: f64,
    pub inference_flops: u64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub digest: u64,
    pub factor: String,
    pub rows: Vec<ReportRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train+evaluate one cell once; returns (eval mAP, training groups/sec).
fn run_cell(
    config: &RunConfig,
    schema: &FeatureSchema,
    train_groups: &[RankingGroup],
    eval_groups: &[RankingGroup],
    seed: u64,
) -> Result<(f64, f64)> {
    let model = Model::init(schema.clone(), config.model_config(), seed)?;
    let mut opts = TrainOptions::from_run_config(config);
    opts.seed = seed;
    let out = train(model, train_groups, &opts)?;
    let summary = evaluate_model(&out.model, eval_groups)?;
    Ok((summary.map, out.groups_per_sec))
}

/// Run every cell of the grid (mean over replicate seeds). The base cell
/// is the one whose value equals the base config's factor value; it is
/// prepended when missing from the list. Failed cells keep the grid
/// going.
pub fn run_grid(grid: &GridSpec, dataset: &Dataset) -> Result<GridReport> {
    grid.validate()?;
    let schema = &dataset.spec.schema;
    let days = grid.base.data_days.unwrap_or(dataset.spec.n_days);
    let train_groups = dataset.window_groups(days)?;
    let eval_groups = dataset.eval_groups();

    let base_value = grid.base.backbone.factor(&grid.factor)?;
    let mut values = grid.values.clone();
    if !values.contains(&base_value) {
        values.insert(0, base_value);
    }

    struct Cell {
        value: usize,
        maps: Vec<f64>,
        tputs: Vec<f64>,
        flops: u64,
        failed: bool,
    }
    let mut cells = Vec::new();
    for &value in &values {
        let mut cell = Cell { value, maps: vec![], tputs: vec![], flops: 0, failed: false };
        match grid.base.backbone.with_factor(&grid.factor, value) {
            Ok(backbone) => {
                let mut config = grid.base.clone();
                config.backbone = backbone;
                cell.flops = count_flops(&config.backbone, schema.total_width(), 1)?;
                for &seed in &grid.replicate_seeds {
                    match run_cell(&config, schema, &train_groups, &eval_groups, seed) {
                        Ok((map, tput)) => {
                            cell.maps.push(map);
                            cell.tputs.push(tput);
                        }
                        Err(_) => cell.failed = true,
                    }
                }
                if cell.maps.is_empty() {
                    cell.failed = true;
                }
            }
            Err(_) => cell.failed = true,
        }
        cells.push(cell);
    }

    let base_cell = cells
        .iter()
        .find(|c| c.value == base_value && !c.failed)
        .ok_or_else(|| Error::contract("base cell failed; no delta reference"))?;
    let (base_map, _) = mean_std(&base_cell.maps);
    let (base_tput, _) = mean_std(&base_cell.tputs);

    let rows = cells
        .iter()
        .map(|c| {
            if c.failed {
                return ReportRow {
                    factor_value: c.value,
                    map_mean: f64::NAN,
                    map_std: f64::NAN,
                    delta_map_pct: f64::NAN,
                    throughput_mean: f64::NAN,
                    delta_throughput_pct: f64::NAN,
                    inference_flops: c.flops,
                    failed: true,
                };
            }
            let (map_mean, map_std) = mean_std(&c.maps);
            let (tput_mean, _) = mean_std(&c.tputs);
            ReportRow {
                factor_value: c.value,
                map_mean,
                map_std,
                delta_map_pct: 100.0 * (map_mean - base_map) / base_map,
                throughput_mean: tput_mean,
                delta_throughput_pct: 100.0 * (tput_mean - base_tput) / base_tput,
                inference_flops: c.flops,
                failed: false,
            }
        })
        .collect();
    Ok(GridReport { digest: grid.digest(), factor: grid.factor.clone(), rows })
}

pub fn grid_csv(report: &GridReport) -> String {
    let mut out = format!("# config_digest={:016x}\n", report.digest);
    out.push_str("factor,value,map_mean,map_std,delta_map_pct,throughput_groups_per_sec,delta_throughput_pct,inference_flops,failed\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.3},{:.2},{:.3},{},{}",
            report.factor,
            r.factor_value,
            r.map_mean,
            r.map_std,
            r.delta_map_pct,
            r.throughput_mean,
            r.delta_throughput_pct,
            r.inference_flops,
            r.failed
        );
    }
    out
}

/// Gains of the three scaling dimensions and their combination, all
/// relative to one shared base mAP.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditivityReport {
    pub base_map: f64,
    pub data_gain: f64,
    pub backbone_gain: f64,
    pub embedding_gain: f64,
    pub combined_gain: f64,
    /// combined − (data + backbone + embedding)
    pub residual: f64,
}

/// Compute the additivity table from five measured mAPs.
pub fn additivity_report(
    base_map: f64,
    data_map: f64,
    backbone_map: f64,
    embedding_map: f64,
    combined_map: f64,
) -> AdditivityReport {
    let data_gain = data_map - base_map;
    let backbone_gain = backbone_map - base_map;
    let embedding_gain = embedding_map - base_map;
    let combined_gain = combined_map - base_map;
    AdditivityReport {
        base_map,
        data_gain,
        backbone_gain,
        embedding_gain,
        combined_gain,
        residual: combined_gain - (data_gain + backbone_gain + embedding_gain),
    }
}

pub fn additivity_csv(r: &AdditivityReport, digest: u64) -> String {
    let mut out = format!("# config_digest={digest:016x}\n");
    out.push_str("dimension,map_gain\n");
    let _ = writeln!(out, "data,{:.6}", r.data_gain);
    let _ = writeln!(out, "backbone,{:.6}", r.backbone_gain);
    let _ = writeln!(out, "embedding,{:.6}", r.embedding_gain);
    let _ = writeln!(out, "combined,{:.6}", r.combined_gain);
    let _ = writeln!(out, "residual,{:.6}", r.residual);
    out
}

/// Least-squares fit of `map` against `ln(days)`.
pub fn fit_loglinear(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    if points.len() < 3 {
        return Err(Error::contract("log-linear fit needs at least 3 points"));
    }
    let mut days: Vec<f64> = points.iter().map(|p| p.0).collect();
    days.sort_by(f64::total_cmp);
    days.dedup();
    if days.len() != points.len() {
        return Err(Error::contract("log-linear fit needs distinct day counts"));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_tot: f64 = ys.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let pred = intercept + slope * x;
            (y - pred) * (y - pred)
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, intercept, r2))
}

/// One data-window sweep row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub days: usize,
    pub map_mean: f64,
    pub map_std: f64,
}

#[derive(Debug, Clone)]
pub struct DataSweepReport {
    pub digest: u64,
    pub rows: Vec<SweepRow>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Train at each window size (mean over seeds), then fit mAP ~ ln(days).
pub fn data_sweep(
    base: &RunConfig,
    dataset: &Dataset,
    windows: &[usize],
    seeds: &[u64],
) -> Result<DataSweepReport> {
    if windows.len() < 3 {
        return Err(Error::contract("data sweep needs at least 3 windows"));
    }
    let eval_groups = dataset.eval_groups();
    let mut rows = Vec::new();
    for &days in windows {
        let train_groups = dataset.window_groups(days)?;
        let mut maps = Vec::new();
        for &seed in seeds {
            let (map, _) = run_cell(base, &dataset.spec.schema, &train_groups, &eval_groups, seed)?;
            maps.push(map);
        }
        let (map_mean, map_std) = mean_std(&maps);
        rows.push(SweepRow { days, map_mean, map_std });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.days as f64, r.map_mean)).collect();
    let (slope, intercept, r2) = fit_loglinear(&points)?;
    let mut h = Fnv1a::new();
    h.write(&base.digest().to_le_bytes());
    for w in windows {
        h.write(&(*w as u64).to_le_bytes());
    }
    for s in seeds {
        h.write(&s.to_le_bytes());
    }
    Ok(DataSweepReport { digest: h.finish(), rows, slope, intercept, r2 })
}

pub fn data_sweep_csv(r: &DataSweepReport) -> String {
    let mut out = format!("# config_digest={:016x}\n", r.digest);
    out.push_str("days,map_mean,map_std\n");
    for row in &r.rows {
        let _ = writeln!(out, "{},{:.6},{:.6}", row.days, row.map_mean, row.map_std);
    }
    let _ = writeln!(out, "# slope={:.6} intercept={:.6} r2={:.6}", r.slope, r.intercept, r.r2);
    out
}

/// Double every embedding dimension of categorical/text/sequential
/// features by `k` (the embedding-scaling axis).
pub fn scale_embedding_dims(schema: &FeatureSchema, k: usize) -> Result<FeatureSchema> {
    if k == 0 {
        return Err(Error::contract("embedding scale factor must be >= 1"));
    }
    let specs = schema
        .specs()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.kind = match s.kind {
                FeatureKind::Numerical => FeatureKind::Numerical,
                FeatureKind::Categorical { vocab_size, embed_dim } => {
                    FeatureKind::Categorical { vocab_size, embed_dim: embed_dim * k }
                }
                FeatureKind::Text { ngram_n, vocab_size, embed_dim } => {
                    FeatureKind::Text { ngram_n, vocab_size, embed_dim: embed_dim * k }
                }
                FeatureKind::Sequential { max_len, embed_dim } => {
                    FeatureKind::Sequential { max_len, embed_dim: embed_dim * k }
                }
            };
            s
        })
        .collect();
    FeatureSchema::new(specs)
}

/// Result of the warmstart-vs-scratch comparison.
#[derive(Debug, Clone)]
pub struct WarmstartComparison {
    pub warm_map: f64,
    pub scratch_map: f64,
    pub warm_secs: f64,
    pub scratch_secs: f64,
}

impl WarmstartComparison {
    pub fn delta_map_abs(&self) -> f64 {
        (self.warm_map - self.scratch_map).abs()
    }

    pub fn time_ratio(&self) -> f64 {
        self.warm_secs / self.scratch_secs
    }
}

/// Train a base model on `base_schema` (a projection of the dataset's
/// schema), then compare: warmstart + `warm_epochs` fine-tune on the full
/// schema vs `scratch_epochs` from scratch, on identical data.
pub fn warmstart_compare(
    dataset: &Dataset,
    base_schema: &FeatureSchema,
    base: &RunConfig,
    warm_epochs: usize,
    scratch_epochs: usize,
    seed: u64,
) -> Result<WarmstartComparison> {
    let full_schema = &dataset.spec.schema;
    let days = base.data_days.unwrap_or(dataset.spec.n_days);
    let full_train = dataset.window_groups(days)?;
    let eval_groups = dataset.eval_groups();

    let project = |groups: &[RankingGroup]| -> Result<Vec<RankingGroup>> {
        groups
            .iter()
            .map(|g| {
                Ok(RankingGroup {
                    query_id: g.query_id,
                    records: g
                        .records
                        .iter()
                        .map(|r| r.project(full_schema, base_schema))
                        .collect::<Result<_>>()?,
                    labels: g.labels.clone(),
                })
            })
            .collect()
    };

    // base model on the reduced schema
    let base_train = project(&full_train)?;
    let base_model = Model::init(base_schema.clone(), base.model_config(), seed)?;
    let mut opts = TrainOptions::from_run_config(base);
    opts.seed = seed;
    let base_out = train(base_model, &base_train, &opts)?;

    // warmstart through an actual checkpoint file round-trip
    let dir = std::env::temp_dir().join(format!("cvr-warmstart-{seed}-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let ckpt_path = dir.join("base.ckpt");
    crate::checkpoint::save(
        &ckpt_path,
        &base_out.model,
        base.digest(),
        crate::checkpoint::Meta { steps: base_out.steps, seed },
    )?;
    let ckpt = crate::checkpoint::load(&ckpt_path)?;
    let _ = std::fs::remove_dir_all(&dir);

    let warm_model =
        crate::checkpoint::warmstart_load(&ckpt, full_schema.clone(), base.model_config(), seed)?;
    let mut warm_opts = opts.clone();
    warm_opts.epochs = warm_epochs;
    let t0 = Instant::now();
    let warm_out = train(warm_model, &full_train, &warm_opts)?;
    let warm_secs = t0.elapsed().as_secs_f64();
    let warm_map = evaluate_model(&warm_out.model, &eval_groups)?.map;

    // from scratch on the full schema
    let scratch_model = Model::init(full_schema.clone(), base.model_config(), seed)?;
    let mut scratch_opts = opts.clone();
    scratch_opts.epochs = scratch_epochs;
    let t1 = Instant::now();
    let scratch_out = train(scratch_model, &full_train, &scratch_opts)?;
    let scratch_secs = t1.elapsed().as_secs_f64();
    let scratch_map = evaluate_model(&scratch_out.model, &eval_groups)?.map;

    Ok(WarmstartComparison { warm_map, scratch_map, warm_secs, scratch_secs })
}

/// Importance rows rendered in the two-column category/percentage layout.
pub fn importance_csv(shares: &[(String, f64)], digest: u64, degenerate: bool) -> String {
    let mut out = format!("# config_digest={digest:016x}\n");
    if degenerate {
        out.push_str("# degenerate: all drops were zero; uniform split reported\n");
    }
    out.push_str("category,percentage\n");
    for (name, pct) in shares {
        let _ = writeln!(out, "{name},{pct:.2}");
    }
    out
}

/// Parse the category/percentage CSV back (round-trip support).
pub fn parse_importance_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line == "category,percentage" || line.is_empty() {
            continue;
        }
        let (name, pct) = line
            .split_once(',')
            .ok_or_else(|| Error::format(format!("bad importance row {line}")))?;
        rows.push((
            name.to_string(),
            pct.parse().map_err(|_| Error::format(format!("bad percentage {pct}")))?,
        ));
    }
    Ok(rows)
}
