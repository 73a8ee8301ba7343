//! Subcommand implementations behind the `riskcam` binary.

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use riskcam::attrib::{attribute, AttributionMethod, ClassTarget, Map, MethodKind, SaliencyMap};
use riskcam::io::{self, Dataset, ResultFormat};
use riskcam::metrics::{self, EvalConfig, MetricsReport, Timing};
use riskcam::model::{self, mix_seed, Model, TrainConfig};
use riskcam::risk::{explain_with_risk, RiskConfig, RiskResult};
use riskcam::tensor::DropoutMode;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const ACCURACY_FLOOR: f64 = 0.8;
pub const THREADS_ENV: &str = "RISKCAM_THREADS";
const HELDOUT_STREAM: u64 = 0x4845_4c44;

/// Sizes the global rayon pool from `RISKCAM_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

/// Seed of the held-out split that goes with a training seed.
pub fn heldout_seed(train_seed: u64) -> u64 {
    mix_seed(train_seed, HELDOUT_STREAM)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub out: PathBuf,
    pub classes: usize,
    pub size: usize,
    pub per_class: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    /// Defaults to the weights path with a `.report.json` suffix.
    pub report: Option<PathBuf>,
}

impl Default for TrainArgs {
    fn default() -> Self {
        TrainArgs {
            out: PathBuf::from("weights.rcam"),
            classes: 3,
            size: 64,
            per_class: 500,
            epochs: 20,
            lr: 0.01,
            seed: 1,
            report: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub classes: usize,
    pub size: usize,
    pub per_class: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub heldout_seed: u64,
    pub weights: PathBuf,
}

fn report_path(weights: &Path) -> PathBuf {
    let mut name = weights.file_name().unwrap_or_default().to_os_string();
    name.push(".report.json");
    weights.with_file_name(name)
}

/// Trains the default model and returns it with its summary, without
/// touching the file system.
pub fn train_model(args: &TrainArgs) -> Result<(Model, TrainSummary)> {
    let data = io::gen_synthetic_shapes(args.classes, args.per_class, args.size, args.seed)?;
    let heldout = io::gen_synthetic_shapes(args.classes, (args.per_class / 5).max(20), args.size, heldout_seed(args.seed))?;
    let init = model::build_default_model(args.classes, args.size, args.seed)?;
    let config = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let (trained, report) = model::train_toy(&init, &data, &config)?;
    let heldout_accuracy = model::accuracy(&trained, &heldout)?;
    log::info!(
        "train accuracy {:.3}, held-out accuracy {:.3}",
        report.train_accuracy,
        heldout_accuracy
    );
    let summary = TrainSummary {
        classes: args.classes,
        size: args.size,
        per_class: args.per_class,
        epochs: args.epochs,
        lr: args.lr,
        seed: args.seed,
        loss_history: report.loss_history,
        train_accuracy: report.train_accuracy,
        heldout_accuracy,
        heldout_seed: heldout_seed(args.seed),
        weights: args.out.clone(),
    };
    Ok((trained, summary))
}

/// Trains, writes the JSON report, and writes the weights only when the
/// training accuracy clears [`ACCURACY_FLOOR`].
pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let (trained, summary) = train_model(args)?;
    let report = args.report.clone().unwrap_or_else(|| report_path(&args.out));
    io::write_json(&summary, &report)?;
    if summary.train_accuracy < ACCURACY_FLOOR {
        bail!(
            "training accuracy {:.3} is below the floor {ACCURACY_FLOOR}; weights not written",
            summary.train_accuracy
        );
    }
    model::save_weights(&trained, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub classes: usize,
    pub size: usize,
    pub per_class: usize,
    pub seed: u64,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<Dataset> {
    let data = io::gen_synthetic_shapes(args.classes, args.per_class, args.size, args.seed)?;
    io::save_dataset(&data, &args.out)?;
    Ok(data)
}

#[derive(Clone, Debug)]
pub struct ExplainArgs {
    pub weights: PathBuf,
    pub image: PathBuf,
    pub method: MethodKind,
    pub passes: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub layer: Option<usize>,
    /// Run the Monte-Carlo passes with dropout probability 0.
    pub no_dropout: bool,
    pub alpha: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapStats {
    pub min: f32,
    pub max: f32,
    pub mean: f64,
}

impl MapStats {
    fn of(values: impl Iterator<Item = f32> + Clone) -> MapStats {
        let n = values.clone().count().max(1);
        MapStats {
            min: values.clone().fold(f32::INFINITY, f32::min),
            max: values.clone().fold(f32::NEG_INFINITY, f32::max),
            mean: values.map(|v| v as f64).sum::<f64>() / n as f64,
        }
    }

    fn of_map(map: &Map) -> MapStats {
        MapStats::of(map.data.iter().copied())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplainReport {
    pub method: String,
    pub passes: usize,
    pub seed: u64,
    pub dropout_disabled: bool,
    pub baseline_class: usize,
    pub enhanced_class: usize,
    pub probabilities: Vec<f32>,
    pub baseline: MapStats,
    pub enhanced: MapStats,
    /// Raw CV statistics over pixels where it is defined.
    pub cv: Option<MapStats>,
    pub undefined_fraction: f64,
    pub cv_display_scale: Option<(f32, f32)>,
    pub files: Vec<String>,
}

pub const EXPLAIN_FILES: [&str; 5] = ["baseline.png", "enhanced.png", "risk.png", "overlay.png", "stats.json"];

fn risk_config(method: AttributionMethod, passes: usize, seed: u64, layer: Option<usize>) -> RiskConfig {
    RiskConfig {
        passes,
        base_seed: seed,
        layer,
        ..RiskConfig::new(method)
    }
}

/// The baseline map (dropout disabled) and the Monte-Carlo enhanced map
/// with its risk statistics. The baseline uses the seed of the first
/// Monte-Carlo slice so seeded methods line up when dropout is off.
pub fn explain_image(
    model: &Model,
    image: &riskcam::Tensor,
    method: MethodKind,
    passes: usize,
    seed: u64,
    layer: Option<usize>,
) -> Result<(SaliencyMap, SaliencyMap, RiskResult)> {
    let method: AttributionMethod = method.into();
    let config = risk_config(method, passes, seed, layer);
    config.validate()?;
    let layer_index = layer.unwrap_or_else(|| model.spec.default_attribution_layer());
    let baseline = attribute(
        model,
        image,
        &method,
        layer_index,
        ClassTarget::Predicted,
        DropoutMode::Disabled,
        config.slice_seed(1),
    )?;
    let (enhanced, risk) = explain_with_risk(model, image, &config)?;
    Ok((baseline, enhanced, risk))
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<ExplainReport> {
    let mut model = model::load_weights(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    if args.no_dropout {
        model = model.with_dropout(0.0);
    }
    let size = model.spec.input_size;
    let image = io::load_image(&args.image, model.spec.in_channels, size)
        .with_context(|| format!("loading {}", args.image.display()))?;
    let (baseline, enhanced, risk) = explain_image(&model, &image, args.method, args.passes, args.seed, args.layer)?;
    let (prediction, _) = model.predict(&image, DropoutMode::Disabled, 0)?;

    let save = |name: &str, render: &io::HeatmapRender| -> Result<()> {
        io::save_image(render, &io::output_path(&args.out, name)?)?;
        Ok(())
    };
    save("baseline.png", &io::render_heatmap(&baseline.map, None, 1.0, None)?)?;
    save("enhanced.png", &io::render_heatmap(&enhanced.map, None, 1.0, None)?)?;
    let cv_render = io::render_cv(&risk.cv, &risk.undefined_mask)?;
    save("risk.png", &cv_render)?;
    save("overlay.png", &io::render_heatmap(&enhanced.map, Some(&image), args.alpha, None)?)?;

    let defined = risk
        .cv
        .data
        .iter()
        .zip(&risk.undefined_mask)
        .filter(|(_, &u)| !u)
        .map(|(&v, _)| v);
    let report = ExplainReport {
        method: args.method.cli_name().into(),
        passes: args.passes,
        seed: args.seed,
        dropout_disabled: args.no_dropout,
        baseline_class: baseline.class,
        enhanced_class: enhanced.class,
        probabilities: prediction.probabilities,
        baseline: MapStats::of_map(&baseline.map),
        enhanced: MapStats::of_map(&enhanced.map),
        cv: (defined.clone().count() > 0).then(|| MapStats::of(defined)),
        undefined_fraction: risk.undefined_fraction(),
        cv_display_scale: cv_render.scale,
        files: EXPLAIN_FILES.iter().map(|s| s.to_string()).collect(),
    };
    io::write_json(&report, &io::output_path(&args.out, "stats.json")?)?;
    Ok(report)
}

/// Where evaluation images come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    Directory(PathBuf),
    Generated { seed: u64, per_class: usize },
}

impl DataSource {
    pub fn load(&self, model: &Model) -> Result<Dataset> {
        let size = model.spec.input_size;
        let data = match self {
            DataSource::Directory(dir) => {
                io::load_dataset(dir, size).with_context(|| format!("loading dataset {}", dir.display()))?
            }
            DataSource::Generated { seed, per_class } => {
                io::gen_synthetic_shapes(model.classes(), *per_class, size, *seed)?
            }
        };
        if data.is_empty() {
            bail!("the evaluation dataset is empty");
        }
        Ok(data)
    }
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    pub weights: PathBuf,
    pub data: DataSource,
    pub methods: Vec<MethodKind>,
    pub passes: usize,
    pub seed: u64,
    pub limit: usize,
    pub layer: Option<usize>,
    /// Images used for latency measurement; 0 disables timing.
    pub timing_images: usize,
    pub out: PathBuf,
}

/// Mean of the per-image median latencies over the first `count` images,
/// measured on the calling thread.
fn mean_latency(model: &Model, data: &Dataset, config: &EvalConfig, count: usize) -> Result<Option<f64>> {
    let images: Vec<_> = data.items.iter().take(count).collect();
    if images.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for item in &images {
        total += metrics::measure_latency(Timing::default(), || {
            metrics::compute_map(model, &item.image, config, ClassTarget::Predicted)
        })?;
    }
    Ok(Some(total / images.len() as f64))
}

/// Mean metrics of one configuration over `data`, images scored in parallel.
pub fn evaluate_config(model: &Model, data: &Dataset, config: &EvalConfig, timing_images: usize) -> Result<MetricsReport> {
    let per_image: Vec<MetricsReport> = data
        .items
        .par_iter()
        .map(|item| metrics::evaluate_method(model, &item.image, config))
        .collect::<riskcam::Result<_>>()?;
    let mut report = MetricsReport::aggregate(&per_image)?;
    report.latency_ms = mean_latency(model, data, config, timing_images)?;
    Ok(report)
}

/// Original (single pass, dropout disabled) and proposed (Monte-Carlo)
/// rows for each method, in method order.
pub fn evaluate_model(
    model: &Model,
    data: &Dataset,
    methods: &[MethodKind],
    passes: usize,
    seed: u64,
    layer: Option<usize>,
    timing_images: usize,
) -> Result<Vec<MetricsReport>> {
    let mut rows = Vec::new();
    for &kind in methods {
        for mc in [false, true] {
            let config = EvalConfig {
                layer,
                passes,
                seed,
                ..EvalConfig::new(kind.into(), mc)
            };
            let row = evaluate_config(model, data, &config, timing_images)?;
            log::info!("{kind} mc={mc}: ADCC {:.4}", row.adcc);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<MetricsReport>> {
    let model = model::load_weights(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    let data = args.data.load(&model)?.truncated(args.limit);
    let rows = evaluate_model(&model, &data, &args.methods, args.passes, args.seed, args.layer, args.timing_images)?;
    io::write_results(&rows, &args.out, ResultFormat::from_path(&args.out))?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TStudyArgs {
    pub weights: PathBuf,
    pub data: DataSource,
    pub method: MethodKind,
    pub ts: Vec<usize>,
    pub seed: u64,
    pub limit: usize,
    pub layer: Option<usize>,
    pub timing_images: usize,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TStudyRow {
    pub passes: usize,
    pub adcc: f64,
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TStudy {
    pub method: MethodKind,
    pub rows: Vec<TStudyRow>,
    /// Rank correlation between T and mean ADCC; `None` when undefined.
    pub spearman: Option<f64>,
}

pub const TSTUDY_COLUMNS: [&str; 3] = ["T", "ADCC", "latency_ms"];

pub fn t_study(
    model: &Model,
    data: &Dataset,
    method: MethodKind,
    ts: &[usize],
    seed: u64,
    layer: Option<usize>,
    timing_images: usize,
) -> Result<TStudy> {
    if ts.is_empty() {
        bail!("the T list is empty");
    }
    let mut rows = Vec::with_capacity(ts.len());
    for &t in ts {
        let config = EvalConfig {
            layer,
            passes: t,
            seed,
            ..EvalConfig::new(method.into(), true)
        };
        let report = evaluate_config(model, data, &config, timing_images)?;
        log::info!("T={t}: ADCC {:.4}", report.adcc);
        rows.push(TStudyRow {
            passes: t,
            adcc: report.adcc,
            latency_ms: report.latency_ms,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.passes as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.adcc).collect();
    let spearman = metrics::spearman(&xs, &ys).ok();
    Ok(TStudy { method, rows, spearman })
}

pub fn cmd_tstudy(args: &TStudyArgs) -> Result<TStudy> {
    let model = model::load_weights(&args.weights).with_context(|| format!("loading {}", args.weights.display()))?;
    let data = args.data.load(&model)?.truncated(args.limit);
    let study = t_study(&model, &data, args.method, &args.ts, args.seed, args.layer, args.timing_images)?;
    let table: Vec<Vec<String>> = study
        .rows
        .iter()
        .map(|r| {
            vec![
                r.passes.to_string(),
                format!("{:.1}", r.adcc * 100.0),
                r.latency_ms.map(|l| format!("{l:.1}")).unwrap_or_default(),
            ]
        })
        .collect();
    io::write_table(&args.out, &TSTUDY_COLUMNS, &table)?;
    Ok(study)
}

/// Parses `all` or a comma-separated list of method names.
pub fn parse_methods(s: &str) -> Result<Vec<MethodKind>, String> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(MethodKind::ALL.to_vec());
    }
    s.split(',')
        .map(|name| name.trim().parse::<MethodKind>().map_err(|e| e.to_string()))
        .collect()
}

