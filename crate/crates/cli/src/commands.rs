//! Subcommand implementations. Each returns a summary that `main` prints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stgbgru::autodiff::Tensor;
use stgbgru::checkpoint::Checkpoint;
use stgbgru::data::{format_timestamp, load_series, sliding_windows, train_test_split, ScalingMode, TimeSeriesPanel};
use stgbgru::forecasting::{batch_forecast, predict, Forecast, ForecastRequest, Method, Predictor};
use stgbgru::fsutil::{fingerprint, write_atomic};
use stgbgru::graph::{load_coordinates, GraphConfig, ParkingGraph};
use stgbgru::metrics::{compare, Evaluation, ForecastReport, Tally};
use stgbgru::models::ModelKind;
use stgbgru::synthetic::{generate, SyntheticConfig};
use stgbgru::training::train;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone)]
pub struct GraphSummary {
    pub sites: usize,
    pub edges: usize,
    pub distance_range: Option<(f64, f64)>,
    pub out_dir: PathBuf,
}

impl fmt::Display for GraphSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sites: {}", self.sites)?;
        writeln!(f, "edges: {}", self.edges)?;
        if let Some((lo, hi)) = self.distance_range {
            writeln!(f, "distance range: {lo:.4} .. {hi:.4} km")?;
        }
        write!(f, "written to {}", self.out_dir.display())
    }
}

pub fn cmd_graph(coords: &Path, config: GraphConfig, out_dir: &Path) -> Result<GraphSummary> {
    let points = load_coordinates(coords).with_context(|| format!("loading coordinates {}", coords.display()))?;
    let graph = ParkingGraph::build(&points, config)?;
    if graph.edge_count() == 0 {
        log::warn!("graph has no edges at epsilon = {} km", config.epsilon_km);
    }
    graph.export(out_dir)?;
    Ok(GraphSummary {
        sites: graph.len(),
        edges: graph.edge_count(),
        distance_range: graph.distance_range(),
        out_dir: out_dir.to_path_buf(),
    })
}

/// Graph, raw panel and data fingerprint shared by training and evaluation.
pub struct Prepared {
    pub graph: ParkingGraph,
    pub panel: TimeSeriesPanel,
    pub fingerprint: String,
}

impl Prepared {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let points = load_coordinates(&cfg.data.coords)
            .with_context(|| format!("loading coordinates {}", cfg.data.coords.display()))?;
        let graph = ParkingGraph::build(&points, (&cfg.graph).into())?;
        if graph.edge_count() == 0 {
            log::warn!("graph has no edges at epsilon = {} km", cfg.graph.epsilon_km);
        }
        let sites = graph.site_ids();
        let ingest = load_series(&cfg.data.series, cfg.data.interval_minutes, Some(&sites))
            .with_context(|| format!("loading series {}", cfg.data.series.display()))?;
        for cell in &ingest.filled {
            log::warn!("forward-filled {} at {}", cell.site_id, format_timestamp(&cell.timestamp));
        }
        Ok(Prepared {
            graph,
            panel: ingest.panel,
            fingerprint: fingerprint(&cfg.data.series)?,
        })
    }

    pub fn normalized(&self, cfg: &ExperimentConfig) -> Result<TimeSeriesPanel> {
        let mode = if cfg.data.paper_faithful_scaling {
            ScalingMode::Global
        } else {
            ScalingMode::TrainingRows((cfg.data.train_ratio * self.panel.len() as f64).floor() as usize)
        };
        Ok(self.panel.normalize(mode)?)
    }
}

pub fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data.out_dir.join("checkpoints")
}

pub fn checkpoint_path(cfg: &ExperimentConfig, kind: ModelKind, horizon: usize, repeat: usize) -> PathBuf {
    checkpoint_dir(cfg).join(format!("{kind}_h{horizon}_r{repeat}.ckpt"))
}

fn history_path(cfg: &ExperimentConfig, kind: ModelKind, horizon: usize, repeat: usize) -> PathBuf {
    cfg.data.out_dir.join("history").join(format!("{kind}_h{horizon}_r{repeat}.csv"))
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub trained: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.trained {
            writeln!(f, "trained {}", p.display())?;
        }
        for p in &self.skipped {
            writeln!(f, "skipped {} (exists; use --force to retrain)", p.display())?;
        }
        write!(f, "{} trained, {} skipped", self.trained.len(), self.skipped.len())
    }
}

/// Trains one checkpoint per model kind, horizon and repeat. Existing
/// checkpoints are kept unless `force` is set.
pub fn cmd_train(cfg: &ExperimentConfig, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let prep = Prepared::load(cfg)?;
    let panel = prep.normalized(cfg)?;
    let scaler = panel.scaler().expect("normalized panel").clone();
    let a_hat = prep.graph.normalized();
    let mut summary = TrainSummary::default();
    for &kind in &cfg.experiment.models {
        for h in cfg.trained_horizons()? {
            let ds = sliding_windows(&panel, cfg.train.window, h)?;
            let (train_set, _) = train_test_split(&ds, cfg.data.train_ratio)?;
            for repeat in 0..cfg.experiment.repeats {
                let path = checkpoint_path(cfg, kind, h, repeat);
                if path.exists() && !force {
                    summary.skipped.push(path);
                    continue;
                }
                let config = cfg.train_config(kind, h, repeat);
                log::info!("training {kind} h={h} seed={}", config.seed);
                let trained = train(&config, &train_set, a_hat).with_context(|| format!("training {}", path.display()))?;
                write_atomic(&history_path(cfg, kind, h, repeat), trained.history_csv().as_bytes())?;
                let ckpt = Checkpoint::new(
                    trained,
                    a_hat.clone(),
                    panel.site_order().to_vec(),
                    cfg.data.interval_minutes,
                    scaler.clone(),
                    prep.fingerprint.clone(),
                )?;
                ckpt.save(&path)?;
                summary.trained.push(path);
            }
        }
    }
    Ok(summary)
}

fn load_checkpoint(path: &Path, prep: &Prepared, strict: bool) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_fingerprint(&prep.fingerprint, strict)
        .with_context(|| format!("checking {}", path.display()))?;
    if ckpt.a_hat.shape() != prep.graph.normalized().shape() {
        bail!("{}: checkpoint graph size differs from the data", path.display());
    }
    prep.panel.check_site_order(&ckpt.site_order)?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateSummary {
    /// Averaged report per model kind.
    pub reports: BTreeMap<ModelKind, ForecastReport>,
    pub written: Vec<PathBuf>,
}

impl fmt::Display for EvaluateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (kind, report) in &self.reports {
            writeln!(f, "== {kind} ==")?;
            writeln!(f, "{}", report.to_table())?;
        }
        for p in &self.written {
            writeln!(f, "wrote {}", p.display())?;
        }
        Ok(())
    }
}

pub fn report_path(cfg: &ExperimentConfig, kind: ModelKind) -> PathBuf {
    cfg.data.out_dir.join("reports").join(format!("{kind}.csv"))
}

/// Forecasts the test split with every trained checkpoint and writes one
/// report per repeat, the repeat-averaged report, its table, and per-site
/// traces of the repeat-mean predictions.
pub fn cmd_evaluate(cfg: &ExperimentConfig, strict: bool) -> Result<EvaluateSummary> {
    cfg.validate()?;
    let prep = Prepared::load(cfg)?;
    let sites = prep.graph.site_ids();
    let dt = cfg.data.interval_minutes;
    let mut summary = EvaluateSummary::default();

    for &kind in &cfg.experiment.models {
        let mut per_repeat = Vec::new();
        // (horizon, method) -> summed predictions, actuals, target timestamps
        let mut traces: BTreeMap<(usize, Method), (Tensor, Tensor, Vec<String>)> = BTreeMap::new();
        for repeat in 0..cfg.experiment.repeats {
            let mut cache: BTreeMap<usize, Checkpoint> = BTreeMap::new();
            let mut evals = Vec::new();
            for h in cfg.horizon_steps()? {
                for &method in &cfg.experiment.methods {
                    let model_h = if method == Method::Direct { h } else { 1 };
                    if !cache.contains_key(&model_h) {
                        let path = checkpoint_path(cfg, kind, model_h, repeat);
                        let ckpt = load_checkpoint(&path, &prep, strict)
                            .with_context(|| format!("loading {} (run `train` first)", path.display()))?;
                        cache.insert(model_h, ckpt);
                    }
                    let ckpt = &cache[&model_h];
                    let panel = prep.panel.with_scaler(ckpt.scaler.clone())?;
                    let ds = sliding_windows(&panel, ckpt.window(), h)?;
                    let (_, test) = train_test_split(&ds, cfg.data.train_ratio)?;
                    let predicted = batch_forecast(ckpt, &test, method, &ckpt.scaler)?;
                    let actual = stgbgru::data::denormalize(test.targets(), &ckpt.scaler)?;
                    let stamps = test
                        .target_rows()
                        .iter()
                        .map(|&r| format_timestamp(&panel.timestamps()[r]))
                        .collect();
                    let entry = traces
                        .entry((h, method))
                        .or_insert_with(|| (Tensor::zeros(predicted.shape()), actual.clone(), stamps));
                    entry.0.data_mut().iter_mut().zip(predicted.data()).for_each(|(s, p)| *s += p);
                    evals.push(Evaluation {
                        horizon_min: h as u32 * dt,
                        method,
                        predicted,
                        actual,
                    });
                }
            }
            let report = ForecastReport::build(&evals, &sites)?;
            let path = cfg.data.out_dir.join("reports").join(format!("{kind}_r{repeat}.csv"));
            report.write_csv(&path)?;
            summary.written.push(path);
            per_repeat.push(report);
        }

        let averaged = ForecastReport::average(&per_repeat)?;
        let path = report_path(cfg, kind);
        averaged.write_csv(&path)?;
        let table = path.with_extension("txt");
        write_atomic(&table, averaged.to_table().as_bytes())?;
        summary.written.extend([path, table]);

        let repeats = cfg.experiment.repeats as f64;
        for (j, site) in sites.iter().enumerate() {
            let mut out = String::from("timestamp,site_id,horizon_min,method,predicted,actual\n");
            for ((h, method), (sum, actual, stamps)) in &traces {
                for (i, ts) in stamps.iter().enumerate() {
                    out.push_str(&format!(
                        "{ts},{site},{},{method},{},{}\n",
                        *h as u32 * dt,
                        sum.at(i, j) / repeats,
                        actual.at(i, j)
                    ));
                }
            }
            let path = cfg.data.out_dir.join("traces").join(kind.as_str()).join(format!("{site}.csv"));
            write_atomic(&path, out.as_bytes())?;
            summary.written.push(path);
        }
        summary.reports.insert(kind, averaged);
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct CompareSummary {
    pub tally: Tally,
    pub label_a: String,
    pub label_b: String,
}

impl fmt::Display for CompareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.tally;
        writeln!(f, "{} vs {}: {} cells", self.label_a, self.label_b, t.cells)?;
        for (name, wins) in [("mae", t.mae), ("rmse", t.rmse), ("mape_or_smape", t.mape_or_smape)] {
            writeln!(f, "{name:>14}: {wins:>4} wins ({:.1}%)", 100.0 * t.fraction(wins))?;
        }
        Ok(())
    }
}

/// Counts cells where report `a` is strictly better than report `b`.
pub fn cmd_compare(
    a: &Path,
    b: &Path,
    method_a: Option<Method>,
    method_b: Option<Method>,
    min_horizon_min: Option<u32>,
) -> Result<CompareSummary> {
    let ra = ForecastReport::read_csv(a)?;
    let rb = ForecastReport::read_csv(b)?;
    let tally = compare(&ra, &rb, method_a, method_b, min_horizon_min)?;
    let label = |p: &Path, m: Option<Method>| match m {
        Some(m) => format!("{} [{m}]", p.display()),
        None => p.display().to_string(),
    };
    Ok(CompareSummary {
        tally,
        label_a: label(a, method_a),
        label_b: label(b, method_b),
    })
}

#[derive(Debug, Clone)]
pub struct PredictSummary {
    pub origin: String,
    pub horizon_min: u32,
    pub method: Method,
    pub sites: Vec<String>,
    pub forecast: Forecast,
    pub reported: Vec<f64>,
}

impl fmt::Display for PredictSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "origin,site_id,horizon_min,method,predicted,reported")?;
        for (j, site) in self.sites.iter().enumerate() {
            writeln!(
                f,
                "{},{site},{},{},{},{}",
                self.origin,
                self.horizon_min,
                self.method,
                self.forecast.values.data()[j],
                self.reported[j]
            )?;
        }
        Ok(())
    }
}

/// Reads `site_id,capacity` rows.
pub fn load_capacities(path: &Path, sites: &[String]) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (site, cap) = line
            .split_once(',')
            .with_context(|| format!("{}:{}: expected site_id,capacity", path.display(), i + 1))?;
        let cap: f64 = cap.trim().parse().with_context(|| format!("{}:{}: bad capacity", path.display(), i + 1))?;
        map.insert(site.trim().to_string(), cap);
    }
    sites
        .iter()
        .map(|s| map.get(s).copied().with_context(|| format!("no capacity for site {s}")))
        .collect()
}

/// Forecasts from the last `m` rows of the series.
pub fn cmd_predict(
    checkpoint: &Path,
    series: &Path,
    method: Method,
    horizon_min: u32,
    capacities: Option<&Path>,
    strict: bool,
) -> Result<PredictSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_fingerprint(&fingerprint(series)?, strict)?;
    let dt = ckpt.interval_minutes;
    if horizon_min == 0 || horizon_min % dt != 0 {
        bail!("horizon {horizon_min} min is not a positive multiple of the {dt}-minute interval");
    }
    let ingest = load_series(series, dt, Some(&ckpt.site_order))?;
    let panel = ingest.panel.with_scaler(ckpt.scaler.clone())?;
    let m = ckpt.window();
    let (t, n) = panel.values().dims2()?;
    if t < m {
        bail!("series has {t} rows, the model needs a window of {m}");
    }
    let window = Tensor::matrix(m, n, panel.values().data()[(t - m) * n..].to_vec())?;
    let request = ForecastRequest {
        window,
        horizon: (horizon_min / dt) as usize,
        method,
        interval_minutes: dt,
    };
    let forecast = predict(&ckpt, &request, &ckpt.scaler)?;
    let caps = capacities.map(|p| load_capacities(p, &ckpt.site_order)).transpose()?;
    Ok(PredictSummary {
        origin: format_timestamp(&panel.timestamps()[t - 1]),
        horizon_min,
        method,
        sites: ckpt.site_order.clone(),
        reported: forecast.reported(caps.as_deref()),
        forecast,
    })
}

/// Writes a synthetic panel plus a capacities file; returns a short summary.
pub fn cmd_synthetic(config: &SyntheticConfig, out_dir: &Path) -> Result<String> {
    let data = generate(config)?;
    data.write(out_dir)?;
    let mut caps = String::from("site_id,capacity\n");
    for (p, c) in data.points.iter().zip(&data.capacities) {
        caps.push_str(&format!("{},{c}\n", p.site_id));
    }
    write_atomic(&out_dir.join("capacities.csv"), caps.as_bytes())?;
    Ok(format!(
        "{} sites x {} steps written to {} (lattice spacing {} km)",
        data.points.len(),
        data.panel.len(),
        out_dir.display(),
        config.spacing_km
    ))
}
