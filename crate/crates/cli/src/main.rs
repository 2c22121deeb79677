use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use stgbgru::forecasting::Method;
use stgbgru::graph::{GraphConfig, WeightMode, DEFAULT_EPSILON_KM, EARTH_RADIUS_KM};
use stgbgru::models::ModelKind;
use stgbgru::synthetic::SyntheticConfig;
use stgbgru_cli::config::{ExperimentConfig, OUT_DIR_ENV};
use stgbgru_cli::{cmd_compare, cmd_evaluate, cmd_graph, cmd_predict, cmd_synthetic, cmd_train};

/// Vacant parking space forecasting with graph-convolutional GRUs.
#[derive(Parser)]
#[command(name = "stgbgru", version)]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace); RUST_LOG also works.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the distance graph from a coordinates CSV and write A and A_hat.
    Graph {
        /// `site_id,lat,lon` CSV.
        #[arg(long)]
        coords: PathBuf,
        /// Edge threshold in km.
        #[arg(long, default_value_t = DEFAULT_EPSILON_KM)]
        epsilon: f64,
        /// Sphere radius in km.
        #[arg(long, default_value_t = EARTH_RADIUS_KM)]
        radius: f64,
        /// Edge weights: distance, gaussian or binary.
        #[arg(long, default_value = "distance")]
        weight_mode: WeightMode,
        /// Output directory.
        #[arg(long, env = OUT_DIR_ENV, default_value = "graph")]
        out: PathBuf,
    },
    /// Train one checkpoint per model, horizon and repeat.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Retrain cells whose checkpoint already exists.
        #[arg(long)]
        force: bool,
    },
    /// Forecast the test split with trained checkpoints and write reports.
    Evaluate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[command(flatten)]
        strict: StrictArgs,
    },
    /// Forecast from the last window of a series with one checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Long-format `timestamp,site_id,available` CSV.
        #[arg(long)]
        series: PathBuf,
        /// direct or iterative.
        #[arg(long, default_value = "direct")]
        method: Method,
        /// Minutes ahead; a multiple of the sampling interval.
        #[arg(long)]
        horizon_min: u32,
        /// `site_id,capacity` CSV; reported counts are clamped to it.
        #[arg(long)]
        capacities: Option<PathBuf>,
        #[command(flatten)]
        strict: StrictArgs,
    },
    /// Count site x horizon cells where report A beats report B.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        /// Only rows of this method from report A.
        #[arg(long)]
        method_a: Option<Method>,
        /// Only rows of this method from report B.
        #[arg(long)]
        method_b: Option<Method>,
        /// Ignore horizons shorter than this many minutes.
        #[arg(long)]
        min_horizon_min: Option<u32>,
    },
    /// Write a synthetic 8-site panel (`series.csv`, `coords.csv`,
    /// `capacities.csv`) for trying the pipeline without real data.
    Synthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the default configuration as TOML.
    PrintDefault,
    /// Print the effective configuration after file, environment and flags.
    Show {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
}

#[derive(Args)]
struct StrictArgs {
    /// Refuse checkpoints trained on different data (default).
    #[arg(long, overrides_with = "no_strict")]
    strict: bool,
    /// Only warn when the data fingerprint differs.
    #[arg(long)]
    no_strict: bool,
}

impl StrictArgs {
    fn enabled(&self) -> bool {
        !self.no_strict
    }
}

/// Flags override values from `--config`; the output directory can also
/// come from the environment.
#[derive(Args)]
struct ExperimentArgs {
    /// TOML configuration file; see `config print-default`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    series: Option<PathBuf>,
    #[arg(long)]
    coords: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    interval_minutes: Option<u32>,
    /// Fit the scaler on all rows instead of the training rows.
    #[arg(long)]
    paper_faithful_scaling: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    /// distance, gaussian or binary.
    #[arg(long)]
    weight_mode: Option<WeightMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Window length m.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hidden_feat: Option<usize>,
    /// Graph convolution depth inside each gate (1 or 2).
    #[arg(long)]
    gcn_depth: Option<usize>,
    /// Comma-separated model kinds: stgbgru, stacked, plain-gru.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Comma-separated horizons in minutes.
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<u32>>,
    /// Comma-separated methods: direct, iterative.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Repeat i uses seed seed_base + i.
    #[arg(long)]
    seed_base: Option<u64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        c.apply_env();
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.data.series, &self.series);
        set(&mut c.data.coords, &self.coords);
        set(&mut c.data.out_dir, &self.out_dir);
        set(&mut c.data.interval_minutes, &self.interval_minutes);
        c.data.paper_faithful_scaling |= self.paper_faithful_scaling;
        set(&mut c.graph.epsilon_km, &self.epsilon);
        set(&mut c.graph.weight_mode, &self.weight_mode);
        set(&mut c.train.epochs, &self.epochs);
        set(&mut c.train.batch_size, &self.batch_size);
        set(&mut c.train.learning_rate, &self.learning_rate);
        set(&mut c.train.window, &self.window);
        set(&mut c.train.hidden_feat, &self.hidden_feat);
        set(&mut c.train.gcn_depth, &self.gcn_depth);
        set(&mut c.experiment.models, &self.models);
        set(&mut c.experiment.horizons_min, &self.horizons);
        set(&mut c.experiment.methods, &self.methods);
        set(&mut c.experiment.repeats, &self.repeats);
        set(&mut c.experiment.seed_base, &self.seed_base);
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Graph {
            coords,
            epsilon,
            radius,
            weight_mode,
            out,
        } => {
            let config = GraphConfig {
                epsilon_km: epsilon,
                radius_km: radius,
                weight_mode,
            };
            println!("{}", cmd_graph(&coords, config, &out)?);
        }
        Command::Train { exp, force } => println!("{}", cmd_train(&exp.resolve()?, force)?),
        Command::Evaluate { exp, strict } => print!("{}", cmd_evaluate(&exp.resolve()?, strict.enabled())?),
        Command::Predict {
            checkpoint,
            series,
            method,
            horizon_min,
            capacities,
            strict,
        } => print!(
            "{}",
            cmd_predict(&checkpoint, &series, method, horizon_min, capacities.as_deref(), strict.enabled())?
        ),
        Command::Compare {
            report_a,
            report_b,
            method_a,
            method_b,
            min_horizon_min,
        } => print!("{}", cmd_compare(&report_a, &report_b, method_a, method_b, min_horizon_min)?),
        Command::Synthetic { out, steps, seed } => {
            let config = SyntheticConfig {
                steps,
                seed,
                ..Default::default()
            };
            println!("{}", cmd_synthetic(&config, &out)?);
        }
        Command::Config { action } => match action {
            ConfigAction::PrintDefault => print!("{}", ExperimentConfig::default().to_toml()),
            ConfigAction::Show { exp } => print!("{}", exp.resolve()?.to_toml()),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cli.log_level.as_str())).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

