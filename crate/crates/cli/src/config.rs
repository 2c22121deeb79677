//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stgbgru::forecasting::Method;
use stgbgru::graph::{GraphConfig, WeightMode, DEFAULT_EPSILON_KM, EARTH_RADIUS_KM};
use stgbgru::models::{Activation, ModelKind};
use stgbgru::training::TrainConfig;

/// Overrides `data.out_dir` when set.
pub const OUT_DIR_ENV: &str = "STGBGRU_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Long-format `timestamp,site_id,available` CSV.
    pub series: PathBuf,
    /// `site_id,lat,lon` CSV.
    pub coords: PathBuf,
    pub out_dir: PathBuf,
    pub interval_minutes: u32,
    /// Fraction of windowed samples used for training.
    pub train_ratio: f64,
    /// Fit the min-max scaler on every row instead of the training rows.
    pub paper_faithful_scaling: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            series: PathBuf::from("data/series.csv"),
            coords: PathBuf::from("data/coords.csv"),
            out_dir: PathBuf::from("runs"),
            interval_minutes: 5,
            train_ratio: 0.8,
            paper_faithful_scaling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub epsilon_km: f64,
    pub radius_km: f64,
    pub weight_mode: WeightMode,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            epsilon_km: DEFAULT_EPSILON_KM,
            radius_km: EARTH_RADIUS_KM,
            weight_mode: WeightMode::Distance,
        }
    }
}

impl From<&GraphSection> for GraphConfig {
    fn from(g: &GraphSection) -> Self {
        GraphConfig {
            epsilon_km: g.epsilon_km,
            radius_km: g.radius_km,
            weight_mode: g.weight_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub window: usize,
    pub hidden_feat: usize,
    pub gcn_depth: usize,
    pub candidate_bias: bool,
    pub gcn_activation: Activation,
    /// Gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            window: t.window,
            hidden_feat: t.hidden_feat,
            gcn_depth: t.gcn_depth,
            candidate_bias: t.candidate_bias,
            gcn_activation: t.gcn_activation,
            clip_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub models: Vec<ModelKind>,
    pub horizons_min: Vec<u32>,
    pub methods: Vec<Method>,
    pub repeats: usize,
    /// Repeat `i` trains with seed `seed_base + i`.
    pub seed_base: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            models: vec![ModelKind::Stgbgru],
            horizons_min: vec![5, 15, 30, 45, 60],
            methods: vec![Method::Direct, Method::Iterative],
            repeats: 1,
            seed_base: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub graph: GraphSection,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the output-directory environment override.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.data.out_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let x = &self.experiment;
        if x.repeats == 0 {
            bail!("experiment.repeats must be at least 1");
        }
        if x.models.is_empty() || x.horizons_min.is_empty() || x.methods.is_empty() {
            bail!("experiment.models, horizons_min and methods must be nonempty");
        }
        if !(self.data.train_ratio > 0.0 && self.data.train_ratio < 1.0) {
            bail!("data.train_ratio must lie in (0, 1), got {}", self.data.train_ratio);
        }
        self.horizon_steps()?;
        self.train_config(ModelKind::Stgbgru, 1, 0).validate()?;
        Ok(())
    }

    /// Horizons in steps, sorted and deduplicated. Every horizon must be a
    /// positive multiple of the sampling interval.
    pub fn horizon_steps(&self) -> Result<Vec<usize>> {
        let dt = self.data.interval_minutes;
        if dt == 0 {
            bail!("data.interval_minutes must be positive");
        }
        let mut steps = Vec::new();
        for &m in &self.experiment.horizons_min {
            if m == 0 || m % dt != 0 {
                bail!("horizon {m} min is not a positive multiple of the {dt}-minute interval");
            }
            steps.push((m / dt) as usize);
        }
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }

    /// Horizons a training run must cover: the requested ones for direct
    /// prediction, plus one step for iterative roll-out.
    pub fn trained_horizons(&self) -> Result<Vec<usize>> {
        let mut steps = if self.experiment.methods.contains(&Method::Direct) {
            self.horizon_steps()?
        } else {
            Vec::new()
        };
        if self.experiment.methods.contains(&Method::Iterative) && !steps.contains(&1) {
            steps.insert(0, 1);
        }
        Ok(steps)
    }

    pub fn seed(&self, repeat: usize) -> u64 {
        self.experiment.seed_base + repeat as u64
    }

    pub fn train_config(&self, kind: ModelKind, horizon: usize, repeat: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            window: t.window,
            horizon,
            seed: self.seed(repeat),
            model_kind: kind,
            hidden_feat: t.hidden_feat,
            gcn_depth: t.gcn_depth,
            candidate_bias: t.candidate_bias,
            gcn_activation: t.gcn_activation,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
        }
    }
}
