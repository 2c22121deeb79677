//! Loss, Adam, the mini-batch training loop and grid search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{train_test_split, WindowedDataset};
use crate::error::{Error, Result};
use crate::models::{Activation, Model, ModelKind, ModelShape, ParamTree};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Window length `m`.
    pub window: usize,
    /// Steps ahead the model is trained for.
    pub horizon: usize,
    pub seed: u64,
    pub model_kind: ModelKind,
    pub hidden_feat: usize,
    pub gcn_depth: usize,
    pub candidate_bias: bool,
    pub gcn_activation: Activation,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 32,
            learning_rate: 0.001,
            window: 12,
            horizon: 1,
            seed: 0,
            model_kind: ModelKind::Stgbgru,
            hidden_feat: 64,
            gcn_depth: 1,
            candidate_bias: false,
            gcn_activation: Activation::Sigmoid,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            kind: self.model_kind,
            hidden_feat: self.hidden_feat,
            gcn_depth: self.gcn_depth,
            candidate_bias: self.candidate_bias,
            gcn_activation: self.gcn_activation,
        }
    }

    /// Zero epochs is accepted and leaves the initial parameters untouched.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("horizon", self.horizon),
            ("hidden_feat", self.hidden_feat),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(1..=2).contains(&self.gcn_depth) {
            return Err(Error::Validation(format!("gcn_depth must be 1 or 2, got {}", self.gcn_depth)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Validation("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of squared differences over every entry.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", pred.shape(), target.shape()));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// First and second moment estimates over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole parameter tree, flattened in traversal order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
    flat_params: Vec<f64>,
    flat_grads: Vec<f64>,
}

impl Adam {
    pub fn new<P: ParamTree<Tensor>>(params: &P, config: AdamConfig) -> Self {
        let len = flatten(params).len();
        Adam {
            config,
            state: AdamState::new(len),
            flat_params: Vec::with_capacity(len),
            flat_grads: Vec::with_capacity(len),
        }
    }

    pub fn step<P: ParamTree<Tensor>>(&mut self, params: &mut P, grads: &P, clip_norm: Option<f64>) -> Result<()> {
        self.flat_params.clear();
        self.flat_grads.clear();
        params.visit(&mut |_, t| self.flat_params.extend_from_slice(t.data()));
        grads.visit(&mut |_, t| self.flat_grads.extend_from_slice(t.data()));
        if let Some(limit) = clip_norm {
            let norm = self.flat_grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                let s = limit / norm;
                self.flat_grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        adam_step(&mut self.flat_params, &self.flat_grads, &mut self.state, self.config)?;
        let mut offset = 0;
        params.visit_mut(&mut |t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&self.flat_params[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }
}

fn flatten<P: ParamTree<Tensor>>(params: &P) -> Vec<f64> {
    let mut out = Vec::new();
    params.visit(&mut |_, t| out.extend_from_slice(t.data()));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    /// `epoch,train_mse,val_mse` with an empty last column when no
    /// validation set was used.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse\n");
        for r in &self.history {
            let val = r.val_mse.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", r.epoch, r.train_mse, val));
        }
        out
    }
}

fn check_dataset(config: &TrainConfig, ds: &WindowedDataset, a_hat: &Tensor) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    if ds.window() != config.window || ds.horizon() != config.horizon {
        return Err(Error::Validation(format!(
            "dataset has window {} and horizon {}, config expects {} and {}",
            ds.window(),
            ds.horizon(),
            config.window,
            config.horizon
        )));
    }
    let n = ds.num_sites();
    if a_hat.shape() != [n, n] {
        return Err(Error::shape("train", a_hat.shape(), &[n, n]));
    }
    Ok(())
}

/// Mean loss over a dataset, evaluated in chunks of `batch_size`.
pub fn evaluate_mse(model: &Model, ds: &WindowedDataset, a_hat: &Tensor, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk)?;
        total += mse_loss(&model.predict(a_hat, &x)?, &y)? * chunk.len() as f64;
    }
    Ok(total / ds.len() as f64)
}

pub fn train(config: &TrainConfig, dataset: &WindowedDataset, a_hat: &Tensor) -> Result<TrainedModel> {
    train_with_validation(config, dataset, None, a_hat)
}

/// Runs `epochs` passes of shuffled mini-batch Adam. Parameters are drawn
/// from `seed`; batch order comes from a separate stream of the same seed.
pub fn train_with_validation(
    config: &TrainConfig,
    dataset: &WindowedDataset,
    validation: Option<&WindowedDataset>,
    a_hat: &Tensor,
) -> Result<TrainedModel> {
    config.validate()?;
    check_dataset(config, dataset, a_hat)?;
    if let Some(v) = validation {
        check_dataset(config, v, a_hat)?;
    }
    let mut model = Model::init(config.model_shape(), config.seed)?;
    let mut adam = Adam::new(model.params(), AdamConfig::new(config.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = dataset.batch(chunk)?;
            let (loss, grads) = match model.loss_and_grads(a_hat, &x, &y) {
                Ok(r) => r,
                Err(Error::Numeric(reason)) => return Err(Error::TrainingDiverged { epoch, reason }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::TrainingDiverged {
                    epoch,
                    reason: format!("batch loss {loss}"),
                });
            }
            adam.step(model.params_mut(), &grads, config.clip_norm).map_err(|e| match e {
                Error::Numeric(reason) => Error::TrainingDiverged { epoch, reason },
                e => e,
            })?;
            total += loss * chunk.len() as f64;
        }
        let train_mse = total / dataset.len() as f64;
        let val_mse = validation
            .map(|v| evaluate_mse(&model, v, a_hat, config.batch_size))
            .transpose()?;
        log::debug!("epoch {epoch}: train {train_mse:.6e}");
        history.push(EpochRecord { epoch, train_mse, val_mse });
    }
    Ok(TrainedModel {
        config: config.clone(),
        model,
        history,
    })
}

/// One searchable hyper-parameter and its candidates.
#[derive(Debug, Clone, PartialEq)]
pub enum GridAxis {
    HiddenFeat(Vec<usize>),
    LearningRate(Vec<f64>),
    BatchSize(Vec<usize>),
    Epochs(Vec<usize>),
}

impl GridAxis {
    fn len(&self) -> usize {
        match self {
            GridAxis::HiddenFeat(v) | GridAxis::BatchSize(v) | GridAxis::Epochs(v) => v.len(),
            GridAxis::LearningRate(v) => v.len(),
        }
    }

    fn apply(&self, i: usize, config: &mut TrainConfig) {
        match self {
            GridAxis::HiddenFeat(v) => config.hidden_feat = v[i],
            GridAxis::LearningRate(v) => config.learning_rate = v[i],
            GridAxis::BatchSize(v) => config.batch_size = v[i],
            GridAxis::Epochs(v) => config.epochs = v[i],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: TrainConfig,
    /// Every evaluated configuration with its validation MSE, in
    /// enumeration order.
    pub table: Vec<(TrainConfig, f64)>,
}

/// Exhaustive search over the Cartesian product of `grid`. The last 20% of
/// `data` is held out for validation. Lowest validation MSE wins; ties go
/// to the smaller hidden width, then the lower learning rate.
pub fn grid_search(grid: &[GridAxis], base: &TrainConfig, data: &WindowedDataset, a_hat: &Tensor) -> Result<GridResult> {
    if grid.is_empty() || grid.iter().any(|a| a.len() == 0) {
        return Err(Error::Contract("grid search needs at least one candidate per axis".into()));
    }
    let (fit, val) = train_test_split(data, 0.8)?;
    let mut table = Vec::new();
    let mut counters = vec![0usize; grid.len()];
    loop {
        let mut config = base.clone();
        for (axis, &i) in grid.iter().zip(&counters) {
            axis.apply(i, &mut config);
        }
        let trained = train(&config, &fit, a_hat)?;
        let loss = evaluate_mse(&trained.model, &val, a_hat, config.batch_size)?;
        log::info!("grid point hidden={} lr={} -> val {loss:.6e}", config.hidden_feat, config.learning_rate);
        table.push((config, loss));

        // odometer increment, last axis fastest
        let mut k = grid.len();
        loop {
            if k == 0 {
                let best = table
                    .iter()
                    .min_by(|(a, la), (b, lb)| {
                        la.total_cmp(lb)
                            .then(a.hidden_feat.cmp(&b.hidden_feat))
                            .then(a.learning_rate.total_cmp(&b.learning_rate))
                    })
                    .map(|(c, _)| c.clone())
                    .expect("grid is nonempty");
                return Ok(GridResult { best, table });
            }
            k -= 1;
            counters[k] += 1;
            if counters[k] < grid[k].len() {
                break;
            }
            counters[k] = 0;
        }
    }
}
