//! Sequence models mapping a window of normalized counts to a one-step
//! prediction per site.
//!
//! Three networks share the readout and the batch layout:
//!
//! * `stgbgru`: graph convolution inside every gate of the recurrent cell;
//! * `stacked`: a two-layer GCN on each input frame feeding an ordinary GRU;
//! * `plain-gru`: one weight-shared GRU per site, no graph.

mod cells;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use cells::{gcn2_forward, graph_conv, gru_cell, stgbgru_cell, GraphMixer, GruCell, StgbgruCell};
pub use params::{bind, bind_constant, Activation, GcnParams, GraphWeights, GruParams, ParamTree, Readout, StgbgruParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum ModelKind {
    #[default]
    #[serde(rename = "stgbgru")]
    Stgbgru,
    #[serde(rename = "stacked")]
    Stacked,
    #[serde(rename = "plain-gru")]
    PlainGru,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Stgbgru, ModelKind::Stacked, ModelKind::PlainGru];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Stgbgru => "stgbgru",
            ModelKind::Stacked => "stacked",
            ModelKind::PlainGru => "plain-gru",
        }
    }

    pub fn uses_graph(self) -> bool {
        self != ModelKind::PlainGru
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown model kind {s:?}")))
    }
}

/// Architecture hyper-parameters. Inputs are one scalar per site and step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kind: ModelKind,
    pub hidden_feat: usize,
    /// Graph-convolution layers per gate term of the fused cell (1 or 2).
    pub gcn_depth: usize,
    /// Adds a bias inside the candidate activation.
    pub candidate_bias: bool,
    /// Output activation of the stacked baseline's encoder.
    pub gcn_activation: Activation,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            kind: ModelKind::Stgbgru,
            hidden_feat: 64,
            gcn_depth: 1,
            candidate_bias: false,
            gcn_activation: Activation::Sigmoid,
        }
    }
}

impl ModelShape {
    pub fn new(kind: ModelKind, hidden_feat: usize) -> Self {
        ModelShape {
            kind,
            hidden_feat,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network<T = Tensor> {
    Stgbgru(StgbgruParams<T>),
    Stacked { gcn: GcnParams<T>, gru: GruParams<T> },
    PlainGru(GruParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub network: Network<T>,
    pub readout: Readout<T>,
}

impl<T> ParamTree<T> for Network<T> {
    type Mapped<U> = Network<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Network<U> {
        match self {
            Network::Stgbgru(p) => Network::Stgbgru(p.map(f)),
            Network::Stacked { gcn, gru } => Network::Stacked {
                gcn: gcn.map(f),
                gru: gru.map(f),
            },
            Network::PlainGru(p) => Network::PlainGru(p.map(f)),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        match self {
            Network::Stgbgru(p) => p.visit(&mut |n, t| f(format!("cell.{n}"), t)),
            Network::Stacked { gcn, gru } => {
                gcn.visit(&mut |n, t| f(format!("gcn.{n}"), t));
                gru.visit(&mut |n, t| f(format!("gru.{n}"), t));
            }
            Network::PlainGru(p) => p.visit(&mut |n, t| f(format!("gru.{n}"), t)),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        match self {
            Network::Stgbgru(p) => p.visit_mut(f),
            Network::Stacked { gcn, gru } => {
                gcn.visit_mut(f);
                gru.visit_mut(f);
            }
            Network::PlainGru(p) => p.visit_mut(f),
        }
    }
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            network: self.network.map(f),
            readout: self.readout.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.network.visit(f);
        self.readout.visit(&mut |n, t| f(format!("readout.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.network.visit_mut(f);
        self.readout.visit_mut(f);
    }
}

impl ModelParams {
    /// Deterministic initialization: uniform weights scaled by fan-in,
    /// zero biases.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = shape.hidden_feat;
        let network = match shape.kind {
            ModelKind::Stgbgru => {
                Network::Stgbgru(StgbgruParams::init(&mut rng, 1, h, shape.gcn_depth, shape.candidate_bias)?)
            }
            ModelKind::Stacked => Network::Stacked {
                gcn: GcnParams::init(&mut rng, 1, h, h, shape.gcn_activation)?,
                gru: GruParams::init(&mut rng, h, h, shape.candidate_bias)?,
            },
            ModelKind::PlainGru => Network::PlainGru(GruParams::init(&mut rng, 1, h, shape.candidate_bias)?),
        };
        Ok(ModelParams {
            network,
            readout: Readout::init(&mut rng, h)?,
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self.network {
            Network::Stgbgru(_) => ModelKind::Stgbgru,
            Network::Stacked { .. } => ModelKind::Stacked,
            Network::PlainGru(_) => ModelKind::PlainGru,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.readout.w_out.shape()[0]
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        let input = match &self.network {
            Network::Stgbgru(p) => {
                p.validate()?;
                (p.input_dim(), p.hidden_dim())
            }
            Network::Stacked { gcn, gru } => {
                gcn.validate()?;
                gru.validate()?;
                if gcn.w1.shape()[1] != gru.input_dim() {
                    return Err(Error::Validation("encoder output does not match GRU input".into()));
                }
                (gcn.w0.shape()[0], gru.hidden_dim())
            }
            Network::PlainGru(p) => {
                p.validate()?;
                (p.input_dim(), p.hidden_dim())
            }
        };
        if input.0 != 1 || input.1 != h || self.readout.w_out.shape() != [h, 1] || self.readout.b_out.shape() != [1] {
            return Err(Error::Validation("readout or input shapes inconsistent".into()));
        }
        Ok(())
    }
}

/// Trainable parameters plus the architecture they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    shape: ModelShape,
    params: ModelParams,
}

impl Model {
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        Ok(Model {
            params: ModelParams::init(&shape, seed)?,
            shape,
        })
    }

    pub fn from_params(shape: ModelShape, params: ModelParams) -> Result<Self> {
        params.validate()?;
        if params.kind() != shape.kind || params.hidden_dim() != shape.hidden_feat {
            return Err(Error::Validation("parameters do not match the model shape".into()));
        }
        Ok(Model { shape, params })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn kind(&self) -> ModelKind {
        self.shape.kind
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Records the forward pass for windows `[B, m, N]` on `tape` and
    /// returns node-major predictions `[N * B, 1]`.
    pub fn record(&self, tape: &mut Tape, params: &ModelParams<Var>, a_hat: &Tensor, windows: &Tensor) -> Result<Var> {
        let (b, m, n) = window_dims(windows)?;
        if a_hat.shape() != [n, n] {
            return Err(Error::shape("model forward", a_hat.shape(), &[n, n]));
        }
        let h = self.shape.hidden_feat;
        let frames: Vec<Tensor> = (0..m).map(|t| node_major_frame(windows, t)).collect();
        let mut state = tape.constant(Tensor::zeros(&[n * b, h]));

        match &params.network {
            Network::Stgbgru(p) => {
                let g = GraphMixer::new(tape, a_hat, b)?;
                let cell = StgbgruCell::prepare(tape, p)?;
                for frame in frames {
                    let x = tape.constant(frame);
                    state = cell.step(tape, &g, x, state)?;
                }
            }
            Network::Stacked { gcn, gru } => {
                let g = GraphMixer::new(tape, a_hat, b)?;
                let cell = GruCell::prepare(tape, gru)?;
                for frame in frames {
                    let x = tape.constant(frame);
                    let encoded = g.gcn2(tape, x, gcn)?;
                    state = cell.step(tape, encoded, state)?;
                }
            }
            Network::PlainGru(p) => {
                let cell = GruCell::prepare(tape, p)?;
                for frame in frames {
                    let x = tape.constant(frame);
                    state = cell.step(tape, x, state)?;
                }
            }
        }
        let out = tape.matmul(state, params.readout.w_out)?;
        tape.add_bias(out, params.readout.b_out)
    }

    /// Normalized predictions `[B, N]` for windows `[B, m, N]`.
    pub fn predict(&self, a_hat: &Tensor, windows: &Tensor) -> Result<Tensor> {
        let (b, _, n) = window_dims(windows)?;
        let mut tape = Tape::new();
        let p = bind_constant(&self.params, &mut tape);
        let out = self.record(&mut tape, &p, a_hat, windows)?;
        Ok(batch_major(tape.value(out), b, n))
    }

    /// Mean squared error against `targets: [B, N]` and its gradient with
    /// respect to every parameter.
    pub fn loss_and_grads(&self, a_hat: &Tensor, windows: &Tensor, targets: &Tensor) -> Result<(f64, ModelParams)> {
        let (b, _, n) = window_dims(windows)?;
        if targets.shape() != [b, n] {
            return Err(Error::shape("targets", targets.shape(), &[b, n]));
        }
        let mut tape = Tape::new();
        let p = bind(&self.params, &mut tape);
        let pred = self.record(&mut tape, &p, a_hat, windows)?;
        let target = tape.constant(node_major_targets(targets, b, n));
        let loss = tape.mse(pred, target)?;
        let grads = tape.backward(loss)?;
        let value = tape.value(loss).item()?;
        Ok((value, p.map(&mut |v| grads.get(&tape, *v))))
    }

    /// One window `[m, N]` to one normalized prediction per site.
    pub fn forward_sequence(&self, window: &Tensor, a_hat: &Tensor) -> Result<Tensor> {
        let (m, n) = window.dims2()?;
        let out = self.predict(a_hat, &window.reshape(&[1, m, n])?)?;
        out.reshape(&[n])
    }
}

fn window_dims(windows: &Tensor) -> Result<(usize, usize, usize)> {
    match *windows.shape() {
        [b, m, n] => Ok((b, m, n)),
        ref other => Err(Error::shape("windows", other, &[0, 0, 0])),
    }
}

/// Frame `t` of `[B, m, N]` laid out as `[N * B, 1]`.
fn node_major_frame(windows: &Tensor, t: usize) -> Tensor {
    let (b, m, n) = (windows.shape()[0], windows.shape()[1], windows.shape()[2]);
    let d = windows.data();
    let mut out = Vec::with_capacity(n * b);
    for node in 0..n {
        for bi in 0..b {
            out.push(d[(bi * m + t) * n + node]);
        }
    }
    Tensor::from_parts(vec![n * b, 1], out)
}

fn node_major_targets(targets: &Tensor, b: usize, n: usize) -> Tensor {
    let d = targets.data();
    let out = (0..n).flat_map(|node| (0..b).map(move |bi| d[bi * n + node])).collect();
    Tensor::from_parts(vec![n * b, 1], out)
}

fn batch_major(pred: &Tensor, b: usize, n: usize) -> Tensor {
    let d = pred.data();
    let out = (0..b).flat_map(|bi| (0..n).map(move |node| d[node * b + bi])).collect();
    Tensor::from_parts(vec![b, n], out)
}

/// Frame-by-frame reference for the stacked baseline: `gcn2_forward` on
/// each `[N, 1]` frame, then `gru_cell` on each node's encoded sequence,
/// then the readout. Returns one value per node.
pub fn stacked_gcn_gru_forward(
    window: &Tensor,
    a_hat: &Tensor,
    gcn: &GcnParams,
    gru: &GruParams,
    readout: &Readout,
) -> Result<Tensor> {
    let (m, n) = window.dims2()?;
    let h = gru.hidden_dim();
    let mut states = vec![Tensor::zeros(&[h]); n];
    for t in 0..m {
        let frame = Tensor::matrix(n, 1, window.row(t).to_vec())?;
        let encoded = gcn2_forward(&frame, a_hat, gcn)?;
        for (node, state) in states.iter_mut().enumerate() {
            let x = Tensor::vector(encoded.row(node).to_vec())?;
            *state = gru_cell(&x, state, gru)?;
        }
    }
    let out = states
        .iter()
        .map(|s| {
            s.data().iter().zip(readout.w_out.data()).map(|(a, w)| a * w).sum::<f64>() + readout.b_out.data()[0]
        })
        .collect();
    Tensor::vector(out)
}
