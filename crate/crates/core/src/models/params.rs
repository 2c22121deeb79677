use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Output non-linearity of the two-layer graph convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Sigmoid,
}

/// Weights `w_x*` map inputs, `w_h*` map the previous state; `r` is the
/// reset gate, `z` the update gate and `h` the candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T = Tensor> {
    pub w_xr: T,
    pub w_xz: T,
    pub w_xh: T,
    pub w_hr: T,
    pub w_hz: T,
    pub w_hh: T,
    pub b_r: T,
    pub b_z: T,
    /// Candidate bias; absent unless `candidate_bias` is set.
    pub b_h: Option<T>,
}

/// Two-layer graph convolution `act(A relu(A X W0) W1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams<T = Tensor> {
    pub w0: T,
    pub w1: T,
    pub output_activation: Activation,
}

/// Weights of one graph-convolution term: a single matrix for `A Z W`, or
/// two for `A relu(A Z W0) W1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphWeights<T = Tensor>(pub Vec<T>);

/// Every gate term of the fused cell goes through its own graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct StgbgruParams<T = Tensor> {
    pub w_xz: GraphWeights<T>,
    pub w_hz: GraphWeights<T>,
    pub w_xr: GraphWeights<T>,
    pub w_hr: GraphWeights<T>,
    pub w_xh: GraphWeights<T>,
    pub w_hh: GraphWeights<T>,
    pub b_z: T,
    pub b_r: T,
    pub b_h: Option<T>,
}

/// Per-node affine map from the final hidden state to one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout<T = Tensor> {
    pub w_out: T,
    pub b_out: T,
}

/// Uniform mapping and ordered traversal over a parameter collection.
///
/// The traversal order is the serialization order in checkpoints and the
/// order optimizer state is kept in.
pub trait ParamTree<T> {
    type Mapped<U>;
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Self::Mapped<U>;
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T));
}

impl<T> ParamTree<T> for GruParams<T> {
    type Mapped<U> = GruParams<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GruParams<U> {
        GruParams {
            w_xr: f(&self.w_xr),
            w_xz: f(&self.w_xz),
            w_xh: f(&self.w_xh),
            w_hr: f(&self.w_hr),
            w_hz: f(&self.w_hz),
            w_hh: f(&self.w_hh),
            b_r: f(&self.b_r),
            b_z: f(&self.b_z),
            b_h: self.b_h.as_ref().map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        for (name, t) in [
            ("w_xr", &self.w_xr),
            ("w_xz", &self.w_xz),
            ("w_xh", &self.w_xh),
            ("w_hr", &self.w_hr),
            ("w_hz", &self.w_hz),
            ("w_hh", &self.w_hh),
            ("b_r", &self.b_r),
            ("b_z", &self.b_z),
        ] {
            f(name.to_string(), t);
        }
        if let Some(b) = &self.b_h {
            f("b_h".into(), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for t in [
            &mut self.w_xr,
            &mut self.w_xz,
            &mut self.w_xh,
            &mut self.w_hr,
            &mut self.w_hz,
            &mut self.w_hh,
            &mut self.b_r,
            &mut self.b_z,
        ] {
            f(t);
        }
        if let Some(b) = &mut self.b_h {
            f(b);
        }
    }
}

impl<T> ParamTree<T> for GcnParams<T> {
    type Mapped<U> = GcnParams<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GcnParams<U> {
        GcnParams {
            w0: f(&self.w0),
            w1: f(&self.w1),
            output_activation: self.output_activation,
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("w0".into(), &self.w0);
        f("w1".into(), &self.w1);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w0);
        f(&mut self.w1);
    }
}

impl<T> ParamTree<T> for GraphWeights<T> {
    type Mapped<U> = GraphWeights<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> GraphWeights<U> {
        GraphWeights(self.0.iter().map(f).collect())
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        for (i, t) in self.0.iter().enumerate() {
            f(format!("layer{i}"), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.0.iter_mut().for_each(f);
    }
}

impl<T> ParamTree<T> for StgbgruParams<T> {
    type Mapped<U> = StgbgruParams<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> StgbgruParams<U> {
        StgbgruParams {
            w_xz: self.w_xz.map(f),
            w_hz: self.w_hz.map(f),
            w_xr: self.w_xr.map(f),
            w_hr: self.w_hr.map(f),
            w_xh: self.w_xh.map(f),
            w_hh: self.w_hh.map(f),
            b_z: f(&self.b_z),
            b_r: f(&self.b_r),
            b_h: self.b_h.as_ref().map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        for (name, g) in [
            ("w_xz", &self.w_xz),
            ("w_hz", &self.w_hz),
            ("w_xr", &self.w_xr),
            ("w_hr", &self.w_hr),
            ("w_xh", &self.w_xh),
            ("w_hh", &self.w_hh),
        ] {
            g.visit(&mut |sub, t| f(format!("{name}.{sub}"), t));
        }
        f("b_z".into(), &self.b_z);
        f("b_r".into(), &self.b_r);
        if let Some(b) = &self.b_h {
            f("b_h".into(), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for g in [
            &mut self.w_xz,
            &mut self.w_hz,
            &mut self.w_xr,
            &mut self.w_hr,
            &mut self.w_xh,
            &mut self.w_hh,
        ] {
            g.visit_mut(f);
        }
        f(&mut self.b_z);
        f(&mut self.b_r);
        if let Some(b) = &mut self.b_h {
            f(b);
        }
    }
}

impl<T> ParamTree<T> for Readout<T> {
    type Mapped<U> = Readout<U>;

    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Readout<U> {
        Readout {
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("w_out".into(), &self.w_out);
        f("b_out".into(), &self.b_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w_out);
        f(&mut self.b_out);
    }
}

/// Records every tensor of `params` on `tape` as a trainable leaf.
pub fn bind<P: ParamTree<Tensor>>(params: &P, tape: &mut Tape) -> P::Mapped<Var> {
    params.map(&mut |t| tape.param(t.clone()))
}

/// Records every tensor as a constant, for inference-only forwards.
pub fn bind_constant<P: ParamTree<Tensor>>(params: &P, tape: &mut Tape) -> P::Mapped<Var> {
    params.map(&mut |t| tape.constant(t.clone()))
}

/// Draws weights from `U(-sqrt(1/fan_in), sqrt(1/fan_in))` where `fan_in`
/// is the number of rows.
pub(crate) fn uniform_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Contract(format!(
            "weight dimensions must be positive, got {fan_in}x{fan_out}"
        )));
    }
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

pub(crate) fn zero_bias(dim: usize) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Contract("bias dimension must be positive".into()));
    }
    Ok(Tensor::zeros(&[dim]))
}

impl GruParams {
    pub fn init(rng: &mut impl Rng, input_dim: usize, hidden_dim: usize, candidate_bias: bool) -> Result<Self> {
        Ok(GruParams {
            w_xr: uniform_weight(rng, input_dim, hidden_dim)?,
            w_xz: uniform_weight(rng, input_dim, hidden_dim)?,
            w_xh: uniform_weight(rng, input_dim, hidden_dim)?,
            w_hr: uniform_weight(rng, hidden_dim, hidden_dim)?,
            w_hz: uniform_weight(rng, hidden_dim, hidden_dim)?,
            w_hh: uniform_weight(rng, hidden_dim, hidden_dim)?,
            b_r: zero_bias(hidden_dim)?,
            b_z: zero_bias(hidden_dim)?,
            b_h: candidate_bias.then(|| zero_bias(hidden_dim)).transpose()?,
        })
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let z = |r, c| Tensor::zeros(&[r, c]);
        GruParams {
            w_xr: z(input_dim, hidden_dim),
            w_xz: z(input_dim, hidden_dim),
            w_xh: z(input_dim, hidden_dim),
            w_hr: z(hidden_dim, hidden_dim),
            w_hz: z(hidden_dim, hidden_dim),
            w_hh: z(hidden_dim, hidden_dim),
            b_r: Tensor::zeros(&[hidden_dim]),
            b_z: Tensor::zeros(&[hidden_dim]),
            b_h: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_xr.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hr.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (f, h) = (self.input_dim(), self.hidden_dim());
        for (name, t, want) in [
            ("w_xr", &self.w_xr, vec![f, h]),
            ("w_xz", &self.w_xz, vec![f, h]),
            ("w_xh", &self.w_xh, vec![f, h]),
            ("w_hr", &self.w_hr, vec![h, h]),
            ("w_hz", &self.w_hz, vec![h, h]),
            ("w_hh", &self.w_hh, vec![h, h]),
            ("b_r", &self.b_r, vec![h]),
            ("b_z", &self.b_z, vec![h]),
        ] {
            if t.shape() != want.as_slice() {
                return Err(Error::Validation(format!(
                    "GRU {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        if let Some(b) = &self.b_h {
            if b.shape() != [h] {
                return Err(Error::shape("gru b_h", b.shape(), &[h]));
            }
        }
        Ok(())
    }
}

impl GcnParams {
    pub fn init(rng: &mut impl Rng, c_in: usize, c_hid: usize, c_out: usize, act: Activation) -> Result<Self> {
        Ok(GcnParams {
            w0: uniform_weight(rng, c_in, c_hid)?,
            w1: uniform_weight(rng, c_hid, c_out)?,
            output_activation: act,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = (self.w0.shape(), self.w1.shape());
        if s0.len() != 2 || s1.len() != 2 || s0[1] != s1[0] {
            return Err(Error::shape("gcn weights", s0, s1));
        }
        Ok(())
    }
}

impl StgbgruParams {
    /// `depth` is the number of graph-convolution layers per gate term.
    pub fn init(rng: &mut impl Rng, feat_in: usize, hidden: usize, depth: usize, candidate_bias: bool) -> Result<Self> {
        if !(1..=2).contains(&depth) {
            return Err(Error::Contract(format!("graph-conv depth must be 1 or 2, got {depth}")));
        }
        let term = |rng: &mut _, from: usize| -> Result<GraphWeights> {
            let mut layers = vec![uniform_weight(rng, from, hidden)?];
            if depth == 2 {
                layers.push(uniform_weight(rng, hidden, hidden)?);
            }
            Ok(GraphWeights(layers))
        };
        Ok(StgbgruParams {
            w_xz: term(rng, feat_in)?,
            w_hz: term(rng, hidden)?,
            w_xr: term(rng, feat_in)?,
            w_hr: term(rng, hidden)?,
            w_xh: term(rng, feat_in)?,
            w_hh: term(rng, hidden)?,
            b_z: zero_bias(hidden)?,
            b_r: zero_bias(hidden)?,
            b_h: candidate_bias.then(|| zero_bias(hidden)).transpose()?,
        })
    }

    /// Single-layer parameters with the same weights as a plain GRU cell.
    pub fn from_gru(gru: &GruParams) -> Self {
        let one = |t: &Tensor| GraphWeights(vec![t.clone()]);
        StgbgruParams {
            w_xz: one(&gru.w_xz),
            w_hz: one(&gru.w_hz),
            w_xr: one(&gru.w_xr),
            w_hr: one(&gru.w_hr),
            w_xh: one(&gru.w_xh),
            w_hh: one(&gru.w_hh),
            b_z: gru.b_z.clone(),
            b_r: gru.b_r.clone(),
            b_h: gru.b_h.clone(),
        }
    }

    pub fn depth(&self) -> usize {
        self.w_xz.0.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_xz.0[0].shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_z.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, h, d) = (self.input_dim(), self.hidden_dim(), self.depth());
        for (name, g, from) in [
            ("w_xz", &self.w_xz, f),
            ("w_hz", &self.w_hz, h),
            ("w_xr", &self.w_xr, f),
            ("w_hr", &self.w_hr, h),
            ("w_xh", &self.w_xh, f),
            ("w_hh", &self.w_hh, h),
        ] {
            let ok = g.0.len() == d
                && g.0.iter().enumerate().all(|(i, t)| {
                    t.shape() == [if i == 0 { from } else { h }, h]
                });
            if !ok {
                return Err(Error::Validation(format!("ST-GBGRU {name} has inconsistent shapes")));
            }
        }
        if self.b_r.shape() != [h] || self.b_h.as_ref().is_some_and(|b| b.shape() != [h]) {
            return Err(Error::Validation("ST-GBGRU bias shapes inconsistent".into()));
        }
        Ok(())
    }
}

impl Readout {
    pub fn init(rng: &mut impl Rng, hidden: usize) -> Result<Self> {
        Ok(Readout {
            w_out: uniform_weight(rng, hidden, 1)?,
            b_out: zero_bias(1)?,
        })
    }
}
