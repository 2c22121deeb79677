//! Recurrent and graph-convolution building blocks.
//!
//! Tape-level functions work on node-major batches: a `[N * B, F]` matrix
//! whose rows `n * B .. (n + 1) * B` hold node `n` for each of `B` windows.
//! In that layout applying `A_hat` to every window at once is a single
//! `[N, N] x [N, B * F]` product.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::params::{bind_constant, GcnParams, GraphWeights, GruParams, StgbgruParams, Activation};

/// Left-multiplies node-major batches by the normalized adjacency.
#[derive(Debug, Clone, Copy)]
pub struct GraphMixer {
    a_hat: Var,
    nodes: usize,
    batch: usize,
}

impl GraphMixer {
    pub fn new(tape: &mut Tape, a_hat: &Tensor, batch: usize) -> Result<Self> {
        let (n, m) = a_hat.dims2()?;
        if n != m {
            return Err(Error::shape("graph mixer", a_hat.shape(), &[n, n]));
        }
        if batch == 0 {
            return Err(Error::Contract("batch must be positive".into()));
        }
        Ok(GraphMixer {
            a_hat: tape.constant(a_hat.clone()),
            nodes: n,
            batch,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `(A_hat ⊗ I_B) z` for `z` of shape `[N * B, F]`.
    pub fn mix(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 2 || shape[0] != self.nodes * self.batch {
            return Err(Error::shape("graph mix", &shape, &[self.nodes * self.batch, 0]));
        }
        tape.mix_rows(self.a_hat, z)
    }

    /// Single graph convolution `A_hat Z W`.
    pub fn conv(&self, tape: &mut Tape, z: Var, w: Var) -> Result<Var> {
        let zw = tape.matmul(z, w)?;
        self.mix(tape, zw)
    }

    /// One gate term: `A Z W` for one layer, `A relu(A Z W0) W1` for two.
    pub fn conv_term(&self, tape: &mut Tape, z: Var, weights: &GraphWeights<Var>) -> Result<Var> {
        match &weights.0[..] {
            [w] => self.conv(tape, z, *w),
            [w0, w1] => {
                let inner = self.conv(tape, z, *w0)?;
                let inner = tape.relu(inner)?;
                self.conv(tape, inner, *w1)
            }
            other => Err(Error::Contract(format!(
                "graph-conv term with {} layers",
                other.len()
            ))),
        }
    }

    /// `act(A relu(A X W0) W1)`.
    pub fn gcn2(&self, tape: &mut Tape, x: Var, p: &GcnParams<Var>) -> Result<Var> {
        let hidden = self.conv(tape, x, p.w0)?;
        let hidden = tape.relu(hidden)?;
        let out = self.conv(tape, hidden, p.w1)?;
        match p.output_activation {
            Activation::Identity => Ok(out),
            Activation::Sigmoid => tape.sigmoid(out),
        }
    }
}

fn fuse_gate_weights(tape: &mut Tape, xa: Var, xb: Var, ha: Var, hb: Var) -> Result<Var> {
    let x = tape.concat(&[xa, xb], 1)?;
    let h = tape.concat(&[ha, hb], 1)?;
    tape.concat(&[x, h], 0)
}

/// A GRU cell with its gate weights packed once per sequence.
#[derive(Debug, Clone)]
pub struct GruCell {
    /// `[[w_xr, w_xz], [w_hr, w_hz]]`
    w_gates: Var,
    b_gates: Var,
    w_xh: Var,
    w_hh: Var,
    b_h: Option<Var>,
    hidden: usize,
}

impl GruCell {
    pub fn prepare(tape: &mut Tape, p: &GruParams<Var>) -> Result<Self> {
        let hidden = tape.shape(p.b_r)[0];
        Ok(GruCell {
            w_gates: fuse_gate_weights(tape, p.w_xr, p.w_xz, p.w_hr, p.w_hz)?,
            b_gates: tape.concat(&[p.b_r, p.b_z], 0)?,
            w_xh: p.w_xh,
            w_hh: p.w_hh,
            b_h: p.b_h,
            hidden,
        })
    }

    /// One step on row-stacked inputs `x: [R, F]` and state `h: [R, H]`:
    ///
    /// ```text
    /// r  = σ(x w_xr + h w_hr + b_r)
    /// z  = σ(x w_xz + h w_hz + b_z)
    /// h~ = tanh(x w_xh + (r ⊙ h) w_hh)
    /// h' = z ⊙ h + (1 - z) ⊙ h~
    /// ```
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat(&[x, h], 1)?;
        let pre = tape.matmul(xh, self.w_gates)?;
        let pre = tape.add_bias(pre, self.b_gates)?;
        let gates = tape.sigmoid(pre)?;
        let r = tape.narrow(gates, 0, self.hidden)?;
        let z = tape.narrow(gates, self.hidden, self.hidden)?;

        let cx = tape.matmul(x, self.w_xh)?;
        let rh = tape.mul(r, h)?;
        let ch = tape.matmul(rh, self.w_hh)?;
        let mut c = tape.add(cx, ch)?;
        if let Some(b) = self.b_h {
            c = tape.add_bias(c, b)?;
        }
        let candidate = tape.tanh(c)?;
        tape.blend(z, h, candidate)
    }
}

/// The fused cell with every gate product replaced by a graph convolution.
#[derive(Debug, Clone)]
pub enum StgbgruCell {
    /// Single-layer terms. By linearity `A X W_x + A H W_h = A [X | H] [W_x; W_h]`,
    /// so the two terms of each gate share one product.
    Shallow {
        /// `[[w_xz, w_xr], [w_hz, w_hr]]`
        w_gates: Var,
        b_gates: Var,
        /// `[w_xh; w_hh]`
        w_cand: Var,
        b_h: Option<Var>,
        hidden: usize,
    },
    /// Two-layer terms are not linear, so each is evaluated separately.
    Deep(StgbgruParams<Var>),
}

impl StgbgruCell {
    pub fn prepare(tape: &mut Tape, p: &StgbgruParams<Var>) -> Result<Self> {
        let hidden = tape.shape(p.b_z)[0];
        match p.w_xz.0.len() {
            1 => Ok(StgbgruCell::Shallow {
                w_gates: fuse_gate_weights(tape, p.w_xz.0[0], p.w_xr.0[0], p.w_hz.0[0], p.w_hr.0[0])?,
                b_gates: tape.concat(&[p.b_z, p.b_r], 0)?,
                w_cand: tape.concat(&[p.w_xh.0[0], p.w_hh.0[0]], 0)?,
                b_h: p.b_h,
                hidden,
            }),
            2 => Ok(StgbgruCell::Deep(p.clone())),
            d => Err(Error::Contract(format!("graph-conv depth {d} unsupported"))),
        }
    }

    /// One step on node-major `x: [N * B, F]`, `h: [N * B, H]`:
    ///
    /// ```text
    /// z  = σ(W_xz *G X + W_hz *G H + b_z)
    /// r  = σ(W_xr *G X + W_hr *G H + b_r)
    /// H~ = tanh(W_xh *G X + W_hh *G (r ⊙ H))
    /// H' = z ⊙ H + (1 - z) ⊙ H~
    /// ```
    pub fn step(&self, tape: &mut Tape, g: &GraphMixer, x: Var, h: Var) -> Result<Var> {
        match self {
            StgbgruCell::Shallow {
                w_gates,
                b_gates,
                w_cand,
                b_h,
                hidden,
            } => {
                let xh = tape.concat(&[x, h], 1)?;
                let pre = g.conv(tape, xh, *w_gates)?;
                let pre = tape.add_bias(pre, *b_gates)?;
                let gates = tape.sigmoid(pre)?;
                let z = tape.narrow(gates, 0, *hidden)?;
                let r = tape.narrow(gates, *hidden, *hidden)?;

                let rh = tape.mul(r, h)?;
                let xrh = tape.concat(&[x, rh], 1)?;
                let mut c = g.conv(tape, xrh, *w_cand)?;
                if let Some(b) = b_h {
                    c = tape.add_bias(c, *b)?;
                }
                let candidate = tape.tanh(c)?;
                tape.blend(z, h, candidate)
            }
            StgbgruCell::Deep(p) => {
                let gate = |tape: &mut Tape, wx: &GraphWeights<Var>, wh: &GraphWeights<Var>, b: Var| {
                    let a = g.conv_term(tape, x, wx)?;
                    let c = g.conv_term(tape, h, wh)?;
                    let s = tape.add(a, c)?;
                    let s = tape.add_bias(s, b)?;
                    tape.sigmoid(s)
                };
                let z = gate(tape, &p.w_xz, &p.w_hz, p.b_z)?;
                let r = gate(tape, &p.w_xr, &p.w_hr, p.b_r)?;
                let rh = tape.mul(r, h)?;
                let cx = g.conv_term(tape, x, &p.w_xh)?;
                let ch = g.conv_term(tape, rh, &p.w_hh)?;
                let mut c = tape.add(cx, ch)?;
                if let Some(b) = p.b_h {
                    c = tape.add_bias(c, b)?;
                }
                let candidate = tape.tanh(c)?;
                tape.blend(z, h, candidate)
            }
        }
    }
}

fn as_matrix(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        &[d] => t.reshape(&[1, d]),
        &[_, _] => Ok(t.clone()),
        other => Err(Error::shape("expected vector or matrix", other, &[0, 0])),
    }
}

/// `A_hat Z W` for a single graph signal `Z: [N, F_in]`.
pub fn graph_conv(z: &Tensor, a_hat: &Tensor, w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = GraphMixer::new(&mut tape, a_hat, 1)?;
    let (zv, wv) = (tape.constant(z.clone()), tape.constant(w.clone()));
    let out = g.conv(&mut tape, zv, wv)?;
    Ok(tape.value(out).clone())
}

/// Two-layer graph convolution `act(A_hat relu(A_hat X W0) W1)`.
pub fn gcn2_forward(x: &Tensor, a_hat: &Tensor, params: &GcnParams) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let g = GraphMixer::new(&mut tape, a_hat, 1)?;
    let p = bind_constant(params, &mut tape);
    let xv = tape.constant(x.clone());
    let out = g.gcn2(&mut tape, xv, &p)?;
    Ok(tape.value(out).clone())
}

/// One GRU step. Accepts vectors or row-stacked matrices; the result has
/// the shape of `h_prev`.
pub fn gru_cell(x: &Tensor, h_prev: &Tensor, params: &GruParams) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let p = bind_constant(params, &mut tape);
    let cell = GruCell::prepare(&mut tape, &p)?;
    let xv = tape.constant(as_matrix(x)?);
    let hv = tape.constant(as_matrix(h_prev)?);
    let out = cell.step(&mut tape, xv, hv)?;
    tape.value(out).reshape(h_prev.shape())
}

/// One fused graph-recurrent step for `X_t: [N, F_in]`, `H_prev: [N, F_hid]`.
pub fn stgbgru_cell(x: &Tensor, h_prev: &Tensor, a_hat: &Tensor, params: &StgbgruParams) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::new();
    let g = GraphMixer::new(&mut tape, a_hat, 1)?;
    let p = bind_constant(params, &mut tape);
    let cell = StgbgruCell::prepare(&mut tape, &p)?;
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h_prev.clone());
    let out = cell.step(&mut tape, &g, xv, hv)?;
    Ok(tape.value(out).clone())
}
