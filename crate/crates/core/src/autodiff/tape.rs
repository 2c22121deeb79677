use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`; only the scale matters for the adjoint.
    Affine(Var, f64),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// `z * h + (1 - z) * c`.
    Blend(Var, Var, Var),
    /// `a` times the row-block view of `z`.
    MixRows(Var, Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations for reverse-mode differentiation.
///
/// Every op's inputs are earlier nodes, so the node list is already in
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite output from {op:?} with shape {:?}",
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product. Rank-2 operands multiply directly; rank-3 operands are
    /// treated as equal-length stacks of matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = match (&sa[..], &sb[..]) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let mut out = vec![0.0; m * n];
                gemm(
                    m,
                    k,
                    n,
                    self.value(a).data(),
                    (k, 1),
                    self.value(b).data(),
                    (n, 1),
                    0.0,
                    &mut out,
                );
                Tensor::from_parts(vec![m, n], out)
            }
            (&[batch, m, k], &[batch2, k2, n]) if batch == batch2 && k == k2 => {
                let mut out = vec![0.0; batch * m * n];
                let (da, db) = (self.value(a).data(), self.value(b).data());
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &da[i * m * k..],
                        (k, 1),
                        &db[i * k * n..],
                        (n, 1),
                        0.0,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::from_parts(vec![batch, m, n], out)
            }
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        self.push(value, Op::Matmul(a, b), &[a, b])
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("hadamard", a, b, |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    /// `scale * a + shift` element-wise; `affine(z, -1.0, 1.0)` gives `1 - z`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale), &[a])
    }

    /// Adds a bias vector to every row along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = *ta.shape().last().unwrap();
        if tb.shape() != [cols] {
            return Err(Error::shape("add_bias", ta.shape(), tb.shape()));
        }
        let bd = tb.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(bd) {
                *x += b;
            }
        }
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(v, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// Gated interpolation `z * h + (1 - z) * c` over equal-shaped inputs.
    pub fn blend(&mut self, z: Var, h: Var, c: Var) -> Result<Var> {
        let (tz, th, tc) = (self.value(z), self.value(h), self.value(c));
        if tz.shape() != th.shape() || tz.shape() != tc.shape() {
            return Err(Error::shape("blend", tz.shape(), if tz.shape() != th.shape() { th.shape() } else { tc.shape() }));
        }
        let data = tz
            .data()
            .iter()
            .zip(th.data())
            .zip(tc.data())
            .map(|((z, h), c)| z * h + (1.0 - z) * c)
            .collect();
        let v = Tensor::from_parts(tz.shape().to_vec(), data);
        self.push(v, Op::Blend(z, h, c), &[z, h, c])
    }

    /// Multiplies `a: [N, K]` into `z: [K * B, F]` read as `[K, B * F]`,
    /// giving `[N * B, F]`. With node-major rows this applies `a` to every
    /// one of the `B` stacked graph signals without copying.
    pub fn mix_rows(&mut self, a: Var, z: Var) -> Result<Var> {
        let (sa, sz) = (self.shape(a).to_vec(), self.shape(z).to_vec());
        let (n, k, rows, f) = match (&sa[..], &sz[..]) {
            (&[n, k], &[rows, f]) if rows % k == 0 => (n, k, rows, f),
            _ => return Err(Error::shape("mix_rows", &sa, &sz)),
        };
        let width = rows / k * f;
        let mut out = vec![0.0; n * width];
        gemm(n, k, width, self.value(a).data(), (k, 1), self.value(z).data(), (width, 1), 0.0, &mut out);
        let v = Tensor::from_parts(vec![n * rows / k, f], out);
        self.push(v, Op::MixRows(a, z), &[a, z])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, data);
        self.push(v, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let cols = *t.shape().last().unwrap();
        if len == 0 || start + len > cols {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) outside last axis of {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.len() / cols * len);
        for row in t.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::from_parts(shape, data);
        self.push(v, Op::Narrow(a, start, len), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Mean of squared differences over all entries, as a one-element tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.zip_same("mse", pred, target, |p, t| p - t)?;
        let n = diff.len() as f64;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        self.push(Tensor::from_parts(vec![1], vec![loss]), Op::Mse(pred, target), &[pred, target])
    }

    /// Reverse sweep from a scalar `loss`, returning adjoints of every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd, 1.0);
                self.accumulate(grads, *b, gd, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd, 1.0);
                self.accumulate(grads, *b, gd, -1.0);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate_owned(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate_owned(grads, *b, d);
                }
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, gd, *s),
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, gd, 1.0);
                if self.requires_grad(*bias) {
                    let cols = self.value(*bias).len();
                    let mut d = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, &d, 1.0);
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate_owned(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d: Vec<f64> = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate_owned(grads, *a, d);
            }
            Op::Blend(z, h, c) => {
                let (zv, hv, cv) = (self.value(*z).data(), self.value(*h).data(), self.value(*c).data());
                if self.requires_grad(*z) {
                    let d = gd.iter().zip(hv).zip(cv).map(|((g, h), c)| g * (h - c)).collect();
                    self.accumulate_owned(grads, *z, d);
                }
                if self.requires_grad(*h) {
                    let d = gd.iter().zip(zv).map(|(g, z)| g * z).collect();
                    self.accumulate_owned(grads, *h, d);
                }
                if self.requires_grad(*c) {
                    let d = gd.iter().zip(zv).map(|(g, z)| g * (1.0 - z)).collect();
                    self.accumulate_owned(grads, *c, d);
                }
            }
            Op::MixRows(a, z) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let width = self.value(*z).len() / k;
                if self.requires_grad(*a) {
                    let zv = self.value(*z).data();
                    let acc = self.slot(grads, *a).data_mut();
                    gemm(n, width, k, gd, (width, 1), zv, (1, width), 1.0, acc);
                }
                if self.requires_grad(*z) {
                    let av = self.value(*a).data();
                    let acc = self.slot(grads, *z).data_mut();
                    gemm(k, n, width, av, (1, k), gd, (width, 1), 1.0, acc);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate_owned(grads, *a, d);
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let out_chunk = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let width = self.shape(*p)[*axis] * inner;
                    if self.requires_grad(*p) {
                        let acc = self.slot(grads, *p).data_mut();
                        for (o, dst) in acc.chunks_mut(width).enumerate().take(outer) {
                            let base = o * out_chunk + offset;
                            for (a, g) in dst.iter_mut().zip(&gd[base..base + width]) {
                                *a += g;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Narrow(a, start, len) => {
                if self.requires_grad(*a) {
                    let cols = *self.shape(*a).last().unwrap();
                    let acc = self.slot(grads, *a).data_mut();
                    for (dst, src) in acc.chunks_mut(cols).zip(gd.chunks(*len)) {
                        for (a, g) in dst[*start..start + len].iter_mut().zip(src) {
                            *a += g;
                        }
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gd, 1.0),
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let coef = 2.0 * gd[0] / pv.len() as f64;
                let d: Vec<f64> = pv.iter().zip(tv).map(|(p, t)| coef * (p - t)).collect();
                self.accumulate(grads, *p, &d, 1.0);
                self.accumulate(grads, *t, &d, -1.0);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: &[f64], scale: f64) {
        if !self.requires_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta) {
                    *a += scale * d;
                }
            }
            slot @ None => {
                let shape = self.shape(target).to_vec();
                *slot = Some(Tensor::from_parts(
                    shape,
                    delta.iter().map(|d| scale * d).collect(),
                ));
            }
        }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Tensor>], target: Var, delta: Vec<f64>) {
        if !self.requires_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(Tensor::from_parts(self.shape(target).to_vec(), delta)),
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)))
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (&sa[..], &sb[..]) {
            (&[m, k], &[_, n]) => (1, m, k, n),
            (&[bt, m, k], &[_, _, n]) => (bt, m, k, n),
            _ => unreachable!("matmul shapes validated in forward"),
        };
        let gd = g.data();
        if self.requires_grad(a) {
            let bv = self.value(b).data();
            let acc = self.slot(grads, a).data_mut();
            // dA = G * B^T
            for i in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &gd[i * m * n..],
                    (n, 1),
                    &bv[i * k * n..],
                    (1, n),
                    1.0,
                    &mut acc[i * m * k..(i + 1) * m * k],
                );
            }
        }
        if self.requires_grad(b) {
            let av = self.value(a).data();
            let acc = self.slot(grads, b).data_mut();
            // dB = A^T * G
            for i in 0..batch {
                gemm(
                    k,
                    m,
                    n,
                    &av[i * m * k..],
                    (1, k),
                    &gd[i * m * n..],
                    (n, 1),
                    1.0,
                    &mut acc[i * k * n..(i + 1) * k * n],
                );
            }
        }
    }
}

/// `tanh` through a single `exp` of a non-positive argument, which is
/// several times cheaper than the libm routine and never overflows.
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path connects it to the loss.
    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}
