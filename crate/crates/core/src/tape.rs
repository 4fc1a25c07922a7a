//! Define-by-run reverse-mode differentiation over a closed op set.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Ops append
//! nodes; [`Tape::backward`] walks the record strictly in reverse creation
//! order, which is a valid topological order because an op can only consume
//! already-existing nodes. The tape is rebuilt for every training step and
//! confined to one worker.
//!
//! Every op output is checked for NaN/Inf on creation and every gradient on
//! production; a non-finite value is a hard error, never a silent poison.

use std::rc::Rc;

use crate::error::{CueError, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Escape hatch for ops whose backward is cheaper to derive by hand than to
/// compose from primitives (the virtual normal loss lives here).
pub trait CustomOp<E: Scalar>: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>>;
    /// Returns one gradient per input, each with that input's shape.
    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
    ) -> Result<Vec<Tensor<E>>>;
}

#[derive(Debug)]
enum Op<E: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    RowSoftmax { x: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample { x: Var, factor: usize },
    ConcatLast { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Relu { x: Var },
    Log { x: Var },
    Sqrt { x: Var },
    Square { x: Var },
    Recip { x: Var },
    ScaleConst { x: Var, c: f64 },
    ScaleVar { x: Var, s: Var },
    Gather { x: Var, idx: Rc<Vec<usize>> },
    Mean { x: Var },
    Reshape { x: Var, from: Vec<usize> },
    Custom { inputs: Vec<Var>, f: Rc<dyn CustomOp<E>> },
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// All gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<E: Scalar> {
    slots: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Grads<E> {
    /// Gradient of the loss w.r.t. `v`; `None` when no path reaches it or it
    /// was created with `requires_grad = false`.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
    // Test hook: multiplies the output gradient of one node during backward,
    // simulating a corrupted op derivative for negative-control tests.
    grad_fault: Option<(usize, f64)>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn set_grad_fault(&mut self, v: Var, factor: f64) {
        self.grad_fault = Some((v.0, factor));
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable graph input (a parameter).
    pub fn leaf(&mut self, t: Tensor<E>) -> Result<Var> {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Non-differentiable graph input (data, targets, fixed coefficients).
    pub fn constant(&mut self, t: Tensor<E>) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Matmul { a, b }, rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = kernels::transpose2d(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Transpose { x }, rg, "transpose")
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let v = kernels::row_softmax(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push(v, Op::RowSoftmax { x }, rg, "row_softmax")
    }

    /// Softmax along the channel axis of an `[h,w,c]` tensor, built from
    /// reshape + row softmax (the channel axis is contiguous).
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(CueError::Shape(format!(
                "channel_softmax expects [h,w,c], got {shape:?}"
            )));
        }
        let flat = self.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let s = self.row_softmax(flat)?;
        self.reshape(s, &shape)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(&[x, w, b]);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, rg, "conv2d")
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = kernels::upsample_bilinear(self.value(x), factor)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Upsample { x, factor }, rg, "upsample")
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(CueError::Shape(format!(
                "concat_last on incompatible shapes {sa:?} vs {sb:?}"
            )));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = ta.len() / ca.max(1);
        let mut out = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..rows {
            out.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let v = Tensor::from_vec(&shape, out)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::ConcatLast { a, b }, rg, "concat_last")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub { a, b }, rg, "sub")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v.maxs(E::ZERO));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu { x }, rg, "relu")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v.ln());
        let rg = self.rg(&[x]);
        self.push(v, Op::Log { x }, rg, "log")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v.sqrt());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sqrt { x }, rg, "sqrt")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(v, Op::Square { x }, rg, "square")
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| E::ONE / v);
        let rg = self.rg(&[x]);
        self.push(v, Op::Recip { x }, rg, "recip")
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let ce = E::from_f64(c);
        let v = self.value(x).map(|v| v * ce);
        let rg = self.rg(&[x]);
        self.push(v, Op::ScaleConst { x, c }, rg, "scale_const")
    }

    /// Elementwise product with a learnable `[1]` scalar (the residual gate).
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let v = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        self.push(v, Op::ScaleVar { x, s }, rg, "scale_var")
    }

    /// Row selection on a matrix; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(CueError::Shape(format!(
                "gather_rows expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if idx.is_empty() {
            return Err(CueError::Config("gather_rows with empty index set".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(CueError::Shape(format!("gather index {i} out of {n} rows")));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::from_vec(&[idx.len(), c], out)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Gather { x, idx }, rg, "gather_rows")
    }

    /// Mean over all entries, yielding a `[1]` scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(CueError::Shape("mean of empty tensor".into()));
        }
        // f64 accumulation keeps the reduction exact enough for f32 graphs.
        let sum: f64 = t.data().iter().map(|v| v.to_f64()).sum();
        let v = Tensor::scalar(E::from_f64(sum / t.len() as f64));
        let rg = self.rg(&[x]);
        self.push(v, Op::Mean { x }, rg, "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(x).shape().to_vec();
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape { x, from }, rg, "reshape")
    }

    pub fn custom(&mut self, inputs: &[Var], f: Rc<dyn CustomOp<E>>) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = inputs.iter().map(|v| self.value(*v)).collect();
        let v = f.forward(&tensors)?;
        let rg = self.rg(inputs);
        let name = f.name();
        self.push(
            v,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            rg,
            name,
        )
    }

    /// Reverse pass from a `[1]` scalar loss. Returns a gradient per node
    /// that both requires grad and is reachable from the loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<E>> {
        if self.value(loss).len() != 1 {
            return Err(CueError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(E::ONE));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                slots[id] = None;
                continue;
            }
            let Some(mut g) = slots[id].clone() else {
                continue;
            };
            if let Some((fault_id, factor)) = self.grad_fault {
                if fault_id == id {
                    let f = E::from_f64(factor);
                    g = g.map(|v| v * f);
                }
            }
            if g.shape() != node.value.shape() {
                return Err(CueError::Shape(format!(
                    "gradient shape {:?} != value shape {:?} at node {id}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            self.propagate(id, &g, &mut slots)?;
        }
        Ok(Grads { slots })
    }

    fn propagate(&self, id: usize, g: &Tensor<E>, slots: &mut [Option<Tensor<E>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.requires_grad(*a) {
                    let bt = kernels::transpose2d(self.value(*b))?;
                    self.acc(slots, *a, kernels::matmul(g, &bt)?, "matmul dA")?;
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose2d(self.value(*a))?;
                    self.acc(slots, *b, kernels::matmul(&at, g)?, "matmul dB")?;
                }
            }
            Op::Transpose { x } => {
                self.acc(slots, *x, kernels::transpose2d(g)?, "transpose grad")?;
            }
            Op::RowSoftmax { x } => {
                let dx = kernels::row_softmax_backward(&node.value, g)?;
                self.acc(slots, *x, dx, "softmax grad")?;
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, g)?;
                if self.requires_grad(*x) {
                    self.acc(slots, *x, dx, "conv dX")?;
                }
                if self.requires_grad(*w) {
                    self.acc(slots, *w, dw, "conv dW")?;
                }
                if self.requires_grad(*b) {
                    self.acc(slots, *b, db, "conv dB")?;
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.value(*x).shape();
                let dx = kernels::upsample_bilinear_backward(g, s[0], s[1], *factor)?;
                self.acc(slots, *x, dx, "upsample grad")?;
            }
            Op::ConcatLast { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
                let rows = self.value(*a).len() / ca.max(1);
                let gd = g.data();
                if self.requires_grad(*a) {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        da.extend_from_slice(&gd[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.acc(slots, *a, Tensor::from_vec(sa, da)?, "concat dA")?;
                }
                if self.requires_grad(*b) {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        db.extend_from_slice(&gd[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.acc(slots, *b, Tensor::from_vec(sb, db)?, "concat dB")?;
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    self.acc(slots, *a, g.clone(), "add dA")?;
                }
                if self.requires_grad(*b) {
                    self.acc(slots, *b, g.clone(), "add dB")?;
                }
            }
            Op::Sub { a, b } => {
                if self.requires_grad(*a) {
                    self.acc(slots, *a, g.clone(), "sub dA")?;
                }
                if self.requires_grad(*b) {
                    self.acc(slots, *b, g.map(|v| -v), "sub dB")?;
                }
            }
            Op::Relu { x } => {
                let dx = self.value(*x).zip_map(g, |xv, gv| {
                    if xv > E::ZERO {
                        gv
                    } else {
                        E::ZERO
                    }
                })?;
                self.acc(slots, *x, dx, "relu grad")?;
            }
            Op::Log { x } => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gv / xv)?;
                self.acc(slots, *x, dx, "log grad")?;
            }
            Op::Sqrt { x } => {
                // d sqrt(x) = g / (2 sqrt(x)); the denominator is clamped so
                // a loss that is exactly zero stays differentiable-by-fiat
                // instead of producing Inf.
                let floor = E::from_f64(1e-12);
                let dx = node
                    .value
                    .zip_map(g, |y, gv| gv / ((y + y).maxs(floor)))?;
                self.acc(slots, *x, dx, "sqrt grad")?;
            }
            Op::Square { x } => {
                let two = E::from_f64(2.0);
                let dx = self.value(*x).zip_map(g, |xv, gv| two * xv * gv)?;
                self.acc(slots, *x, dx, "square grad")?;
            }
            Op::Recip { x } => {
                let dx = node.value.zip_map(g, |y, gv| -gv * y * y)?;
                self.acc(slots, *x, dx, "recip grad")?;
            }
            Op::ScaleConst { x, c } => {
                let ce = E::from_f64(*c);
                self.acc(slots, *x, g.map(|v| v * ce), "scale_const grad")?;
            }
            Op::ScaleVar { x, s } => {
                if self.requires_grad(*x) {
                    let sv = self.value(*s).item()?;
                    self.acc(slots, *x, g.map(|v| v * sv), "scale_var dX")?;
                }
                if self.requires_grad(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| gv.to_f64() * xv.to_f64())
                        .sum();
                    self.acc(
                        slots,
                        *s,
                        Tensor::scalar(E::from_f64(dot)),
                        "scale_var dS",
                    )?;
                }
            }
            Op::Gather { x, idx } => {
                let t = self.value(*x);
                let c = t.shape()[1];
                let mut dx = Tensor::zeros(t.shape());
                let dd = dx.data_mut();
                let gd = g.data();
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        dd[i * c + k] += gd[r * c + k];
                    }
                }
                self.acc(slots, *x, dx, "gather grad")?;
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let gv = g.item()? * E::from_f64(1.0 / n as f64);
                self.acc(
                    slots,
                    *x,
                    Tensor::full(self.value(*x).shape(), gv),
                    "mean grad",
                )?;
            }
            Op::Reshape { x, from } => {
                self.acc(slots, *x, g.clone().reshape(from)?, "reshape grad")?;
            }
            Op::Custom { inputs, f } => {
                let tensors: Vec<&Tensor<E>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = f.backward(&tensors, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(CueError::Shape(format!(
                        "{} returned {} gradients for {} inputs",
                        f.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, dg) in inputs.iter().zip(grads) {
                    if self.requires_grad(*v) {
                        self.acc(slots, *v, dg, f.name())?;
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(
        &self,
        slots: &mut [Option<Tensor<E>>],
        v: Var,
        g: Tensor<E>,
        context: &str,
    ) -> Result<()> {
        if !self.requires_grad(v) {
            return Ok(());
        }
        g.check_finite(context)?;
        if g.shape() != self.value(v).shape() {
            return Err(CueError::Shape(format!(
                "{context}: gradient shape {:?} != value shape {:?}",
                g.shape(),
                self.value(v).shape()
            )));
        }
        match &mut slots[v.0] {
            None => slots[v.0] = Some(g),
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences against the tape for a graph that maps one
    /// leaf to a scalar. The `build` closure must be deterministic.
    fn fd_check(
        x0: &Tensor<f64>,
        build: &dyn Fn(&mut Tape<f64>, Var) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone()).unwrap();
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).expect("leaf must receive a gradient");

        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += h;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor<f64>| -> f64 {
                let mut tape = Tape::new();
                let x = tape.leaf(t).unwrap();
                let loss = build(&mut tape, x);
                tape.value(loss).item().unwrap()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < tol, "index {i}: analytic {a} vs fd {fd} (rel {rel})");
        }
    }

    /// Scalarizes `y` as mean((y - r)^2) with a fixed random target, so the
    /// check is sensitive to every output coordinate (plain mean would make
    /// softmax gradients vanish).
    fn reduce(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let shape = tape.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = tape
            .constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        let d = tape.sub(y, r).unwrap();
        let sq = tape.square(d).unwrap();
        tape.mean(sq).unwrap()
    }

    #[test]
    fn every_op_matches_finite_differences() {
        // 100 randomized trials cycling through the differentiable op set on
        // small shapes; each case reduces to a scalar via a fixed random
        // quadratic so no output coordinate is ignored.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100u64 {
            let op = trial % 14;
            match op {
                0 => {
                    let b0 = random(&[4, 3], &mut rng);
                    let x0 = random(&[2, 4], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let b = t.constant(b0.clone()).unwrap();
                        let y = t.matmul(x, b).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                1 => {
                    let x0 = random(&[3, 4], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let y = t.transpose(x).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                2 => {
                    let x0 = random(&[3, 5], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let y = t.row_softmax(x).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                3 => {
                    let x0 = random(&[4, 5, 2], &mut rng);
                    let w0 = random(&[3, 3, 2, 3], &mut rng);
                    let b0 = random(&[3], &mut rng);
                    // Input gradient.
                    fd_check(&x0, &|t, x| {
                        let w = t.constant(w0.clone()).unwrap();
                        let b = t.constant(b0.clone()).unwrap();
                        let y = t.conv2d(x, w, b, 1, 1).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                    // Kernel and bias gradients.
                    let xc = x0.clone();
                    fd_check(&w0, &|t, w| {
                        let x = t.constant(xc.clone()).unwrap();
                        let b = t.constant(b0.clone()).unwrap();
                        let y = t.conv2d(x, w, b, 2, 1).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                    fd_check(&b0, &|t, b| {
                        let x = t.constant(x0.clone()).unwrap();
                        let w = t.constant(w0.clone()).unwrap();
                        let y = t.conv2d(x, w, b, 1, 1).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                4 => {
                    let x0 = random(&[2, 3, 2], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let y = t.upsample(x, 2).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                5 => {
                    let x0 = random(&[3, 2], &mut rng);
                    let b0 = random(&[3, 3], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let b = t.constant(b0.clone()).unwrap();
                        let y = t.concat_last(x, b).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                6 => {
                    let x0 = random(&[2, 3], &mut rng);
                    let b0 = random(&[2, 3], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let b = t.constant(b0.clone()).unwrap();
                        let s = t.add(x, b).unwrap();
                        let d = t.sub(s, x).unwrap();
                        let d2 = t.sub(x, d).unwrap();
                        reduce(t, d2, trial)
                    }, 1e-5);
                }
                7 => {
                    // Keep inputs away from the ReLU kink so central
                    // differences are valid.
                    let x0 = Tensor::from_fn(&[3, 3], |_| {
                        let v: f64 = rng.gen_range(0.1..1.0);
                        if rng.gen_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    });
                    fd_check(&x0, &|t, x| {
                        let y = t.relu(x).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                8 => {
                    let x0 = Tensor::from_fn(&[2, 3], |_| rng.gen_range(0.2..2.0));
                    fd_check(&x0, &|t, x| {
                        let y = t.log(x).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                9 => {
                    let x0 = Tensor::from_fn(&[2, 3], |_| rng.gen_range(0.2..2.0));
                    fd_check(&x0, &|t, x| {
                        let y = t.sqrt(x).unwrap();
                        let z = t.recip(y).unwrap();
                        reduce(t, z, trial)
                    }, 1e-5);
                }
                10 => {
                    let x0 = random(&[2, 2], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let y = t.square(x).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                11 => {
                    let x0 = random(&[4, 2], &mut rng);
                    let idx = Rc::new(vec![0usize, 2, 2, 3]);
                    fd_check(&x0, &|t, x| {
                        let y = t.gather_rows(x, idx.clone()).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                12 => {
                    let x0 = random(&[3, 3], &mut rng);
                    let s0 = random(&[1], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let s = t.constant(s0.clone()).unwrap();
                        let y = t.scale_var(x, s).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                    let xc = random(&[3, 3], &mut rng);
                    fd_check(&s0, &|t, s| {
                        let x = t.constant(xc.clone()).unwrap();
                        let y = t.scale_var(x, s).unwrap();
                        reduce(t, y, trial)
                    }, 1e-5);
                }
                _ => {
                    let x0 = random(&[2, 6], &mut rng);
                    fd_check(&x0, &|t, x| {
                        let y = t.reshape(x, &[3, 4]).unwrap();
                        let z = t.scale_const(y, 2.5).unwrap();
                        let m = t.mean(z).unwrap();
                        let sq = t.square(m).unwrap();
                        t.sqrt(sq).unwrap()
                    }, 1e-4);
                }
            }
        }
    }

    #[test]
    fn channel_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random(&[2, 3, 4], &mut rng);
        fd_check(&x0, &|t, x| {
            let y = t.channel_softmax(x).unwrap();
            reduce(t, y, 77)
        }, 1e-6);
    }

    #[test]
    fn gradient_mass_is_conserved_through_add_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a0 = random(&[3, 2], &mut rng);
        let b0 = random(&[3, 2], &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(a0).unwrap();
        let b = tape.leaf(b0).unwrap();
        let s = tape.add(a, b).unwrap();
        let cat = tape.concat_last(s, a).unwrap();
        let m = tape.mean(cat).unwrap();
        let grads = tape.backward(m).unwrap();
        // d mean / d entry = 1/12 for each of the 12 concat entries; the sum
        // of input gradients must carry exactly that mass: `a` feeds both
        // halves (6 + 6 paths), `b` one half.
        let ga: f64 = grads.get(a).unwrap().data().iter().sum();
        let gb: f64 = grads.get(b).unwrap().data().iter().sum();
        assert!((ga - 12.0 / 12.0).abs() < 1e-12);
        assert!((gb - 6.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient_and_skip_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64)).unwrap();
        let c = tape.constant(Tensor::scalar(3.0f64)).unwrap();
        let y = tape.scale_var(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert!((grads.get(x).unwrap().data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_is_a_checked_failure() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
        // 1/0 -> Inf must error rather than propagate.
        assert!(tape.recip(x).is_err());
        let y = tape.leaf(Tensor::scalar(-1.0)).unwrap();
        assert!(tape.log(y).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut tape = Tape::new();
            let x = tape.leaf(random(&[4, 4], &mut rng)).unwrap();
            let w = tape.leaf(random(&[4, 4], &mut rng)).unwrap();
            let y = tape.matmul(x, w).unwrap();
            let s = tape.row_softmax(y).unwrap();
            let m = reduce(&mut tape, s, 1);
            let grads = tape.backward(m).unwrap();
            (
                tape.value(m).item().unwrap().to_bits(),
                grads
                    .get(w)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
