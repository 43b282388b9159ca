//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! it read. [`Tape::backward`] walks the nodes once in reverse recording
//! order. A tape is single-use: after a backward pass it refuses further
//! recording or replay until [`Tape::reset`] is called.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    AddBias(Var, Var),
    MeanRows(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    Reweight(Var, Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every recorded value that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Outputs narrower than this go through a transposed kernel with long
/// contiguous inner loops.
const NARROW: usize = 8;

fn transpose(b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = b[i * cols + j];
        }
    }
    t
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut xs = x.chunks_exact(4);
    let mut ys = y.chunks_exact(4);
    for (a, b) in (&mut xs).zip(&mut ys) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = xs.remainder().iter().zip(ys.remainder()).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n < NARROW {
        let bt = transpose(b, k, n);
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bt[j * k..(j + 1) * k]);
            }
        }
        return out;
    }
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(o, av, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `g (m×n) · bᵀ` where `b` is `k×n`.
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if n < NARROW {
        let bt = transpose(b, k, n);
        for i in 0..m {
            let o = &mut out[i * k..(i + 1) * k];
            for j in 0..n {
                axpy(o, g[i * n + j], &bt[j * k..(j + 1) * k]);
            }
        }
        return out;
    }
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(gr, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if n < NARROW {
        let mut t = vec![0.0; n * k];
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                axpy(&mut t[j * k..(j + 1) * k], g[i * n + j], ar);
            }
        }
        return transpose(&t, n, k);
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(&mut out[p * n..(p + 1) * n], av, gr);
        }
    }
    out
}

fn smooth_l1_term(d: f64) -> (f64, f64) {
    let a = math::abs(d);
    if a < 1.0 {
        (0.5 * d * d, d)
    } else {
        (a - 0.5, if d > 0.0 { 1.0 } else { -1.0 })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all nodes so the tape can record a fresh computation.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = &self.nodes[v.0].shape;
        dims2(shape).ok_or_else(|| Error::Shape {
            op,
            left: shape.clone(),
            right: vec![],
        })
    }

    /// Records a tensor as a leaf; it participates in differentiation iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.leaf(&t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        check_finite("matmul", &out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        check_finite("add", &out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    /// Hadamard product of equal-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        check_finite("elementwise_mul", &out)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        check_finite("scale", &out)?;
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let ng = self.needs(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), ng)
    }

    /// Adds a length-`k` bias to every row of an `n×k` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.mat("add_bias", x)?;
        if self.nodes[bias.0].value.len() != k {
            return Err(Error::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..n {
            for (o, bv) in out[r * k..(r + 1) * k].iter_mut().zip(b) {
                *o += bv;
            }
        }
        check_finite("add_bias", &out)?;
        let ng = self.needs(x) || self.needs(bias);
        self.push(vec![n, k], out, Op::AddBias(x, bias), ng)
    }

    /// Column-wise mean of an `n×d` matrix, giving a length-`d` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.mat("mean_rows", x)?;
        if n == 0 {
            return Err(Error::Empty { op: "mean_rows" });
        }
        let v = self.value(x);
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(&v[r * d..(r + 1) * d]) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let ng = self.needs(x);
        self.push(vec![d], out, Op::MeanRows(x), ng)
    }

    /// Mean of all entries, as a one-element value.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Empty { op: "mean" });
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(vec![1], vec![m], Op::Mean(x), ng)
    }

    /// Sum of all entries, as a one-element value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let m = self.mean(x)?;
        self.scale(m, n as f64)
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.mat("gather_rows", x)?;
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let ng = self.needs(x);
        self.push(vec![idx.len(), d], out, Op::GatherRows(x, idx.to_vec()), ng)
    }

    /// Pairwise reweighting: row `n·C + c` of the `(N·C)×F` output is `r[n] ⊙ p[c]`.
    pub fn reweight(&mut self, r: Var, p: Var) -> Result<Var> {
        let (n, f) = self.mat("reweight", r)?;
        let (c, f2) = self.mat("reweight", p)?;
        if f != f2 {
            return Err(Error::Shape {
                op: "reweight",
                left: self.shape(r).to_vec(),
                right: self.shape(p).to_vec(),
            });
        }
        let rv = self.value(r);
        let pv = self.value(p);
        let mut out = Vec::with_capacity(n * c * f);
        for i in 0..n {
            let rr = &rv[i * f..(i + 1) * f];
            for j in 0..c {
                let pr = &pv[j * f..(j + 1) * f];
                out.extend(rr.iter().zip(pr).map(|(a, b)| a * b));
            }
        }
        check_finite("reweight", &out)?;
        let ng = self.needs(r) || self.needs(p);
        self.push(vec![n * c, f], out, Op::Reweight(r, p), ng)
    }

    /// `−log softmax(logits)[target]` for a length-`C` logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let c = self.value(logits).len();
        if self.shape(logits).len() != 1 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![c],
            });
        }
        self.ce_impl(logits, 1, c, &[target])
    }

    /// Mean over rows of `−log softmax(row)[target_row]` for an `n×C` logit matrix.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.mat("softmax_cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: vec![n, c],
                right: vec![targets.len()],
            });
        }
        self.ce_impl(logits, n, c, targets)
    }

    fn ce_impl(&mut self, logits: Var, n: usize, c: usize, targets: &[usize]) -> Result<Var> {
        if n == 0 || c == 0 {
            return Err(Error::Empty {
                op: "softmax_cross_entropy",
            });
        }
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    len: c,
                });
            }
            let row = &v[r * c..(r + 1) * c];
            let (lse, start) = (math::log_sum_exp(row), probs.len());
            probs.extend(row.iter().map(|x| math::exp(x - lse)));
            debug_assert_eq!(probs.len() - start, c);
            loss += lse - row[t];
        }
        let loss = loss / n as f64;
        check_finite("softmax_cross_entropy", &[loss])?;
        let ng = self.needs(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Smooth-L1 with transition at 1: the per-row sum over coordinates,
    /// averaged over rows. A single 4-vector yields the plain coordinate sum.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("smooth_l1", pred, target)?;
        let rows = match self.shape(pred) {
            [r, _] => *r,
            _ => 1,
        };
        if rows == 0 {
            return Err(Error::Empty { op: "smooth_l1" });
        }
        let total: f64 = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| smooth_l1_term(p - t).0)
            .sum();
        let out = total / rows as f64;
        check_finite("smooth_l1", &[out])?;
        let ng = self.needs(pred) || self.needs(target);
        self.push(vec![1], vec![out], Op::SmoothL1 { pred, target }, ng)
    }

    /// Back-propagates from a one-element `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a)).unwrap();
                let n = node.shape[1];
                if self.needs(*a) {
                    let ga = matmul_a_bt(g, self.value(*b), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = matmul_at_b(self.value(*a), g, m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::AddBias(x, b) => {
                let k = node.shape[1];
                if self.needs(*b) {
                    let mut gb = vec![0.0; k];
                    for row in g.chunks(k) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::MeanRows(x) => {
                let (n, _) = dims2(self.shape(*x)).unwrap();
                let inv = 1.0 / n as f64;
                let mut gx = Vec::with_capacity(n * g.len());
                for _ in 0..n {
                    gx.extend(g.iter().map(|v| v * inv));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::GatherRows(x, idx) => {
                let (n, d) = dims2(self.shape(*x)).unwrap();
                let mut gx = vec![0.0; n * d];
                for (row, &i) in g.chunks(d).zip(idx) {
                    gx[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reweight(r, p) => {
                let (n, f) = dims2(self.shape(*r)).unwrap();
                let c = self.shape(*p)[0];
                let rv = self.value(*r);
                let pv = self.value(*p);
                if self.needs(*r) {
                    let mut gr = vec![0.0; n * f];
                    for i in 0..n {
                        let out = &mut gr[i * f..(i + 1) * f];
                        for j in 0..c {
                            let go = &g[(i * c + j) * f..(i * c + j + 1) * f];
                            let pr = &pv[j * f..(j + 1) * f];
                            for t in 0..f {
                                out[t] += go[t] * pr[t];
                            }
                        }
                    }
                    self.accumulate(grads, *r, gr);
                }
                if self.needs(*p) {
                    let mut gp = vec![0.0; c * f];
                    for i in 0..n {
                        let rr = &rv[i * f..(i + 1) * f];
                        for j in 0..c {
                            let go = &g[(i * c + j) * f..(i * c + j + 1) * f];
                            let out = &mut gp[j * f..(j + 1) * f];
                            for t in 0..f {
                                out[t] += go[t] * rr[t];
                            }
                        }
                    }
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= scale;
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::SmoothL1 { pred, target } => {
                let rows = match self.shape(*pred) {
                    [r, _] => *r,
                    _ => 1,
                };
                let scale = g[0] / rows as f64;
                let gp: Vec<f64> = self
                    .value(*pred)
                    .iter()
                    .zip(self.value(*target))
                    .map(|(p, t)| smooth_l1_term(p - t).1 * scale)
                    .collect();
                if self.needs(*target) {
                    self.accumulate(grads, *target, gp.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *pred, gp);
            }
        }
    }
}
