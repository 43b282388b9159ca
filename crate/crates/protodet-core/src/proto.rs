//! Prototype pooling and graph-convolutional prototype transfer.
//!
//! Support cells are mask-pooled into preliminary prototypes `p⁰ (C×S)`,
//! then refined over the meta-graph by two graph convolutions
//! with a residual connection into `p (C×F)`. A linear meta-classifier
//! scores both `p` and a projection of `p⁰`; the second path is the skip
//! connection.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::episode::SupportEntry;
use crate::error::{Error, Result};
use crate::graph::{CategorySet, MetaGraph};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// One graph-convolution layer `σ(D⁻¹A · H · Θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weights: Tensor,
    pub relu: bool,
}

impl GcnLayer {
    pub fn new(weights: Tensor, relu: bool) -> Self {
        Self {
            weights: weights.with_grad(),
            relu,
        }
    }

    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, relu: bool, rng: &mut R) -> Self {
        Self::new(Tensor::glorot(fan_in, fan_out, rng), relu)
    }
}

/// Preliminary and (once transferred) refined prototypes for a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub preliminary: Tensor,
    pub refined: Option<Tensor>,
    /// Global category index of each row.
    pub categories: Vec<usize>,
}

impl PrototypeSet {
    pub fn refined(&self) -> Result<&Tensor> {
        self.refined.as_ref().ok_or(Error::Unrefined)
    }
}

/// Meta-learner parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoTransferNet {
    pub layer1: GcnLayer,
    pub layer2: GcnLayer,
    /// `S×F` residual projection; `None` means identity (requires `S == F`).
    pub residual: Option<Tensor>,
    /// Skip-path projection of `p⁰` into the classifier input space, `S×F`.
    pub projection: Tensor,
    /// Meta-classifier over all categories, `F×C_total`.
    pub classifier: Tensor,
}

/// Tape handles for a bound [`ProtoTransferNet`].
#[derive(Debug, Clone, Copy)]
pub struct NetVars {
    pub layer1: Var,
    pub layer2: Var,
    pub residual: Option<Var>,
    pub projection: Var,
    pub classifier: Var,
}

impl ProtoTransferNet {
    pub fn init<R: Rng + ?Sized>(s: usize, f: usize, categories: usize, rng: &mut R) -> Self {
        let layer1 = GcnLayer::init(s, f, true, rng);
        let layer2 = GcnLayer::init(f, f, true, rng);
        let residual = (s != f).then(|| Tensor::glorot(s, f, rng).with_grad());
        let projection = Tensor::glorot(s, f, rng).with_grad();
        let classifier = Tensor::glorot(f, categories, rng).with_grad();
        Self {
            layer1,
            layer2,
            residual,
            projection,
            classifier,
        }
    }

    pub fn s_dim(&self) -> usize {
        self.layer1.weights.rows()
    }

    pub fn f_dim(&self) -> usize {
        self.layer1.weights.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<NetVars> {
        Ok(NetVars {
            layer1: tape.leaf(&self.layer1.weights)?,
            layer2: tape.leaf(&self.layer2.weights)?,
            residual: self.residual.as_ref().map(|r| tape.leaf(r)).transpose()?,
            projection: tape.leaf(&self.projection)?,
            classifier: tape.leaf(&self.classifier)?,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![("gcn1", &self.layer1.weights), ("gcn2", &self.layer2.weights)];
        if let Some(r) = &self.residual {
            v.push(("residual", r));
        }
        v.push(("projection", &self.projection));
        v.push(("meta_classifier", &self.classifier));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = vec![("gcn1", &mut self.layer1.weights), ("gcn2", &mut self.layer2.weights)];
        if let Some(r) = &mut self.residual {
            v.push(("residual", r));
        }
        v.push(("projection", &mut self.projection));
        v.push(("meta_classifier", &mut self.classifier));
        v
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &NetVars) -> Result<()> {
        let pairs = [
            (&mut self.layer1.weights, Some(vars.layer1)),
            (&mut self.layer2.weights, Some(vars.layer2)),
            (&mut self.projection, Some(vars.projection)),
            (&mut self.classifier, Some(vars.classifier)),
        ];
        for (t, v) in pairs {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                t.accumulate_grad(g)?;
            }
        }
        if let (Some(t), Some(v)) = (&mut self.residual, vars.residual) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Non-differentiable forward producing preliminary and refined prototypes.
    pub fn prototypes(
        &self,
        entries: &[SupportEntry],
        cats: &CategorySet,
        phase: &[usize],
        graph: &MetaGraph,
    ) -> Result<PrototypeSet> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let p0 = pool_support(&mut tape, entries, cats, phase)?;
        let prop = tape.leaf(graph.propagation())?;
        let p = transfer(&mut tape, p0, prop, &vars)?;
        Ok(PrototypeSet {
            preliminary: tape.to_tensor(p0),
            refined: Some(tape.to_tensor(p)),
            categories: phase.to_vec(),
        })
    }
}

/// Mask-pools each support entry, then averages entries per category.
///
/// Row `i` of the result is the prototype of global category `phase[i]`.
pub fn pool_support(tape: &mut Tape, entries: &[SupportEntry], cats: &CategorySet, phase: &[usize]) -> Result<Var> {
    let first = entries.first().ok_or(Error::Empty { op: "pool_support" })?;
    let d = first.cells.cols();
    let mut cells = Vec::new();
    for e in entries {
        if e.cells.cols() != d || e.cells.rows() != e.mask.len() {
            return Err(Error::Shape {
                op: "pool_support",
                left: first.cells.shape().to_vec(),
                right: e.cells.shape().to_vec(),
            });
        }
        cells.extend_from_slice(e.cells.data());
    }
    let total = entries.iter().map(|e| e.mask.len()).sum();
    let c = phase.len();
    let mut counts = vec![0usize; c];
    for e in entries {
        if let Some(i) = phase.iter().position(|&p| p == e.category) {
            counts[i] += 1;
        }
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(Error::NoSupport(cats.name(phase[i]).into()));
    }
    let mut pool = vec![0.0; c * total];
    let mut offset = 0;
    for e in entries {
        if let Some(i) = phase.iter().position(|&p| p == e.category) {
            let on = e.mask.iter().filter(|&&m| m == 1).count();
            if on == 0 {
                return Err(Error::Empty { op: "support mask" });
            }
            let w = 1.0 / (on as f64 * counts[i] as f64);
            for (k, &m) in e.mask.iter().enumerate() {
                if m == 1 {
                    pool[i * total + offset + k] = w;
                }
            }
        }
        offset += e.mask.len();
    }
    let pool = tape.constant(vec![c, total], pool)?;
    let cells = tape.constant(vec![total, d], cells)?;
    tape.matmul(pool, cells)
}

/// `σ(propagation · H · Θ)`; `σ` is ReLU when `relu` is set, identity otherwise.
pub fn gcn_forward(tape: &mut Tape, h: Var, propagation: Var, theta: Var, relu: bool) -> Result<Var> {
    let mixed = tape.matmul(propagation, h)?;
    let out = tape.matmul(mixed, theta)?;
    if relu {
        tape.relu(out)
    } else {
        Ok(out)
    }
}

/// Two graph convolutions with the residual added before the final ReLU:
/// `p = ReLU(D⁻¹A · ReLU(D⁻¹A·p⁰·Θ₁) · Θ₂ + R(p⁰))`.
pub fn transfer(tape: &mut Tape, p0: Var, propagation: Var, vars: &NetVars) -> Result<Var> {
    let h1 = gcn_forward(tape, p0, propagation, vars.layer1, true)?;
    let pre = gcn_forward(tape, h1, propagation, vars.layer2, false)?;
    let skip = match vars.residual {
        Some(r) => tape.matmul(p0, r)?,
        None => p0,
    };
    let sum = tape.add(pre, skip)?;
    tape.relu(sum)
}

/// Constant `C_total × C_phase` matrix selecting the phase's classifier columns.
pub fn column_selector(tape: &mut Tape, total: usize, phase: &[usize]) -> Result<Var> {
    let c = phase.len();
    let mut sel = vec![0.0; total * c];
    for (j, &g) in phase.iter().enumerate() {
        if g >= total {
            return Err(Error::IndexOutOfRange {
                op: "column_selector",
                index: g,
                len: total,
            });
        }
        sel[g * c + j] = 1.0;
    }
    tape.constant(vec![total, c], sel)
}

/// Meta-classifier logits from the refined prototypes and from the
/// projected preliminary prototypes, sharing one classifier.
pub fn meta_logits(tape: &mut Tape, p0: Var, p: Var, vars: &NetVars, selector: Option<Var>) -> Result<(Var, Var)> {
    let w = match selector {
        Some(s) => tape.matmul(vars.classifier, s)?,
        None => vars.classifier,
    };
    let refined = tape.matmul(p, w)?;
    let projected = tape.matmul(p0, vars.projection)?;
    let preliminary = tape.matmul(projected, w)?;
    Ok((refined, preliminary))
}

/// Mean over prototype rows of the cross-entropy against the row's own
/// category, averaging the refined and (when given) preliminary heads.
pub fn meta_loss(tape: &mut Tape, refined: Var, preliminary: Option<Var>) -> Result<Var> {
    let rows = tape.shape(refined)[0];
    let labels: Vec<usize> = (0..rows).collect();
    let r = tape.softmax_cross_entropy_rows(refined, &labels)?;
    match preliminary {
        Some(p) => {
            let q = tape.softmax_cross_entropy_rows(p, &labels)?;
            let s = tape.add(r, q)?;
            tape.scale(s, 0.5)
        }
        None => Ok(r),
    }
}
