//! Prototype-reweighted predictor heads.
//!
//! Every RoI feature is multiplied elementwise by each category prototype;
//! each reweighted copy goes through a shared two-way (match / background)
//! classifier and a four-delta box regressor. The RoI is assigned to the
//! best-matching category unless that score falls under the objectness
//! threshold.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::bbox::{apply_deltas, BBox};
use crate::error::{Error, Result};
use crate::math;
use crate::proto::PrototypeSet;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ground-truth assignment of a proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Assignment {
    /// Global category index.
    pub category: usize,
    /// Regression target from the proposal to its ground-truth box.
    pub target: Option<[f64; 4]>,
}

/// A region proposal with its pooled feature.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoIFeature {
    pub vector: Vec<f64>,
    pub proposal: BBox,
    /// `None` for background proposals.
    pub assignment: Option<Assignment>,
}

/// Training target of one RoI, expressed against the current phase's branches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoiTarget {
    Background,
    Foreground { branch: usize, deltas: Option<[f64; 4]> },
}

/// Final detection for one RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub confidence: f64,
}

/// Shared classifier and regressor applied to every reweighted feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorHead {
    /// `F×2`; column 0 scores "match", column 1 "background".
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
    /// `F×4`.
    pub box_weight: Tensor,
    pub box_bias: Tensor,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub cls_weight: Var,
    pub cls_bias: Var,
    pub box_weight: Var,
    pub box_bias: Var,
}

impl PredictorHead {
    pub fn init<R: Rng + ?Sized>(f: usize, threshold: f64, rng: &mut R) -> Self {
        Self {
            cls_weight: Tensor::glorot(f, 2, rng).with_grad(),
            cls_bias: Tensor::zeros(vec![2]).with_grad(),
            box_weight: Tensor::glorot(f, 4, rng).with_grad(),
            box_bias: Tensor::zeros(vec![4]).with_grad(),
            threshold,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.cls_weight.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<HeadVars> {
        Ok(HeadVars {
            cls_weight: tape.leaf(&self.cls_weight)?,
            cls_bias: tape.leaf(&self.cls_bias)?,
            box_weight: tape.leaf(&self.box_weight)?,
            box_bias: tape.leaf(&self.box_bias)?,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("cls_weight", &self.cls_weight),
            ("cls_bias", &self.cls_bias),
            ("box_weight", &self.box_weight),
            ("box_bias", &self.box_bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("cls_weight", &mut self.cls_weight),
            ("cls_bias", &mut self.cls_bias),
            ("box_weight", &mut self.box_weight),
            ("box_bias", &mut self.box_bias),
        ]
    }

    pub fn accumulate(&mut self, grads: &Gradients, vars: &HeadVars) -> Result<()> {
        for (t, v) in [
            (&mut self.cls_weight, vars.cls_weight),
            (&mut self.cls_bias, vars.cls_bias),
            (&mut self.box_weight, vars.box_weight),
            (&mut self.box_bias, vars.box_bias),
        ] {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// `Rᵢ = R ⊗ pᵢ` for every refined prototype row.
pub fn reweight(roi: &RoIFeature, protos: &PrototypeSet) -> Result<Vec<Vec<f64>>> {
    let p = protos.refined()?;
    if p.cols() != roi.vector.len() {
        return Err(Error::Shape {
            op: "reweight",
            left: vec![roi.vector.len()],
            right: p.shape().to_vec(),
        });
    }
    Ok((0..p.rows())
        .map(|i| roi.vector.iter().zip(p.row(i)).map(|(a, b)| a * b).collect())
        .collect())
}

/// Records the batched head: `(N·C)×2` class logits and `(N·C)×4` deltas,
/// row `n·C + c` belonging to RoI `n` reweighted by prototype `c`.
pub fn head_forward(tape: &mut Tape, rois: Var, protos: Var, vars: &HeadVars) -> Result<(Var, Var)> {
    let rw = tape.reweight(rois, protos)?;
    let l = tape.matmul(rw, vars.cls_weight)?;
    let logits = tape.add_bias(l, vars.cls_bias)?;
    let d = tape.matmul(rw, vars.box_weight)?;
    let deltas = tape.add_bias(d, vars.box_bias)?;
    Ok((logits, deltas))
}

/// Softmax probability of the "match" class from a `[match, background]` pair.
pub fn match_probability(match_logit: f64, background_logit: f64) -> f64 {
    let z = background_logit - match_logit;
    if z >= 0.0 {
        let e = math::exp(-z);
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + math::exp(z))
    }
}

/// Per-category match scores and deltas for a batch of RoIs.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `N×C` match probabilities.
    pub scores: Vec<Vec<f64>>,
    /// `N×C` regression deltas.
    pub deltas: Vec<Vec<[f64; 4]>>,
}

pub fn predict_batch(rois: &[RoIFeature], protos: &PrototypeSet, head: &PredictorHead) -> Result<Predictions> {
    let p = protos.refined()?;
    let (n, c, f) = (rois.len(), p.rows(), p.cols());
    if n == 0 {
        return Ok(Predictions {
            scores: vec![],
            deltas: vec![],
        });
    }
    let mut data = Vec::with_capacity(n * f);
    for r in rois {
        if r.vector.len() != f {
            return Err(Error::Shape {
                op: "predict",
                left: vec![r.vector.len()],
                right: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(&r.vector);
    }
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape)?;
    let rv = tape.constant(vec![n, f], data)?;
    let pv = tape.leaf(p)?;
    let (logits, deltas) = head_forward(&mut tape, rv, pv, &vars)?;
    let (lv, dv) = (tape.value(logits), tape.value(deltas));
    let mut scores = Vec::with_capacity(n);
    let mut out_deltas = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = Vec::with_capacity(c);
        let mut d = Vec::with_capacity(c);
        for j in 0..c {
            let row = i * c + j;
            s.push(match_probability(lv[2 * row], lv[2 * row + 1]));
            d.push([dv[4 * row], dv[4 * row + 1], dv[4 * row + 2], dv[4 * row + 3]]);
        }
        scores.push(s);
        out_deltas.push(d);
    }
    Ok(Predictions {
        scores,
        deltas: out_deltas,
    })
}

/// Match score and deltas of every reweighted branch of one RoI.
pub fn predict(roi: &RoIFeature, protos: &PrototypeSet, head: &PredictorHead) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
    let mut p = predict_batch(core::slice::from_ref(roi), protos, head)?;
    Ok((p.scores.pop().unwrap(), p.deltas.pop().unwrap()))
}

/// Index of the highest score; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Background if the best branch scores below `threshold`, otherwise a
/// detection of that branch with its regressed box. `category` is the
/// branch index.
pub fn decide(scores: &[f64], deltas: &[[f64; 4]], roi: &RoIFeature, threshold: f64) -> Option<Detection> {
    let best = argmax(scores)?;
    if scores[best] < threshold {
        return None;
    }
    Some(Detection {
        bbox: apply_deltas(&roi.proposal, &deltas[best]),
        category: best,
        confidence: scores[best],
    })
}

/// Greedy per-category non-maximum suppression; survivors keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut keep = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].category == dets[i].category && dets[k].bbox.iou(&dets[i].bbox) > iou_threshold);
        if !suppressed {
            keep[i] = true;
            kept.push(i);
        }
    }
    dets.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| *d).collect()
}

/// Scalar handles of the three loss components and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub boxes: Option<Var>,
    pub meta: Var,
    pub total: Var,
}

/// Plain values of a [`LossTerms`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossValues {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_meta: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            l_cls: tape.scalar(self.cls),
            l_box: self.boxes.map_or(0.0, |b| tape.scalar(b)),
            l_meta: tape.scalar(self.meta),
            total: tape.scalar(self.total),
        }
    }
}

/// `L = L_cls + L_box + L_meta`.
///
/// `L_cls` is the mean two-way cross-entropy of one branch per RoI: the
/// ground-truth category's branch (target "match") for foreground RoIs, the
/// currently highest-scoring branch (target "background") otherwise.
/// `L_box` is the mean smooth-L1 over foreground RoIs of their ground-truth
/// branch's deltas, and is absent (zero) when there is no foreground.
pub fn detection_loss(
    tape: &mut Tape,
    logits: Var,
    deltas: Var,
    targets: &[RoiTarget],
    categories: usize,
    meta: Var,
) -> Result<LossTerms> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::Empty { op: "detection_loss" });
    }
    if tape.shape(logits) != [n * categories, 2] {
        return Err(Error::Shape {
            op: "detection_loss",
            left: tape.shape(logits).to_vec(),
            right: vec![n * categories, 2],
        });
    }
    let lv = tape.value(logits).to_vec();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut fg_rows = Vec::new();
    let mut fg_targets = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        match *t {
            RoiTarget::Foreground { branch, deltas } => {
                if branch >= categories {
                    return Err(Error::IndexOutOfRange {
                        op: "detection_loss",
                        index: branch,
                        len: categories,
                    });
                }
                let d = deltas.ok_or(Error::MissingTarget(i))?;
                rows.push(i * categories + branch);
                labels.push(0);
                fg_rows.push(i * categories + branch);
                fg_targets.extend_from_slice(&d);
            }
            RoiTarget::Background => {
                let scores: Vec<f64> = (0..categories)
                    .map(|c| {
                        let r = i * categories + c;
                        match_probability(lv[2 * r], lv[2 * r + 1])
                    })
                    .collect();
                rows.push(i * categories + argmax(&scores).unwrap_or(0));
                labels.push(1);
            }
        }
    }
    let picked = tape.gather_rows(logits, &rows)?;
    let cls = tape.softmax_cross_entropy_rows(picked, &labels)?;
    let boxes = if fg_rows.is_empty() {
        None
    } else {
        let pd = tape.gather_rows(deltas, &fg_rows)?;
        let td = tape.constant(vec![fg_rows.len(), 4], fg_targets)?;
        Some(tape.smooth_l1(pd, td)?)
    };
    let mut total = tape.add(cls, meta)?;
    if let Some(b) = boxes {
        total = tape.add(total, b)?;
    }
    Ok(LossTerms {
        cls,
        boxes,
        meta,
        total,
    })
}
