//! VOC-style evaluation: greedy IoU matching, all-points interpolated AP
//! and novel/base/overall means.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bbox::BBox;
use crate::graph::CategorySet;
use crate::head::Detection;

/// Minimum overlap for a true positive.
pub const IOU_MATCH: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Scored box of one category in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRecord {
    pub image: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Ground-truth box of one category in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
}

/// Order in which detections are processed: descending confidence, ties by
/// input position.
pub fn rank_order(dets: &[DetectionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// TP flags in input order. Each detection, in rank order, claims the
/// unclaimed same-image ground truth of highest IoU when that IoU reaches
/// [`IOU_MATCH`].
pub fn match_detections(dets: &[DetectionRecord], gts: &[GroundTruth]) -> Vec<bool> {
    let mut claimed = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in rank_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] || g.image != d.image {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= IOU_MATCH {
                claimed[j] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// Precision/recall after each rank.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    /// TP flags in rank order.
    pub flags: Vec<bool>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub gt_count: usize,
}

impl PRCurve {
    pub fn new(ranked_flags: Vec<bool>, gt_count: usize) -> Self {
        let mut precision = Vec::with_capacity(ranked_flags.len());
        let mut recall = Vec::with_capacity(ranked_flags.len());
        let mut tp = 0usize;
        for (k, &f) in ranked_flags.iter().enumerate() {
            tp += f as usize;
            precision.push(tp as f64 / (k + 1) as f64);
            recall.push(if gt_count == 0 {
                0.0
            } else {
                tp as f64 / gt_count as f64
            });
        }
        Self {
            flags: ranked_flags,
            precision,
            recall,
            gt_count,
        }
    }

    pub fn from_detections(dets: &[DetectionRecord], gts: &[GroundTruth]) -> Self {
        let tp = match_detections(dets, gts);
        let ranked = rank_order(dets).into_iter().map(|i| tp[i]).collect();
        Self::new(ranked, gts.len())
    }
}

/// All-points interpolated AP; `None` without ground truth.
pub fn average_precision(curve: &PRCurve) -> Option<f64> {
    if curve.gt_count == 0 {
        return None;
    }
    let n = curve.precision.len();
    let mut envelope = curve.precision.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..n {
        if curve.recall[k] > prev {
            ap += (curve.recall[k] - prev) * envelope[k];
            prev = curve.recall[k];
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategoryAp {
    pub name: String,
    pub novel: bool,
    pub ap: Option<f64>,
}

/// Per-category AP with arithmetic means over present values.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub categories: Vec<CategoryAp>,
    pub novel: Option<f64>,
    pub base: Option<f64>,
    pub all: Option<f64>,
}

fn mean(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Builds the report from APs indexed like `cats`.
pub fn mean_ap(aps: &[Option<f64>], cats: &CategorySet) -> EvalReport {
    let categories: Vec<CategoryAp> = aps
        .iter()
        .enumerate()
        .map(|(i, &ap)| CategoryAp {
            name: cats.name(i).into(),
            novel: cats.is_novel(i),
            ap,
        })
        .collect();
    let pick = |want: Option<bool>| {
        mean(
            categories
                .iter()
                .filter(|c| want.is_none_or(|w| c.novel == w))
                .filter_map(|c| c.ap),
        )
    };
    EvalReport {
        novel: pick(Some(true)),
        base: pick(Some(false)),
        all: pick(None),
        categories,
    }
}

/// Ground truth and detections of one image, categories as global indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub ground_truth: Vec<(usize, BBox)>,
    pub detections: Vec<Detection>,
}

/// Per-category AP over a set of images, one entry per category in `cats`.
/// Categories outside `evaluated` are reported absent.
pub fn evaluate(images: &[ImageResult], cats: &CategorySet, evaluated: &[usize]) -> EvalReport {
    let aps: Vec<Option<f64>> = (0..cats.len())
        .map(|c| {
            if !evaluated.contains(&c) {
                return None;
            }
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for (i, im) in images.iter().enumerate() {
                gts.extend(
                    im.ground_truth
                        .iter()
                        .filter(|g| g.0 == c)
                        .map(|g| GroundTruth { image: i, bbox: g.1 }),
                );
                dets.extend(
                    im.detections
                        .iter()
                        .filter(|d| d.category == c)
                        .map(|d| DetectionRecord {
                            image: i,
                            confidence: d.confidence,
                            bbox: d.bbox,
                        }),
                );
            }
            average_precision(&PRCurve::from_detections(&dets, &gts))
        })
        .collect();
    mean_ap(&aps, cats)
}
