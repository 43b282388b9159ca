//! Episodes: annotated images, support entries with location masks, and
//! instance-wise K-shot selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::graph::CategorySet;
use crate::head::RoIFeature;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ImageSource {
    Synthetic,
    VocXml,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Instance {
    /// Global category index.
    pub category: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnnotatedImage {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub instances: Vec<Instance>,
    pub source: ImageSource,
}

impl AnnotatedImage {
    /// Validates that every box lies inside the image.
    pub fn new(id: String, width: f64, height: f64, instances: Vec<Instance>, source: ImageSource) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::Config(format!("image {id}: size must be positive")));
        }
        for inst in &instances {
            let b = inst.bbox;
            if !b.within(width, height) {
                return Err(Error::InvalidBox {
                    xmin: b.xmin,
                    ymin: b.ymin,
                    xmax: b.xmax,
                    ymax: b.ymax,
                });
            }
        }
        Ok(Self {
            id,
            width,
            height,
            instances,
            source,
        })
    }

    pub fn count(&self, category: usize) -> usize {
        self.instances.iter().filter(|i| i.category == category).count()
    }
}

/// A labelled support exemplar: a `gh·gw × D` grid of cell features with a
/// row-major binary mask marking the object's location.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SupportEntry {
    pub category: usize,
    pub cells: Tensor,
    pub mask: Vec<u8>,
    pub grid: (usize, usize),
}

impl SupportEntry {
    pub fn new(category: usize, cells: Tensor, mask: Vec<u8>, grid: (usize, usize)) -> Result<Self> {
        let n = grid.0 * grid.1;
        if cells.shape().len() != 2 || cells.rows() != n || mask.len() != n {
            return Err(Error::Shape {
                op: "support_entry",
                left: cells.shape().to_vec(),
                right: vec![n, mask.len()],
            });
        }
        if mask.iter().any(|&m| m > 1) || !mask.contains(&1) {
            return Err(Error::Empty { op: "support mask" });
        }
        Ok(Self {
            category,
            cells,
            mask,
            grid,
        })
    }
}

/// Binary `gh×gw` mask (row-major) of the grid cells whose rectangle
/// overlaps `bbox` with positive area; the cell holding the box centre is
/// always set.
pub fn mask_for(bbox: &BBox, size: (f64, f64), grid: (usize, usize)) -> Vec<u8> {
    let (w, h) = size;
    let (gh, gw) = grid;
    let (cw, ch) = (w / gw as f64, h / gh as f64);
    let mut mask = vec![0u8; gh * gw];
    for r in 0..gh {
        for c in 0..gw {
            let x0 = c as f64 * cw;
            let y0 = r as f64 * ch;
            let ox = bbox.xmax.min(x0 + cw) - bbox.xmin.max(x0);
            let oy = bbox.ymax.min(y0 + ch) - bbox.ymin.max(y0);
            if ox > 0.0 && oy > 0.0 {
                mask[r * gw + c] = 1;
            }
        }
    }
    let (cx, cy) = bbox.center();
    let c = ((cx / cw) as usize).min(gw - 1);
    let r = ((cy / ch) as usize).min(gh - 1);
    mask[r * gw + c] = 1;
    mask
}

/// One instance chosen by [`sample_kshot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InstanceRef {
    pub image: usize,
    pub instance: usize,
}

/// Result of instance-wise K-shot sampling.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KShotSelection {
    /// Selected instances in draw order.
    pub selected: Vec<InstanceRef>,
    /// Instances of a target category inside a drawn image that exceeded the quota.
    pub masked: Vec<InstanceRef>,
    /// Pool indices of every drawn image, first-draw order, no repeats.
    pub images: Vec<usize>,
}

impl KShotSelection {
    pub fn count(&self, pool: &[AnnotatedImage], category: usize) -> usize {
        self.selected
            .iter()
            .filter(|r| pool[r.image].instances[r.instance].category == category)
            .count()
    }

    pub fn is_selected(&self, r: InstanceRef) -> bool {
        self.selected.contains(&r)
    }
}

/// Draws images per category (in a seeded shuffle of the pool) until exactly
/// `k` instances of that category are selected. Instances beyond the quota
/// in the last drawn image are recorded as masked.
pub fn sample_kshot(
    pool: &[AnnotatedImage],
    cats: &CategorySet,
    targets: &[usize],
    k: usize,
    seed: u64,
) -> Result<KShotSelection> {
    let counts: BTreeMap<usize, usize> = targets
        .iter()
        .map(|&c| (c, pool.iter().map(|img| img.count(c)).sum()))
        .collect();
    if counts.values().any(|&n| n < k) {
        let listing: Vec<String> = targets
            .iter()
            .map(|&c| format!("{}={}", cats.name(c), counts[&c]))
            .collect();
        return Err(Error::InsufficientInstances {
            k,
            counts: listing.join(", "),
        });
    }
    let mut rng = rng::stream(seed, Stream::Sampling);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut sel = KShotSelection::default();
    for &c in targets {
        let mut remaining = k;
        for &img in &order {
            if remaining == 0 {
                break;
            }
            let hits: Vec<usize> = pool[img]
                .instances
                .iter()
                .enumerate()
                .filter(|(_, i)| i.category == c)
                .map(|(j, _)| j)
                .collect();
            if hits.is_empty() {
                continue;
            }
            if !sel.images.contains(&img) {
                sel.images.push(img);
            }
            for j in hits {
                let r = InstanceRef {
                    image: img,
                    instance: j,
                };
                if remaining > 0 {
                    sel.selected.push(r);
                    remaining -= 1;
                } else {
                    sel.masked.push(r);
                }
            }
        }
    }
    Ok(sel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Phase {
    BaseTraining,
    FineTuning,
}

/// A query image: its proposals and the ground truth they were drawn from.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryImage {
    pub image: AnnotatedImage,
    pub rois: Vec<RoIFeature>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Episode {
    pub phase: Phase,
    /// Global indices of the phase's categories, in branch order.
    pub categories: Vec<usize>,
    pub support: Vec<SupportEntry>,
    pub queries: Vec<QueryImage>,
    pub shots: usize,
}

impl Episode {
    /// Checks that the support covers every phase category and nothing else,
    /// and that no foreground label falls outside the phase.
    pub fn validate(&self, cats: &CategorySet) -> Result<()> {
        for &c in &self.categories {
            if !self.support.iter().any(|e| e.category == c) {
                return Err(Error::NoSupport(cats.name(c).into()));
            }
        }
        for e in &self.support {
            if !self.categories.contains(&e.category) {
                return Err(Error::Config(format!(
                    "support entry for {} outside the episode's categories",
                    cats.name(e.category)
                )));
            }
        }
        for q in &self.queries {
            for r in &q.rois {
                if let Some(a) = r.assignment {
                    if !self.categories.contains(&a.category) {
                        return Err(Error::Config(format!(
                            "image {}: foreground label {} outside the episode's categories",
                            q.image.id,
                            cats.name(a.category)
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn roi_count(&self) -> usize {
        self.queries.iter().map(|q| q.rois.len()).sum()
    }
}
