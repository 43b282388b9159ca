//! Feature-level synthetic detection task.
//!
//! Every category owns a generative prototype `g`. Base prototypes are
//! sparse nonnegative latents; novel prototypes are mixtures of base ones
//! weighted by the clamped word-embedding similarity of the category names,
//! so semantic neighbours genuinely share feature structure. Foreground RoIs
//! are `g + N(0, σ_n²)`, background RoIs are fresh sparse clutter, and
//! support entries are cell grids whose masked cells hold `g` plus
//! per-instance noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bbox::{encode_deltas, BBox};
use crate::episode::{
    mask_for, sample_kshot, AnnotatedImage, Episode, ImageSource, Instance, InstanceRef, KShotSelection, Phase,
    QueryImage, SupportEntry,
};
use crate::error::{Error, Result};
use crate::graph::CategorySet;
use crate::head::{Assignment, RoIFeature};
use crate::math;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Tunable generator settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthParams {
    pub feature_dim: usize,
    /// Per-coordinate noise on foreground RoI features.
    pub noise: f64,
    /// Per-coordinate noise shared by all cells of one support instance.
    pub support_noise: f64,
    /// Independent per-cell noise inside a support mask.
    pub cell_noise: f64,
    /// Fraction of active latent coordinates.
    pub density: f64,
    /// Typical magnitude of an active latent coordinate.
    pub amplitude: f64,
    /// Exponent applied to clamped similarities before mixing.
    pub sharpness: f64,
    /// Weight of the semantic mixture in base prototypes (0 = independent).
    pub base_mixing: f64,
    /// Amplitude of background clutter relative to prototypes.
    pub background_scale: f64,
    pub image_size: (f64, f64),
    pub grid: (usize, usize),
    pub min_instances: usize,
    pub max_instances: usize,
    pub rois_per_image: usize,
    pub fg_per_instance: usize,
    /// Query images per base-training episode.
    pub queries_per_episode: usize,
    /// Images in the fine-tuning pool.
    pub pool_size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            noise: 0.3,
            support_noise: 0.3,
            cell_noise: 0.05,
            density: 0.3,
            amplitude: 1.0,
            sharpness: 1.0,
            base_mixing: 0.0,
            background_scale: 1.0,
            image_size: (500.0, 375.0),
            grid: (4, 4),
            min_instances: 1,
            max_instances: 3,
            rois_per_image: 20,
            fg_per_instance: 2,
            queries_per_episode: 8,
            pool_size: 200,
        }
    }
}

/// A fully specified task: parameters, categories and prototypes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub params: SynthParams,
    pub categories: CategorySet,
    /// `C×F` generative prototypes, row `i` for category `i`.
    pub prototypes: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sparse_latent(f: usize, density: f64, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..f)
        .map(|_| {
            if rng.random::<f64>() < density {
                amplitude * rng.random_range(0.5..1.5)
            } else {
                0.0
            }
        })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        let j = rng.random_range(0..f);
        v[j] = amplitude;
    }
    v
}

/// `C×C_base` matrix of novel-from-base mixing weights: row `i` is
/// `max(0, sᵢⱼ)^γ` over base `j`, normalised to sum one. Base rows are
/// one-hot on themselves.
pub fn mixing_weights(similarity: &Tensor, cats: &CategorySet, sharpness: f64) -> Result<Tensor> {
    let base = cats.base_indices();
    let c = cats.len();
    if similarity.shape() != [c, c] {
        return Err(Error::Shape {
            op: "mixing_weights",
            left: similarity.shape().to_vec(),
            right: vec![c, c],
        });
    }
    let mut w = vec![0.0; c * base.len()];
    for i in 0..c {
        let row = &mut w[i * base.len()..(i + 1) * base.len()];
        if let Some(j) = base.iter().position(|&b| b == i) {
            row[j] = 1.0;
            continue;
        }
        for (j, &b) in base.iter().enumerate() {
            row[j] = libm::pow(similarity.get(i, b).max(0.0), sharpness);
        }
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::DegenerateRow { row: i, sum: s });
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(c, base.len(), w)
}

impl SyntheticTaskSpec {
    /// Draws base latents from the task stream and mixes novel prototypes
    /// from them using `similarity` (typically the semantic adjacency).
    pub fn build(params: SynthParams, cats: CategorySet, similarity: &Tensor, seed: u64) -> Result<Self> {
        let f = params.feature_dim;
        let base = cats.base_indices();
        let mut rng = rng::stream(seed, Stream::Task);
        let latents: Vec<Vec<f64>> = base
            .iter()
            .map(|_| sparse_latent(f, params.density, params.amplitude, &mut rng))
            .collect();
        let target_norm = latents.iter().map(|v| math::norm(v)).sum::<f64>() / latents.len().max(1) as f64;

        let mut base_g = latents.clone();
        if params.base_mixing > 0.0 {
            let sub = Tensor::from_rows(
                &base
                    .iter()
                    .map(|&i| base.iter().map(|&j| similarity.get(i, j)).collect())
                    .collect::<Vec<Vec<f64>>>(),
            )?;
            for (a, g) in base_g.iter_mut().enumerate() {
                let row: Vec<f64> = (0..base.len())
                    .map(|b| {
                        if a == b {
                            0.0
                        } else {
                            libm::pow(sub.get(a, b).max(0.0), params.sharpness)
                        }
                    })
                    .collect();
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    for (k, gk) in g.iter_mut().enumerate() {
                        let mix: f64 = (0..base.len()).map(|b| row[b] / s * latents[b][k]).sum();
                        *gk = (1.0 - params.base_mixing) * latents[a][k] + params.base_mixing * mix;
                    }
                }
            }
        }

        let w = mixing_weights(similarity, &cats, params.sharpness)?;
        let mut rows = Vec::with_capacity(cats.len());
        for i in 0..cats.len() {
            let mut g = vec![0.0; f];
            for (j, bg) in base_g.iter().enumerate() {
                let wij = w.get(i, j);
                for k in 0..f {
                    g[k] += wij * bg[k];
                }
            }
            let n = math::norm(&g);
            if !(n > 0.0) {
                return Err(Error::ZeroNorm(cats.name(i).into()));
            }
            g.iter_mut().for_each(|v| *v *= target_norm / n);
            rows.push(g);
        }
        Self::from_prototypes(params, cats, Tensor::from_rows(&rows)?, seed)
    }

    /// Uses the given prototypes directly; base rows must be pairwise distinct.
    pub fn from_prototypes(
        params: SynthParams,
        categories: CategorySet,
        prototypes: Tensor,
        seed: u64,
    ) -> Result<Self> {
        if prototypes.shape() != [categories.len(), params.feature_dim] {
            return Err(Error::Shape {
                op: "synthetic_spec",
                left: prototypes.shape().to_vec(),
                right: vec![categories.len(), params.feature_dim],
            });
        }
        if params.max_instances < params.min_instances.max(1)
            || params.rois_per_image < params.max_instances * params.fg_per_instance
        {
            return Err(Error::Config("synthetic image layout cannot fit its proposals".into()));
        }
        let base = categories.base_indices();
        for (a, &i) in base.iter().enumerate() {
            for &j in &base[a + 1..] {
                if prototypes.row(i) == prototypes.row(j) {
                    return Err(Error::Config(format!(
                        "base prototypes of {} and {} coincide",
                        categories.name(i),
                        categories.name(j)
                    )));
                }
            }
        }
        Ok(Self {
            seed,
            params,
            categories,
            prototypes,
        })
    }

    pub fn prototype(&self, category: usize) -> &[f64] {
        self.prototypes.row(category)
    }

    fn random_box(&self, (w, h): (f64, f64), rng: &mut ChaCha8Rng) -> BBox {
        let bw = w * rng.random_range(0.15..0.6);
        let bh = h * rng.random_range(0.15..0.6);
        let x = rng.random_range(0.0..(w - bw));
        let y = rng.random_range(0.0..(h - bh));
        BBox {
            xmin: x,
            ymin: y,
            xmax: x + bw,
            ymax: y + bh,
        }
    }

    /// An image with a random number of instances drawn from `allowed`.
    pub fn random_image(&self, id: alloc::string::String, allowed: &[usize], rng: &mut ChaCha8Rng) -> AnnotatedImage {
        let p = &self.params;
        let n = rng.random_range(p.min_instances..=p.max_instances);
        let instances = (0..n)
            .map(|_| Instance {
                category: allowed[rng.random_range(0..allowed.len())],
                bbox: self.random_box(p.image_size, rng),
            })
            .collect();
        AnnotatedImage {
            id,
            width: p.image_size.0,
            height: p.image_size.1,
            instances,
            source: ImageSource::Synthetic,
        }
    }

    /// Foreground feature of `category`: `g + N(0, σ_n²)`.
    pub fn foreground_feature(&self, category: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.prototype(category)
            .iter()
            .map(|g| g + self.params.noise * gaussian(rng))
            .collect()
    }

    pub fn background_feature(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = &self.params;
        sparse_latent(p.feature_dim, p.density, p.amplitude * p.background_scale, rng)
            .into_iter()
            .map(|v| v + p.noise * gaussian(rng))
            .collect()
    }

    fn jitter(&self, gt: &BBox, (w, h): (f64, f64), rng: &mut ChaCha8Rng) -> BBox {
        for _ in 0..64 {
            let (cx, cy) = gt.center();
            let cx = cx + 0.1 * gt.width() * gaussian(rng);
            let cy = cy + 0.1 * gt.height() * gaussian(rng);
            let bw = gt.width() * math::exp(0.1 * gaussian(rng));
            let bh = gt.height() * math::exp(0.1 * gaussian(rng));
            let b = BBox {
                xmin: (cx - 0.5 * bw).max(0.0),
                ymin: (cy - 0.5 * bh).max(0.0),
                xmax: (cx + 0.5 * bw).min(w),
                ymax: (cy + 0.5 * bh).min(h),
            };
            if b.xmin < b.xmax && b.ymin < b.ymax && b.iou(gt) >= 0.5 {
                return b;
            }
        }
        *gt
    }

    /// Proposals and features for `image`. `label(j)` says how proposals
    /// on instance `j` are treated: `Some(true)` foreground, `Some(false)`
    /// background, `None` dropped.
    pub fn rois<L: Fn(usize) -> Option<bool>>(
        &self,
        image: &AnnotatedImage,
        label: L,
        rng: &mut ChaCha8Rng,
    ) -> Vec<RoIFeature> {
        let p = &self.params;
        let mut out = Vec::with_capacity(p.rois_per_image);
        for (j, inst) in image.instances.iter().enumerate() {
            for _ in 0..p.fg_per_instance {
                let proposal = self.jitter(&inst.bbox, (image.width, image.height), rng);
                let vector = self.foreground_feature(inst.category, rng);
                match label(j) {
                    Some(true) => out.push(RoIFeature {
                        vector,
                        proposal,
                        assignment: Some(Assignment {
                            category: inst.category,
                            target: Some(encode_deltas(&proposal, &inst.bbox)),
                        }),
                    }),
                    Some(false) => out.push(RoIFeature {
                        vector,
                        proposal,
                        assignment: None,
                    }),
                    None => {}
                }
            }
        }
        let background = p.rois_per_image - image.instances.len() * p.fg_per_instance;
        for _ in 0..background {
            let mut proposal = None;
            for _ in 0..64 {
                let b = self.random_box((image.width, image.height), rng);
                if image.instances.iter().all(|i| i.bbox.iou(&b) < 0.3) {
                    proposal = Some(b);
                    break;
                }
            }
            let vector = self.background_feature(rng);
            if let Some(proposal) = proposal {
                out.push(RoIFeature {
                    vector,
                    proposal,
                    assignment: None,
                });
            }
        }
        out
    }

    /// Support entry of instance `j`: masked cells hold
    /// `g + instance noise + cell noise`, the rest background clutter.
    pub fn support_entry(&self, image: &AnnotatedImage, j: usize, rng: &mut ChaCha8Rng) -> Result<SupportEntry> {
        let p = &self.params;
        let inst = image.instances[j];
        let mask = mask_for(&inst.bbox, (image.width, image.height), p.grid);
        let shared: Vec<f64> = self
            .prototype(inst.category)
            .iter()
            .map(|g| g + p.support_noise * gaussian(rng))
            .collect();
        let mut cells = Vec::with_capacity(mask.len() * p.feature_dim);
        for &m in &mask {
            if m == 1 {
                cells.extend(shared.iter().map(|v| v + p.cell_noise * gaussian(rng)));
            } else {
                cells.extend(self.background_feature(rng));
            }
        }
        SupportEntry::new(
            inst.category,
            Tensor::matrix(mask.len(), p.feature_dim, cells)?,
            mask,
            p.grid,
        )
    }

    fn lone_instance_image(&self, category: usize, id: alloc::string::String, rng: &mut ChaCha8Rng) -> AnnotatedImage {
        let p = &self.params;
        AnnotatedImage {
            id,
            width: p.image_size.0,
            height: p.image_size.1,
            instances: vec![Instance {
                category,
                bbox: self.random_box(p.image_size, rng),
            }],
            source: ImageSource::Synthetic,
        }
    }

    /// The fine-tuning pool: fixed per task, drawn from the pool stream.
    pub fn pool(&self) -> Vec<AnnotatedImage> {
        let mut rng = rng::stream(self.seed, Stream::Pool);
        let all: Vec<usize> = (0..self.categories.len()).collect();
        (0..self.params.pool_size)
            .map(|i| self.random_image(format!("pool-{i}"), &all, &mut rng))
            .collect()
    }

    /// K-shot selection over every category from [`Self::pool`].
    pub fn kshot(&self, pool: &[AnnotatedImage], k: usize, seed: u64) -> Result<KShotSelection> {
        let all: Vec<usize> = (0..self.categories.len()).collect();
        sample_kshot(pool, &self.categories, &all, k, seed)
    }

    /// Held-out labelled query images over all categories.
    pub fn eval_images(&self, n: usize, seed: u64) -> Vec<QueryImage> {
        let mut rng = rng::stream(seed, Stream::Eval);
        let all: Vec<usize> = (0..self.categories.len()).collect();
        (0..n)
            .map(|i| {
                let image = self.random_image(format!("eval-{i}"), &all, &mut rng);
                let rois = self.rois(&image, |_| Some(true), &mut rng);
                QueryImage { image, rois }
            })
            .collect()
    }
}

/// Generates one episode.
///
/// Base training: `k` support entries per base category on fresh images and
/// `queries_per_episode` query images over all categories in which novel
/// instances are labelled background. Fine-tuning: instance-wise K-shot
/// selection over all categories from the task's pool; the support holds
/// the selected instances and the queries are the selected images, with
/// proposals on unselected instances dropped.
pub fn synth_generate(spec: &SyntheticTaskSpec, phase: Phase, k: usize, seed: u64) -> Result<Episode> {
    let cats = &spec.categories;
    match phase {
        Phase::BaseTraining => {
            let base = cats.base_indices();
            let all: Vec<usize> = (0..cats.len()).collect();
            let mut rng = rng::stream(seed, Stream::Sampling);
            let mut support = Vec::with_capacity(base.len() * k);
            for &c in &base {
                for s in 0..k {
                    let img = spec.lone_instance_image(c, format!("support-{c}-{s}"), &mut rng);
                    support.push(spec.support_entry(&img, 0, &mut rng)?);
                }
            }
            let mut queries = Vec::with_capacity(spec.params.queries_per_episode);
            for q in 0..spec.params.queries_per_episode {
                let image = spec.random_image(format!("query-{q}"), &all, &mut rng);
                let rois = spec.rois(&image, |j| Some(!cats.is_novel(image.instances[j].category)), &mut rng);
                queries.push(QueryImage { image, rois });
            }
            Ok(Episode {
                phase,
                categories: base,
                support,
                queries,
                shots: k,
            })
        }
        Phase::FineTuning => {
            let pool = spec.pool();
            let sel = spec.kshot(&pool, k, seed)?;
            fine_tune_episode(spec, &pool, &sel, k, seed)
        }
    }
}

/// Builds the fine-tuning episode of a given selection.
pub fn fine_tune_episode(
    spec: &SyntheticTaskSpec,
    pool: &[AnnotatedImage],
    sel: &KShotSelection,
    k: usize,
    seed: u64,
) -> Result<Episode> {
    let mut rng = rng::stream(seed, Stream::Noise);
    let mut support = Vec::with_capacity(sel.selected.len());
    for r in &sel.selected {
        support.push(spec.support_entry(&pool[r.image], r.instance, &mut rng)?);
    }
    let mut images = sel.images.clone();
    images.sort_unstable();
    let mut queries = Vec::with_capacity(images.len());
    for &i in &images {
        let image = pool[i].clone();
        let rois = spec.rois(
            &image,
            |j| sel.is_selected(InstanceRef { image: i, instance: j }).then_some(true),
            &mut rng,
        );
        queries.push(QueryImage { image, rois });
    }
    Ok(Episode {
        phase: Phase::FineTuning,
        categories: (0..spec.categories.len()).collect(),
        support,
        queries,
        shots: k,
    })
}

/// Shuffled batch of query indices for one step.
pub fn batch_indices(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(batch.min(n));
    idx
}
