//! Two-phase training, evaluation and the ablation cell runner.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::episode::{AnnotatedImage, Episode, Phase, QueryImage, SupportEntry};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ImageResult};
use crate::graph::{random_adjacency, CategorySet, MetaGraph};
use crate::head::{
    decide, detection_loss, head_forward, nms, predict_batch, Detection, LossValues, PredictorHead, RoiTarget,
};
use crate::optim::SgdState;
use crate::proto::{column_selector, meta_logits, meta_loss, pool_support, transfer, ProtoTransferNet};
use crate::rng::{self, Stream};
use crate::synth::{batch_indices, synth_generate, SynthParams, SyntheticTaskSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// NMS overlap applied to thresholded detections.
pub const NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum GraphKind {
    Semantic,
    Random,
}

/// Run settings not tied to the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunConfig {
    pub seed: u64,
    pub split: u8,
    pub shots: usize,
    pub s_dim: usize,
    pub threshold: f64,
    pub base_lr: f64,
    pub fine_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub base_steps: usize,
    pub fine_steps: usize,
    pub skip: bool,
    pub graph: GraphKind,
    /// Train every base step on one fixed episode.
    pub full_batch: bool,
    pub eval_images: usize,
    pub synth: SynthParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            split: 1,
            shots: 3,
            s_dim: 32,
            threshold: 0.5,
            base_lr: 0.01,
            fine_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.001,
            batch: 8,
            base_steps: 500,
            fine_steps: 200,
            skip: true,
            graph: GraphKind::Semantic,
            full_batch: false,
            eval_images: 100,
            synth: SynthParams::default(),
        }
    }
}

impl RunConfig {
    pub fn f_dim(&self) -> usize {
        self.synth.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.split) {
            return Err(Error::Config(format!("split must be 1, 2 or 3, got {}", self.split)));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.fine_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.f_dim() == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.s_dim != self.f_dim() {
            return Err(Error::Config(format!(
                "synthetic support and RoI features share one space: S ({}) must equal F ({})",
                self.s_dim,
                self.f_dim()
            )));
        }
        if !(self.synth.noise >= 0.0) {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        Ok(())
    }

    /// Whether `shots` is one of the customary 1, 2, 3, 5, 10.
    pub fn standard_shots(&self) -> bool {
        [1, 2, 3, 5, 10].contains(&self.shots)
    }
}

/// Meta-learner plus predictor head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: ProtoTransferNet,
    pub head: PredictorHead,
}

impl Model {
    pub fn init(cfg: &RunConfig, categories: usize) -> Self {
        let mut rng = rng::stream(cfg.seed, Stream::Init);
        let f = cfg.f_dim();
        let net = ProtoTransferNet::init(cfg.s_dim, f, categories, &mut rng);
        let head = PredictorHead::init(f, cfg.threshold, &mut rng);
        Self { net, head }
    }

    /// Every parameter with its qualified name.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self
            .net
            .params()
            .into_iter()
            .map(|(n, t)| (format!("net.{n}"), t))
            .collect();
        v.extend(self.head.params().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        v
    }

    /// Replaces the named parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = if let Some(n) = name.strip_prefix("net.") {
            self.net.params_mut().into_iter().find(|(k, _)| *k == n).map(|(_, t)| t)
        } else if let Some(n) = name.strip_prefix("head.") {
            self.head
                .params_mut()
                .into_iter()
                .find(|(k, _)| *k == n)
                .map(|(_, t)| t)
        } else {
            None
        };
        let slot = slot.ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "load_parameter",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value.with_grad();
        Ok(())
    }

    fn step_params(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = self.net.params_mut();
        v.extend(self.head.params_mut());
        v
    }
}

/// Loss of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    pub phase: Phase,
    /// 1-based step within the whole run.
    pub step: usize,
    pub values: LossValues,
}

fn targets(queries: &[&QueryImage], phase: &[usize]) -> Result<(Vec<f64>, Vec<RoiTarget>)> {
    let mut feats = Vec::new();
    let mut t = Vec::new();
    for q in queries {
        for r in &q.rois {
            feats.extend_from_slice(&r.vector);
            t.push(match r.assignment {
                None => RoiTarget::Background,
                Some(a) => {
                    let branch = phase.iter().position(|&c| c == a.category).ok_or_else(|| {
                        Error::Config(format!("image {}: label {} outside the phase", q.image.id, a.category))
                    })?;
                    RoiTarget::Foreground {
                        branch,
                        deltas: a.target,
                    }
                }
            });
        }
    }
    Ok((feats, t))
}

/// Records the full forward pass of one step and returns the
/// tape, the loss handles and the bound parameter handles.
pub fn forward_loss(
    model: &Model,
    support: &[SupportEntry],
    queries: &[&QueryImage],
    cats: &CategorySet,
    phase: &[usize],
    graph: &MetaGraph,
    skip: bool,
) -> Result<(
    Tape,
    crate::head::LossTerms,
    crate::proto::NetVars,
    crate::head::HeadVars,
)> {
    let mut tape = Tape::new();
    let nv = model.net.bind(&mut tape)?;
    let hv = model.head.bind(&mut tape)?;
    let p0 = pool_support(&mut tape, support, cats, phase)?;
    let prop = tape.leaf(graph.propagation())?;
    let p = transfer(&mut tape, p0, prop, &nv)?;
    let sel = column_selector(&mut tape, model.net.classifier.cols(), phase)?;
    let (refined, preliminary) = meta_logits(&mut tape, p0, p, &nv, Some(sel))?;
    let meta = meta_loss(&mut tape, refined, skip.then_some(preliminary))?;
    let (feats, t) = targets(queries, phase)?;
    let f = model.head.feature_dim();
    let rois = tape.constant(vec![t.len(), f], feats)?;
    let (logits, deltas) = head_forward(&mut tape, rois, p, &hv)?;
    let terms = detection_loss(&mut tape, logits, deltas, &t, phase.len(), meta)?;
    Ok((tape, terms, nv, hv))
}

/// One SGD step; returns the step's loss components.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    sgd: &mut SgdState,
    support: &[SupportEntry],
    queries: &[&QueryImage],
    cats: &CategorySet,
    phase: &[usize],
    graph: &MetaGraph,
    skip: bool,
    step: usize,
) -> Result<LossValues> {
    let nan = |_| Error::NonFiniteLoss {
        step,
        l_cls: f64::NAN,
        l_box: f64::NAN,
        l_meta: f64::NAN,
    };
    let (mut tape, terms, nv, hv) =
        forward_loss(model, support, queries, cats, phase, graph, skip).map_err(|e| match e {
            Error::NonFinite { .. } => nan(()),
            e => e,
        })?;
    let values = terms.values(&tape);
    if ![values.l_cls, values.l_box, values.l_meta, values.total]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFiniteLoss {
            step,
            l_cls: values.l_cls,
            l_box: values.l_box,
            l_meta: values.l_meta,
        });
    }
    let grads = tape.backward(terms.total).map_err(|e| match e {
        Error::NonFinite { .. } => nan(()),
        e => e,
    })?;
    model.net.accumulate(&grads, &nv)?;
    model.head.accumulate(&grads, &hv)?;
    for (_, t) in model.step_params() {
        if t.grad().is_none() {
            t.zero_grad();
        }
    }
    sgd.step(model.step_params())?;
    Ok(values)
}

/// Thresholded, NMS-filtered detections of one query image, with global
/// category indices.
pub fn detect(
    model: &Model,
    protos: &crate::proto::PrototypeSet,
    query: &QueryImage,
    threshold: f64,
) -> Result<Vec<Detection>> {
    let pred = predict_batch(&query.rois, protos, &model.head)?;
    let mut dets = Vec::new();
    for (i, roi) in query.rois.iter().enumerate() {
        if let Some(mut d) = decide(&pred.scores[i], &pred.deltas[i], roi, threshold) {
            d.category = protos.categories[d.category];
            dets.push(d);
        }
    }
    Ok(nms(&dets, NMS_IOU))
}

/// Detections and report over `images` for the categories in `phase`.
pub fn evaluate_model(
    model: &Model,
    support: &[SupportEntry],
    cats: &CategorySet,
    phase: &[usize],
    graph: &MetaGraph,
    images: &[QueryImage],
    threshold: f64,
) -> Result<(EvalReport, Vec<ImageResult>)> {
    let support: Vec<SupportEntry> = support
        .iter()
        .filter(|e| phase.contains(&e.category))
        .cloned()
        .collect();
    let protos = model.net.prototypes(&support, cats, phase, graph)?;
    let mut results = Vec::with_capacity(images.len());
    for q in images {
        results.push(ImageResult {
            ground_truth: q.image.instances.iter().map(|i| (i.category, i.bbox)).collect(),
            detections: detect(model, &protos, q, threshold)?,
        });
    }
    Ok((evaluate(&results, cats, phase), results))
}

/// Seed of the `step`-th base-training episode.
pub fn episode_seed(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a run needs besides the model.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cats: CategorySet,
    pub spec: SyntheticTaskSpec,
    /// Graph the model propagates over.
    pub graph: MetaGraph,
    /// Images the K-shot fine-tuning set is drawn from.
    pub pool: Vec<AnnotatedImage>,
}

impl Setup {
    /// The task is always generated from the semantic graph; `cfg.graph`
    /// only selects the graph the model sees.
    pub fn new(cfg: &RunConfig, semantic: &MetaGraph) -> Result<Self> {
        cfg.validate()?;
        let cats = CategorySet::voc_split(cfg.split)?;
        if semantic.len() != cats.len() {
            return Err(Error::Shape {
                op: "setup",
                left: vec![semantic.len()],
                right: vec![cats.len()],
            });
        }
        let spec = SyntheticTaskSpec::build(cfg.synth.clone(), cats.clone(), semantic.adjacency(), cfg.seed)?;
        let graph = match cfg.graph {
            GraphKind::Semantic => semantic.clone(),
            GraphKind::Random => random_adjacency(&cats, cfg.seed)?,
        };
        let pool = spec.pool();
        Ok(Self {
            cats,
            spec,
            graph,
            pool,
        })
    }

    /// Replaces the synthetic fine-tuning pool, e.g. with parsed annotations.
    pub fn with_pool(mut self, pool: Vec<AnnotatedImage>) -> Result<Self> {
        for img in &pool {
            if let Some(i) = img.instances.iter().find(|i| i.category >= self.cats.len()) {
                return Err(Error::IndexOutOfRange {
                    op: "pool",
                    index: i.category,
                    len: self.cats.len(),
                });
            }
        }
        self.pool = pool;
        Ok(self)
    }

    /// The K-shot fine-tuning episode of this run.
    pub fn fine_tune_episode(&self, cfg: &RunConfig) -> Result<Episode> {
        let sel = self.spec.kshot(&self.pool, cfg.shots, cfg.seed)?;
        crate::synth::fine_tune_episode(&self.spec, &self.pool, &sel, cfg.shots, cfg.seed)
    }

    pub fn eval_images(&self, cfg: &RunConfig) -> Vec<QueryImage> {
        self.spec.eval_images(cfg.eval_images, cfg.seed)
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
    /// Fine-tuning K-shot support (all categories).
    pub support: Vec<SupportEntry>,
    /// Base-category report at the end of the base phase.
    pub base_phase_report: Option<EvalReport>,
}

/// Base training on base categories, then K-shot fine-tuning on all of them.
/// `on_step` sees every loss record as it is produced.
pub fn train<F: FnMut(&LossRecord)>(
    cfg: &RunConfig,
    setup: &Setup,
    eval_base_phase: bool,
    mut on_step: F,
) -> Result<TrainOutcome> {
    let Setup { cats, spec, graph, .. } = setup;
    let mut model = Model::init(cfg, cats.len());
    let mut log = Vec::with_capacity(cfg.base_steps + cfg.fine_steps);
    let base = cats.base_indices();
    let base_graph = graph.restrict(&base)?;

    let mut base_spec = spec.clone();
    base_spec.params.queries_per_episode = cfg.batch;
    let mut sgd = SgdState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay);
    let fixed = if cfg.full_batch {
        Some(synth_generate(
            &base_spec,
            Phase::BaseTraining,
            1,
            episode_seed(cfg.seed, 0),
        )?)
    } else {
        None
    };
    for step in 0..cfg.base_steps {
        let fresh;
        let ep = match &fixed {
            Some(e) => e,
            None => {
                fresh = synth_generate(&base_spec, Phase::BaseTraining, 1, episode_seed(cfg.seed, step))?;
                &fresh
            }
        };
        let queries: Vec<&QueryImage> = ep.queries.iter().collect();
        let values = train_step(
            &mut model,
            &mut sgd,
            &ep.support,
            &queries,
            cats,
            &base,
            &base_graph,
            cfg.skip,
            step + 1,
        )?;
        let rec = LossRecord {
            phase: Phase::BaseTraining,
            step: step + 1,
            values,
        };
        on_step(&rec);
        log.push(rec);
    }

    let ft = setup.fine_tune_episode(cfg)?;
    let base_phase_report = if eval_base_phase {
        let images = setup.eval_images(cfg);
        Some(evaluate_model(&model, &ft.support, cats, &base, &base_graph, &images, cfg.threshold)?.0)
    } else {
        None
    };

    let all: Vec<usize> = (0..cats.len()).collect();
    let mut sgd = SgdState::new(cfg.fine_lr, cfg.momentum, cfg.weight_decay);
    let mut rng = rng::stream(cfg.seed, Stream::Sampling);
    for step in 0..cfg.fine_steps {
        let idx = batch_indices(ft.queries.len(), cfg.batch, &mut rng);
        let queries: Vec<&QueryImage> = idx.iter().map(|&i| &ft.queries[i]).collect();
        let global = cfg.base_steps + step + 1;
        let values = train_step(
            &mut model,
            &mut sgd,
            &ft.support,
            &queries,
            cats,
            &all,
            graph,
            cfg.skip,
            global,
        )?;
        let rec = LossRecord {
            phase: Phase::FineTuning,
            step: global,
            values,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome {
        model,
        log,
        support: ft.support,
        base_phase_report,
    })
}

/// Report of a trained model on the held-out images over all categories.
pub fn evaluate_run(cfg: &RunConfig, setup: &Setup, model: &Model) -> Result<EvalReport> {
    let ft = setup.fine_tune_episode(cfg)?;
    let images = setup.eval_images(cfg);
    let all: Vec<usize> = (0..setup.cats.len()).collect();
    Ok(evaluate_model(
        model,
        &ft.support,
        &setup.cats,
        &all,
        &setup.graph,
        &images,
        cfg.threshold,
    )?
    .0)
}

/// Result of one ablation cell.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellResult {
    pub seed: u64,
    pub skip: bool,
    pub graph: GraphKind,
    pub novel: f64,
    pub base: f64,
    pub all: f64,
    pub base_phase_base: Option<f64>,
}

/// Trains and evaluates one (seed, skip, graph) cell.
pub fn run_cell(cfg: &RunConfig, semantic: &MetaGraph, eval_base_phase: bool) -> Result<CellResult> {
    let setup = Setup::new(cfg, semantic)?;
    let out = train(cfg, &setup, eval_base_phase, |_| {})?;
    let report = evaluate_run(cfg, &setup, &out.model)?;
    Ok(CellResult {
        seed: cfg.seed,
        skip: cfg.skip,
        graph: cfg.graph,
        novel: report.novel.unwrap_or(0.0),
        base: report.base.unwrap_or(0.0),
        all: report.all.unwrap_or(0.0),
        base_phase_base: out.base_phase_report.and_then(|r| r.base),
    })
}
