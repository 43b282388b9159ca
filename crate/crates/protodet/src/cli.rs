//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};
use protodet_core::episode::Phase;
use protodet_core::graph::{
    build_adjacency, load_embeddings, random_adjacency, AliasTable, CategorySet, MetaGraph, BUNDLED_EMBEDDINGS,
};
use protodet_core::pipeline::{evaluate_model, train, GraphKind, LossRecord, Model, Setup};

use crate::atomic::write_atomic_str;
use crate::checkpoint;
use crate::config::{parse_graph, Settings};
use crate::embeddings::load_embedding_file;
use crate::episode_io::EpisodeDump;
use crate::error::{AppError, AppResult};
use crate::record::RunRecord;
use crate::report;
use crate::voc::load_voc_dir;

#[derive(Debug, Parser)]
#[command(
    name = "protodet",
    version,
    about = "Few-shot detection with graph-propagated prototypes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the semantic (or random) adjacency and propagation matrices.
    BuildGraph(Common),
    /// Base training then K-shot fine-tuning; writes the loss log,
    /// checkpoint, report and detections.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also dump the fine-tuning episode and the first base episode.
        #[arg(long)]
        dump_episodes: bool,
    },
    /// Evaluate a checkpoint on the held-out images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Matched-seed {skip on, off} x {semantic, random} ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at --seed.
        #[arg(long, value_name = "N")]
        seeds: Option<usize>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub split: Option<u8>,
    #[arg(long, value_name = "K")]
    pub shots: Option<usize>,
    #[arg(long, value_parser = ["semantic", "random"])]
    pub graph: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub skip: Option<String>,
    #[arg(long, value_name = "X")]
    pub threshold: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl Common {
    /// Config file first, then flags on top.
    pub fn settings(&self) -> AppResult<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        if let Some(v) = self.seed {
            s.run.seed = v;
        }
        if let Some(v) = self.split {
            s.run.split = v;
        }
        if let Some(v) = self.shots {
            s.run.shots = v;
        }
        if let Some(v) = &self.graph {
            s.run.graph = parse_graph(v).map_err(AppError::Usage)?;
        }
        if let Some(v) = &self.skip {
            s.run.skip = v == "on";
        }
        if let Some(v) = self.threshold {
            s.run.threshold = v;
        }
        if let Some(v) = &self.out {
            s.out = v.clone();
        }
        s.run.validate()?;
        Ok(s)
    }
}

/// Writes files atomically under one directory and records their checksums.
struct Outputs {
    dir: PathBuf,
    record: RunRecord,
    started: SystemTime,
}

impl Outputs {
    fn new(dir: &Path, command: &str, seed: u64) -> Self {
        let started = SystemTime::now();
        Self {
            dir: dir.to_path_buf(),
            record: RunRecord::new(command, seed, started),
            started,
        }
    }

    fn write(&mut self, name: &str, text: &str) -> AppResult<PathBuf> {
        let p = self.dir.join(name);
        write_atomic_str(&p, text)?;
        self.record.add(&p, text.as_bytes());
        Ok(p)
    }

    fn finish(mut self) -> AppResult<()> {
        self.record.finish(self.started);
        let p = self.dir.join("run.json");
        write_atomic_str(&p, &self.record.to_json())
    }
}

pub fn aliases(s: &Settings) -> AppResult<AliasTable> {
    match &s.aliases {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
            AliasTable::parse(&text).map_err(|e| AppError::data(p, e.to_string()))
        }
        None => Ok(AliasTable::default()),
    }
}

/// Semantic meta-graph of the configured split, from the configured
/// embedding file or the bundled vectors.
pub fn semantic_graph(s: &Settings, cats: &CategorySet) -> AppResult<MetaGraph> {
    let aliases = aliases(s)?;
    let table = match &s.embeddings {
        Some(p) => load_embedding_file(p, &aliases)?,
        None => load_embeddings(BUNDLED_EMBEDDINGS.lines(), None)?,
    };
    let origin = s.embeddings.clone().unwrap_or_else(|| PathBuf::from("<bundled>"));
    build_adjacency(&table, cats, &aliases).map_err(|e| AppError::data(origin, e.to_string()))
}

fn setup(s: &Settings, semantic: &MetaGraph) -> AppResult<Setup> {
    let setup = Setup::new(&s.run, semantic)?;
    match &s.voc_dir {
        Some(dir) => {
            let pool = load_voc_dir(dir, &aliases(s)?, &setup.cats)?;
            Ok(setup.with_pool(pool)?)
        }
        None => Ok(setup),
    }
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::BuildGraph(c) => build_graph(&c.settings()?),
        Command::Train { common, dump_episodes } => {
            let mut s = common.settings()?;
            s.dump_episodes |= dump_episodes;
            run_train(&s)
        }
        Command::Eval { common, checkpoint } => {
            let mut s = common.settings()?;
            if checkpoint.is_some() {
                s.checkpoint = checkpoint;
            }
            run_eval(&s)
        }
        Command::Ablate { common, seeds } => {
            let mut s = common.settings()?;
            if let Some(n) = seeds {
                s.ablate_seeds = n;
            }
            run_ablate(&s)
        }
    }
}

fn build_graph(s: &Settings) -> AppResult<()> {
    let cats = CategorySet::voc_split(s.run.split)?;
    let g = match s.run.graph {
        GraphKind::Semantic => semantic_graph(s, &cats)?,
        GraphKind::Random => random_adjacency(&cats, s.run.seed)?,
    };
    let mut out = Outputs::new(&s.out, "build-graph", s.run.seed);
    out.write("config.txt", &s.render())?;
    let p = out.write("adjacency.csv", &report::adjacency_csv(&g))?;
    out.write("propagation.csv", &report::propagation_csv(&g))?;
    out.finish()?;
    println!("wrote {}", p.display());
    Ok(())
}

fn run_train(s: &Settings) -> AppResult<()> {
    let cats = CategorySet::voc_split(s.run.split)?;
    let semantic = semantic_graph(s, &cats)?;
    let setup = setup(s, &semantic)?;
    let mut out = Outputs::new(&s.out, "train", s.run.seed);
    out.write("config.txt", &s.render())?;
    if s.dump_episodes {
        let seed = protodet_core::pipeline::episode_seed(s.run.seed, 0);
        let mut base_spec = setup.spec.clone();
        base_spec.params.queries_per_episode = s.run.batch;
        let base = protodet_core::synth::synth_generate(&base_spec, Phase::BaseTraining, 1, seed)?;
        out.write(
            "episode-base-0.json",
            &EpisodeDump::new(&base_spec, seed, &base).to_json(),
        )?;
        let ft = setup.fine_tune_episode(&s.run)?;
        out.write(
            "episode-fine.json",
            &EpisodeDump::new(&setup.spec, s.run.seed, &ft).to_json(),
        )?;
    }
    let mut log: Vec<LossRecord> = Vec::new();
    let trained = train(&s.run, &setup, false, |r| log.push(*r));
    out.write("loss.csv", &report::loss_log_csv(&log))?;
    let trained = match trained {
        Ok(t) => t,
        Err(e) => {
            out.finish()?;
            return Err(e.into());
        }
    };
    out.write("checkpoint.txt", &checkpoint::render(&trained.model))?;
    let summary = evaluate_and_write(s, &setup, &trained.model, &trained.support, &mut out)?;
    out.finish()?;
    println!("{summary}");
    Ok(())
}

fn evaluate_and_write(
    s: &Settings,
    setup: &Setup,
    model: &Model,
    support: &[protodet_core::episode::SupportEntry],
    out: &mut Outputs,
) -> AppResult<String> {
    let images = setup.eval_images(&s.run);
    let all: Vec<usize> = (0..setup.cats.len()).collect();
    let (rep, results) = evaluate_model(
        model,
        support,
        &setup.cats,
        &all,
        &setup.graph,
        &images,
        s.run.threshold,
    )?;
    out.write("eval.csv", &report::eval_report_csv(&rep))?;
    out.write(
        "detections.csv",
        &report::detections_csv(&images, &results, &setup.cats),
    )?;
    Ok(report::summary_line(&rep))
}

fn run_eval(s: &Settings) -> AppResult<()> {
    let cats = CategorySet::voc_split(s.run.split)?;
    let semantic = semantic_graph(s, &cats)?;
    let setup = setup(s, &semantic)?;
    let path = s.checkpoint_path();
    let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    let mut model = Model::init(&s.run, cats.len());
    checkpoint::load_into(&mut model, &text).map_err(|m| AppError::data(&path, m))?;
    let ft = setup.fine_tune_episode(&s.run)?;
    let mut out = Outputs::new(&s.out, "eval", s.run.seed);
    out.write("config.txt", &s.render())?;
    let summary = evaluate_and_write(s, &setup, &model, &ft.support, &mut out)?;
    out.finish()?;
    println!("{summary}");
    Ok(())
}

fn run_ablate(s: &Settings) -> AppResult<()> {
    let cats = CategorySet::voc_split(s.run.split)?;
    let semantic = semantic_graph(s, &cats)?;
    let mut cells = Vec::new();
    for i in 0..s.ablate_seeds as u64 {
        for skip in [true, false] {
            for graph in [GraphKind::Semantic, GraphKind::Random] {
                let mut cfg = s.run.clone();
                cfg.seed = s.run.seed + i;
                cfg.skip = skip;
                cfg.graph = graph;
                let mut cell_settings = s.clone();
                cell_settings.run = cfg.clone();
                let setup = setup(&cell_settings, &semantic)?;
                let trained = train(&cfg, &setup, false, |_| {})?;
                let r = protodet_core::pipeline::evaluate_run(&cfg, &setup, &trained.model)?;
                cells.push(protodet_core::pipeline::CellResult {
                    seed: cfg.seed,
                    skip,
                    graph,
                    novel: r.novel.unwrap_or(0.0),
                    base: r.base.unwrap_or(0.0),
                    all: r.all.unwrap_or(0.0),
                    base_phase_base: None,
                });
            }
        }
    }
    let mut out = Outputs::new(&s.out, "ablate", s.run.seed);
    out.write("config.txt", &s.render())?;
    out.write("ablation.csv", &report::ablation_csv(&cells))?;
    let summary = report::ablation_summary(&cells);
    out.write("ablation-summary.csv", &summary)?;
    out.finish()?;
    print!("{summary}");
    Ok(())
}
