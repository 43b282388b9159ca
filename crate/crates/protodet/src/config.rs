//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use protodet_core::pipeline::{GraphKind, RunConfig};

use crate::error::{AppError, AppResult};

/// Everything a command needs: the numerical run settings plus paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    /// Word-vector file; the bundled vectors are used when absent.
    pub embeddings: Option<PathBuf>,
    /// Alias table; the bundled table is used when absent.
    pub aliases: Option<PathBuf>,
    /// Directory of VOC XML annotations used as the fine-tuning image pool.
    pub voc_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Seeds per ablation cell.
    pub ablate_seeds: usize,
    /// Write fine-tuning and evaluation episodes next to the other outputs.
    pub dump_episodes: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            embeddings: None,
            aliases: None,
            voc_dir: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            ablate_seeds: 20,
            dump_episodes: false,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
}

fn on_off(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("{key}: expected on or off, got `{value}`")),
    }
}

pub fn parse_graph(value: &str) -> Result<GraphKind, String> {
    match value {
        "semantic" => Ok(GraphKind::Semantic),
        "random" => Ok(GraphKind::Random),
        _ => Err(format!("graph: expected semantic or random, got `{value}`")),
    }
}

fn graph_name(g: GraphKind) -> &'static str {
    match g {
        GraphKind::Semantic => "semantic",
        GraphKind::Random => "random",
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl Settings {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let r = &mut self.run;
        let s = &mut r.synth;
        match key {
            "seed" => r.seed = num(key, value)?,
            "split" => r.split = num(key, value)?,
            "shots" => r.shots = num(key, value)?,
            "s_dim" => r.s_dim = num(key, value)?,
            "f_dim" => s.feature_dim = num(key, value)?,
            "threshold" => r.threshold = num(key, value)?,
            "base_lr" => r.base_lr = num(key, value)?,
            "fine_lr" => r.fine_lr = num(key, value)?,
            "momentum" => r.momentum = num(key, value)?,
            "weight_decay" => r.weight_decay = num(key, value)?,
            "batch" => r.batch = num(key, value)?,
            "base_steps" => r.base_steps = num(key, value)?,
            "fine_steps" => r.fine_steps = num(key, value)?,
            "skip" => r.skip = on_off(key, value)?,
            "graph" => r.graph = parse_graph(value)?,
            "full_batch" => r.full_batch = on_off(key, value)?,
            "eval_images" => r.eval_images = num(key, value)?,
            "noise" => s.noise = num(key, value)?,
            "support_noise" => s.support_noise = num(key, value)?,
            "cell_noise" => s.cell_noise = num(key, value)?,
            "density" => s.density = num(key, value)?,
            "amplitude" => s.amplitude = num(key, value)?,
            "sharpness" => s.sharpness = num(key, value)?,
            "base_mixing" => s.base_mixing = num(key, value)?,
            "background_scale" => s.background_scale = num(key, value)?,
            "min_instances" => s.min_instances = num(key, value)?,
            "max_instances" => s.max_instances = num(key, value)?,
            "rois_per_image" => s.rois_per_image = num(key, value)?,
            "fg_per_instance" => s.fg_per_instance = num(key, value)?,
            "pool_size" => s.pool_size = num(key, value)?,
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "aliases" => self.aliases = Some(PathBuf::from(value)),
            "voc_dir" => self.voc_dir = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "ablate_seeds" => self.ablate_seeds = num(key, value)?,
            "dump_episodes" => self.dump_episodes = on_off(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> AppResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Config(format!("{}:{}: expected key = value", origin.display(), i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| AppError::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        let mut s = Self::default();
        s.apply_text(&text, path)?;
        Ok(s)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.txt"))
    }

    /// Every key with its resolved value, in a stable order; parses back to
    /// the same settings.
    pub fn render(&self) -> String {
        let r = &self.run;
        let s = &r.synth;
        let mut out = String::from("# resolved configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", r.seed.to_string());
        kv("split", r.split.to_string());
        kv("shots", r.shots.to_string());
        kv("s_dim", r.s_dim.to_string());
        kv("f_dim", s.feature_dim.to_string());
        kv("threshold", r.threshold.to_string());
        kv("base_lr", r.base_lr.to_string());
        kv("fine_lr", r.fine_lr.to_string());
        kv("momentum", r.momentum.to_string());
        kv("weight_decay", r.weight_decay.to_string());
        kv("batch", r.batch.to_string());
        kv("base_steps", r.base_steps.to_string());
        kv("fine_steps", r.fine_steps.to_string());
        kv("skip", switch(r.skip).into());
        kv("graph", graph_name(r.graph).into());
        kv("full_batch", switch(r.full_batch).into());
        kv("eval_images", r.eval_images.to_string());
        kv("noise", s.noise.to_string());
        kv("support_noise", s.support_noise.to_string());
        kv("cell_noise", s.cell_noise.to_string());
        kv("density", s.density.to_string());
        kv("amplitude", s.amplitude.to_string());
        kv("sharpness", s.sharpness.to_string());
        kv("base_mixing", s.base_mixing.to_string());
        kv("background_scale", s.background_scale.to_string());
        kv("min_instances", s.min_instances.to_string());
        kv("max_instances", s.max_instances.to_string());
        kv("rois_per_image", s.rois_per_image.to_string());
        kv("fg_per_instance", s.fg_per_instance.to_string());
        kv("pool_size", s.pool_size.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        if let Some(p) = path(&self.embeddings) {
            kv("embeddings", p);
        }
        if let Some(p) = path(&self.aliases) {
            kv("aliases", p);
        }
        if let Some(p) = path(&self.voc_dir) {
            kv("voc_dir", p);
        }
        kv("out", self.out.display().to_string());
        if let Some(p) = path(&self.checkpoint) {
            kv("checkpoint", p);
        }
        kv("ablate_seeds", self.ablate_seeds.to_string());
        kv("dump_episodes", switch(self.dump_episodes).into());
        out
    }
}
