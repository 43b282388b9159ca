//! Episode dumps: JSON carrying the generator spec, the seed and every
//! feature payload, so a failing episode can be reloaded and replayed.

use protodet_core::episode::Episode;
use protodet_core::synth::SyntheticTaskSpec;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "protodet-episode";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDump {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub spec: SyntheticTaskSpec,
    pub episode: Episode,
}

impl EpisodeDump {
    pub fn new(spec: &SyntheticTaskSpec, seed: u64, episode: &Episode) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            seed,
            spec: spec.clone(),
            episode: episode.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("episode dumps serialise");
        s.push('\n');
        s
    }

    /// Parses and validates a dump: format tag, version and episode
    /// consistency with the embedded categories.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let d: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if d.format != FORMAT {
            return Err(format!("format tag `{}` is not `{FORMAT}`", d.format));
        }
        if d.version != VERSION {
            return Err(format!("unsupported version {}", d.version));
        }
        d.episode.validate(&d.spec.categories).map_err(|e| e.to_string())?;
        Ok(d)
    }
}
