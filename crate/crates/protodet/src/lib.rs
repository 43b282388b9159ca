//! File formats, configuration and the command-line harness around
//! `protodet-core`.

pub mod atomic;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod embeddings;
pub mod episode_io;
pub mod error;
pub mod record;
pub mod report;
pub mod voc;

pub use config::Settings;
pub use error::{AppError, AppResult, ExitKind};
