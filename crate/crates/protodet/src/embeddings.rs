//! Streaming reader for whitespace-separated word-vector files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use protodet_core::graph::{AliasTable, EmbeddingParser, WordEmbeddingTable};

use crate::error::{AppError, AppResult};

/// Reads `token v1 … vd` lines, keeping only tokens in `filter` when given.
/// Dimension mismatches are reported with their 1-based line number.
pub fn read_embeddings<R: BufRead>(
    reader: R,
    filter: Option<BTreeSet<String>>,
    path: &Path,
) -> AppResult<WordEmbeddingTable> {
    let mut parser = EmbeddingParser::new(filter);
    for line in reader.lines() {
        let line = line.map_err(|e| AppError::io(path, e))?;
        parser
            .push_line(&line)
            .map_err(|e| AppError::data(path, e.to_string()))?;
    }
    Ok(parser.finish())
}

/// Loads the vectors of every token named in `aliases`.
pub fn load_embedding_file(path: &Path, aliases: &AliasTable) -> AppResult<WordEmbeddingTable> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let filter = aliases.tokens().map(str::to_owned).collect();
    read_embeddings(BufReader::new(file), Some(filter), path)
}
