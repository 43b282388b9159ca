//! Category meta-graph built from word-embedding cosine similarity.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// The bundled alias table (`data/aliases.txt`).
pub const DEFAULT_ALIASES: &str = include_str!("../data/aliases.txt");

/// Bundled 100-dimensional GloVe vectors of the twenty category tokens.
pub const BUNDLED_EMBEDDINGS: &str = include_str!("../data/glove-voc20-100d.txt");

/// Word vectors for a set of tokens, all of one dimension and nonzero norm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordEmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl WordEmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Result<&[f64]> {
        self.vectors
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingToken(token.to_string()))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    /// Inserts a vector, enforcing the table dimension and a nonzero norm.
    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if self.vectors.is_empty() && self.dim == 0 {
            self.dim = vector.len();
        }
        if vector.len() != self.dim {
            return Err(Error::EmbeddingParse {
                line: 0,
                reason: format!("expected {} values, found {}", self.dim, vector.len()),
            });
        }
        if math::norm(&vector) == 0.0 {
            return Err(Error::ZeroNorm(token.to_string()));
        }
        self.vectors.insert(token.to_string(), vector);
        Ok(())
    }
}

/// Streaming parser for the `token v1 v2 ... vd` text format.
///
/// The dimension is fixed by the first non-blank line; every later line must
/// agree, including lines whose token is filtered out.
#[derive(Debug, Default)]
pub struct EmbeddingParser {
    filter: Option<BTreeSet<String>>,
    table: WordEmbeddingTable,
    dim: Option<usize>,
    line: usize,
}

impl EmbeddingParser {
    pub fn new(filter: Option<BTreeSet<String>>) -> Self {
        Self {
            filter,
            ..Self::default()
        }
    }

    pub fn push_line(&mut self, line: &str) -> Result<()> {
        self.line += 1;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            return Ok(());
        };
        let keep = self.filter.as_ref().is_none_or(|f| f.contains(token));
        let line_no = self.line;
        let count = if keep {
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| Error::EmbeddingParse {
                        line: line_no,
                        reason: format!("invalid number `{p}`"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::EmbeddingParse {
                    line: line_no,
                    reason: "non-finite value".into(),
                });
            }
            self.check_dim(values.len())?;
            if math::norm(&values) == 0.0 {
                return Err(Error::ZeroNorm(token.to_string()));
            }
            self.table.dim = values.len();
            self.table.vectors.insert(token.to_string(), values);
            return Ok(());
        } else {
            parts.count()
        };
        self.check_dim(count)
    }

    fn check_dim(&mut self, n: usize) -> Result<()> {
        match self.dim {
            None if n == 0 => Err(Error::EmbeddingParse {
                line: self.line,
                reason: "no vector values".into(),
            }),
            None => {
                self.dim = Some(n);
                Ok(())
            }
            Some(d) if d != n => Err(Error::EmbeddingParse {
                line: self.line,
                reason: format!("expected {d} values, found {n}"),
            }),
            Some(_) => Ok(()),
        }
    }

    pub fn finish(mut self) -> WordEmbeddingTable {
        if let Some(d) = self.dim {
            self.table.dim = d;
        }
        self.table
    }
}

/// Parses an embedding text stream, keeping only tokens in `filter` when given.
pub fn load_embeddings<'a, I>(lines: I, filter: Option<&BTreeSet<String>>) -> Result<WordEmbeddingTable>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut parser = EmbeddingParser::new(filter.cloned());
    for line in lines {
        parser.push_line(line)?;
    }
    Ok(parser.finish())
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AliasEntry {
    canonical: String,
    token: String,
    aliases: Vec<String>,
}

/// Maps detector category names and their spellings to canonical names and
/// embedding tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasTable {
    entries: Vec<AliasEntry>,
}

impl Default for AliasTable {
    fn default() -> Self {
        Self::parse(DEFAULT_ALIASES).expect("bundled alias table is well formed")
    }
}

impl AliasTable {
    /// Parses `canonical token [alias...]` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let canonical = parts.next().unwrap().to_string();
            let token = parts
                .next()
                .ok_or_else(|| Error::Config(format!("alias table line {}: missing embedding token", i + 1)))?;
            entries.push(AliasEntry {
                canonical,
                token: token.to_string(),
                aliases: parts.map(str::to_string).collect(),
            });
        }
        Ok(Self { entries })
    }

    fn find(&self, name: &str) -> Option<&AliasEntry> {
        self.entries.iter().find(|e| e.canonical == name).or_else(|| {
            self.entries
                .iter()
                .find(|e| e.token == name || e.aliases.iter().any(|a| a == name))
        })
    }

    fn unknown(&self, name: &str) -> Error {
        let known: Vec<&str> = self.entries.iter().map(|e| e.canonical.as_str()).collect();
        Error::UnknownCategory {
            name: name.to_string(),
            known: known.join(", "),
        }
    }

    /// Embedding token for a category name or any of its spellings.
    pub fn category_token(&self, name: &str) -> Result<&str> {
        self.find(name)
            .map(|e| e.token.as_str())
            .ok_or_else(|| self.unknown(name))
    }

    /// Canonical detector name for any known spelling.
    pub fn canonical_name(&self, name: &str) -> Result<&str> {
        self.find(name)
            .map(|e| e.canonical.as_str())
            .ok_or_else(|| self.unknown(name))
    }

    /// Canonical names in table order.
    pub fn canonical_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.canonical.as_str())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.token.as_str())
    }
}

/// The twenty VOC categories in canonical order.
pub const VOC_CATEGORIES: [&str; 20] = [
    "aero", "bike", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "table", "dog", "horse", "mbike",
    "person", "plant", "sheep", "sofa", "train", "tv",
];

/// Novel categories of the three standard base/novel splits.
pub const VOC_NOVEL_SPLITS: [[&str; 5]; 3] = [
    ["bird", "bus", "cow", "mbike", "sofa"],
    ["aero", "bottle", "cow", "horse", "sofa"],
    ["boat", "cat", "mbike", "sheep", "sofa"],
];

/// Ordered categories with their base/novel designation.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CategorySet {
    names: Vec<String>,
    novel: Vec<bool>,
    split: u8,
}

impl CategorySet {
    pub fn new(names: Vec<String>, novel: Vec<bool>, split: u8) -> Result<Self> {
        if names.len() != novel.len() {
            return Err(Error::Config("category names and novel flags differ in length".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("duplicate category name".into()));
        }
        Ok(Self { names, novel, split })
    }

    /// All twenty VOC categories with the novel set of split 1, 2 or 3.
    pub fn voc_split(split: u8) -> Result<Self> {
        let novel_names = VOC_NOVEL_SPLITS
            .get((split as usize).wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("split must be 1, 2 or 3, got {split}")))?;
        let names = VOC_CATEGORIES.iter().map(|s| s.to_string()).collect();
        let novel = VOC_CATEGORIES.iter().map(|c| novel_names.contains(c)).collect();
        Self::new(names, novel, split)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn split(&self) -> u8 {
        self.split
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn is_novel(&self, i: usize) -> bool {
        self.novel[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.novel[i]).collect()
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.novel[i]).collect()
    }

    /// Sub-set keeping the listed indices in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            names: indices.iter().map(|&i| self.names[i].clone()).collect(),
            novel: indices.iter().map(|&i| self.novel[i]).collect(),
            split: self.split,
        }
    }

    pub fn base(&self) -> Self {
        self.subset(&self.base_indices())
    }
}

/// Symmetric category adjacency `A` and its row-normalised propagation `D⁻¹A`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGraph {
    adjacency: Tensor,
    propagation: Tensor,
    categories: Vec<String>,
}

impl MetaGraph {
    /// Wraps a symmetric nonnegative adjacency and normalises it.
    pub fn from_adjacency(adjacency: Tensor, categories: Vec<String>) -> Result<Self> {
        let c = categories.len();
        if adjacency.shape() != [c, c] {
            return Err(Error::Shape {
                op: "meta_graph",
                left: adjacency.shape().to_vec(),
                right: vec![c, c],
            });
        }
        let propagation = row_normalize(&adjacency)?;
        Ok(Self {
            adjacency,
            propagation,
            categories,
        })
    }

    /// Graph with no edges besides self loops; propagation is the identity.
    pub fn identity(categories: Vec<String>) -> Self {
        let c = categories.len();
        Self::from_adjacency(Tensor::identity(c), categories).expect("identity is valid")
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn propagation(&self) -> &Tensor {
        &self.propagation
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Induced sub-graph on `indices`, renormalised.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        let sub = self.adjacency.permute_rows(indices).select_cols(indices);
        let cats = indices.iter().map(|&i| self.categories[i].clone()).collect();
        Self::from_adjacency(Tensor::new(sub.shape().to_vec(), sub.into_data())?, cats)
    }

    /// Relabels nodes so that new node `k` is old node `order[k]`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        self.restrict(order)
    }

    /// Largest `|A[i][j] − A[j][i]|`.
    pub fn asymmetry(&self) -> f64 {
        let c = self.len();
        let mut worst = 0.0f64;
        for i in 0..c {
            for j in 0..c {
                worst = worst.max(math::abs(self.adjacency.get(i, j) - self.adjacency.get(j, i)));
            }
        }
        worst
    }

    /// Largest deviation of a propagation row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.len())
            .map(|i| math::abs(self.propagation.row(i).iter().sum::<f64>() - 1.0))
            .fold(0.0, f64::max)
    }
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    math::dot(a, b) / (math::norm(a) * math::norm(b))
}

/// Divides each row of a nonnegative square matrix by its sum.
pub fn row_normalize(a: &Tensor) -> Result<Tensor> {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = a.row(i);
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::DegenerateRow { row: i, sum });
        }
        out.extend(row.iter().map(|v| v / sum));
    }
    Tensor::matrix(r, c, out)
}

/// `A[i][j] = max(0, cos(wᵢ, wⱼ))`, each unordered pair computed once.
pub fn build_adjacency(table: &WordEmbeddingTable, cats: &CategorySet, aliases: &AliasTable) -> Result<MetaGraph> {
    if cats.is_empty() {
        return Err(Error::Empty { op: "build_adjacency" });
    }
    let vectors = cats
        .names()
        .iter()
        .map(|n| table.get(aliases.category_token(n)?))
        .collect::<Result<Vec<_>>>()?;
    let c = vectors.len();
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        a[i * c + i] = 1.0;
        for j in i + 1..c {
            let s = cosine(vectors[i], vectors[j]).max(0.0);
            a[i * c + j] = s;
            a[j * c + i] = s;
        }
    }
    MetaGraph::from_adjacency(Tensor::matrix(c, c, a)?, cats.names().to_vec())
}

/// Adjacency with off-diagonal entries drawn from uniform(0, 1), mirrored
/// from the upper triangle, unit diagonal.
pub fn random_adjacency(cats: &CategorySet, seed: u64) -> Result<MetaGraph> {
    let c = cats.len();
    let mut rng = rng::stream(seed, Stream::Graph);
    let mut a = vec![0.0; c * c];
    for i in 0..c {
        a[i * c + i] = 1.0;
        for j in i + 1..c {
            let u: f64 = rng.random();
            a[i * c + j] = u;
            a[j * c + i] = u;
        }
    }
    MetaGraph::from_adjacency(Tensor::matrix(c, c, a)?, cats.names().to_vec())
}
