//! Query construction from text or image conditions, token matching, and the
//! mosaic-training ambiguity filter.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;
use crate::boxgeom::BBox;
use crate::encoder::{words, EncoderError, EncoderInput, EncoderOutput, SyntheticEncoder};
use crate::util::{dot, l2_norm};

static STOPWORDS: LazyLock<BTreeSet<String>> = LazyLock::new(|| parse_word_list(include_str!("../data/stopwords.txt")));

const DEFAULT_CONCEPTS: &str = include_str!("../data/concepts.txt");

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("no query embeddings; use query mode 'none' for base-mode decoding")]
    EmptyQuery,
    #[error("key mode found no lexicon keywords in '{0}'")]
    NoKeywords(String),
    #[error("query mode '{0}' needs a text condition")]
    NeedsText(QueryMode),
    #[error("query mode 'image' needs a query image")]
    NeedsImage,
    #[error("query dimension {query} differs from embedding dimension {dim}")]
    Dimension { query: usize, dim: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Full text plus one embedding per extracted keyword.
    #[default]
    Both,
    Main,
    Key,
    /// No matching: the decoder runs on its learnable queries alone.
    None,
    Image,
}

impl QueryMode {
    pub const ALL: [QueryMode; 5] = [
        QueryMode::Both,
        QueryMode::Main,
        QueryMode::Key,
        QueryMode::None,
        QueryMode::Image,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Both => "both",
            QueryMode::Main => "main",
            QueryMode::Key => "key",
            QueryMode::None => "none",
            QueryMode::Image => "image",
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown query mode '{s}' (expected both, main, key, none or image)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub mode: QueryMode,
    pub embeddings: Vec<Vec<f64>>,
    /// Text fragments behind each embedding; empty for image queries.
    pub source_strings: Vec<String>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub token_indices: Vec<usize>,
    /// `W x D` selected image tokens.
    pub tokens: Tensor,
    pub boxes: Vec<BBox>,
    pub similarities: Vec<f64>,
    /// Set when the ambiguity filter fell back to the target cell itself.
    pub fallback: bool,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }

    fn from_indices(enc: &EncoderOutput, indices: Vec<usize>, similarities: Vec<f64>) -> Selection {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| enc.image_tokens.row(i).to_vec()).collect();
        let dim = enc.image_tokens.cols();
        let tokens = if rows.is_empty() {
            Tensor::zeros(vec![0, dim])
        } else {
            Tensor::from_rows(&rows).expect("rows share width")
        };
        Selection {
            boxes: indices.iter().map(|&i| enc.initial_boxes[i]).collect(),
            token_indices: indices,
            tokens,
            similarities,
            fallback: false,
        }
    }
}

pub fn parse_word_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

pub fn read_word_list(path: &Path) -> Result<BTreeSet<String>, QueryError> {
    std::fs::read_to_string(path)
        .map(|t| parse_word_list(&t))
        .map_err(|source| QueryError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn stopwords() -> &'static BTreeSet<String> {
    &STOPWORDS
}

/// Built-in concept ids, used as vocabulary and lexicon when none is given.
pub fn default_concepts() -> Vec<String> {
    parse_word_list(DEFAULT_CONCEPTS).into_iter().collect()
}

/// Lexicon words of `text` in order of first appearance, stop-words removed
/// and a trailing plural `s` folded.
pub fn extract_keywords(text: &str, lexicon: &BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in words(text) {
        if STOPWORDS.contains(&w) {
            continue;
        }
        let folded = if lexicon.contains(&w) {
            Some(w)
        } else {
            w.strip_suffix('s').filter(|s| lexicon.contains(*s)).map(str::to_string)
        };
        if let Some(k) = folded {
            if !out.contains(&k) {
                out.push(k);
            }
        }
    }
    out
}

/// The condition a query set is built from.
#[derive(Debug, Clone, Copy)]
pub enum Condition<'a> {
    Text(&'a str),
    Image(&'a EncoderInput),
}

pub fn build_queries(
    mode: QueryMode,
    condition: Condition<'_>,
    lexicon: &BTreeSet<String>,
    encoder: &SyntheticEncoder,
) -> Result<QuerySet, QueryError> {
    let mut set = QuerySet {
        mode,
        embeddings: Vec::new(),
        source_strings: Vec::new(),
    };
    let push = |set: &mut QuerySet, source: String, e: Vec<f64>| {
        if !set.embeddings.iter().any(|x| same_vector(x, &e)) {
            set.embeddings.push(e);
            set.source_strings.push(source);
        }
    };
    match (mode, condition) {
        (QueryMode::None, _) => {}
        (QueryMode::Image, Condition::Image(img)) => {
            set.embeddings.push(encoder.embed_query_image(img)?);
        }
        (QueryMode::Image, Condition::Text(_)) => return Err(QueryError::NeedsImage),
        (m, Condition::Image(_)) => return Err(QueryError::NeedsText(m)),
        (m, Condition::Text(text)) => {
            if matches!(m, QueryMode::Both | QueryMode::Main) {
                push(&mut set, text.to_string(), encoder.embed_text(text)?);
            }
            if matches!(m, QueryMode::Both | QueryMode::Key) {
                let keys = extract_keywords(text, lexicon);
                if m == QueryMode::Key && keys.is_empty() {
                    return Err(QueryError::NoKeywords(text.to_string()));
                }
                for k in keys {
                    let e = encoder.embed_text(&k)?;
                    push(&mut set, k, e);
                }
            }
        }
    }
    Ok(set)
}

fn same_vector(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
}

/// Top-1 token per query by cosine similarity; ties go to the lowest index.
pub fn match_queries(queries: &QuerySet, enc: &EncoderOutput) -> Result<Selection, QueryError> {
    if queries.is_empty() {
        return Err(QueryError::EmptyQuery);
    }
    let dim = enc.class_embeddings.cols();
    let mut indices = Vec::with_capacity(queries.len());
    let mut sims = Vec::with_capacity(queries.len());
    for q in &queries.embeddings {
        if q.len() != dim {
            return Err(QueryError::Dimension { query: q.len(), dim });
        }
        let qn = l2_norm(q);
        let mut best = (0usize, f64::NEG_INFINITY);
        for n in 0..enc.num_tokens() {
            let row = enc.class_embeddings.row(n);
            let denom = qn * l2_norm(row);
            let s = if denom > 0.0 { dot(q, row) / denom } else { 0.0 };
            if s > best.1 {
                best = (n, s);
            }
        }
        indices.push(best.0);
        sims.push(best.1);
    }
    Ok(Selection::from_indices(enc, indices, sims))
}

/// Drops selected boxes that are centered outside the target mosaic cell or
/// hold less than half of `best_gt`'s area. Never returns an empty selection.
pub fn filter_training_selection(
    sel: &Selection,
    enc: &EncoderOutput,
    best_gt: &BBox,
    target_region: &BBox,
) -> Selection {
    let in_cell = |b: &BBox| target_region.contains_point(b.cx, b.cy);
    let gt_area = best_gt.area();
    let keep: Vec<usize> = (0..sel.len())
        .filter(|&i| {
            let b = &sel.boxes[i];
            let covered = if gt_area > 0.0 { b.intersection_area(best_gt) / gt_area } else { 0.0 };
            in_cell(b) && covered >= 0.5
        })
        .collect();
    let chosen = if !keep.is_empty() {
        keep
    } else {
        // highest similarity among entries centered in the cell, lowest index on ties
        let mut best: Option<usize> = None;
        for i in (0..sel.len()).filter(|&i| in_cell(&sel.boxes[i])) {
            if best.is_none_or(|b| sel.similarities[i] > sel.similarities[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(i) => vec![i],
            None => {
                let token = enc.token_at(target_region.cx, target_region.cy);
                let mut out = Selection::from_indices(enc, vec![token], vec![0.0]);
                out.boxes = vec![*target_region];
                out.fallback = true;
                return out;
            }
        }
    };
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| sel.tokens.row(i).to_vec()).collect();
    Selection {
        token_indices: chosen.iter().map(|&i| sel.token_indices[i]).collect(),
        tokens: Tensor::from_rows(&rows).expect("rows share width"),
        boxes: chosen.iter().map(|&i| sel.boxes[i]).collect(),
        similarities: chosen.iter().map(|&i| sel.similarities[i]).collect(),
        fallback: false,
    }
}
