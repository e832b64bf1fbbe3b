// SPDX-License-Identifier: Apache-2.0

//! Library-wide pair scoring: which same-width, functionally different cell
//! types look alike.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align, similarity_score, Translation};
use crate::ingest::CellTypeInfo;
use crate::representative::Representative;

pub const HISTOGRAM_BIN_WIDTH: f64 = 0.02;
pub const HISTOGRAM_BINS: usize = 50;

/// Unordered pairs of equal width and different function, each ordered by
/// type id and the list sorted.
pub fn valid_pairs(library: &[CellTypeInfo]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (i, a) in library.iter().enumerate() {
        for b in &library[i + 1..] {
            if a.width == b.width && a.function_class != b.function_class {
                if a.type_id <= b.type_id {
                    out.push((a.type_id.clone(), b.type_id.clone()));
                } else {
                    out.push((b.type_id.clone(), a.type_id.clone()));
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub type_a: String,
    pub type_b: String,
    pub score: f64,
    pub match_count: usize,
    pub translation: Translation,
    pub instance_counts: (usize, usize),
}

/// Aligns two representatives and scores them. The result is ordered by type
/// id, whatever the argument order.
pub fn score_pair(rep_a: &Representative, rep_b: &Representative, r: f64) -> PairResult {
    let (a, b) = if rep_a.type_id <= rep_b.type_id { (rep_a, rep_b) } else { (rep_b, rep_a) };
    let alignment = align(&a.vias, &b.vias, r);
    PairResult {
        type_a: a.type_id.clone(),
        type_b: b.type_id.clone(),
        score: similarity_score(&a.vias, &b.vias, r),
        match_count: alignment.match_count,
        translation: alignment.translation,
        instance_counts: (a.build_meta.instance_count, b.build_meta.instance_count),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryAnalysis {
    pub node: String,
    /// Ascending by score, then `type_a`, then `type_b`.
    pub pairs: Vec<PairResult>,
    pub mean: Option<f64>,
    /// Counts of scores in `[k * 0.02, (k + 1) * 0.02)`; a score of exactly 1
    /// falls in the last bin.
    pub histogram: Vec<usize>,
    /// `(score, number of pairs scoring at most this)` at every distinct score.
    pub cumulative: Vec<(f64, usize)>,
}

pub fn histogram_bin(score: f64) -> usize {
    ((score / HISTOGRAM_BIN_WIDTH) as usize).min(HISTOGRAM_BINS - 1)
}

/// Ranks already-scored pairs and derives the summary statistics.
pub fn summarize(node: &str, mut pairs: Vec<PairResult>) -> LibraryAnalysis {
    pairs.sort_by(|x, y| {
        x.score
            .total_cmp(&y.score)
            .then_with(|| x.type_a.cmp(&y.type_a))
            .then_with(|| x.type_b.cmp(&y.type_b))
    });
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for p in &pairs {
        histogram[histogram_bin(p.score)] += 1;
    }
    let mut cumulative: Vec<(f64, usize)> = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        match cumulative.last_mut() {
            Some(last) if last.0 == p.score => last.1 = i + 1,
            _ => cumulative.push((p.score, i + 1)),
        }
    }
    let mean = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().map(|p| p.score).sum::<f64>() / pairs.len() as f64)
    };
    LibraryAnalysis {
        node: node.into(),
        pairs,
        mean,
        histogram,
        cumulative,
    }
}

/// Scores every valid pair of the library.
///
/// `library` supplies widths and functions; every type listed there needs a
/// representative. Pair scoring is independent per pair, so callers with a
/// thread pool can score [`valid_pairs`] themselves and call [`summarize`].
pub fn analyze_library(
    node: &str,
    library: &[CellTypeInfo],
    reps: &[Representative],
    r: f64,
) -> Result<LibraryAnalysis> {
    if reps.len() < 2 {
        return Err(Error::InvalidInput(alloc::format!(
            "library analysis needs at least two representatives, got {}",
            reps.len()
        )));
    }
    let lookup = |id: &str| {
        reps.iter()
            .find(|r| r.type_id == id)
            .ok_or_else(|| Error::MissingRepresentative(id.into()))
    };
    let pairs = valid_pairs(library)
        .iter()
        .map(|(a, b)| Ok(score_pair(lookup(a)?, lookup(b)?, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(node, pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub rank: usize,
    pub type_a: String,
    pub type_b: String,
    pub func_a: String,
    pub func_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub score: f64,
}

/// First `k` pairs of the ranking with function labels and instance counts.
pub fn top_k(analysis: &LibraryAnalysis, library: &[CellTypeInfo], k: usize) -> Vec<RankedPair> {
    let function = |id: &str| {
        library
            .iter()
            .find(|c| c.type_id == id)
            .map(|c| c.function_class.clone())
            .unwrap_or_default()
    };
    analysis
        .pairs
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, p)| RankedPair {
            rank: i + 1,
            type_a: p.type_a.clone(),
            type_b: p.type_b.clone(),
            func_a: function(&p.type_a),
            func_b: function(&p.type_b),
            n_a: p.instance_counts.0,
            n_b: p.instance_counts.1,
            score: p.score,
        })
        .collect()
}

/// Every type appearing in a pair scored at or below `threshold`, sorted.
pub fn emit_dont_use(analysis: &LibraryAnalysis, threshold: f64) -> Vec<String> {
    analysis
        .pairs
        .iter()
        .filter(|p| p.score <= threshold)
        .flat_map(|p| [p.type_a.clone(), p.type_b.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}
