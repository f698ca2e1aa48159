//! Recall@K retrieval evaluation over float and binarized embeddings.
//!
//! Float embeddings are ranked by descending cosine, binary codes by
//! ascending Hamming distance. Ties go to the lower gallery index. A query
//! counts as a hit at K when any of its top-K gallery items shares its label.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{EvalSplit, FeatureBundle};
use crate::tensor::{self, Matrix};
use crate::trainer::Checkpoint;

/// The K values reported by default.
pub const DEFAULT_KS: [usize; 7] = [1, 5, 10, 20, 30, 40, 50];

/// Sign bits of an embedding matrix, packed into 64-bit words.
///
/// Bit `j` of a row lives in word `j / 64` at bit position `j % 64` (least
/// significant first). Padding bits are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        self.row(i)[j / 64] >> (j % 64) & 1 == 1
    }

    /// Number of differing bits between row `i` of `self` and row `j` of `other`.
    pub fn hamming(&self, i: usize, other: &BitMatrix, j: usize) -> u32 {
        self.row(i)
            .iter()
            .zip(other.row(j))
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// A bit is set iff the value is strictly positive.
pub fn binarize(e: &Matrix) -> BitMatrix {
    let words_per_row = e.cols().div_ceil(64);
    let mut words = vec![0u64; e.rows() * words_per_row];
    for (i, row) in e.iter_rows().enumerate() {
        let out = &mut words[i * words_per_row..(i + 1) * words_per_row];
        for (j, &v) in row.iter().enumerate() {
            if v > 0.0 {
                out[j / 64] |= 1 << (j % 64);
            }
        }
    }
    BitMatrix {
        rows: e.rows(),
        cols: e.cols(),
        words_per_row,
        words,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalMode {
    Float,
    Binary,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RetrievalMode::Float => "float",
            RetrievalMode::Binary => "binary",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    /// Fraction of queries hit at each K, parallel to `ks`.
    pub recall: Vec<f64>,
    pub mode: RetrievalMode,
    pub num_queries: usize,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    /// One `recall@K=<value>` line per K.
    pub fn machine_lines(&self) -> Vec<String> {
        self.ks
            .iter()
            .zip(&self.recall)
            .map(|(k, r)| format!("recall@{k}={r:.6}"))
            .collect()
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode: {} ({} queries)", self.mode, self.num_queries)?;
        writeln!(f, "{:>10} | {:>8}", "Recall@K", "%")?;
        writeln!(f, "{:->10}-+-{:->8}", "", "")?;
        for (k, r) in self.ks.iter().zip(&self.recall) {
            writeln!(f, "{k:>10} | {:>8.2}", r * 100.0)?;
        }
        Ok(())
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "K values must be positive and strictly ascending, got {ks:?}"
        )));
    }
    Ok(())
}

/// Zero-based rank of the best same-label gallery item, or `None` if the
/// label is absent. `better(a, b)` is true when score `a` ranks above `b`.
fn first_hit_rank<S: Copy + PartialEq>(
    scores: &[S],
    gallery_labels: &[usize],
    label: usize,
    better: impl Fn(S, S) -> bool,
) -> Option<usize> {
    let mut best: Option<(usize, S)> = None;
    for (j, (&s, &l)) in scores.iter().zip(gallery_labels).enumerate() {
        if l == label && best.is_none_or(|(_, b)| better(s, b)) {
            best = Some((j, s));
        }
    }
    let (jstar, sstar) = best?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| better(s, sstar) || (s == sstar && j < jstar))
        .count();
    Some(ahead)
}

/// Recall@K for each K in `ks` (strictly ascending).
pub fn recall_at_k(
    query: &Matrix,
    query_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
    ks: &[usize],
    mode: RetrievalMode,
) -> Result<RetrievalReport> {
    check_ks(ks)?;
    if gallery.rows() == 0 {
        return Err(Error::EmptyGallery);
    }
    if query.cols() != gallery.cols() {
        return Err(Error::DimMismatch(format!(
            "query embeddings are {}-d, gallery embeddings are {}-d",
            query.cols(),
            gallery.cols()
        )));
    }
    if query.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::DimMismatch(
            "label count differs from embedding count".into(),
        ));
    }

    let ranks: Vec<Option<usize>> = match mode {
        RetrievalMode::Float => (0..query.rows())
            .into_par_iter()
            .map(|i| {
                let q = query.row(i);
                let scores: Vec<f64> = gallery.iter_rows().map(|g| tensor::dot(q, g)).collect();
                first_hit_rank(&scores, gallery_labels, query_labels[i], |a, b| a > b)
            })
            .collect(),
        RetrievalMode::Binary => {
            let qb = binarize(query);
            let gb = binarize(gallery);
            (0..query.rows())
                .into_par_iter()
                .map(|i| {
                    let scores: Vec<u32> = (0..gb.rows()).map(|j| qb.hamming(i, &gb, j)).collect();
                    first_hit_rank(&scores, gallery_labels, query_labels[i], |a, b| a < b)
                })
                .collect()
        }
    };

    let n = query.rows();
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            if n == 0 {
                0.0
            } else {
                hits as f64 / n as f64
            }
        })
        .collect();
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        recall,
        mode,
        num_queries: n,
    })
}

/// Runs the checkpoint's head over a bundle.
pub fn embed_dataset(ckpt: &Checkpoint, bundle: &FeatureBundle) -> Result<Matrix> {
    ckpt.head.forward(&bundle.features)
}

/// Float and binary reports on the same embeddings.
pub fn compare_float_binary(
    ckpt: &Checkpoint,
    split: &EvalSplit,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    let q = embed_dataset(ckpt, &split.query)?;
    let g = embed_dataset(ckpt, &split.gallery)?;
    let run = |mode| recall_at_k(&q, &split.query.labels, &g, &split.gallery.labels, ks, mode);
    Ok((run(RetrievalMode::Float)?, run(RetrievalMode::Binary)?))
}
