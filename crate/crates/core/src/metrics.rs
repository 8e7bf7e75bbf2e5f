//! Alignment of paired embeddings and mean reciprocal rank.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_N_RANDOM: usize = 50_000;

/// How ties between the ground truth and another candidate are ranked.
pub const TIE_POLICY: &str = "ground_truth_wins";

fn check_pair_shapes(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Mean squared Euclidean distance between row-paired unit embeddings.
pub fn alignment_score(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_pair_shapes(a, b)?;
    linalg::check_unit_rows(a)?;
    linalg::check_unit_rows(b)?;
    if a.nrows() == 0 {
        return Err(Error::ShapeMismatch("no pairs".into()));
    }
    let sum: f64 = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| squared_distance(x, y))
        .sum();
    Ok(sum / a.nrows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub positive: f64,
    pub negative: f64,
    /// `negative - positive`
    pub diff: f64,
    /// Mismatched pairs scored for `negative`.
    pub n_random: usize,
    pub seed: u64,
    /// True when every mismatched pair was enumerated instead of sampled.
    pub exhaustive: bool,
}

/// Alignment over all positive pairs `(c_i, d_i)` and over `n_random`
/// uniformly drawn mismatched pairs `(c_i, d_j)`, `i ≠ j`. When `n_random`
/// covers at least every mismatched pair, they are enumerated exactly.
pub fn alignment_report(codes: ArrayView2<f64>, docs: ArrayView2<f64>, n_random: usize, seed: u64) -> Result<AlignmentReport> {
    check_pair_shapes(codes, docs)?;
    let m = codes.nrows();
    if m < 2 {
        return Err(Error::ShapeMismatch(format!(
            "alignment needs at least 2 pairs, got {m}"
        )));
    }
    if n_random == 0 {
        return Err(Error::InvalidConfig("n_random must be positive".into()));
    }
    let positive = alignment_score(codes, docs)?;

    let mismatched = m * (m - 1);
    let (negative, n_scored, exhaustive) = if n_random >= mismatched {
        let mut sum = 0.0;
        for i in 0..m {
            for j in (0..m).filter(|&j| j != i) {
                sum += squared_distance(codes.row(i), docs.row(j));
            }
        }
        (sum / mismatched as f64, mismatched, true)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        for _ in 0..n_random {
            let i = rng.random_range(0..m);
            let mut j = rng.random_range(0..m - 1);
            if j >= i {
                j += 1;
            }
            sum += squared_distance(codes.row(i), docs.row(j));
        }
        (sum / n_random as f64, n_random, false)
    };

    Ok(AlignmentReport {
        positive,
        negative,
        diff: negative - positive,
        n_random: n_scored,
        seed,
        exhaustive,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub mrr: f64,
    /// 1-based rank of each query's ground truth.
    pub ranks: Vec<usize>,
}

/// Rank of the ground truth = 1 + number of candidates scoring strictly
/// higher, so the ground truth wins ties.
pub fn mean_reciprocal_rank(
    queries: ArrayView2<f64>,
    candidates: ArrayView2<f64>,
    ground_truth: &[usize],
) -> Result<RankResult> {
    if queries.nrows() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} queries, {} ground-truth indices",
            queries.nrows(),
            ground_truth.len()
        )));
    }
    if queries.ncols() != candidates.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "query dim {} vs candidate dim {}",
            queries.ncols(),
            candidates.ncols()
        )));
    }
    if queries.nrows() == 0 {
        return Err(Error::ShapeMismatch("no queries".into()));
    }
    if let Some((q, &g)) = ground_truth
        .iter()
        .enumerate()
        .find(|(_, &g)| g >= candidates.nrows())
    {
        return Err(Error::IndexOutOfRange(format!(
            "ground truth {g} of query {q} with {} candidates",
            candidates.nrows()
        )));
    }
    linalg::check_unit_rows(queries)?;
    linalg::check_unit_rows(candidates)?;

    let ranks: Vec<usize> = (0..queries.nrows())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            let target = linalg::dot(query, candidates.row(ground_truth[q]));
            1 + candidates
                .rows()
                .into_iter()
                .filter(|c| linalg::dot(query, *c) > target)
                .count()
        })
        .collect();
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64;
    Ok(RankResult { mrr, ranks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageEval {
    pub mrr: f64,
    pub n_queries: usize,
    pub n_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub languages: BTreeMap<String, LanguageEval>,
    /// Unweighted mean of the per-language MRRs.
    pub overall: f64,
    pub tie_policy: String,
}

impl EvalReport {
    pub fn from_languages(languages: BTreeMap<String, LanguageEval>) -> Self {
        let overall = if languages.is_empty() {
            0.0
        } else {
            languages.values().map(|l| l.mrr).sum::<f64>() / languages.len() as f64
        };
        Self {
            languages,
            overall,
            tie_policy: TIE_POLICY.to_owned(),
        }
    }
}
