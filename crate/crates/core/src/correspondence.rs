//! Concept-vector similarity and putative 3D-3D correspondences.
//!
//! Every measure is oriented so that larger means more similar. Each query row
//! is paired with the anchor row of maximal similarity; ties go to the lowest
//! anchor index.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept_cloud::ConceptPointCloud;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
pub const DEFAULT_MAX_CORRESPONDENCES: usize = 10_000;
pub const DEFAULT_MAX_CORRESPONDENCES_VOXEL: usize = 5_000;

const QUERY_BLOCK: usize = 64;
const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// `-KL(q ‖ a)`
    #[default]
    ForwardKl,
    /// `-KL(a ‖ q)`
    ReverseKl,
    /// `-(KL(q ‖ a) + KL(a ‖ q)) / 2`
    BidirectionalKl,
    /// Negative cross-entropy `-Σ q log(1/a)`.
    Asymmetric,
    Cosine,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::ForwardKl,
        Measure::ReverseKl,
        Measure::BidirectionalKl,
        Measure::Asymmetric,
        Measure::Cosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Measure::ForwardKl => "forward_kl",
            Measure::ReverseKl => "reverse_kl",
            Measure::BidirectionalKl => "bidirectional_kl",
            Measure::Asymmetric => "asymmetric",
            Measure::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown similarity measure '{s}'")))
    }
}

/// Row with its floored logarithms and Euclidean norm precomputed.
struct PreparedRow<'a> {
    p: &'a [f64],
    log: Vec<f64>,
    norm: f64,
}

impl<'a> PreparedRow<'a> {
    fn new(p: &'a [f64]) -> Self {
        Self {
            p,
            log: p.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect(),
            norm: p.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

#[inline]
fn score(measure: Measure, q: &PreparedRow, a: &PreparedRow) -> f64 {
    match measure {
        Measure::ForwardKl => -kl(q.p, &q.log, &a.log),
        Measure::ReverseKl => -kl(a.p, &a.log, &q.log),
        Measure::BidirectionalKl => -0.5 * (kl(q.p, &q.log, &a.log) + kl(a.p, &a.log, &q.log)),
        Measure::Asymmetric => q.p.iter().zip(&a.log).map(|(x, la)| x * la).sum(),
        Measure::Cosine => {
            let dot: f64 = q.p.iter().zip(a.p).map(|(x, y)| x * y).sum();
            dot / (q.norm * a.norm)
        }
    }
}

#[inline]
fn kl(p: &[f64], log_p: &[f64], log_r: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..p.len() {
        s += p[k] * (log_p[k] - log_r[k]);
    }
    s
}

fn check_row(row: &[f64], name: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.is_empty() || (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::ContractViolation(format!(
            "{name} row must be strictly positive and sum to 1 (sum = {sum})"
        )));
    }
    Ok(())
}

/// Similarity between two concept distributions under `measure`.
pub fn similarity(q_row: &[f64], a_row: &[f64], measure: Measure) -> Result<f64> {
    check_row(q_row, "query")?;
    check_row(a_row, "anchor")?;
    if q_row.len() != a_row.len() {
        return Err(Error::ContractViolation(format!(
            "row lengths differ: {} vs {}",
            q_row.len(),
            a_row.len()
        )));
    }
    Ok(score(measure, &PreparedRow::new(q_row), &PreparedRow::new(a_row)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correspondence {
    pub query_index: usize,
    pub anchor_index: usize,
    pub query_point: Vec3,
    pub anchor_point: Vec3,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    pub measure: Measure,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Build from raw point pairs, e.g. for synthetic tests.
    pub fn from_points(anchor: &[Vec3], query: &[Vec3]) -> Self {
        let pairs = anchor
            .iter()
            .zip(query)
            .enumerate()
            .map(|(i, (a, q))| Correspondence {
                query_index: i,
                anchor_index: i,
                query_point: *q,
                anchor_point: *a,
                score: 0.0,
            })
            .collect();
        Self {
            pairs,
            measure: Measure::default(),
        }
    }

    pub fn anchor_points(&self) -> Vec<Vec3> {
        self.pairs.iter().map(|c| c.anchor_point).collect()
    }

    pub fn query_points(&self) -> Vec<Vec3> {
        self.pairs.iter().map(|c| c.query_point).collect()
    }
}

/// Query indices kept when the cloud is capped at `max` points, ascending.
pub fn subsample_indices(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Pair each (possibly subsampled) query point with its most similar anchor point.
pub fn match_clouds(
    query: &ConceptPointCloud,
    anchor: &ConceptPointCloud,
    measure: Measure,
    max_correspondences: usize,
    seed: u64,
) -> Result<CorrespondenceSet> {
    if query.labels != anchor.labels {
        return Err(Error::LabelMismatch {
            query: query.labels.clone(),
            anchor: anchor.labels.clone(),
        });
    }
    if query.is_empty() || anchor.is_empty() {
        return Err(Error::DegenerateGeometry("cannot match an empty cloud".into()));
    }
    if max_correspondences == 0 {
        return Err(Error::Config("max_correspondences must be positive".into()));
    }
    let kept = subsample_indices(query.len(), max_correspondences, seed);
    let anchors: Vec<PreparedRow> = (0..anchor.len()).map(|j| PreparedRow::new(anchor.row(j))).collect();

    let pairs: Vec<Correspondence> = kept
        .par_chunks(QUERY_BLOCK)
        .flat_map_iter(|block| {
            let anchors = &anchors;
            block.iter().map(move |&qi| {
                let q = PreparedRow::new(query.row(qi));
                let mut best = (0usize, f64::NEG_INFINITY);
                for (j, a) in anchors.iter().enumerate() {
                    let s = score(measure, &q, a);
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                Correspondence {
                    query_index: qi,
                    anchor_index: best.0,
                    query_point: query.points[qi],
                    anchor_point: anchor.points[best.0],
                    score: best.1,
                }
            })
        })
        .collect();
    Ok(CorrespondenceSet { pairs, measure })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn forward_kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(similarity(&p, &p, Measure::ForwardKl).unwrap(), 0.0);
        let s = similarity(&[0.5, 0.5], &[0.75, 0.25], Measure::ForwardKl).unwrap();
        // 0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25) = 0.143841
        assert_abs_diff_eq!(s, -0.143841, epsilon = 1e-5);
    }

    #[test]
    fn cosine_example() {
        let s = similarity(&[0.5, 0.5], &[0.75, 0.25], Measure::Cosine).unwrap();
        assert_abs_diff_eq!(s, 0.894427, epsilon = 1e-5);
    }

    #[test]
    fn other_measures_by_hand() {
        let (q, a) = ([0.5, 0.5], [0.75, 0.25]);
        let rev = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert_abs_diff_eq!(similarity(&q, &a, Measure::ReverseKl).unwrap(), -rev, epsilon = 1e-12);
        assert_abs_diff_eq!(
            similarity(&q, &a, Measure::BidirectionalKl).unwrap(),
            -0.5 * (rev + 0.143841),
            epsilon = 1e-6
        );
        let ce = 0.5 * 0.75f64.ln() + 0.5 * 0.25f64.ln();
        assert_abs_diff_eq!(similarity(&q, &a, Measure::Asymmetric).unwrap(), ce, epsilon = 1e-12);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(matches!(
            similarity(&[0.5, 0.6], &[0.5, 0.5], Measure::ForwardKl),
            Err(Error::ContractViolation(_))
        ));
        assert!(similarity(&[1.0, 0.0], &[0.5, 0.5], Measure::Cosine).is_err());
    }

    #[test]
    fn measure_names_roundtrip() {
        for m in Measure::ALL {
            assert_eq!(m.name().parse::<Measure>().unwrap(), m);
        }
        assert!("kl".parse::<Measure>().is_err());
    }

    #[test]
    fn subsample_is_seeded() {
        let a = subsample_indices(1000, 100, 42);
        assert_eq!(a.len(), 100);
        assert_eq!(a, subsample_indices(1000, 100, 42));
        assert_ne!(a, subsample_indices(1000, 100, 43));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_indices(5, 100, 1), vec![0, 1, 2, 3, 4]);
    }
}
