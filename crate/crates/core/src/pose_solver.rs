//! Robust relative pose: RANSAC over minimal Umeyama fits, then
//! point-to-point ICP.
//!
//! Randomness for RANSAC iteration `i` comes only from a ChaCha stream keyed
//! by `(seed, i)`. Iterations are scored in fixed-size chunks and reduced by
//! (most inliers, lowest iteration), so the result does not depend on how the
//! chunks are scheduled across threads.

use nalgebra::{Matrix3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};
use crate::spatial::PointIndex;

pub const DEFAULT_ITERATIONS: usize = 100_000;
pub const DEFAULT_ITERATIONS_VOXEL: usize = 50_000;
pub const DEFAULT_INLIER_THRESHOLD: f64 = 0.01;
pub const DEFAULT_SEED: u64 = 42;

const CHUNK: usize = 512;
/// Second singular value below this fraction of the first marks collinear input.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub minimal_set_size: usize,
    pub seed: u64,
    pub estimate_scale: bool,
    /// Re-fit the winning model on all of its inliers.
    pub refit: bool,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            minimal_set_size: 3,
            seed: DEFAULT_SEED,
            estimate_scale: false,
            refit: true,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("RANSAC needs at least one iteration".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::Config(format!(
                "inlier threshold must be positive, got {}",
                self.inlier_threshold
            )));
        }
        if self.minimal_set_size < 3 {
            return Err(Error::Config("minimal set size must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseEstimate {
    /// Anchor camera frame to query camera frame.
    #[serde(skip)]
    pub transform: RigidTransform,
    pub inlier_count: usize,
    pub inlier_rmse: f64,
    pub refined: bool,
    /// Similarity scale of the inlier set, only when requested.
    pub scale: Option<f64>,
}

/// Least-squares `(R, t, s)` with `query ≈ s R anchor + t` for index-paired points.
///
/// The returned transform is always a proper rotation. With `estimate_scale`
/// off, `s = 1`; otherwise `t` accounts for the returned scale.
pub fn umeyama(anchor: &[Vec3], query: &[Vec3], estimate_scale: bool) -> Result<(RigidTransform, f64)> {
    if anchor.len() != query.len() {
        return Err(Error::InvalidValue(format!(
            "point sets differ in length: {} vs {}",
            anchor.len(),
            query.len()
        )));
    }
    if anchor.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: anchor.len(),
        });
    }
    let n = anchor.len() as f64;
    let mu_a = anchor.iter().sum::<Vec3>() / n;
    let mu_q = query.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_a = 0.0;
    for (a, q) in anchor.iter().zip(query) {
        let da = a - mu_a;
        cov += (q - mu_q) * da.transpose();
        var_a += da.norm_squared();
    }
    cov /= n;
    var_a /= n;
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidValue("non-finite input points".into()));
    }

    let svd = SVD::new(cov, true, true);
    let sv = svd.singular_values;
    if !(sv[0] > 0.0) || sv[1] <= RANK_TOL * sv[0] {
        return Err(Error::DegenerateSample);
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = if u.determinant() * v_t.determinant() < 0.0 { -1.0 } else { 1.0 };
    let s_diag = Vec3::new(1.0, 1.0, d);
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = if estimate_scale {
        sv.component_mul(&s_diag).sum() / var_a
    } else {
        1.0
    };
    let translation = mu_q - scale * (rotation * mu_a);
    Ok((RigidTransform { rotation, translation }, scale))
}

#[inline]
fn is_inlier(t: &RigidTransform, a: &Vec3, q: &Vec3, thr_sq: f64) -> bool {
    (q - t.apply(a)).norm_squared() < thr_sq
}

pub fn count_inliers(corr: &CorrespondenceSet, t: &RigidTransform, threshold: f64) -> usize {
    let thr_sq = threshold * threshold;
    corr.pairs
        .iter()
        .filter(|c| is_inlier(t, &c.anchor_point, &c.query_point, thr_sq))
        .count()
}

fn inlier_indices(corr: &CorrespondenceSet, t: &RigidTransform, threshold: f64) -> Vec<usize> {
    let thr_sq = threshold * threshold;
    corr.pairs
        .iter()
        .enumerate()
        .filter(|(_, c)| is_inlier(t, &c.anchor_point, &c.query_point, thr_sq))
        .map(|(i, _)| i)
        .collect()
}

/// Indices of the minimal sample drawn at `iteration`.
pub fn ransac_sample(n: usize, config: &RansacConfig, iteration: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration as u64);
    rand::seq::index::sample(&mut rng, n, config.minimal_set_size).into_vec()
}

/// Rigid model fitted to the minimal sample of `iteration`; `None` for
/// degenerate samples.
pub fn ransac_hypothesis(corr: &CorrespondenceSet, config: &RansacConfig, iteration: usize) -> Option<RigidTransform> {
    let idx = ransac_sample(corr.len(), config, iteration);
    let a: Vec<Vec3> = idx.iter().map(|&i| corr.pairs[i].anchor_point).collect();
    let q: Vec<Vec3> = idx.iter().map(|&i| corr.pairs[i].query_point).collect();
    umeyama(&a, &q, false).ok().map(|(t, _)| t)
}

#[derive(Clone, Copy)]
struct Candidate {
    inliers: usize,
    iteration: usize,
    transform: RigidTransform,
}

fn better(a: Option<Candidate>, b: Option<Candidate>) -> Option<Candidate> {
    match (a, b) {
        (Some(x), Some(y)) => {
            if y.inliers > x.inliers || (y.inliers == x.inliers && y.iteration < x.iteration) {
                Some(y)
            } else {
                Some(x)
            }
        }
        (x, None) => x,
        (None, y) => y,
    }
}

fn best_in_chunk(corr: &CorrespondenceSet, config: &RansacConfig, range: std::ops::Range<usize>) -> Option<Candidate> {
    let thr_sq = config.inlier_threshold * config.inlier_threshold;
    let n = corr.len();
    let mut best: Option<Candidate> = None;
    for it in range {
        let Some(t) = ransac_hypothesis(corr, config, it) else {
            continue;
        };
        // Later iterations lose ties, so a candidate that can at most tie is dropped early.
        let to_beat = best.map_or(0, |b| b.inliers);
        let mut count = 0;
        let mut beaten = true;
        for (k, c) in corr.pairs.iter().enumerate() {
            if is_inlier(&t, &c.anchor_point, &c.query_point, thr_sq) {
                count += 1;
            }
            if best.is_some() && count + (n - k - 1) <= to_beat {
                beaten = false;
                break;
            }
        }
        if beaten {
            best = better(
                best,
                Some(Candidate {
                    inliers: count,
                    iteration: it,
                    transform: t,
                }),
            );
        }
    }
    best
}

fn rmse_over(corr: &CorrespondenceSet, t: &RigidTransform, idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let ss: f64 = idx
        .iter()
        .map(|&i| (corr.pairs[i].query_point - t.apply(&corr.pairs[i].anchor_point)).norm_squared())
        .sum();
    (ss / idx.len() as f64).sqrt()
}

/// Maximum-consensus rigid transform mapping anchor points onto query points.
pub fn ransac(corr: &CorrespondenceSet, config: &RansacConfig) -> Result<PoseEstimate> {
    config.validate()?;
    if corr.len() < config.minimal_set_size {
        return Err(Error::InsufficientData {
            needed: config.minimal_set_size,
            got: corr.len(),
        });
    }
    let chunks: Vec<std::ops::Range<usize>> = (0..config.iterations)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(config.iterations))
        .collect();
    let winner = chunks
        .into_par_iter()
        .map(|r| best_in_chunk(corr, config, r))
        .reduce(|| None, better);

    let winner = match winner {
        Some(w) if w.inliers >= config.minimal_set_size => w,
        _ => {
            return Err(Error::NoConsensus {
                needed: config.minimal_set_size,
            })
        }
    };
    let mut transform = winner.transform;
    let mut inliers = inlier_indices(corr, &transform, config.inlier_threshold);
    if config.refit {
        let a: Vec<Vec3> = inliers.iter().map(|&i| corr.pairs[i].anchor_point).collect();
        let q: Vec<Vec3> = inliers.iter().map(|&i| corr.pairs[i].query_point).collect();
        if let Ok((t, _)) = umeyama(&a, &q, false) {
            transform = t;
            inliers = inlier_indices(corr, &t, config.inlier_threshold);
        }
    }
    let scale = if config.estimate_scale {
        let a: Vec<Vec3> = inliers.iter().map(|&i| corr.pairs[i].anchor_point).collect();
        let q: Vec<Vec3> = inliers.iter().map(|&i| corr.pairs[i].query_point).collect();
        umeyama(&a, &q, true).ok().map(|(_, s)| s)
    } else {
        None
    };
    Ok(PoseEstimate {
        transform,
        inlier_count: inliers.len(),
        inlier_rmse: rmse_over(corr, &transform, &inliers),
        refined: false,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the accepted-pair RMSE improves by less than this (meters).
    pub tolerance: f64,
    /// Pairs farther apart than this are rejected; `None` uses the RANSAC threshold.
    pub rejection_distance: Option<f64>,
    /// Refine against the full filtered clouds rather than the matched points.
    pub use_full_clouds: bool,
    /// Drop pairs whose query point lies on a depth boundary, where the two
    /// views stop overlapping. Needs per-pixel clouds.
    pub reject_boundary: bool,
    /// Neighbouring depths differing by more than this mark a boundary (meters).
    pub boundary_jump: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tolerance: 1e-6,
            rejection_distance: None,
            use_full_clouds: true,
            reject_boundary: true,
            boundary_jump: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpOutcome {
    pub estimate: PoseEstimate,
    /// Accepted-pair RMSE of each accepted iterate, starting with the input.
    pub rmse_trace: Vec<f64>,
}

struct Matching {
    anchor: Vec<Vec3>,
    query: Vec<Vec3>,
    rmse: f64,
}

struct Target<'a> {
    points: &'a [Vec3],
    boundary: Option<&'a [bool]>,
    index: PointIndex,
}

fn nearest_pairs(t: &RigidTransform, anchor: &[Vec3], target: &Target, max_dist: f64) -> Matching {
    let matches: Vec<Option<(Vec3, Vec3, f64)>> = anchor
        .par_iter()
        .map(|a| {
            let moved = t.apply(a);
            let (j, d) = target.index.nearest(&moved)?;
            let on_boundary = target.boundary.is_some_and(|b| b[j]);
            (d < max_dist && !on_boundary).then_some((*a, target.points[j], d))
        })
        .collect();
    let mut m = Matching {
        anchor: Vec::new(),
        query: Vec::new(),
        rmse: 0.0,
    };
    let mut ss = 0.0;
    for (a, q, d) in matches.into_iter().flatten() {
        m.anchor.push(a);
        m.query.push(q);
        ss += d * d;
    }
    if !m.anchor.is_empty() {
        m.rmse = (ss / m.anchor.len() as f64).sqrt();
    }
    m
}

/// Point-to-point ICP from `estimate`, moving anchor points into the query
/// frame. An iterate is accepted only if it does not raise the accepted-pair
/// RMSE, so the returned trace is non-increasing. `query_boundary`, when
/// given, flags query points that may not serve as matches.
pub fn icp_refine(
    estimate: &PoseEstimate,
    anchor: &[Vec3],
    query: &[Vec3],
    query_boundary: Option<&[bool]>,
    config: &IcpConfig,
    rejection_distance: f64,
) -> Result<IcpOutcome> {
    if anchor.is_empty() || query.is_empty() {
        return Err(Error::DegenerateGeometry("ICP needs non-empty clouds".into()));
    }
    let unchanged = || IcpOutcome {
        estimate: PoseEstimate {
            refined: false,
            ..*estimate
        },
        rmse_trace: Vec::new(),
    };
    if query_boundary.is_some_and(|b| b.len() != query.len()) {
        return Err(Error::InvalidValue("boundary flags do not match the query cloud".into()));
    }
    let target = Target {
        points: query,
        boundary: query_boundary,
        index: PointIndex::new(query),
    };
    let mut t = estimate.transform;
    let mut current = nearest_pairs(&t, anchor, &target, rejection_distance);
    if current.anchor.len() < 3 {
        return Ok(unchanged());
    }
    let mut trace = vec![current.rmse];
    for _ in 0..config.max_iters {
        let Ok((next_t, _)) = umeyama(&current.anchor, &current.query, false) else {
            break;
        };
        let next = nearest_pairs(&next_t, anchor, &target, rejection_distance);
        if next.anchor.len() < 3 || next.rmse > current.rmse {
            break;
        }
        let improvement = current.rmse - next.rmse;
        t = next_t;
        current = next;
        trace.push(current.rmse);
        if improvement < config.tolerance {
            break;
        }
    }
    Ok(IcpOutcome {
        estimate: PoseEstimate {
            transform: t,
            inlier_count: current.anchor.len(),
            inlier_rmse: current.rmse,
            refined: true,
            scale: estimate.scale,
        },
        rmse_trace: trace,
    })
}
