//! End-to-end relative pose estimation for one anchor/query pair.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::concept_cloud::{build_cloud, voxelize, ConceptPointCloud, SaliencyTensor, DEFAULT_TEMPERATURE, DEFAULT_VOXEL_RESOLUTION};
use crate::correspondence::{match_clouds, Measure, DEFAULT_MAX_CORRESPONDENCES, DEFAULT_MAX_CORRESPONDENCES_VOXEL};
use crate::error::{Error, Result, Stage};
use crate::filtering::{global_outlier_filter, local_outlier_filter, FilterConfig};
use crate::geometry::{boundary_flags, Frame, RigidTransform};
use crate::pose_solver::{
    icp_refine, ransac, IcpConfig, PoseEstimate, RansacConfig, DEFAULT_INLIER_THRESHOLD, DEFAULT_ITERATIONS,
    DEFAULT_ITERATIONS_VOXEL, DEFAULT_SEED,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub temperature: f64,
    pub voxelize: bool,
    pub resolution: usize,
    /// Voxelize first and filter the voxel centers (ablation order).
    pub voxelize_before_filter: bool,
    pub filter: FilterConfig,
    pub measure: Measure,
    /// `None` picks 10,000, or 5,000 when voxelizing.
    pub max_correspondences: Option<usize>,
    /// `None` picks 100,000, or 50,000 when voxelizing.
    pub iterations: Option<usize>,
    pub inlier_threshold: f64,
    pub seed: u64,
    pub icp_enabled: bool,
    pub icp: IcpConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            voxelize: false,
            resolution: DEFAULT_VOXEL_RESOLUTION,
            voxelize_before_filter: false,
            filter: FilterConfig::default(),
            measure: Measure::default(),
            max_correspondences: None,
            iterations: None,
            inlier_threshold: DEFAULT_INLIER_THRESHOLD,
            seed: DEFAULT_SEED,
            icp_enabled: true,
            icp: IcpConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn max_correspondences(&self) -> usize {
        self.max_correspondences.unwrap_or(if self.voxelize {
            DEFAULT_MAX_CORRESPONDENCES_VOXEL
        } else {
            DEFAULT_MAX_CORRESPONDENCES
        })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
            .unwrap_or(if self.voxelize { DEFAULT_ITERATIONS_VOXEL } else { DEFAULT_ITERATIONS })
    }

    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            iterations: self.iterations(),
            inlier_threshold: self.inlier_threshold,
            seed: self.seed,
            ..RansacConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.voxelize && self.resolution < 2 {
            return Err(Error::Config(format!("voxel resolution must be >= 2, got {}", self.resolution)));
        }
        if self.max_correspondences() == 0 {
            return Err(Error::Config("max_correspondences must be positive".into()));
        }
        if !(self.filter.std_ratio >= 0.0) || !(self.filter.sigma_mult >= 0.0) {
            return Err(Error::Config("filter multipliers must be non-negative".into()));
        }
        self.ransac().validate()
    }
}

/// Point counts of one cloud after each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CloudCounts {
    pub backprojected: usize,
    pub local_filter: usize,
    pub global_filter: usize,
    /// Present only when voxelization ran.
    pub voxelized: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub clouds: Duration,
    pub filtering: Duration,
    pub voxelization: Duration,
    pub correspondence: Duration,
    pub ransac: Duration,
    pub icp: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.clouds + self.filtering + self.voxelization + self.correspondence + self.ransac + self.icp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub anchor: CloudCounts,
    pub query: CloudCounts,
    pub correspondences: usize,
    pub ransac_inliers: usize,
    pub ransac_rmse: f64,
    /// Accepted-pair RMSE of each ICP iterate; empty when ICP was skipped.
    pub icp_rmse_trace: Vec<f64>,
    /// Wall-clock times vary run to run, so they stay out of serialized output.
    #[serde(skip)]
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub estimate: PoseEstimate,
    pub diagnostics: Diagnostics,
}

/// Filtered (and possibly voxelized) clouds for one frame.
struct PreparedCloud {
    /// Cloud fed to correspondence search.
    matching: ConceptPointCloud,
    /// Cloud used by ICP: the filtered points before any voxel pooling.
    geometry: ConceptPointCloud,
    /// Depth-boundary flag per `geometry` point; `None` for voxel centers.
    boundary: Option<Vec<bool>>,
    counts: CloudCounts,
}

fn prepare(
    frame: &Frame,
    saliency: &SaliencyTensor,
    config: &PipelineConfig,
    stage: Stage,
    timings: &mut StageTimings,
) -> Result<PreparedCloud> {
    let start = Instant::now();
    let cloud = build_cloud(frame, saliency, config.temperature).map_err(|e| e.at(stage))?;
    timings.clouds += start.elapsed();

    let mut counts = CloudCounts {
        backprojected: cloud.len(),
        ..CloudCounts::default()
    };
    let voxel = |c: &ConceptPointCloud, timings: &mut StageTimings| -> Result<ConceptPointCloud> {
        let start = Instant::now();
        let v = voxelize(c, config.resolution).map_err(|e| e.at(Stage::Voxelization))?;
        timings.voxelization += start.elapsed();
        Ok(v.cloud)
    };
    let filter = |c: &ConceptPointCloud, counts: &mut CloudCounts, timings: &mut StageTimings| -> Result<ConceptPointCloud> {
        let start = Instant::now();
        let local = local_outlier_filter(c, config.filter.k, config.filter.std_ratio);
        counts.local_filter = local.len();
        let global = global_outlier_filter(&local, config.filter.sigma_mult);
        counts.global_filter = global.len();
        timings.filtering += start.elapsed();
        if global.is_empty() {
            return Err(Error::DegenerateGeometry("no points survive filtering".into()).at(Stage::Filtering));
        }
        Ok(global)
    };

    if config.voxelize && config.voxelize_before_filter {
        let pooled = voxel(&cloud, timings)?;
        counts.voxelized = Some(pooled.len());
        let filtered = filter(&pooled, &mut counts, timings)?;
        return Ok(PreparedCloud {
            matching: filtered.clone(),
            geometry: filtered,
            boundary: None,
            counts,
        });
    }
    let filtered = filter(&cloud, &mut counts, timings)?;
    let matching = if config.voxelize {
        let pooled = voxel(&filtered, timings)?;
        counts.voxelized = Some(pooled.len());
        pooled
    } else {
        filtered.clone()
    };
    let boundary = config.icp_enabled && config.icp.reject_boundary;
    let boundary = boundary.then(|| {
        let flags = boundary_flags(frame, config.icp.boundary_jump);
        filtered.source_index.iter().map(|&i| flags[i]).collect()
    });
    Ok(PreparedCloud {
        matching,
        geometry: filtered,
        boundary,
        counts,
    })
}

/// Estimate the transform taking anchor-camera coordinates to query-camera
/// coordinates. Errors carry the stage at which they arose.
pub fn estimate_relative_pose(
    anchor: (&Frame, &SaliencyTensor),
    query: (&Frame, &SaliencyTensor),
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    config.validate()?;
    if anchor.1.labels != query.1.labels {
        return Err(Error::LabelMismatch {
            query: query.1.labels.clone(),
            anchor: anchor.1.labels.clone(),
        }
        .at(Stage::Correspondence));
    }
    let mut timings = StageTimings::default();
    let a = prepare(anchor.0, anchor.1, config, Stage::AnchorCloud, &mut timings)?;
    let q = prepare(query.0, query.1, config, Stage::QueryCloud, &mut timings)?;

    let start = Instant::now();
    let corr = match_clouds(&q.matching, &a.matching, config.measure, config.max_correspondences(), config.seed)
        .map_err(|e| e.at(Stage::Correspondence))?;
    timings.correspondence = start.elapsed();
    log::debug!("{} correspondences", corr.len());

    let start = Instant::now();
    let coarse = ransac(&corr, &config.ransac()).map_err(|e| e.at(Stage::Ransac))?;
    timings.ransac = start.elapsed();

    let start = Instant::now();
    let (estimate, trace) = if config.icp_enabled {
        let (anchor_pts, query_pts, boundary) = if config.icp.use_full_clouds {
            (a.geometry.points, q.geometry.points, q.boundary)
        } else {
            (corr.anchor_points(), corr.query_points(), None)
        };
        let rejection = config.icp.rejection_distance.unwrap_or(config.inlier_threshold);
        let outcome = icp_refine(&coarse, &anchor_pts, &query_pts, boundary.as_deref(), &config.icp, rejection)
            .map_err(|e| e.at(Stage::Icp))?;
        (outcome.estimate, outcome.rmse_trace)
    } else {
        (coarse, Vec::new())
    };
    timings.icp = start.elapsed();

    Ok(PipelineOutput {
        estimate,
        diagnostics: Diagnostics {
            anchor: a.counts,
            query: q.counts,
            correspondences: corr.len(),
            ransac_inliers: coarse.inlier_count,
            ransac_rmse: coarse.inlier_rmse,
            icp_rmse_trace: trace,
            timings,
        },
    })
}

/// Query object pose from the estimated relative pose and the anchor's
/// ground-truth object pose.
pub fn compose_absolute(estimate: &PoseEstimate, anchor_object_pose: &RigidTransform) -> RigidTransform {
    estimate.transform.compose(anchor_object_pose)
}
