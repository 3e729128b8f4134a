//! Pose accuracy metrics: the ADD family with AUC, BOP-style VSD/MSSD/MSPD
//! average recall, rotation/translation recall and oriented-box 3D IoU.
//!
//! A pair whose estimate failed is kept in the report with empty errors; it
//! counts as a miss in every recall and as an infinite error in the AUCs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_deg, CameraIntrinsics, RigidTransform, Vec3};
use crate::model::{ObjectModel, CONTINUOUS_SYMMETRY_STEPS};
use crate::renderer::render_depth;
use crate::spatial::PointIndex;

/// Fractions 0.05, 0.10, ..., 0.50 used by the BOP threshold grids.
pub const BOP_FRACTIONS: [f64; 10] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageDimension {
    #[default]
    Width,
    /// `max(width, height)`
    Max,
}

impl ImageDimension {
    pub fn pixels(&self, k: &CameraIntrinsics) -> f64 {
        match self {
            ImageDimension::Width => k.width as f64,
            ImageDimension::Max => k.width.max(k.height) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// ADD(-S) success when the error is below this fraction of the diameter.
    pub add_threshold_fraction: f64,
    pub auc_max_threshold: f64,
    pub auc_steps: usize,
    pub mspd_dimension: ImageDimension,
    /// VSD visibility tolerance, meters.
    pub vsd_delta: f64,
    pub continuous_symmetry_steps: usize,
    pub iou_samples_per_axis: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            add_threshold_fraction: 0.1,
            auc_max_threshold: 0.1,
            auc_steps: 100,
            mspd_dimension: ImageDimension::Width,
            vsd_delta: 0.015,
            continuous_symmetry_steps: CONTINUOUS_SYMMETRY_STEPS,
            iou_samples_per_axis: 64,
        }
    }
}

fn transformed(model: &ObjectModel, t: &RigidTransform) -> Vec<Vec3> {
    model.vertices.iter().map(|v| t.apply(v)).collect()
}

/// Mean distance between corresponding model vertices under the two poses.
pub fn add_error(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let sum: f64 = model.vertices.iter().map(|v| (est.apply(v) - gt.apply(v)).norm()).sum();
    sum / model.vertices.len() as f64
}

/// Mean distance from each estimated vertex to the closest ground-truth vertex.
pub fn add_s_error(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let index = PointIndex::new(&transformed(model, gt));
    let sum: f64 = model
        .vertices
        .iter()
        .map(|v| index.nearest(&est.apply(v)).map_or(0.0, |(_, d)| d))
        .sum();
    sum / model.vertices.len() as f64
}

/// ADD-S for symmetric models, ADD otherwise.
pub fn add_adaptive_error(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform) -> f64 {
    if model.is_symmetric {
        add_s_error(model, est, gt)
    } else {
        add_error(model, est, gt)
    }
}

/// Area under the recall-vs-threshold curve on `[0, max_threshold]`,
/// normalized to `[0, 1]`. Recall at `t` counts errors `<= t`; the curve is
/// sampled at `k * max / steps` for `k = 0..=steps` and integrated with the
/// trapezoid rule. Use `f64::INFINITY` for failed estimates.
pub fn auc(errors: &[f64], max_threshold: f64, steps: usize) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedInput("AUC of an empty error list".into()));
    }
    if !(max_threshold > 0.0) || steps == 0 {
        return Err(Error::Config("AUC needs a positive threshold and at least one step".into()));
    }
    let mut sorted: Vec<f64> = errors.iter().map(|e| if e.is_nan() { f64::INFINITY } else { *e }).collect();
    sorted.sort_by(f64::total_cmp);
    // Summing integer hit counts keeps the all-hit and all-miss cases exact.
    let hits = |t: f64| sorted.partition_point(|e| *e <= t) as u64;
    let dt = max_threshold / steps as f64;
    let mut prev = hits(0.0);
    let mut twice_area = 0u64;
    for k in 1..=steps {
        let h = hits(k as f64 * dt);
        twice_area += prev + h;
        prev = h;
    }
    Ok(twice_area as f64 / (2 * steps * sorted.len()) as f64)
}

/// Smallest, over the symmetry set, of the largest vertex displacement.
pub fn mssd(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform, continuous_steps: usize) -> f64 {
    let moved = transformed(model, est);
    model
        .symmetry_transforms(continuous_steps)
        .iter()
        .map(|s| {
            let g = gt.compose(s);
            model
                .vertices
                .iter()
                .zip(&moved)
                .map(|(v, e)| (e - g.apply(v)).norm())
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

fn pixel_distance(k: &CameraIntrinsics, a: &Vec3, b: &Vec3) -> f64 {
    let (pa, pb) = (k.project(a), k.project(b));
    (pa.0 - pb.0).hypot(pa.1 - pb.1)
}

/// Smallest, over the symmetry set, of the largest projected vertex
/// displacement, in pixels.
pub fn mspd(
    model: &ObjectModel,
    est: &RigidTransform,
    gt: &RigidTransform,
    k: &CameraIntrinsics,
    continuous_steps: usize,
) -> f64 {
    let moved = transformed(model, est);
    model
        .symmetry_transforms(continuous_steps)
        .iter()
        .map(|s| {
            let g = gt.compose(s);
            model
                .vertices
                .iter()
                .zip(&moved)
                .map(|(v, e)| pixel_distance(k, e, &g.apply(v)))
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Depth along each pixel's ray (distance from the camera center).
fn distance_map(depth: &[f64], k: &CameraIntrinsics) -> Vec<f64> {
    depth
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if d > 0.0 {
                d * k.ray((i % k.width) as f64, (i / k.width) as f64).norm()
            } else {
                0.0
            }
        })
        .collect()
}

/// Pixels where a model rendering is visible in the scene: rendered, and not
/// more than `delta` behind the scene surface (or the scene has no depth).
fn visibility(scene: &[f64], model: &[f64], delta: f64) -> Vec<bool> {
    scene
        .iter()
        .zip(model)
        .map(|(&s, &m)| m > 0.0 && (m - s <= delta || s == 0.0))
        .collect()
}

/// Visible Surface Discrepancy for each misalignment tolerance in `taus`.
///
/// `scene_depth` is the observed depth map (meters, 0 = missing) that
/// decides which rendered pixels are visible.
pub fn vsd_errors(
    model: &ObjectModel,
    est: &RigidTransform,
    gt: &RigidTransform,
    scene_depth: &[f64],
    k: &CameraIntrinsics,
    taus: &[f64],
    delta: f64,
) -> Result<Vec<f64>> {
    if scene_depth.len() != k.pixel_count() {
        return Err(Error::InvalidValue("scene depth does not match the intrinsics".into()));
    }
    let scene = distance_map(scene_depth, k);
    let d_est = distance_map(&render_depth(model, est, k)?.depth, k);
    let d_gt = distance_map(&render_depth(model, gt, k)?.depth, k);
    let visib_gt = visibility(&scene, &d_gt, delta);
    let mut visib_est = visibility(&scene, &d_est, delta);
    for i in 0..visib_est.len() {
        visib_est[i] |= visib_gt[i] && d_est[i] > 0.0;
    }
    let mut union = 0usize;
    let mut inter_dists = Vec::new();
    for i in 0..visib_gt.len() {
        if visib_gt[i] || visib_est[i] {
            union += 1;
        }
        if visib_gt[i] && visib_est[i] {
            inter_dists.push((d_gt[i] - d_est[i]).abs());
        }
    }
    if union == 0 {
        return Ok(vec![1.0; taus.len()]);
    }
    let only_one = union - inter_dists.len();
    Ok(taus
        .iter()
        .map(|&tau| {
            let bad = inter_dists.iter().filter(|d| **d >= tau).count();
            (bad + only_one) as f64 / union as f64
        })
        .collect())
}

pub fn vsd(
    model: &ObjectModel,
    est: &RigidTransform,
    gt: &RigidTransform,
    scene_depth: &[f64],
    k: &CameraIntrinsics,
    tau: f64,
    delta: f64,
) -> Result<f64> {
    Ok(vsd_errors(model, est, gt, scene_depth, k, &[tau], delta)?[0])
}

/// Success iff rotation error `< rot_deg` and translation error `< trans_m`.
pub fn pose_success(est: &RigidTransform, gt: &RigidTransform, rot_deg: f64, trans_m: f64) -> bool {
    rotation_angle_deg(est, gt) < rot_deg && (est.translation - gt.translation).norm() < trans_m
}

fn inside_box(t_inv: &RigidTransform, lo: &Vec3, hi: &Vec3, p: &Vec3) -> bool {
    let q = t_inv.apply(p);
    (0..3).all(|i| q[i] >= lo[i] && q[i] <= hi[i])
}

/// IoU of the model's object-frame bounding box placed at the two poses,
/// estimated by testing `samples³` cell centers over the union of the boxes'
/// axis-aligned extents.
pub fn iou3d(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform, samples: usize) -> f64 {
    let (lo, hi) = model.bounds();
    let corners: Vec<Vec3> = (0..8)
        .map(|c| Vec3::new(if c & 1 == 0 { lo.x } else { hi.x }, if c & 2 == 0 { lo.y } else { hi.y }, if c & 4 == 0 { lo.z } else { hi.z }))
        .collect();
    let mut min = Vec3::repeat(f64::INFINITY);
    let mut max = Vec3::repeat(f64::NEG_INFINITY);
    for t in [est, gt] {
        for c in &corners {
            let p = t.apply(c);
            min = min.inf(&p);
            max = max.sup(&p);
        }
    }
    let (ie, ig) = (est.inverse(), gt.inverse());
    let step = (max - min) / samples as f64;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..samples {
        for j in 0..samples {
            for l in 0..samples {
                let p = min + Vec3::new((i as f64 + 0.5) * step.x, (j as f64 + 0.5) * step.y, (l as f64 + 0.5) * step.z);
                let (a, b) = (inside_box(&ie, &lo, &hi, &p), inside_box(&ig, &lo, &hi, &p));
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Everything measured for one anchor/query pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub pair_id: String,
    pub object_id: String,
    pub diameter: f64,
    pub symmetric: bool,
    /// Image dimension the MSPD thresholds are scaled by, pixels.
    pub image_dimension: f64,
    /// Why no estimate exists, when it failed.
    pub failure: Option<String>,
    pub add: Option<f64>,
    pub add_s: Option<f64>,
    pub add_adaptive: Option<f64>,
    pub mssd: Option<f64>,
    pub mspd: Option<f64>,
    /// One error per tolerance in `BOP_FRACTIONS × diameter`; `None` when
    /// the estimate failed or the model cannot be rendered.
    pub vsd: Option<Vec<f64>>,
    /// Set when VSD was skipped for a triangle-free model.
    pub vsd_skipped: bool,
    pub mssd_recall: f64,
    pub mspd_recall: f64,
    pub vsd_recall: Option<f64>,
    pub rotation_err: Option<f64>,
    pub translation_err: Option<f64>,
    pub iou3d: Option<f64>,
}

/// Fraction of `thresholds` that `error` is strictly below; 0 for a missing error.
fn threshold_recall(error: Option<f64>, thresholds: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0;
    let mut hits = 0;
    for t in thresholds {
        n += 1;
        if error.is_some_and(|e| e < t) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn vsd_recall(errors: &[f64]) -> f64 {
    let hits: usize = errors
        .iter()
        .map(|e| BOP_FRACTIONS.iter().filter(|&&theta| *e < theta).count())
        .sum();
    hits as f64 / (errors.len() * BOP_FRACTIONS.len()) as f64
}

/// Inputs for evaluating one pair.
pub struct PairInput<'a> {
    pub pair_id: &'a str,
    pub object_id: &'a str,
    pub model: &'a ObjectModel,
    /// Estimated object pose in the query camera, or why it is missing.
    pub estimate: std::result::Result<RigidTransform, String>,
    pub ground_truth: RigidTransform,
    pub intrinsics: &'a CameraIntrinsics,
    /// Observed query depth, meters.
    pub scene_depth: &'a [f64],
}

pub fn evaluate_pair(input: &PairInput, config: &MetricConfig) -> Result<PairEvaluation> {
    let model = input.model;
    let d = model.diameter;
    let image_dimension = config.mspd_dimension.pixels(input.intrinsics);
    let mut record = PairEvaluation {
        pair_id: input.pair_id.to_string(),
        object_id: input.object_id.to_string(),
        diameter: d,
        symmetric: model.is_symmetric,
        image_dimension,
        failure: None,
        add: None,
        add_s: None,
        add_adaptive: None,
        mssd: None,
        mspd: None,
        vsd: None,
        vsd_skipped: !model.has_surface(),
        mssd_recall: 0.0,
        mspd_recall: 0.0,
        vsd_recall: if model.has_surface() { Some(0.0) } else { None },
        rotation_err: None,
        translation_err: None,
        iou3d: None,
    };
    let est = match &input.estimate {
        Ok(t) => *t,
        Err(why) => {
            record.failure = Some(why.clone());
            return Ok(record);
        }
    };
    let gt = &input.ground_truth;
    let steps = config.continuous_symmetry_steps;
    let add = add_error(model, &est, gt);
    let add_s = add_s_error(model, &est, gt);
    record.add = Some(add);
    record.add_s = Some(add_s);
    record.add_adaptive = Some(if model.is_symmetric { add_s } else { add });
    record.mssd = Some(mssd(model, &est, gt, steps));
    record.mspd = Some(mspd(model, &est, gt, input.intrinsics, steps));
    record.mssd_recall = threshold_recall(record.mssd, BOP_FRACTIONS.iter().map(|f| f * d));
    record.mspd_recall = threshold_recall(record.mspd, BOP_FRACTIONS.iter().map(|f| f * image_dimension));
    if model.has_surface() {
        let taus: Vec<f64> = BOP_FRACTIONS.iter().map(|f| f * d).collect();
        let errors = vsd_errors(model, &est, gt, input.scene_depth, input.intrinsics, &taus, config.vsd_delta)?;
        record.vsd_recall = Some(vsd_recall(&errors));
        record.vsd = Some(errors);
    }
    record.rotation_err = Some(rotation_angle_deg(&est, gt));
    record.translation_err = Some((est.translation - gt.translation).norm());
    record.iou3d = Some(iou3d(model, &est, gt, config.iou_samples_per_axis));
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BopScores {
    /// `None` when no pair had a renderable model.
    pub ar_vsd: Option<f64>,
    pub ar_mssd: f64,
    pub ar_mspd: f64,
    /// Mean of the available ARs.
    pub bop_ar: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn bop_ar(records: &[PairEvaluation]) -> BopScores {
    let ar_mssd = mean(records.iter().map(|r| r.mssd_recall));
    let ar_mspd = mean(records.iter().map(|r| r.mspd_recall));
    let vsd: Vec<f64> = records.iter().filter_map(|r| r.vsd_recall).collect();
    let ar_vsd = (!vsd.is_empty()).then(|| mean(vsd.into_iter()));
    let bop = match ar_vsd {
        Some(v) => (v + ar_mssd + ar_mspd) / 3.0,
        None => (ar_mssd + ar_mspd) / 2.0,
    };
    BopScores {
        ar_vsd,
        ar_mssd,
        ar_mspd,
        bop_ar: bop,
    }
}

/// Fraction of pairs whose ADD(-S) error is below `fraction × diameter`.
pub fn add_adaptive_recall(records: &[PairEvaluation], fraction: f64) -> f64 {
    mean(records.iter().map(|r| r.add_adaptive.is_some_and(|e| e < fraction * r.diameter) as u8 as f64))
}

pub fn pose_recall(records: &[PairEvaluation], rot_deg: f64, trans_m: f64) -> f64 {
    mean(records.iter().map(|r| match (r.rotation_err, r.translation_err) {
        (Some(re), Some(te)) => (re < rot_deg && te < trans_m) as u8 as f64,
        _ => 0.0,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub pairs: usize,
    pub failures: usize,
    pub vsd_skipped: usize,
    /// ADD(-S) recall at `add_threshold_fraction × diameter`.
    pub add_adaptive_recall: f64,
    pub add_auc: f64,
    pub add_s_auc: f64,
    pub bop: BopScores,
    pub recall_10deg_5cm: f64,
    pub recall_5deg_2cm: f64,
    /// Mean 3D IoU, failures counting as 0.
    pub iou_mean: f64,
    pub iou_50: f64,
    pub iou_75: f64,
}

impl Aggregates {
    pub fn from_records(records: &[PairEvaluation], config: &MetricConfig) -> Result<Self> {
        let errs = |f: fn(&PairEvaluation) -> Option<f64>| -> Vec<f64> {
            records.iter().map(|r| f(r).unwrap_or(f64::INFINITY)).collect()
        };
        let iou = |r: &PairEvaluation| r.iou3d.unwrap_or(0.0);
        Ok(Self {
            pairs: records.len(),
            failures: records.iter().filter(|r| r.failure.is_some()).count(),
            vsd_skipped: records.iter().filter(|r| r.vsd_skipped).count(),
            add_adaptive_recall: add_adaptive_recall(records, config.add_threshold_fraction),
            add_auc: auc(&errs(|r| r.add), config.auc_max_threshold, config.auc_steps)?,
            add_s_auc: auc(&errs(|r| r.add_s), config.auc_max_threshold, config.auc_steps)?,
            bop: bop_ar(records),
            recall_10deg_5cm: pose_recall(records, 10.0, 0.05),
            recall_5deg_2cm: pose_recall(records, 5.0, 0.02),
            iou_mean: mean(records.iter().map(iou)),
            iou_50: mean(records.iter().map(|r| (iou(r) > 0.5) as u8 as f64)),
            iou_75: mean(records.iter().map(|r| (iou(r) > 0.75) as u8 as f64)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub config: MetricConfig,
    pub records: Vec<PairEvaluation>,
    pub aggregates: Aggregates,
}

impl DatasetReport {
    pub fn new(records: Vec<PairEvaluation>, config: MetricConfig) -> Result<Self> {
        let aggregates = Aggregates::from_records(&records, &config)?;
        Ok(Self {
            config,
            records,
            aggregates,
        })
    }
}
