//! Dataset-level evaluation: run the pipeline over anchor/query cases,
//! score each against ground truth, and greedy forward concept selection.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept_cloud::SaliencyTensor;
use crate::error::{Error, Result};
use crate::geometry::{Frame, RigidTransform};
use crate::metrics::{bop_ar, evaluate_pair, DatasetReport, MetricConfig, PairEvaluation, PairInput};
use crate::model::ObjectModel;
use crate::pipeline::{compose_absolute, estimate_relative_pose, PipelineConfig};

/// One anchor/query pair with everything needed to score it.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub pair_id: String,
    pub object_id: String,
    pub model: Arc<ObjectModel>,
    pub anchor: Frame,
    pub anchor_saliency: SaliencyTensor,
    pub query: Frame,
    pub query_saliency: SaliencyTensor,
    /// Ground-truth object poses in each camera.
    pub anchor_pose: RigidTransform,
    pub query_pose: RigidTransform,
}

/// Errors that reflect bad input or configuration rather than a failed estimate.
fn is_fatal(e: &Error) -> bool {
    matches!(
        e.root(),
        Error::Config(_) | Error::LabelMismatch { .. } | Error::ContractViolation(_) | Error::Io(_)
    )
}

fn score_case(
    case: &EvalCase,
    anchor_saliency: &SaliencyTensor,
    query_saliency: &SaliencyTensor,
    pipeline: &PipelineConfig,
    metrics: &MetricConfig,
) -> Result<PairEvaluation> {
    let estimate = match estimate_relative_pose((&case.anchor, anchor_saliency), (&case.query, query_saliency), pipeline) {
        Ok(out) => Ok(compose_absolute(&out.estimate, &case.anchor_pose)),
        Err(e) if is_fatal(&e) => return Err(e),
        Err(e) => {
            log::warn!("pair {}: {e}", case.pair_id);
            Err(e.to_string())
        }
    };
    evaluate_pair(
        &PairInput {
            pair_id: &case.pair_id,
            object_id: &case.object_id,
            model: &case.model,
            estimate,
            ground_truth: case.query_pose,
            intrinsics: &case.query.intrinsics,
            scene_depth: &case.query.depth,
        },
        metrics,
    )
}

pub fn evaluate_case(case: &EvalCase, pipeline: &PipelineConfig, metrics: &MetricConfig) -> Result<PairEvaluation> {
    score_case(case, &case.anchor_saliency, &case.query_saliency, pipeline, metrics)
}

/// Evaluate every case; records keep the case order.
pub fn evaluate_cases(cases: &[EvalCase], pipeline: &PipelineConfig, metrics: &MetricConfig) -> Result<DatasetReport> {
    if cases.is_empty() {
        return Err(Error::UndefinedInput("no pairs to evaluate".into()));
    }
    let records = cases
        .par_iter()
        .map(|c| evaluate_case(c, pipeline, metrics))
        .collect::<Result<Vec<_>>>()?;
    DatasetReport::new(records, *metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub label: String,
    pub bop_ar: f64,
    /// Highest BOP AR seen up to and including this step.
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCurve {
    pub steps: Vec<SelectionStep>,
}

impl SelectionCurve {
    pub fn labels(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.label.as_str()).collect()
    }
}

fn restrict(tensor: &SaliencyTensor, labels: &[&str]) -> Result<SaliencyTensor> {
    let channels = labels
        .iter()
        .map(|l| {
            tensor
                .labels
                .iter()
                .position(|t| t == l)
                .ok_or_else(|| Error::Config(format!("label '{l}' missing from a saliency tensor")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tensor.select_channels(&channels)?.with_reference_channel())
}

/// BOP AR of the pipeline when only `labels` (plus a constant reference
/// channel) are available.
pub fn subset_bop_ar(cases: &[EvalCase], labels: &[&str], pipeline: &PipelineConfig, metrics: &MetricConfig) -> Result<f64> {
    let records = cases
        .par_iter()
        .map(|c| {
            let a = restrict(&c.anchor_saliency, labels)?;
            let q = restrict(&c.query_saliency, labels)?;
            score_case(c, &a, &q, pipeline, metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(bop_ar(&records).bop_ar)
}

/// Greedy forward selection: each step adds the candidate that maximizes
/// BOP AR together with the labels already chosen. Ties go to the earlier
/// candidate.
///
/// Every subset is scored with an extra all-zero reference channel, since a
/// softmax over a single channel is constant and would carry no signal.
pub fn select_concepts_greedy(
    cases: &[EvalCase],
    candidates: &[String],
    budget: usize,
    pipeline: &PipelineConfig,
    metrics: &MetricConfig,
) -> Result<SelectionCurve> {
    if cases.is_empty() {
        return Err(Error::UndefinedInput("no pairs to select concepts on".into()));
    }
    let mut budget = budget;
    if budget > candidates.len() {
        log::warn!("budget {budget} exceeds {} candidates; clamping", candidates.len());
        budget = candidates.len();
    }
    let mut chosen: Vec<&str> = Vec::new();
    let mut remaining: Vec<&str> = candidates.iter().map(String::as_str).collect();
    let mut steps: Vec<SelectionStep> = Vec::new();
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for (i, cand) in remaining.iter().enumerate() {
            let mut subset = chosen.clone();
            subset.push(cand);
            let score = subset_bop_ar(cases, &subset, pipeline, metrics)?;
            log::info!("{subset:?}: BOP AR {score:.4}");
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let (i, score) = best.expect("at least one remaining candidate");
        let label = remaining.remove(i);
        chosen.push(label);
        let prev = steps.last().map_or(f64::NEG_INFINITY, |s| s.best_so_far);
        steps.push(SelectionStep {
            label: label.to_string(),
            bop_ar: score,
            best_so_far: prev.max(score),
        });
    }
    Ok(SelectionCurve { steps })
}
