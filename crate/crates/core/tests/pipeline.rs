use std::sync::Arc;

use conceptpose::concept_cloud::SaliencyTensor;
use conceptpose::error::Error;
use conceptpose::evaluation::{evaluate_cases, select_concepts_greedy, subset_bop_ar, EvalCase};
use conceptpose::geometry::{backproject, rotation_angle_deg, translation_error, RigidTransform, Vec3};
use conceptpose::metrics::MetricConfig;
use conceptpose::model::ObjectModel;
use conceptpose::pipeline::{estimate_relative_pose, PipelineConfig};
use conceptpose::renderer::{render_depth, render_synthetic_frame};
use conceptpose::synth::{
    canonical_pose, default_intrinsics, make_object, make_pair, random_relative_pose, reference_relative_pose,
    NoiseConfig, ObjectKind, SynthObject,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fast() -> PipelineConfig {
    PipelineConfig {
        iterations: Some(3000),
        icp_enabled: false,
        ..PipelineConfig::default()
    }
}

fn cases(obj: &SynthObject, n: usize, seed: u64) -> Vec<EvalCase> {
    let k = default_intrinsics();
    let pivot = canonical_pose(obj).apply(&obj.center());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Arc::new(obj.model.clone());
    let mut out = Vec::new();
    while out.len() < n {
        let t = if out.is_empty() {
            reference_relative_pose()
        } else {
            random_relative_pose(&mut rng, &pivot, 30.0, 0.05)
        };
        let Ok(p) = make_pair(obj, &obj.field, &t, &k, &NoiseConfig::default(), seed + out.len() as u64) else {
            continue;
        };
        out.push(EvalCase {
            pair_id: format!("p{}", out.len()),
            object_id: obj.kind.name().into(),
            model: model.clone(),
            anchor: p.anchor.frame,
            anchor_saliency: p.anchor.saliency,
            query: p.query.frame,
            query_saliency: p.query.saliency,
            anchor_pose: p.anchor.object_pose,
            query_pose: p.query.object_pose,
        });
    }
    out
}

/// Copy of `t` with one extra channel of independent uniform noise.
fn with_noise_channel(t: &SaliencyTensor, rng: &mut impl Rng) -> SaliencyTensor {
    let mut labels = t.labels.clone();
    labels.push("noise".into());
    let mut data = t.data.clone();
    data.extend((0..t.height * t.width).map(|_| rng.random::<f32>()));
    SaliencyTensor::new(t.category.clone(), labels, t.height, t.width, data).unwrap()
}

#[test]
fn informative_concept_beats_noise() {
    let cup = make_object(ObjectKind::CupWithHandle, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cs = cases(&cup, 2, 10);
    for c in &mut cs {
        c.anchor_saliency = with_noise_channel(&c.anchor_saliency, &mut rng);
        c.query_saliency = with_noise_channel(&c.query_saliency, &mut rng);
    }
    let m = MetricConfig::default();
    let noise = subset_bop_ar(&cs, &["noise"], &fast(), &m).unwrap();
    let handle = subset_bop_ar(&cs, &["handle"], &fast(), &m).unwrap();
    assert!(handle > noise + 0.05, "handle {handle} noise {noise}");
    let curve = select_concepts_greedy(&cs, &["noise".into(), "handle".into()], 1, &fast(), &m).unwrap();
    assert_eq!(curve.labels(), ["handle"]);
    assert_eq!(curve.steps[0].bop_ar, handle);
}

#[test]
fn greedy_curve_shape() {
    let cup = make_object(ObjectKind::CupWithHandle, 0.1).unwrap();
    let cs = cases(&cup, 1, 20);
    let m = MetricConfig::default();
    let candidates: Vec<String> = ["rim", "base", "handle"].map(String::from).to_vec();

    let one = select_concepts_greedy(&cs, &candidates[..1], 1, &fast(), &m).unwrap();
    assert_eq!(one.labels(), ["rim"]);

    let curve = select_concepts_greedy(&cs, &candidates, 10, &fast(), &m).unwrap();
    assert_eq!(curve.steps.len(), 3);
    let mut labels = curve.labels();
    labels.sort();
    assert_eq!(labels, ["base", "handle", "rim"]);
    assert!(curve.steps.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far));
    assert!(curve.steps.iter().all(|s| s.best_so_far >= s.bop_ar));

    // the first pick is the best single label
    let singles: Vec<f64> = candidates
        .iter()
        .map(|c| subset_bop_ar(&cs, &[c.as_str()], &fast(), &m).unwrap())
        .collect();
    assert_eq!(curve.steps[0].bop_ar, singles.iter().cloned().fold(f64::NEG_INFINITY, f64::max));

    let err = select_concepts_greedy(&cs, &["teapot spout".into()], 1, &fast(), &m).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn failed_pairs_are_recorded_and_bad_input_aborts() {
    let cup = make_object(ObjectKind::CupWithHandle, 0.1).unwrap();
    let mut cs = cases(&cup, 2, 30);
    // keep one image row of the query: collinear points admit no rigid fit
    let w = cs[1].query.width();
    let row = (0..cs[1].query.mask.len()).find(|&i| cs[1].query.mask[i]).unwrap() / w;
    for (i, m) in cs[1].query.mask.iter_mut().enumerate() {
        *m &= i / w == row;
    }
    let report = evaluate_cases(&cs, &fast(), &MetricConfig::default()).unwrap();
    assert_eq!(report.aggregates.pairs, 2);
    assert_eq!(report.aggregates.failures, 1);
    assert!(report.records[1].failure.is_some() && report.records[1].add.is_none());
    assert_eq!(report.records[0].pair_id, "p0");

    let mut bad = cases(&cup, 1, 30);
    bad[0].query_saliency.labels.reverse();
    assert!(matches!(
        evaluate_cases(&bad, &fast(), &MetricConfig::default()),
        Err(Error::Stage { .. }) | Err(Error::LabelMismatch { .. })
    ));
    assert!(evaluate_cases(&[], &fast(), &MetricConfig::default()).is_err());
}

#[test]
fn swapping_frames_inverts_the_estimate() {
    let cup = make_object(ObjectKind::CupWithHandle, 0.1).unwrap();
    let p = make_pair(&cup, &cup.field, &reference_relative_pose(), &default_intrinsics(), &NoiseConfig::default(), 42).unwrap();
    let cfg = PipelineConfig::default();
    let fwd = estimate_relative_pose((&p.anchor.frame, &p.anchor.saliency), (&p.query.frame, &p.query.saliency), &cfg).unwrap();
    let back = estimate_relative_pose((&p.query.frame, &p.query.saliency), (&p.anchor.frame, &p.anchor.saliency), &cfg).unwrap();
    let inv = back.estimate.transform.inverse();
    assert!(rotation_angle_deg(&fwd.estimate.transform, &inv) < 0.5);
    assert!(translation_error(&fwd.estimate.transform, &inv) < 0.002);
}

#[test]
fn temperature_sweep_keeps_recovery() {
    let cup = make_object(ObjectKind::CupWithHandle, 0.1).unwrap();
    let p = make_pair(&cup, &cup.field, &reference_relative_pose(), &default_intrinsics(), &NoiseConfig::default(), 42).unwrap();
    for tau in [0.05, 0.1, 0.2, 0.5] {
        let cfg = PipelineConfig {
            temperature: tau,
            ..PipelineConfig::default()
        };
        let out = estimate_relative_pose((&p.anchor.frame, &p.anchor.saliency), (&p.query.frame, &p.query.saliency), &cfg).unwrap();
        let r = rotation_angle_deg(&out.estimate.transform, &p.t_rel);
        let t = translation_error(&out.estimate.transform, &p.t_rel);
        assert!(r < 0.5 && t < 0.002, "tau {tau}: {r} deg, {t} m");
    }
}

/// First triangle hit along `dir` from the camera center, by brute force.
fn ray_cast(model: &ObjectModel, pose: &RigidTransform, dir: &Vec3) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, tri) in model.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|v| pose.apply(&model.vertices[v as usize]));
        let (e1, e2) = (b - a, c - a);
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-15 {
            continue;
        }
        let s = -a;
        let bu = s.dot(&p) / det;
        let q = s.cross(&e1);
        let bv = dir.dot(&q) / det;
        let t = e2.dot(&q) / det;
        if bu >= 0.0 && bv >= 0.0 && bu + bv <= 1.0 && t > 0.0 && best.is_none_or(|(_, bt)| t < bt) {
            best = Some((i, t));
        }
    }
    best.map(|b| b.0)
}

#[test]
fn one_hot_saliency_names_the_visible_part() {
    for kind in [ObjectKind::CupWithHandle, ObjectKind::Box] {
        let obj = make_object(kind, 0.1).unwrap();
        let pose = canonical_pose(&obj);
        let k = default_intrinsics();
        let field = obj.one_hot_field();
        let (frame, sal) = render_synthetic_frame(&obj.model, &pose, &k, &field, &obj.category).unwrap();
        let plane = k.pixel_count();
        let pixels = backproject(&frame);
        let mut agree = 0;
        for px in &pixels {
            let i = px.v * k.width + px.u;
            let best = (0..sal.num_concepts()).max_by(|&a, &b| sal.data[a * plane + i].total_cmp(&sal.data[b * plane + i])).unwrap();
            let Some(tri) = ray_cast(&obj.model, &pose, &k.ray(px.u as f64, px.v as f64)) else {
                continue;
            };
            agree += (obj.part_of_vertex[obj.model.triangles[tri][0] as usize] == best) as usize;
        }
        let frac = agree as f64 / pixels.len() as f64;
        assert!(frac >= 0.99, "{kind:?}: {frac}");
    }
}

fn shuffled(model: &ObjectModel, seed: u64) -> ObjectModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    for i in (1..m.triangles.len()).rev() {
        let j = rng.random_range(0..=i);
        m.triangles.swap(i, j);
    }
    m
}

#[test]
fn render_ignores_triangle_order() {
    let obj = make_object(ObjectKind::CupWithHandle, 0.1).unwrap();
    let k = default_intrinsics();
    let pose = canonical_pose(&obj);
    let base = render_depth(&obj.model, &pose, &k).unwrap();
    for seed in 0..3 {
        assert_eq!(render_depth(&shuffled(&obj.model, seed), &pose, &k).unwrap(), base);
    }
}

#[test]
fn coverage_shrinks_with_distance() {
    let obj = make_object(ObjectKind::Box, 0.1).unwrap();
    let k = default_intrinsics();
    let rot = canonical_pose(&obj);
    let covered: Vec<usize> = [0.3, 0.5, 0.8, 1.2, 2.0]
        .iter()
        .map(|&z| render_depth(&obj.model, &rot.with_translation(Vec3::new(0.0, 0.0, z)), &k).unwrap().covered())
        .collect();
    assert!(covered.windows(2).all(|w| w[1] < w[0]), "{covered:?}");
    let behind = render_depth(&obj.model, &RigidTransform::from_translation(0.0, 0.0, -1.0), &k).unwrap();
    assert_eq!(behind.covered(), 0);
}
