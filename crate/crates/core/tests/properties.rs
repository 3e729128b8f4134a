mod common;

use conceptpose::concept_cloud::{softmax_into, voxelize, ConceptPointCloud, SaliencyTensor};
use conceptpose::correspondence::{match_clouds, similarity, CorrespondenceSet, Measure};
use conceptpose::filtering::{global_inliers, local_inliers};
use conceptpose::geometry::{backproject, rotation_angle_deg, translation_error, Frame, RigidTransform, Vec3};
use conceptpose::io::{decode_saliency, encode_saliency};
use conceptpose::metrics::{add_error, add_s_error, auc, mssd};
use conceptpose::pose_solver::{count_inliers, icp_refine, ransac, ransac_hypothesis, IcpConfig, PoseEstimate, RansacConfig};
use conceptpose::synth::{make_object, ObjectKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn same_transform(a: &RigidTransform, b: &RigidTransform, deg: f64, m: f64) -> bool {
    rotation_angle_deg(a, b) < deg && translation_error(a, b) < m
}

fn random_concept_cloud(r: &mut impl Rng, n: usize, l: usize) -> ConceptPointCloud {
    let mut concepts = Vec::with_capacity(n * l);
    for _ in 0..n {
        let raw: Vec<f64> = (0..l).map(|_| r.random::<f64>()).collect();
        let mut row = vec![0.0; l];
        softmax_into(&raw, 0.1, &mut row);
        concepts.extend(row);
    }
    ConceptPointCloud {
        points: random_points(r, n, 0.1),
        concepts,
        labels: (0..l).map(|i| format!("c{i}")).collect(),
        temperature: 0.1,
        source_index: (0..n).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compose_matches_sequential_application(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_transform(&mut r, 1.0), random_transform(&mut r, 1.0));
        let p = random_points(&mut r, 1, 1.0)[0];
        prop_assert!((a.compose(&b).apply(&p) - a.apply(&b.apply(&p))).norm() < 1e-12);
        let id = a.compose(&a.inverse());
        prop_assert!(same_transform(&id, &RigidTransform::identity(), 1e-6, 1e-12));
    }

    #[test]
    fn rotation_angle_is_a_symmetric_distance(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_transform(&mut r, 1.0), random_transform(&mut r, 1.0));
        let d = rotation_angle_deg(&a, &b);
        prop_assert!((0.0..=180.0).contains(&d));
        prop_assert!((d - rotation_angle_deg(&b, &a)).abs() < 1e-9);
        prop_assert!(rotation_angle_deg(&a, &a) < 1e-6);
    }

    #[test]
    fn backprojection_reprojects_to_its_pixel(seed in any::<u64>()) {
        let mut r = rng(seed);
        let k = small_intrinsics();
        let n = k.pixel_count();
        let depth: Vec<f64> = (0..n).map(|_| if r.random::<f64>() < 0.3 { 0.0 } else { r.random_range(0.2..3.0) }).collect();
        let mask: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.8).collect();
        let frame = Frame::new(vec![[0; 3]; n], depth.clone(), mask.clone(), k).unwrap();
        let pts = backproject(&frame);
        prop_assert_eq!(pts.len(), (0..n).filter(|&i| mask[i] && depth[i] > 0.0).count());
        for p in &pts {
            let (u, v) = k.project(&p.point);
            prop_assert!((u - p.u as f64).abs() < 1e-9 && (v - p.v as f64).abs() < 1e-9);
            prop_assert_eq!(p.point.z, depth[p.v * k.width + p.u]);
        }
    }

    #[test]
    fn softmax_is_a_monotone_distribution(raw in prop::collection::vec(0.0f64..1.0, 1..12), tau in 0.01f64..2.0, shift in -5.0f64..5.0) {
        let mut out = vec![0.0; raw.len()];
        softmax_into(&raw, tau, &mut out);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.iter().all(|&p| p > 0.0));
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                if raw[i] < raw[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
        let shifted: Vec<f64> = raw.iter().map(|v| v + shift).collect();
        let mut out2 = vec![0.0; raw.len()];
        softmax_into(&shifted, tau, &mut out2);
        for (a, b) in out.iter().zip(&out2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn voxels_pool_every_point_into_distributions(seed in any::<u64>(), n in 1usize..400, res in 2usize..32) {
        let mut r = rng(seed);
        let cloud = random_concept_cloud(&mut r, n, 4);
        let v = voxelize(&cloud, res).unwrap();
        prop_assert!(v.len() <= n && !v.is_empty());
        prop_assert_eq!(v.occupancy.iter().sum::<usize>(), n);
        v.cloud.validate().unwrap();
        let (lo, hi) = cloud.points.iter().fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        for p in &v.cloud.points {
            prop_assert!(p.x >= lo.x && p.y >= lo.y && p.z >= lo.z && p.x <= hi.x && p.y <= hi.y && p.z <= hi.z);
        }
    }

    #[test]
    fn filters_return_sorted_subsets(seed in any::<u64>(), n in 0usize..300) {
        let mut r = rng(seed);
        let pts = random_points(&mut r, n, 0.1);
        for idx in [local_inliers(&pts, 8, 2.0), global_inliers(&pts, 2.0)] {
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
        }
    }

    #[test]
    fn matching_equals_brute_force(seed in any::<u64>(), nq in 1usize..60, na in 1usize..60, l in 1usize..6) {
        let mut r = rng(seed);
        let q = random_concept_cloud(&mut r, nq, l);
        let a = random_concept_cloud(&mut r, na, l);
        for m in Measure::ALL {
            let set = match_clouds(&q, &a, m, usize::MAX, 0).unwrap();
            prop_assert_eq!(set.len(), nq);
            for c in &set.pairs {
                let scores: Vec<f64> = (0..na).map(|j| similarity(q.row(c.query_index), a.row(j), m).unwrap()).collect();
                let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let first = scores.iter().position(|&s| s == best).unwrap();
                prop_assert_eq!(c.anchor_index, first);
            }
        }
    }

    #[test]
    fn self_matching_is_identity_under_divergences(seed in any::<u64>(), n in 1usize..80) {
        let mut r = rng(seed);
        let c = random_concept_cloud(&mut r, n, 5);
        for m in [Measure::ForwardKl, Measure::ReverseKl, Measure::BidirectionalKl] {
            let set = match_clouds(&c, &c, m, usize::MAX, 0).unwrap();
            for p in &set.pairs {
                prop_assert_eq!(c.row(p.anchor_index), c.row(p.query_index));
            }
        }
    }

    #[test]
    fn csal_roundtrips_and_decoder_never_panics(seed in any::<u64>(), junk in prop::collection::vec(any::<u8>(), 0..200)) {
        let mut r = rng(seed);
        let t = random_tensor(&mut r);
        let bytes = encode_saliency(&t).unwrap();
        let back = decode_saliency(&bytes).unwrap();
        prop_assert_eq!(&back.labels, &t.labels);
        prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        let _ = decode_saliency(&junk);
        let cut = r.random_range(0..bytes.len());
        prop_assert!(decode_saliency(&bytes[..cut]).is_err());
    }

    #[test]
    fn auc_is_bounded_and_monotone(errors in prop::collection::vec(0.0f64..0.2, 1..100), extra in 0.0f64..0.2) {
        let a = auc(&errors, 0.1, 100).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let mut better = errors.clone();
        for e in &mut better {
            *e = (*e - extra).max(0.0);
        }
        prop_assert!(auc(&better, 0.1, 100).unwrap() >= a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ransac_is_equivariant_to_query_motion(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = random_transform(&mut r, 0.2);
        let g = random_transform(&mut r, 0.2);
        let mut a = random_points(&mut r, 60, 0.1);
        let mut q: Vec<Vec3> = a.iter().map(|p| t.apply(p)).collect();
        a.extend(random_points(&mut r, 30, 0.1));
        q.extend(random_points(&mut r, 30, 0.3));
        let cfg = RansacConfig { iterations: 300, ..RansacConfig::default() };
        let base = ransac(&CorrespondenceSet::from_points(&a, &q), &cfg).unwrap();
        let moved: Vec<Vec3> = q.iter().map(|p| g.apply(p)).collect();
        let est = ransac(&CorrespondenceSet::from_points(&a, &moved), &cfg).unwrap();
        prop_assert_eq!(base.inlier_count, est.inlier_count);
        prop_assert!(same_transform(&est.transform, &g.compose(&base.transform), 1e-6, 1e-8));
    }

    #[test]
    fn ransac_keeps_the_largest_consensus(seed in any::<u64>(), iterations in 1usize..400) {
        let mut r = rng(seed);
        let t = random_transform(&mut r, 0.2);
        let mut a = random_points(&mut r, 20, 0.1);
        let mut q: Vec<Vec3> = a.iter().map(|p| t.apply(p) + Vec3::new(r.random_range(-0.008..0.008), 0.0, 0.0)).collect();
        a.extend(random_points(&mut r, 40, 0.1));
        q.extend(random_points(&mut r, 40, 0.2));
        let corr = CorrespondenceSet::from_points(&a, &q);
        let cfg = RansacConfig { iterations, refit: false, seed, ..RansacConfig::default() };
        let best = (0..iterations)
            .filter_map(|i| ransac_hypothesis(&corr, &cfg, i))
            .map(|h| count_inliers(&corr, &h, cfg.inlier_threshold))
            .max();
        match ransac(&corr, &cfg) {
            Ok(est) => prop_assert_eq!(Some(est.inlier_count), best),
            Err(e) => prop_assert!(e.is_no_consensus() && best.is_none_or(|b| b < 3)),
        }
    }

    #[test]
    fn ransac_ignores_thread_count(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_points(&mut r, 200, 0.1);
        let q = random_points(&mut r, 200, 0.1);
        let corr = CorrespondenceSet::from_points(&a, &q);
        let cfg = RansacConfig { iterations: 3000, seed, ..RansacConfig::default() };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| ransac(&corr, &cfg).ok())
        };
        let one = run(1);
        prop_assert_eq!(one, run(3));
        prop_assert_eq!(one, ransac(&corr, &cfg).ok());
    }

    #[test]
    fn icp_never_raises_rmse(seed in any::<u64>()) {
        let mut r = rng(seed);
        let anchor = random_points(&mut r, 300, 0.05);
        let truth = random_transform(&mut r, 0.1);
        let query: Vec<Vec3> = anchor
            .iter()
            .map(|p| truth.apply(p) + Vec3::new(r.random_range(-1e-3..1e-3), r.random_range(-1e-3..1e-3), 0.0))
            .collect();
        let nudge = RigidTransform::from_axis_angle(&random_unit(&mut r), r.random_range(0.0..4.0))
            .with_translation(random_unit(&mut r) * r.random_range(0.0..0.005));
        let start = PoseEstimate { transform: nudge.compose(&truth), inlier_count: 0, inlier_rmse: 0.0, refined: false, scale: None };
        let out = icp_refine(&start, &anchor, &query, None, &IcpConfig::default(), 0.02).unwrap();
        prop_assert!(out.rmse_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn symmetric_errors_are_bounded_by_plain_ones(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = make_object(ObjectKind::Box, 0.1).unwrap().model;
        let gt = random_transform(&mut r, 0.5);
        let est = random_transform(&mut r, 0.02).compose(&gt);
        let add = add_error(&model, &est, &gt);
        prop_assert!(add_s_error(&model, &est, &gt) <= add);
        prop_assert!(add >= 0.0);
        // every symmetry of the box leaves MSSD unchanged
        let base = mssd(&model, &est, &gt, 8);
        for s in &model.discrete_symmetries {
            prop_assert!((mssd(&model, &est.compose(s), &gt, 8) - base).abs() < 1e-9);
        }
    }
}

#[test]
fn saliency_tensor_rejects_nan() {
    assert!(SaliencyTensor::new("c".into(), vec!["a".into()], 1, 1, vec![f32::NAN]).is_err());
}
