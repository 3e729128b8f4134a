#![allow(dead_code)]

use conceptpose::concept_cloud::SaliencyTensor;
use conceptpose::geometry::{CameraIntrinsics, RigidTransform, Vec3};
use conceptpose::model::ObjectModel;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Uniformly random rotation with translation components in `[-shift, shift]`.
pub fn random_transform(rng: &mut impl Rng, shift: f64) -> RigidTransform {
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ));
    let t = Vec3::new(
        rng.random_range(-shift..=shift),
        rng.random_range(-shift..=shift),
        rng.random_range(-shift..=shift),
    );
    RigidTransform::new(q.to_rotation_matrix().into_inner(), t).unwrap()
}

pub fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
                rng.random_range(-half..=half),
            )
        })
        .collect()
}

/// Axis-aligned box mesh with the given extents, centered at the origin.
pub fn box_model(sx: f64, sy: f64, sz: f64) -> ObjectModel {
    let h = Vec3::new(sx / 2.0, sy / 2.0, sz / 2.0);
    let vertices = (0..8)
        .map(|c| {
            Vec3::new(
                if c & 1 == 0 { -h.x } else { h.x },
                if c & 2 == 0 { -h.y } else { h.y },
                if c & 4 == 0 { -h.z } else { h.z },
            )
        })
        .collect();
    let triangles = vec![
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
    ];
    ObjectModel::new(vertices, triangles).unwrap()
}

/// Square of side `side` in the object z=0 plane.
pub fn square_model(side: f64) -> ObjectModel {
    let h = side / 2.0;
    ObjectModel::new(
        vec![Vec3::new(-h, -h, 0.0), Vec3::new(h, -h, 0.0), Vec3::new(h, h, 0.0), Vec3::new(-h, h, 0.0)],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
}

pub fn small_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng) -> SaliencyTensor {
    let l = rng.random_range(1..=6);
    let h = rng.random_range(1..=24);
    let w = rng.random_range(1..=24);
    let labels = (0..l).map(|i| format!("part {i} ü{}", rng.random_range(0..1000))).collect();
    let data = (0..l * h * w).map(|_| rng.random::<f32>()).collect();
    SaliencyTensor::new(format!("cat{}", rng.random_range(0..100)), labels, h, w, data).unwrap()
}
