//! Ground-truth-complete synthetic cases: parametric objects with named parts,
//! per-vertex concept fields, and anchor/query renders under a known
//! relative pose.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concept_cloud::SaliencyTensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Frame, RigidTransform, Vec3};
use crate::model::{ConceptField, ContinuousSymmetry, ObjectModel};
use crate::renderer::render_synthetic_frame;

/// Distance from the camera to the object center in the anchor view.
pub const CANONICAL_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    CupWithHandle,
    Box,
    Cylinder,
    AsymmetricBlob,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 4] = [
        ObjectKind::CupWithHandle,
        ObjectKind::Box,
        ObjectKind::Cylinder,
        ObjectKind::AsymmetricBlob,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectKind::CupWithHandle => "cup_with_handle",
            ObjectKind::Box => "box",
            ObjectKind::Cylinder => "cylinder",
            ObjectKind::AsymmetricBlob => "asymmetric_blob",
        }
    }

    fn category(&self) -> &'static str {
        match self {
            ObjectKind::CupWithHandle => "mug",
            ObjectKind::Box => "box",
            ObjectKind::Cylinder => "can",
            ObjectKind::AsymmetricBlob => "blob",
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown object kind '{s}'")))
    }
}

/// 640×480 camera with 350 px focal length.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 350.0,
        fy: 350.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
    }
}

#[derive(Debug, Clone)]
pub struct SynthObject {
    pub kind: ObjectKind,
    pub category: String,
    pub model: ObjectModel,
    /// Gaussian-falloff concept field, one channel per concept center.
    pub field: ConceptField,
    pub part_names: Vec<String>,
    pub part_of_vertex: Vec<usize>,
}

impl SynthObject {
    /// Field with one channel per part: 1 on the part, 0 elsewhere.
    pub fn one_hot_field(&self) -> ConceptField {
        let l = self.part_names.len();
        let mut values = vec![0.0; l * self.part_of_vertex.len()];
        for (v, &p) in self.part_of_vertex.iter().enumerate() {
            values[v * l + p] = 1.0;
        }
        ConceptField {
            labels: self.part_names.clone(),
            values,
        }
    }

    /// Object-frame bounding-box center.
    pub fn center(&self) -> Vec3 {
        let (lo, hi) = self.model.bounds();
        (lo + hi) / 2.0
    }
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    part_of_vertex: Vec<usize>,
    part_names: Vec<String>,
}

impl MeshBuilder {
    /// Grid patch over `(s, t) ∈ [0,1]²` with its own vertices.
    fn patch(&mut self, name: &str, ns: usize, nt: usize, f: impl Fn(f64, f64) -> Vec3) {
        let part = self.part_names.len();
        self.part_names.push(name.to_string());
        let base = self.vertices.len() as u32;
        for j in 0..=nt {
            for i in 0..=ns {
                self.vertices.push(f(i as f64 / ns as f64, j as f64 / nt as f64));
                self.part_of_vertex.push(part);
            }
        }
        let row = ns as u32 + 1;
        for j in 0..nt as u32 {
            for i in 0..ns as u32 {
                let a = base + j * row + i;
                let b = a + 1;
                let c = a + row;
                let d = c + 1;
                self.triangles.push([a, b, d]);
                self.triangles.push([a, d, c]);
            }
        }
    }
}

struct ConceptCenter {
    label: &'static str,
    center: Vec3,
}

fn gaussian_field(vertices: &[Vec3], centers: &[ConceptCenter], sigma: f64) -> ConceptField {
    let mut values = Vec::with_capacity(vertices.len() * centers.len());
    for v in vertices {
        for c in centers {
            values.push((-(v - c.center).norm_squared() / (2.0 * sigma * sigma)).exp());
        }
    }
    ConceptField {
        labels: centers.iter().map(|c| c.label.to_string()).collect(),
        values,
    }
}

fn polar(radius: f64, angle: f64, z: f64) -> Vec3 {
    Vec3::new(radius * angle.cos(), radius * angle.sin(), z)
}

const TAU: f64 = std::f64::consts::TAU;

/// Build a parametric object whose largest dimension is about `size` meters.
pub fn make_object(kind: ObjectKind, size: f64) -> Result<SynthObject> {
    if !(size > 0.0) || !size.is_finite() {
        return Err(Error::InvalidValue(format!("object size must be positive, got {size}")));
    }
    let mut mb = MeshBuilder::default();
    let mut discrete = Vec::new();
    let mut continuous = Vec::new();
    let is_symmetric;
    let centers: Vec<ConceptCenter>;
    let sigma;
    match kind {
        ObjectKind::CupWithHandle => {
            let h = size;
            let r = 0.4 * h;
            let (path_r, tube_r) = (0.25 * h, 0.06 * h);
            mb.patch("body", 64, 16, |s, t| polar(r, s * TAU, t * h));
            mb.patch("base", 64, 6, |s, t| polar((1.0 - t) * r, s * TAU, 0.0));
            mb.patch("rim", 64, 6, |s, t| polar(t * r, s * TAU, h));
            let path = |s: f64| {
                let a = (s - 0.5) * std::f64::consts::PI;
                (Vec3::new(r + path_r * a.cos(), 0.0, h / 2.0 + path_r * a.sin()), a)
            };
            mb.patch("handle", 24, 12, |s, t| {
                let (c, a) = path(s);
                let radial = Vec3::new(a.cos(), 0.0, a.sin());
                let b = t * TAU;
                c + tube_r * (b.cos() * radial + b.sin() * Vec3::y())
            });
            // close the tube ends (they sit inside the body wall)
            for (name, s) in [("handle", 0.0), ("handle", 1.0)] {
                let part = mb.part_names.iter().position(|n| n == name).unwrap();
                let (c, a) = path(s);
                let radial = Vec3::new(a.cos(), 0.0, a.sin());
                let base = mb.vertices.len() as u32;
                mb.vertices.push(c);
                mb.part_of_vertex.push(part);
                for k in 0..12 {
                    let b = k as f64 / 12.0 * TAU;
                    mb.vertices.push(c + tube_r * (b.cos() * radial + b.sin() * Vec3::y()));
                    mb.part_of_vertex.push(part);
                }
                for k in 0..12u32 {
                    mb.triangles.push([base, base + 1 + k, base + 1 + (k + 1) % 12]);
                }
            }
            is_symmetric = false;
            sigma = 0.45 * h;
            centers = vec![
                ConceptCenter {
                    label: "handle",
                    center: Vec3::new(r + path_r, 0.0, h / 2.0),
                },
                ConceptCenter {
                    label: "rim",
                    center: Vec3::new(0.0, 0.0, h),
                },
                ConceptCenter {
                    label: "base",
                    center: Vec3::new(0.0, 0.0, 0.0),
                },
                ConceptCenter {
                    label: "front of body",
                    center: Vec3::new(-r, 0.0, 0.5 * h),
                },
                ConceptCenter {
                    label: "left side",
                    center: Vec3::new(0.0, r, 0.65 * h),
                },
                ConceptCenter {
                    label: "right side",
                    center: Vec3::new(0.0, -r, 0.35 * h),
                },
            ];
        }
        ObjectKind::Box => {
            let e = Vec3::new(1.0, 0.7, 0.45) * size / 2.0;
            let n = 12;
            mb.patch("top", n, n, |s, t| Vec3::new((2.0 * s - 1.0) * e.x, (2.0 * t - 1.0) * e.y, e.z));
            mb.patch("bottom", n, n, |s, t| Vec3::new((2.0 * s - 1.0) * e.x, (2.0 * t - 1.0) * e.y, -e.z));
            mb.patch("front", n, n, |s, t| Vec3::new((2.0 * s - 1.0) * e.x, -e.y, (2.0 * t - 1.0) * e.z));
            mb.patch("back", n, n, |s, t| Vec3::new((2.0 * s - 1.0) * e.x, e.y, (2.0 * t - 1.0) * e.z));
            mb.patch("left", n, n, |s, t| Vec3::new(-e.x, (2.0 * s - 1.0) * e.y, (2.0 * t - 1.0) * e.z));
            mb.patch("right", n, n, |s, t| Vec3::new(e.x, (2.0 * s - 1.0) * e.y, (2.0 * t - 1.0) * e.z));
            discrete = vec![RigidTransform::rot_x(180.0), RigidTransform::rot_y(180.0), RigidTransform::rot_z(180.0)];
            is_symmetric = true;
            sigma = 0.4 * size;
            centers = vec![
                ConceptCenter {
                    label: "lid",
                    center: Vec3::new(0.3 * e.x, 0.0, e.z),
                },
                ConceptCenter {
                    label: "bottom",
                    center: Vec3::new(0.0, -0.3 * e.y, -e.z),
                },
                ConceptCenter {
                    label: "label",
                    center: Vec3::new(0.0, -e.y, 0.0),
                },
                ConceptCenter {
                    label: "barcode",
                    center: Vec3::new(-0.5 * e.x, e.y, 0.3 * e.z),
                },
                ConceptCenter {
                    label: "end flap",
                    center: Vec3::new(e.x, 0.0, 0.0),
                },
                ConceptCenter {
                    label: "corner",
                    center: Vec3::new(-e.x, -e.y, e.z),
                },
            ];
        }
        ObjectKind::Cylinder => {
            let h = size;
            let r = 0.35 * h;
            mb.patch("side", 64, 16, |s, t| polar(r, s * TAU, (t - 0.5) * h));
            mb.patch("bottom", 64, 6, |s, t| polar((1.0 - t) * r, s * TAU, -h / 2.0));
            mb.patch("top", 64, 6, |s, t| polar(t * r, s * TAU, h / 2.0));
            continuous = vec![ContinuousSymmetry {
                axis: Vec3::z(),
                offset: Vec3::zeros(),
            }];
            discrete = vec![RigidTransform::rot_x(180.0)];
            is_symmetric = true;
            sigma = 0.4 * h;
            centers = vec![
                ConceptCenter {
                    label: "top",
                    center: Vec3::new(0.0, 0.0, h / 2.0),
                },
                ConceptCenter {
                    label: "bottom",
                    center: Vec3::new(0.0, 0.0, -h / 2.0),
                },
                ConceptCenter {
                    label: "label",
                    center: Vec3::new(r, 0.0, 0.0),
                },
                ConceptCenter {
                    label: "seam",
                    center: Vec3::new(-r, 0.0, 0.1 * h),
                },
                ConceptCenter {
                    label: "pull tab",
                    center: Vec3::new(0.0, 0.6 * r, h / 2.0),
                },
            ];
        }
        ObjectKind::AsymmetricBlob => {
            let r0 = 0.5 * size / 1.3;
            let radius = |theta: f64, phi: f64| {
                r0 * (1.0 + 0.2 * (2.0 * theta).sin() * phi.cos() + 0.1 * (3.0 * phi + 0.5).cos() * theta.sin()
                    - 0.08 * theta.cos())
            };
            let point = |theta: f64, phi: f64| {
                let r = radius(theta, phi);
                Vec3::new(r * theta.sin() * phi.cos(), r * theta.sin() * phi.sin(), r * theta.cos())
            };
            let names = [
                ["north east", "north west", "north south", "north tail"],
                ["south east", "south west", "south south", "south tail"],
            ];
            for (band, row) in names.iter().enumerate() {
                for (q, name) in row.iter().enumerate() {
                    mb.patch(name, 12, 12, |s, t| {
                        let theta = (band as f64 + t) * std::f64::consts::FRAC_PI_2;
                        let phi = (q as f64 + s) * std::f64::consts::FRAC_PI_2;
                        point(theta, phi)
                    });
                }
            }
            is_symmetric = false;
            sigma = 0.35 * size;
            centers = vec![
                ConceptCenter {
                    label: "knob",
                    center: point(0.6, 0.3),
                },
                ConceptCenter {
                    label: "dent",
                    center: point(2.2, 1.2),
                },
                ConceptCenter {
                    label: "ridge",
                    center: point(1.4, 3.0),
                },
                ConceptCenter {
                    label: "belly",
                    center: point(1.7, 4.6),
                },
                ConceptCenter {
                    label: "cap",
                    center: point(0.05, 0.0),
                },
            ];
        }
    }
    let field = gaussian_field(&mb.vertices, &centers, sigma);
    let mut model = ObjectModel::new(mb.vertices, mb.triangles)?;
    model.is_symmetric = is_symmetric;
    model.discrete_symmetries = discrete;
    model.continuous_symmetries = continuous;
    Ok(SynthObject {
        kind,
        category: kind.category().to_string(),
        model,
        field,
        part_names: mb.part_names,
        part_of_vertex: mb.part_of_vertex,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gaussian depth noise, meters.
    pub depth_sigma: f64,
    /// Additive Gaussian saliency noise, clamped to [0, 1].
    pub saliency_sigma: f64,
    /// Fraction of valid depth pixels replaced by uniform depths in [0.3, 1.0] m.
    pub outlier_frac: f64,
}

impl NoiseConfig {
    pub fn is_clean(&self) -> bool {
        self.depth_sigma == 0.0 && self.saliency_sigma == 0.0 && self.outlier_frac == 0.0
    }
}

#[derive(Debug, Clone)]
pub struct SynthView {
    pub frame: Frame,
    pub saliency: SaliencyTensor,
    /// Object-to-camera pose.
    pub object_pose: RigidTransform,
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub anchor: SynthView,
    pub query: SynthView,
    /// Ground-truth anchor-camera to query-camera transform.
    pub t_rel: RigidTransform,
}

/// Anchor object pose: the box center 0.5 m ahead, tilted so the top faces
/// the camera and turned so the handle side is in view.
pub fn canonical_pose(object: &SynthObject) -> RigidTransform {
    let r = RigidTransform::rot_x(110.0).compose(&RigidTransform::rot_z(-40.0));
    let center = r.rotation * object.center();
    r.with_translation(Vec3::new(0.0, 0.0, CANONICAL_DISTANCE) - center)
}

/// The reference relative motion: 30° about the camera y axis plus 5 cm along z.
pub fn reference_relative_pose() -> RigidTransform {
    RigidTransform::rot_y(30.0).with_translation(Vec3::new(0.0, 0.0, 0.05))
}

/// Relative camera motion rotating about `pivot` (camera frame) by a random
/// axis and an angle up to `max_deg`, followed by a random shift up to `max_shift`.
pub fn random_relative_pose(rng: &mut impl Rng, pivot: &Vec3, max_deg: f64, max_shift: f64) -> RigidTransform {
    let n = Normal::new(0.0, 1.0).unwrap();
    let axis = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    let angle = rng.random_range(0.0..=max_deg);
    let r = RigidTransform::from_axis_angle(&axis, angle);
    let dir = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)).normalize();
    let shift = dir * rng.random_range(0.0..=max_shift);
    r.with_translation(pivot - r.rotation * pivot + shift)
}

fn render_view(
    object: &SynthObject,
    field: &ConceptField,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthView> {
    let (mut frame, mut saliency) = render_synthetic_frame(&object.model, pose, k, field, &object.category)?;
    if !noise.is_clean() {
        let valid: Vec<usize> = (0..frame.depth.len()).filter(|&i| frame.mask[i] && frame.depth[i] > 0.0).collect();
        if noise.depth_sigma > 0.0 {
            let n = Normal::new(0.0, noise.depth_sigma).map_err(|e| Error::Config(e.to_string()))?;
            for &i in &valid {
                frame.depth[i] = (frame.depth[i] + n.sample(rng)).max(1e-3);
            }
        }
        if noise.outlier_frac > 0.0 {
            for &i in &valid {
                if rng.random::<f64>() < noise.outlier_frac {
                    frame.depth[i] = rng.random_range(0.3..=1.0);
                }
            }
        }
        if noise.saliency_sigma > 0.0 {
            let n = Normal::new(0.0, noise.saliency_sigma).map_err(|e| Error::Config(e.to_string()))?;
            let plane = k.pixel_count();
            for c in 0..saliency.num_concepts() {
                for &i in &valid {
                    let v = &mut saliency.data[c * plane + i];
                    *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(SynthView {
        frame,
        saliency,
        object_pose: *pose,
    })
}

/// Render the anchor at the canonical pose and the query at `t_rel ∘ canonical`.
pub fn make_pair(
    object: &SynthObject,
    field: &ConceptField,
    t_rel: &RigidTransform,
    k: &CameraIntrinsics,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<SynthPair> {
    let anchor_pose = canonical_pose(object);
    let query_pose = t_rel.compose(&anchor_pose);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchor = render_view(object, field, &anchor_pose, k, noise, &mut rng)?;
    rng.set_stream(1);
    let query = render_view(object, field, &query_pose, k, noise, &mut rng).map_err(|e| match e {
        Error::DegenerateFrame => Error::DegenerateGeometry("query viewpoint renders no object pixels".into()),
        other => other,
    })?;
    Ok(SynthPair {
        anchor,
        query,
        t_rel: *t_rel,
    })
}
