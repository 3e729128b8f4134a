//! Deterministic z-buffer triangle rasterizer.
//!
//! Pixels are sampled at integer `(u, v)` centers. Coverage uses edge
//! functions with the top-left fill rule, and the depth written at a pixel is
//! the exact intersection of that pixel's ray with the triangle plane.
//! Triangles with any vertex at `z <= NEAR_PLANE` are dropped.

use rayon::prelude::*;

use crate::concept_cloud::SaliencyTensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Frame, RigidTransform, Vec3};
use crate::model::{ConceptField, ObjectModel};

pub const NEAR_PLANE: f64 = 1e-6;
const BAND_ROWS: usize = 16;
const NO_TRIANGLE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRender {
    pub width: usize,
    pub height: usize,
    /// Meters, 0 where no surface was hit.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthRender {
    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

struct ProjectedTriangle {
    id: u32,
    /// Mesh vertex indices, in the same (possibly swapped) order as `cam`.
    verts: [u32; 3],
    /// Camera-frame vertices.
    cam: [Vec3; 3],
    /// Image-plane vertices, wound so the signed area is positive.
    img: [(f64, f64); 3],
    normal: Vec3,
    u_range: (usize, usize),
    v_range: (usize, usize),
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Whether a pixel lying exactly on edge `a -> b` belongs to the triangle.
fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
    // inward normal of a positively wound edge is (-dy, dx)
    let (nx, ny) = (-(b.1 - a.1), b.0 - a.0);
    nx > 0.0 || (nx == 0.0 && ny > 0.0)
}

fn project_triangles(model: &ObjectModel, pose: &RigidTransform, k: &CameraIntrinsics) -> Vec<ProjectedTriangle> {
    let cam: Vec<Vec3> = model.vertices.iter().map(|v| pose.apply(v)).collect();
    let mut out = Vec::with_capacity(model.triangles.len());
    for (id, tri) in model.triangles.iter().enumerate() {
        let mut verts = *tri;
        let mut c = [cam[tri[0] as usize], cam[tri[1] as usize], cam[tri[2] as usize]];
        if c.iter().any(|p| p.z <= NEAR_PLANE) {
            continue;
        }
        let mut img = [k.project(&c[0]), k.project(&c[1]), k.project(&c[2])];
        let area = edge(img[0], img[1], img[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            img.swap(1, 2);
            c.swap(1, 2);
            verts.swap(1, 2);
        }
        let (umin, umax) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let (vmin, vmax) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
        if umax < 0.0 || vmax < 0.0 || umin > (k.width - 1) as f64 || vmin > (k.height - 1) as f64 {
            continue;
        }
        let u0 = umin.ceil().max(0.0) as usize;
        let v0 = vmin.ceil().max(0.0) as usize;
        let u1 = (umax.floor() as usize).min(k.width - 1);
        let v1 = (vmax.floor() as usize).min(k.height - 1);
        if u0 > u1 || v0 > v1 {
            continue;
        }
        out.push(ProjectedTriangle {
            id: id as u32,
            verts,
            normal: (c[1] - c[0]).cross(&(c[2] - c[0])),
            cam: c,
            img,
            u_range: (u0, u1),
            v_range: (v0, v1),
        });
    }
    out
}

/// Depth and triangle id per pixel.
fn rasterize(model: &ObjectModel, pose: &RigidTransform, k: &CameraIntrinsics) -> (Vec<f64>, Vec<u32>, Vec<ProjectedTriangle>) {
    let tris = project_triangles(model, pose, k);
    let w = k.width;
    let mut depth = vec![0.0; k.pixel_count()];
    let mut ids = vec![NO_TRIANGLE; k.pixel_count()];
    depth
        .par_chunks_mut(BAND_ROWS * w)
        .zip(ids.par_chunks_mut(BAND_ROWS * w))
        .enumerate()
        .for_each(|(band, (depth, ids))| {
            let band_v0 = band * BAND_ROWS;
            let band_v1 = band_v0 + depth.len() / w - 1;
            for t in &tris {
                if t.v_range.1 < band_v0 || t.v_range.0 > band_v1 {
                    continue;
                }
                let [a, b, c] = t.img;
                let tl = [is_top_left(b, c), is_top_left(c, a), is_top_left(a, b)];
                let n_dot_c0 = t.normal.dot(&t.cam[0]);
                for v in t.v_range.0.max(band_v0)..=t.v_range.1.min(band_v1) {
                    for u in t.u_range.0..=t.u_range.1 {
                        let p = (u as f64, v as f64);
                        let w = [edge(b, c, p), edge(c, a, p), edge(a, b, p)];
                        let inside = w.iter().zip(&tl).all(|(&e, &top_left)| e > 0.0 || (e == 0.0 && top_left));
                        if !inside {
                            continue;
                        }
                        let z = n_dot_c0 / t.normal.dot(&k.ray(p.0, p.1));
                        if !(z > NEAR_PLANE) || !z.is_finite() {
                            continue;
                        }
                        let idx = (v - band_v0) * k.width + u;
                        if depth[idx] == 0.0 || z < depth[idx] {
                            depth[idx] = z;
                            ids[idx] = t.id;
                        }
                    }
                }
            }
        });
    (depth, ids, tris)
}

/// Render the model's depth as seen from a camera with intrinsics `k`, the
/// model placed at `pose` (object to camera).
pub fn render_depth(model: &ObjectModel, pose: &RigidTransform, k: &CameraIntrinsics) -> Result<DepthRender> {
    if !model.has_surface() {
        return Err(Error::UnsupportedModel("rendering needs a triangle mesh".into()));
    }
    let (depth, _, _) = rasterize(model, pose, k);
    let mask = depth.iter().map(|d| *d > 0.0).collect();
    Ok(DepthRender {
        width: k.width,
        height: k.height,
        depth,
        mask,
    })
}

/// Barycentric weights (of vertices 1 and 2) of `p` in the camera-frame triangle.
fn barycentric(tri: &[Vec3; 3], p: &Vec3) -> (f64, f64) {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let d = p - tri[0];
    let (d00, d01, d11) = (e1.dot(&e1), e1.dot(&e2), e2.dot(&e2));
    let (d20, d21) = (d.dot(&e1), d.dot(&e2));
    let denom = d00 * d11 - d01 * d01;
    ((d11 * d20 - d01 * d21) / denom, (d00 * d21 - d01 * d20) / denom)
}

/// Render a frame and a saliency tensor whose channels interpolate the
/// per-vertex concept field at the visible surface point.
pub fn render_synthetic_frame(
    model: &ObjectModel,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
    field: &ConceptField,
    category: &str,
) -> Result<(Frame, SaliencyTensor)> {
    if !model.has_surface() {
        return Err(Error::UnsupportedModel("rendering needs a triangle mesh".into()));
    }
    if field.values.len() != field.dim() * model.vertices.len() {
        return Err(Error::InvalidValue("concept field does not match model vertex count".into()));
    }
    let (depth, ids, tris) = rasterize(model, pose, k);
    if depth.iter().all(|d| *d == 0.0) {
        return Err(Error::DegenerateFrame);
    }
    let by_id: std::collections::HashMap<u32, &ProjectedTriangle> = tris.iter().map(|t| (t.id, t)).collect();
    let l = field.dim();
    let plane = k.pixel_count();
    let mut data = vec![0f32; l * plane];
    let mut rgb = vec![[0u8; 3]; plane];
    for (idx, &id) in ids.iter().enumerate() {
        if id == NO_TRIANGLE {
            continue;
        }
        let t = by_id[&id];
        let (u, v) = ((idx % k.width) as f64, (idx / k.width) as f64);
        let ray = k.ray(u, v);
        let hit = ray * depth[idx];
        let (b1, b2) = barycentric(&t.cam, &hit);
        let [i0, i1, i2] = t.verts;
        let (f0, f1, f2) = (field.row(i0 as usize), field.row(i1 as usize), field.row(i2 as usize));
        for c in 0..l {
            let val = f0[c] + b1 * (f1[c] - f0[c]) + b2 * (f2[c] - f0[c]);
            data[c * plane + idx] = val.clamp(0.0, 1.0) as f32;
        }
        let shade = (t.normal.normalize().dot(&ray.normalize())).abs();
        let g = (40.0 + 200.0 * shade).round() as u8;
        rgb[idx] = [g, g, g];
    }
    let mask = depth.iter().map(|d| *d > 0.0).collect();
    let frame = Frame::new(rgb, depth, mask, *k)?;
    let tensor = SaliencyTensor::new(category.to_string(), field.labels.clone(), k.height, k.width, data)?;
    Ok((frame, tensor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn square(z: f64, half: f64) -> ObjectModel {
        ObjectModel::new(
            vec![
                Vec3::new(-half, -half, z),
                Vec3::new(half, -half, z),
                Vec3::new(half, half, z),
                Vec3::new(-half, half, z),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn fronto_parallel_square_is_exact() {
        let r = render_depth(&square(1.0, 0.5), &RigidTransform::identity(), &k100()).unwrap();
        assert!(r.covered() > 0);
        for (d, m) in r.depth.iter().zip(&r.mask) {
            if *m {
                assert_eq!(*d, 1.0);
            } else {
                assert_eq!(*d, 0.0);
            }
        }
        // square spans u in [0, 100] -> pixels 0..=99 minus the right/bottom edges
        assert_eq!(r.covered(), 100 * 100);
    }

    #[test]
    fn shared_edge_pixels_are_covered_once() {
        // diagonal edge passes through pixel centers; coverage must not double count
        let half = 0.2;
        let m = square(1.0, half);
        let k = k100();
        let tris = project_triangles(&m, &RigidTransform::identity(), &k);
        let mut hits = vec![0u32; k.pixel_count()];
        for t in &tris {
            let [a, b, c] = t.img;
            let tl = [is_top_left(b, c), is_top_left(c, a), is_top_left(a, b)];
            for v in t.v_range.0..=t.v_range.1 {
                for u in t.u_range.0..=t.u_range.1 {
                    let p = (u as f64, v as f64);
                    let w = [edge(b, c, p), edge(c, a, p), edge(a, b, p)];
                    if w.iter().zip(&tl).all(|(&e, &top_left)| e > 0.0 || (e == 0.0 && top_left)) {
                        hits[v * k.width + u] += 1;
                    }
                }
            }
        }
        assert!(hits.iter().all(|h| *h <= 1));
        // square [30, 70]²: top-left rule keeps 30..=69 on both axes
        assert_eq!(hits.iter().filter(|h| **h == 1).count(), 40 * 40);
    }

    #[test]
    fn nearer_square_wins() {
        let mut near = square(1.0, 0.2);
        let far = square(2.0, 0.8);
        let offset = near.vertices.len() as u32;
        near.vertices.extend(far.vertices.iter().copied());
        near.triangles.extend(far.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
        let r = render_depth(&near, &RigidTransform::identity(), &k100()).unwrap();
        assert_eq!(r.depth[50 * 100 + 50], 1.0);
        assert_eq!(r.depth[50 * 100 + 15], 2.0);
    }

    #[test]
    fn behind_camera_is_empty() {
        let r = render_depth(&square(-1.0, 0.5), &RigidTransform::identity(), &k100()).unwrap();
        assert_eq!(r.covered(), 0);
    }

    #[test]
    fn point_model_unsupported() {
        let m = ObjectModel::new(vec![Vec3::zeros(), Vec3::x()], vec![]).unwrap();
        assert!(matches!(
            render_depth(&m, &RigidTransform::identity(), &k100()),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn constant_field_is_exact() {
        let m = square(1.0, 0.3);
        let field = ConceptField::new(vec!["a".into(), "b".into()], [0.25, 0.75].repeat(4), 4).unwrap();
        let (frame, sal) = render_synthetic_frame(&m, &RigidTransform::identity(), &k100(), &field, "toy").unwrap();
        let plane = 100 * 100;
        for idx in 0..plane {
            if frame.mask[idx] {
                assert_eq!(sal.data[idx], 0.25);
                assert_eq!(sal.data[plane + idx], 0.75);
            } else {
                assert_eq!(sal.data[idx], 0.0);
            }
        }
    }

    #[test]
    fn empty_render_is_degenerate_frame() {
        let m = square(-1.0, 0.3);
        let field = ConceptField::new(vec!["a".into()], vec![0.5; 4], 4).unwrap();
        assert!(matches!(
            render_synthetic_frame(&m, &RigidTransform::identity(), &k100(), &field, "toy"),
            Err(Error::DegenerateFrame)
        ));
    }
}
