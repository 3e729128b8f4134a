//! Evaluation object models and per-vertex concept fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

/// Rotations about this axis, through `offset`, leave the model unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSymmetry {
    pub axis: Vec3,
    pub offset: Vec3,
}

/// Steps used to discretize each continuous symmetry.
pub const CONTINUOUS_SYMMETRY_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    /// Object-frame vertices, meters.
    pub vertices: Vec<Vec3>,
    /// May be empty for point-only models.
    pub triangles: Vec<[u32; 3]>,
    pub diameter: f64,
    pub is_symmetric: bool,
    /// Non-identity discrete symmetries.
    pub discrete_symmetries: Vec<RigidTransform>,
    pub continuous_symmetries: Vec<ContinuousSymmetry>,
}

/// Largest distance between any two points, by exhaustive comparison.
pub fn max_pairwise_distance(points: &[Vec3]) -> f64 {
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let p = points[i];
            points[i + 1..]
                .iter()
                .map(|q| (p - q).norm_squared())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

impl ObjectModel {
    /// Model without symmetries; the diameter is computed exactly.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let diameter = max_pairwise_distance(&vertices);
        let m = Self {
            vertices,
            triangles,
            diameter,
            is_symmetric: false,
            discrete_symmetries: Vec::new(),
            continuous_symmetries: Vec::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::InvalidValue("model has no vertices".into()));
        }
        if !(self.diameter > 0.0) || !self.diameter.is_finite() {
            return Err(Error::InvalidValue(format!("model diameter must be positive, got {}", self.diameter)));
        }
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidValue(format!("triangle {t:?} references a missing vertex")));
        }
        for s in &self.discrete_symmetries {
            s.validate()?;
        }
        for c in &self.continuous_symmetries {
            if !(c.axis.norm() > 0.0) {
                return Err(Error::InvalidValue("continuous symmetry axis has zero length".into()));
            }
        }
        Ok(())
    }

    pub fn has_surface(&self) -> bool {
        !self.triangles.is_empty()
    }

    /// Object-frame axis-aligned bounds.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Identity followed by every combination of discrete symmetry and
    /// discretized continuous rotation.
    pub fn symmetry_transforms(&self, continuous_steps: usize) -> Vec<RigidTransform> {
        let mut discrete = vec![RigidTransform::identity()];
        discrete.extend(self.discrete_symmetries.iter().copied());
        let mut continuous = vec![RigidTransform::identity()];
        for c in &self.continuous_symmetries {
            for k in 1..continuous_steps {
                let r = RigidTransform::from_axis_angle(&c.axis, 360.0 * k as f64 / continuous_steps as f64);
                continuous.push(r.with_translation(c.offset - r.rotation * c.offset));
            }
        }
        let mut out = Vec::with_capacity(discrete.len() * continuous.len());
        for d in &discrete {
            for c in &continuous {
                out.push(d.compose(c));
            }
        }
        out
    }
}

/// Raw per-vertex saliencies in `[0, 1]`, `V × L` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptField {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl ConceptField {
    pub fn new(labels: Vec<String>, values: Vec<f64>, vertex_count: usize) -> Result<Self> {
        if labels.is_empty() || values.len() != labels.len() * vertex_count {
            return Err(Error::InvalidValue(format!(
                "concept field has {} values for {} labels x {vertex_count} vertices",
                values.len(),
                labels.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue("concept field values must lie in [0, 1]".into()));
        }
        Ok(Self { labels, values })
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, vertex: usize) -> &[f64] {
        let l = self.dim();
        &self.values[vertex * l..(vertex + 1) * l]
    }
}
