//! Concept point clouds: backprojected points tagged with a temperature-softmax
//! distribution over concept saliencies, plus voxel pooling.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{backproject, Frame, Vec3};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_VOXEL_RESOLUTION: usize = 64;

/// Label used for the constant zero channel added by
/// [`SaliencyTensor::with_reference_channel`].
pub const REFERENCE_LABEL: &str = "<reference>";

/// Per-concept 2D saliency maps, `L × H × W`, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTensor {
    pub category: String,
    pub labels: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SaliencyTensor {
    pub fn new(category: String, labels: Vec<String>, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let t = Self {
            category,
            labels,
            height,
            width,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidValue("saliency tensor needs at least one label".into()));
        }
        let expected = self.labels.len() * self.height * self.width;
        if self.data.len() != expected {
            return Err(Error::InvalidValue(format!(
                "saliency payload has {} values, expected {}x{}x{} = {expected}",
                self.data.len(),
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue(format!(
                "saliency value {} at index {i} outside [0, 1]",
                self.data[i]
            )));
        }
        Ok(())
    }

    pub fn num_concepts(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn get(&self, channel: usize, v: usize, u: usize) -> f32 {
        self.data[(channel * self.height + v) * self.width + u]
    }

    pub fn channel(&self, channel: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Keep only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("channel selection is empty".into()));
        }
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(channels.len() * n);
        let mut labels = Vec::with_capacity(channels.len());
        for &c in channels {
            if c >= self.labels.len() {
                return Err(Error::Config(format!("channel {c} out of range for {} labels", self.labels.len())));
            }
            labels.push(self.labels[c].clone());
            data.extend_from_slice(self.channel(c));
        }
        Ok(Self {
            category: self.category.clone(),
            labels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Append a constant-zero channel so that a single concept still yields a
    /// non-degenerate distribution after the softmax.
    pub fn with_reference_channel(&self) -> Self {
        let mut t = self.clone();
        t.labels.push(REFERENCE_LABEL.to_string());
        t.data.extend(std::iter::repeat_n(0.0f32, self.height * self.width));
        t
    }
}

/// Temperature softmax with max subtraction. Entries are floored at the
/// smallest positive normal so rows stay strictly positive.
pub fn softmax_into(raw: &[f64], temperature: f64, out: &mut [f64]) {
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(raw) {
        *o = ((s - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = (*o / sum).max(f64::MIN_POSITIVE);
    }
}

/// 3D points with one concept distribution per point.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPointCloud {
    pub points: Vec<Vec3>,
    /// `N × L`, row-major.
    pub concepts: Vec<f64>,
    pub labels: Vec<String>,
    pub temperature: f64,
    /// Backprojection order index each point came from; survives filtering.
    pub source_index: Vec<usize>,
}

impl ConceptPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let l = self.labels.len();
        &self.concepts[i * l..(i + 1) * l]
    }

    /// Sub-cloud with the given point indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let l = self.dim();
        let mut concepts = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            concepts.extend_from_slice(self.row(i));
        }
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            concepts,
            labels: self.labels.clone(),
            temperature: self.temperature,
            source_index: indices.iter().map(|&i| self.source_index[i]).collect(),
        }
    }

    /// Check every row is a strictly positive distribution.
    pub fn validate(&self) -> Result<()> {
        let l = self.dim();
        if l == 0 || self.concepts.len() != self.points.len() * l || self.source_index.len() != self.points.len() {
            return Err(Error::ContractViolation("concept cloud dimensions inconsistent".into()));
        }
        for i in 0..self.len() {
            let row = self.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&c| !(c > 0.0)) {
                return Err(Error::ContractViolation(format!("concept row {i} is not a positive distribution")));
            }
        }
        Ok(())
    }
}

/// Backproject `frame` and attach `softmax(s(p) / τ)` to each point.
pub fn build_cloud(frame: &Frame, saliency: &SaliencyTensor, temperature: f64) -> Result<ConceptPointCloud> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if saliency.height != frame.height() || saliency.width != frame.width() {
        return Err(Error::Config(format!(
            "saliency is {}x{} but frame is {}x{}",
            saliency.width,
            saliency.height,
            frame.width(),
            frame.height()
        )));
    }
    let pixels = backproject(frame);
    if pixels.is_empty() {
        return Err(Error::DegenerateFrame);
    }
    let l = saliency.num_concepts();
    let mut concepts = vec![0.0; pixels.len() * l];
    let mut raw = vec![0.0; l];
    for (px, row) in pixels.iter().zip(concepts.chunks_exact_mut(l)) {
        for (c, r) in raw.iter_mut().enumerate() {
            *r = saliency.get(c, px.v, px.u) as f64;
        }
        softmax_into(&raw, temperature, row);
    }
    Ok(ConceptPointCloud {
        points: pixels.iter().map(|p| p.point).collect(),
        concepts,
        labels: saliency.labels.clone(),
        temperature,
        source_index: (0..pixels.len()).collect(),
    })
}

/// Voxel-pooled cloud. `cloud` holds voxel centers in camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizedCloud {
    pub cloud: ConceptPointCloud,
    pub scale: f64,
    pub centroid: Vec3,
    pub resolution: usize,
    /// Number of source points pooled into each voxel.
    pub occupancy: Vec<usize>,
}

impl VoxelizedCloud {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn voxel_size(&self) -> f64 {
        self.scale / self.resolution as f64
    }
}

/// Mean-pool concept rows on a `resolution³` grid over the cloud's
/// isotropically normalized bounding cube.
///
/// The scale is the largest bounding-box extent and the centroid is the box
/// center, so normalized points lie in `[-0.5, 0.5]³`. Output voxels follow
/// the order in which they are first hit, and centers are clamped to the
/// source bounding box.
pub fn voxelize(cloud: &ConceptPointCloud, resolution: usize) -> Result<VoxelizedCloud> {
    if resolution < 2 {
        return Err(Error::Config(format!("voxel resolution must be >= 2, got {resolution}")));
    }
    if cloud.is_empty() {
        return Err(Error::DegenerateGeometry("cannot voxelize an empty cloud".into()));
    }
    let mut lo = cloud.points[0];
    let mut hi = cloud.points[0];
    for p in &cloud.points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let scale = (hi - lo).max();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::DegenerateGeometry("cloud has zero spatial extent".into()));
    }
    let centroid = (lo + hi) / 2.0;
    let res = resolution as f64;
    let cell = |x: f64, c: f64| -> usize {
        let n = (x - c) / scale + 0.5;
        ((n * res).floor().max(0.0) as usize).min(resolution - 1)
    };

    let l = cloud.dim();
    let mut slot_of: HashMap<[usize; 3], usize> = HashMap::new();
    let mut keys: Vec<[usize; 3]> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut first: Vec<usize> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = [cell(p.x, centroid.x), cell(p.y, centroid.y), cell(p.z, centroid.z)];
        let slot = *slot_of.entry(key).or_insert_with(|| {
            keys.push(key);
            sums.extend(std::iter::repeat_n(0.0, l));
            counts.push(0);
            first.push(cloud.source_index[i]);
            keys.len() - 1
        });
        counts[slot] += 1;
        for (s, c) in sums[slot * l..(slot + 1) * l].iter_mut().zip(cloud.row(i)) {
            *s += c;
        }
    }

    let points = keys
        .iter()
        .map(|k| {
            let center = |i: usize, c: f64| ((i as f64 + 0.5) / res - 0.5) * scale + c;
            let v = Vec3::new(center(k[0], centroid.x), center(k[1], centroid.y), center(k[2], centroid.z));
            v.sup(&lo).inf(&hi)
        })
        .collect();
    for row in sums.chunks_exact_mut(l) {
        let total: f64 = row.iter().sum();
        for c in row.iter_mut() {
            *c /= total;
        }
    }
    Ok(VoxelizedCloud {
        cloud: ConceptPointCloud {
            points,
            concepts: sums,
            labels: cloud.labels.clone(),
            temperature: cloud.temperature,
            source_index: first,
        },
        scale,
        centroid,
        resolution,
        occupancy: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use approx::assert_abs_diff_eq;

    fn cloud_from(points: Vec<Vec3>, rows: &[Vec<f64>]) -> ConceptPointCloud {
        let l = rows[0].len();
        ConceptPointCloud {
            source_index: (0..points.len()).collect(),
            points,
            concepts: rows.concat(),
            labels: (0..l).map(|i| format!("c{i}")).collect(),
            temperature: 1.0,
        }
    }

    fn tiny_frame() -> Frame {
        let k = CameraIntrinsics::new(100.0, 100.0, 1.0, 1.0, 2, 2).unwrap();
        Frame::new(vec![[0; 3]; 4], vec![1.0, 1.0, 0.0, 2.0], vec![true, false, true, true], k).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut out = [0.0; 2];
        softmax_into(&[0.0, 0.0], 1.0, &mut out);
        assert_eq!(out, [0.5, 0.5]);
        softmax_into(&[1.0, 0.0], 1.0, &mut out);
        // e / (e + 1) and 1 / (e + 1)
        assert_abs_diff_eq!(out[0], 0.731059, epsilon = 1e-5);
        assert_abs_diff_eq!(out[1], 0.268941, epsilon = 1e-5);
        softmax_into(&[1.0, 0.0], 0.1, &mut out);
        assert!(out[0] > 0.9999);
    }

    #[test]
    fn softmax_stays_positive_at_tiny_temperature() {
        let mut out = [0.0; 2];
        softmax_into(&[1.0, 0.0], 1e-4, &mut out);
        assert!(out[1] > 0.0);
        assert_abs_diff_eq!(out.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn build_cloud_follows_backprojection() {
        let frame = tiny_frame();
        let sal = SaliencyTensor::new(
            "mug".into(),
            vec!["a".into(), "b".into()],
            2,
            2,
            vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5],
        )
        .unwrap();
        let cloud = build_cloud(&frame, &sal, 1.0).unwrap();
        // pixel (0,0) and pixel (1,1) pass; (0,1) has depth 0, (1,0) is unmasked
        assert_eq!(cloud.len(), 2);
        assert_abs_diff_eq!(cloud.row(0)[0], 0.731059, epsilon = 1e-5);
        assert_eq!(cloud.row(1), &[0.5, 0.5]);
        assert_abs_diff_eq!(cloud.points[1], Vec3::new(0.0, 0.0, 2.0), epsilon = 1e-15);
        cloud.validate().unwrap();
    }

    #[test]
    fn build_cloud_errors() {
        let frame = tiny_frame();
        let sal = SaliencyTensor::new("x".into(), vec!["a".into()], 3, 2, vec![0.0; 6]).unwrap();
        assert!(matches!(build_cloud(&frame, &sal, 0.1), Err(Error::Config(_))));
        let sal = SaliencyTensor::new("x".into(), vec!["a".into()], 2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(build_cloud(&frame, &sal, 0.0), Err(Error::Config(_))));
        let mut empty = frame.clone();
        empty.mask = vec![false; 4];
        assert!(matches!(build_cloud(&empty, &sal, 0.1), Err(Error::DegenerateFrame)));
    }

    #[test]
    fn saliency_rejects_out_of_range() {
        assert!(SaliencyTensor::new("x".into(), vec!["a".into()], 1, 1, vec![1.5]).is_err());
        assert!(SaliencyTensor::new("x".into(), vec![], 1, 1, vec![]).is_err());
        assert!(SaliencyTensor::new("x".into(), vec!["a".into()], 1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn channel_selection_and_reference() {
        let sal = SaliencyTensor::new("x".into(), vec!["a".into(), "b".into()], 1, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = sal.select_channels(&[1]).unwrap();
        assert_eq!(b.labels, vec!["b"]);
        assert_eq!(b.data, vec![0.3, 0.4]);
        let r = b.with_reference_channel();
        assert_eq!(r.labels.len(), 2);
        assert_eq!(r.channel(1), &[0.0, 0.0]);
        assert!(sal.select_channels(&[2]).is_err());
    }

    #[test]
    fn voxel_mean_pooling() {
        let cloud = cloud_from(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1e-4, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)],
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.3, 0.7]],
        );
        let v = voxelize(&cloud, 64).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.cloud.row(0), &[0.5, 0.5]);
        assert_eq!(v.occupancy, vec![2, 1]);
    }

    #[test]
    fn voxel_singletons_preserve_rows() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, (i * 3 % 7) as f64, 0.5 * i as f64)).collect();
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 + 0.05 * i as f64, 0.9 - 0.05 * i as f64]).collect();
        let v = voxelize(&cloud_from(pts, &rows), 64).unwrap();
        assert_eq!(v.len(), 10);
        for (i, r) in rows.iter().enumerate() {
            assert_abs_diff_eq!(v.cloud.row(i)[0], r[0], epsilon = 1e-6);
        }
    }

    #[test]
    fn voxel_degenerate_inputs() {
        let c = cloud_from(vec![Vec3::new(1.0, 1.0, 1.0); 3], &[vec![1.0], vec![1.0], vec![1.0]]);
        assert!(matches!(voxelize(&c, 64), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(voxelize(&c, 1), Err(Error::Config(_))));
    }
}
