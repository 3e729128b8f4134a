//! Statistical outlier removal, local (k-NN distance) then global (distance to
//! the centroid). Both filters keep survivors in their original order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept_cloud::ConceptPointCloud;
use crate::geometry::Vec3;
use crate::spatial::PointIndex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub k: usize,
    pub std_ratio: f64,
    pub sigma_mult: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            k: 20,
            std_ratio: 2.0,
            sigma_mult: 2.5,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Indices of points whose mean distance to their `k` nearest neighbours is
/// within `mean + std_ratio * std`. Clouds with `k` or fewer points are kept whole.
pub fn local_inliers(points: &[Vec3], k: usize, std_ratio: f64) -> Vec<usize> {
    if k == 0 || points.len() <= k {
        return (0..points.len()).collect();
    }
    let index = PointIndex::new(points);
    let mean_dists: Vec<f64> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            // k + 1 to account for the point itself; drop it by index so
            // duplicates at distance zero still count as neighbours.
            let nn = index.knn(p, k + 1);
            let mut sum = 0.0;
            let mut taken = 0;
            for (j, d) in nn {
                if j != i && taken < k {
                    sum += d;
                    taken += 1;
                }
            }
            sum / taken as f64
        })
        .collect();
    let (mean, std) = mean_std(&mean_dists);
    let limit = mean + std_ratio * std;
    (0..points.len()).filter(|&i| mean_dists[i] <= limit).collect()
}

/// Indices of points within `mean + sigma_mult * std` of the centroid.
pub fn global_inliers(points: &[Vec3], sigma_mult: f64) -> Vec<usize> {
    if points.len() <= 1 {
        return (0..points.len()).collect();
    }
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let radii: Vec<f64> = points.iter().map(|p| (p - centroid).norm()).collect();
    let (mean, std) = mean_std(&radii);
    let limit = mean + sigma_mult * std;
    (0..points.len()).filter(|&i| radii[i] <= limit).collect()
}

pub fn local_outlier_filter(cloud: &ConceptPointCloud, k: usize, std_ratio: f64) -> ConceptPointCloud {
    cloud.select(&local_inliers(&cloud.points, k, std_ratio))
}

pub fn global_outlier_filter(cloud: &ConceptPointCloud, sigma_mult: f64) -> ConceptPointCloud {
    cloud.select(&global_inliers(&cloud.points, sigma_mult))
}
