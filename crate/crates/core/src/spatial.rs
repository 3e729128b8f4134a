//! Exact nearest-neighbour queries over 3D points.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::geometry::Vec3;

pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
            len: points.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Index of and Euclidean distance to the closest indexed point.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.len == 0 {
            return None;
        }
        let nn = self.tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]);
        Some((nn.item as usize, nn.distance.sqrt()))
    }

    /// Up to `k` closest points, nearest first, as (index, distance).
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let Some(k) = NonZero::new(k.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .nearest_n::<SquaredEuclidean>(&[q.x, q.y, q.z], k)
            .into_iter()
            .map(|nn| (nn.item as usize, nn.distance.sqrt()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_matches_brute_force() {
        let pts: Vec<Vec3> = (0..200)
            .map(|i| {
                let f = i as f64;
                Vec3::new((f * 0.37).sin(), (f * 0.91).cos(), (f * 0.13).sin() * 2.0)
            })
            .collect();
        let index = PointIndex::new(&pts);
        for q in [Vec3::zeros(), Vec3::new(0.3, -0.2, 1.0), Vec3::new(5.0, 5.0, 5.0)] {
            let (i, d) = index.nearest(&q).unwrap();
            let best = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            assert_eq!(d, (pts[i] - q).norm());
            assert!((d - best).abs() < 1e-12);
        }
        let knn = index.knn(&pts[10], 5);
        assert_eq!(knn.len(), 5);
        assert_eq!(knn[0].1, 0.0);
        assert!(knn.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn empty_index() {
        let index = PointIndex::new(&[]);
        assert!(index.nearest(&Vec3::zeros()).is_none());
        assert!(index.knn(&Vec3::zeros(), 3).is_empty());
    }

    #[test]
    fn handles_many_coplanar_points() {
        let pts: Vec<Vec3> = (0..2000).map(|i| Vec3::new((i % 50) as f64, (i / 50) as f64, 0.0)).collect();
        let index = PointIndex::new(&pts);
        let (i, d) = index.nearest(&Vec3::new(10.2, 3.1, 0.0)).unwrap();
        assert_eq!(pts[i], Vec3::new(10.0, 3.0, 0.0));
        assert!(d < 0.3);
    }
}
