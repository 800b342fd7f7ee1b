use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataError;
use crate::tensor::Tensor;

/// A labelled point cloud belonging to one category.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Part id per point, in the category's own (global) id space.
    pub labels: Vec<usize>,
    pub category: String,
}

impl PointCloud {
    pub fn new(
        points: Vec<[f64; 3]>,
        labels: Vec<usize>,
        category: impl Into<String>,
    ) -> Result<Self, DataError> {
        if points.is_empty() {
            return Err(DataError::EmptyCloud);
        }
        if points.len() != labels.len() {
            return Err(DataError::LabelCount {
                points: points.len(),
                labels: labels.len(),
            });
        }
        Ok(Self {
            points,
            labels,
            category: category.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Coordinates as an `N × 3` matrix.
    pub fn coords(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(vec![self.points.len(), 3], data).expect("N×3 by construction")
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }

    /// Translates the centroid to the origin and scales the farthest point to
    /// unit norm. A cloud whose points all coincide maps to all zeros.
    pub fn normalize(&self) -> Self {
        let c = self.centroid();
        let mut points: Vec<[f64; 3]> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let scale = points.iter().map(norm).fold(0.0, f64::max);
        if scale > 1e-300 {
            for p in &mut points {
                for v in p.iter_mut() {
                    *v /= scale;
                }
            }
        } else {
            points.iter_mut().for_each(|p| *p = [0.0; 3]);
        }
        Self {
            points,
            labels: self.labels.clone(),
            category: self.category.clone(),
        }
    }

    /// Draws `n` points uniformly: without replacement when `n ≤ N`, with
    /// replacement otherwise. Labels travel with their points.
    pub fn sample_points(&self, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = if n <= self.len() {
            sample(&mut rng, self.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..self.len())).collect()
        };
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            category: self.category.clone(),
        }
    }
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![0; n], "c").unwrap()
    }

    #[test]
    fn centered_unit_cloud_is_unchanged() {
        let pc = cloud(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert_eq!(pc.normalize().points, pc.points);
    }

    #[test]
    fn single_point_collapses_to_origin() {
        let pc = cloud(vec![[5.0, 5.0, 5.0]]);
        assert_eq!(pc.normalize().points, vec![[0.0; 3]]);
        let many = cloud(vec![[2.0, -1.0, 3.0]; 4]);
        assert!(many.normalize().points.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn random_cloud_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.random_range(-4.0..9.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let n = cloud(pts).normalize();
        assert!(n.centroid().iter().all(|c| c.abs() <= 1e-12));
        let m = n.max_norm();
        assert!((1.0 - 1e-12..=1.0 + 1e-12).contains(&m), "{m}");
    }

    #[test]
    fn sampling_rules() {
        let pts: Vec<[f64; 3]> = (0..2048).map(|i| [i as f64, 0.0, 0.0]).collect();
        let labels: Vec<usize> = (0..2048).map(|i| i % 3).collect();
        let pc = PointCloud::new(pts, labels, "c").unwrap();

        let perm = pc.sample_points(2048, 9);
        let mut xs: Vec<usize> = perm.points.iter().map(|p| p[0] as usize).collect();
        xs.sort_unstable();
        assert_eq!(xs, (0..2048).collect::<Vec<_>>());

        assert_eq!(pc.sample_points(512, 4), pc.sample_points(512, 4));
        let sub = pc.sample_points(512, 4);
        assert_eq!(sub.len(), 512);
        for (p, l) in sub.points.iter().zip(&sub.labels) {
            assert_eq!(*l, (p[0] as usize) % 3);
        }

        let up = pc.sample_points(3000, 1);
        assert_eq!(up.len(), 3000);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(matches!(
            PointCloud::new(vec![], vec![], "c"),
            Err(DataError::EmptyCloud)
        ));
    }
}
