//! Accuracy and completeness of a reconstruction against ground truth.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    /// Mean distance from reconstructed points to the ground truth.
    pub accuracy: f64,
    /// Mean distance from ground-truth points to the reconstruction.
    pub completeness: f64,
    pub overall: f64,
}

/// Uniform grid over a point set for fixed-radius nearest-neighbour queries.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Distance to the nearest indexed point if it is within one cell size.
    pub fn nearest_within_cell(&self, q: &Vector3<f64>) -> Option<f64> {
        let k = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &i in ids {
                            best = best.min((self.points[i] - q).norm());
                        }
                    }
                }
            }
        }
        (best <= self.cell).then_some(best)
    }
}

/// Mean nearest-neighbour distance from `from` to `to`, ignoring distances
/// above `outlier_dist`. Returns `outlier_dist` when every point is an outlier.
pub fn mean_distance(from: &[Vector3<f64>], to: &[Vector3<f64>], outlier_dist: f64) -> f64 {
    let index = GridIndex::new(to, outlier_dist);
    let kept: Vec<f64> = from.par_iter().filter_map(|p| index.nearest_within_cell(p)).collect();
    if kept.is_empty() {
        return outlier_dist;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

pub fn accuracy_completeness(recon: &PointCloud, gt: &PointCloud, outlier_dist: f64) -> Result<Scores> {
    if recon.is_empty() || gt.is_empty() {
        return Err(Error::Usage("accuracy and completeness need two non-empty point clouds".into()));
    }
    if !(outlier_dist > 0.0 && outlier_dist.is_finite()) {
        return Err(Error::Usage(format!("outlier distance must be positive, got {outlier_dist}")));
    }
    let accuracy = mean_distance(&recon.points, &gt.points, outlier_dist);
    let completeness = mean_distance(&gt.points, &recon.points, outlier_dist);
    Ok(Scores {
        accuracy,
        completeness,
        overall: (accuracy + completeness) / 2.0,
    })
}

/// 5% of the diagonal of the cloud's bounding box.
pub fn default_outlier_dist(gt: &PointCloud) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in &gt.points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    0.05 * (hi - lo).norm()
}
