//! Fixed-size point clouds drawn from a cluster's pooled points.

use crate::geometry::{FiberCluster, Point3};
use crate::seeding::Rng;
use rand::seq::index;
use rand::{Rng as _, SeedableRng};

pub const DEFAULT_N_POINTS: usize = 1024;

/// Rows are copied verbatim from the cluster: no centering, scaling or
/// interpolation, so absolute size and position survive.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSample {
    pub points: Vec<Point3>,
    pub cluster_id: String,
    pub seed: u64,
}

impl PointCloudSample {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    /// Row-major `N x 3` single-precision matrix.
    pub fn to_f32_rows(&self) -> Vec<f32> {
        self.points
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect()
    }
}

/// Uniform over every point of every streamline; without replacement when
/// the cluster holds at least `n` points, with replacement otherwise.
pub fn random_sample(c: &FiberCluster, n: usize, seed: u64) -> PointCloudSample {
    assert!(n >= 1, "sample size must be positive");
    // prefix[i] = number of points before streamline i
    let mut prefix = Vec::with_capacity(c.n_streamlines() + 1);
    prefix.push(0usize);
    for s in c.streamlines() {
        prefix.push(prefix.last().unwrap() + s.len());
    }
    let total = *prefix.last().unwrap();
    let lookup = |flat: usize| {
        let s = prefix.partition_point(|&start| start <= flat) - 1;
        c.streamlines()[s].points()[flat - prefix[s]]
    };

    let mut rng = Rng::seed_from_u64(seed);
    let points = if total >= n {
        index::sample(&mut rng, total, n).into_iter().map(lookup).collect()
    } else {
        (0..n).map(|_| lookup(rng.random_range(0..total))).collect()
    };
    PointCloudSample {
        points,
        cluster_id: c.id.clone(),
        seed,
    }
}
