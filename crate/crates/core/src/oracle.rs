//! Voxel-grid shape measures: the classical reference path.
//!
//! Streamlines are rasterized onto an isotropic grid anchored to the global
//! lattice `k * voxel_size`, so integer-voxel translations of a cluster
//! translate its occupancy exactly.

use crate::geometry::{
    bounding_box, cluster_mean_length, cluster_mean_span, FiberCluster, Point3, ShapeVector,
};
use std::f64::consts::PI;
use thiserror::Error;

pub const DEFAULT_VOXEL_SIZE: f64 = 1.0;
pub const DEFAULT_MAX_VOXELS: u64 = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("voxel grid {dims:?} exceeds the cap of {cap} voxels")]
    GridTooLarge { dims: [usize; 3], cap: u64 },
    #[error("irregularity needs positive volume and length (volume {volume}, length {length})")]
    DegenerateInput { volume: f64, length: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub origin: Point3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    origin_index: [i64; 3],
    bits: Vec<u64>,
}

impl VoxelGrid {
    fn new(origin_index: [i64; 3], dims: [usize; 3], voxel_size: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            origin: Point3::new(
                origin_index[0] as f64 * voxel_size,
                origin_index[1] as f64 * voxel_size,
                origin_index[2] as f64 * voxel_size,
            ),
            voxel_size,
            dims,
            origin_index,
            bits: vec![0; n.div_ceil(64)],
        }
    }

    fn linear(&self, [x, y, z]: [usize; 3]) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    fn mark(&mut self, p: Point3) {
        let g = lattice_index(p, self.voxel_size);
        let local = [0, 1, 2].map(|a| (g[a] - self.origin_index[a]) as usize);
        debug_assert!(local.iter().zip(self.dims).all(|(l, d)| *l < d));
        let i = self.linear(local);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn is_occupied(&self, voxel: [usize; 3]) -> bool {
        if voxel.iter().zip(self.dims).any(|(v, d)| *v >= d) {
            return false;
        }
        let i = self.linear(voxel);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn occupied_count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Occupied voxels in linear (x fastest) order.
    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.dims;
        self.bits.iter().enumerate().flat_map(move |(w, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let bit = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let i = w * 64 + bit;
                Some([i % nx, (i / nx) % ny, i / (nx * ny)])
            })
        })
    }
}

fn lattice_index(p: Point3, voxel_size: f64) -> [i64; 3] {
    p.to_array().map(|c| (c / voxel_size).floor() as i64)
}

pub fn voxelize(c: &FiberCluster, voxel_size: f64) -> Result<VoxelGrid, OracleError> {
    voxelize_capped(c, voxel_size, DEFAULT_MAX_VOXELS)
}

/// Marks every voxel hit by points taken along each segment at arc-length
/// steps of at most `voxel_size / 2`, both endpoints included.
pub fn voxelize_capped(
    c: &FiberCluster,
    voxel_size: f64,
    max_voxels: u64,
) -> Result<VoxelGrid, OracleError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(OracleError::InvalidVoxelSize(voxel_size));
    }
    let (lo, hi) = bounding_box(c);
    let lo = lattice_index(lo, voxel_size);
    let hi = lattice_index(hi, voxel_size);
    // one voxel of margin on each side
    let origin_index = [0, 1, 2].map(|a| lo[a] - 1);
    let dims = [0, 1, 2].map(|a| (hi[a] - lo[a] + 3) as usize);
    let total = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    if total.is_none_or(|t| t > max_voxels) {
        return Err(OracleError::GridTooLarge {
            dims,
            cap: max_voxels,
        });
    }

    let mut grid = VoxelGrid::new(origin_index, dims, voxel_size);
    let step = voxel_size / 2.0;
    for s in c.streamlines() {
        grid.mark(s.first());
        for (a, b) in s.segments() {
            let len = a.distance(b);
            let n = (len / step).ceil().max(1.0) as usize;
            let d = b - a;
            for i in 1..=n {
                grid.mark(a + d * (i as f64 / n as f64));
            }
        }
    }
    Ok(grid)
}

pub fn volume(g: &VoxelGrid) -> f64 {
    g.occupied_count() as f64 * g.voxel_size.powi(3)
}

/// Exposed faces (occupied voxel next to an empty or out-of-grid
/// 6-neighbor) times the face area.
pub fn surface_area(g: &VoxelGrid) -> f64 {
    exposed_faces(g) as f64 * g.voxel_size * g.voxel_size
}

fn exposed_faces(g: &VoxelGrid) -> usize {
    const NEIGHBORS: [[i64; 3]; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    g.occupied()
        .map(|v| {
            NEIGHBORS
                .iter()
                .filter(|off| {
                    let n = [0, 1, 2].map(|a| v[a] as i64 + off[a]);
                    n.iter().any(|&c| c < 0) || !g.is_occupied(n.map(|c| c as usize))
                })
                .count()
        })
        .sum()
}

/// Surface area relative to the lateral area of the cylinder with the same
/// volume and length; 1 for an ideal open cylinder.
pub fn irregularity(volume: f64, area: f64, length: f64) -> Result<f64, OracleError> {
    if !(volume > 0.0 && length > 0.0) {
        return Err(OracleError::DegenerateInput { volume, length });
    }
    let diameter = 2.0 * (volume / (PI * length)).sqrt();
    Ok(area / (PI * diameter * length))
}

pub fn compute_shape_vector(c: &FiberCluster, voxel_size: f64) -> Result<ShapeVector, OracleError> {
    compute_shape_vector_capped(c, voxel_size, DEFAULT_MAX_VOXELS)
}

pub fn compute_shape_vector_capped(
    c: &FiberCluster,
    voxel_size: f64,
    max_voxels: u64,
) -> Result<ShapeVector, OracleError> {
    let grid = voxelize_capped(c, voxel_size, max_voxels)?;
    let length = cluster_mean_length(c);
    let span = cluster_mean_span(c);
    let volume = volume(&grid);
    let total_surface_area = surface_area(&grid);
    let irregularity = irregularity(volume, total_surface_area, length)?;
    Ok(ShapeVector {
        length,
        span,
        volume,
        total_surface_area,
        irregularity,
    })
}
