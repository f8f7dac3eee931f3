//! Co-observation index and point-major block Jacobian storage.
//!
//! Observations are regrouped point-major: for each point the set of
//! observing cameras is kept sorted, and the per-observation residual and
//! Jacobian blocks live in one flat array ordered by (point, camera).
//! Because every block has the same fixed shape, the sorted camera sets
//! plus the per-point offsets fully address the array; no per-block start
//! indices are stored. The number of cameras observing point `i` is its
//! co-observation value `CO_i`, the quantity that drives both elimination
//! cost and the accelerator model.

use std::collections::BTreeMap;

use nalgebra::{RealField, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::bal_io::{BalCamera, BalProblem};
use crate::camera::{residual_block, BehindCamera, ResidualBlock};

/// Per-point sorted camera sets with offsets into the point-major block
/// array. Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoObservationIndex {
    /// Sorted (strictly increasing) camera indices per point.
    cameras: Vec<Vec<u32>>,
    /// Prefix offsets into the block array, length `a + 1`.
    offsets: Vec<usize>,
    /// Maps each original observation index to its point-major slot.
    perm: Vec<usize>,
    num_cameras: usize,
}

/// Observations regrouped to match a [`CoObservationIndex`]: slot `k` holds
/// the pixel measurement for the `k`-th (point, camera) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMajorObservations {
    uv: Vec<Vector2<f64>>,
}

impl PointMajorObservations {
    pub fn uv(&self, slot: usize) -> &Vector2<f64> {
        &self.uv[slot]
    }
}

impl CoObservationIndex {
    pub fn num_points(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_observations(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Sorted cameras observing point `i`.
    pub fn cameras_of(&self, point: usize) -> &[u32] {
        &self.cameras[point]
    }

    /// Co-observation value `CO_i`.
    pub fn co(&self, point: usize) -> usize {
        self.cameras[point].len()
    }

    /// Offset of point `i`'s first block in the point-major array.
    pub fn offset(&self, point: usize) -> usize {
        self.offsets[point]
    }

    /// Slot of the (point, camera) block, if the pair is observed.
    /// Binary search over the sorted camera set: O(log CO_i).
    pub fn slot(&self, point: usize, camera: u32) -> Option<usize> {
        self.cameras[point]
            .binary_search(&camera)
            .ok()
            .map(|k| self.offsets[point] + k)
    }

    /// Point-major slot of each original observation.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

/// Builds the co-observation index and the point-major observation layout.
pub fn build_index(problem: &BalProblem) -> (CoObservationIndex, PointMajorObservations) {
    let a = problem.num_points();
    let mut cameras: Vec<Vec<u32>> = vec![Vec::new(); a];
    for obs in &problem.observations {
        cameras[obs.point].push(obs.camera as u32);
    }
    for list in &mut cameras {
        list.sort_unstable();
    }

    let mut offsets = Vec::with_capacity(a + 1);
    let mut total = 0usize;
    for list in &cameras {
        offsets.push(total);
        total += list.len();
    }
    offsets.push(total);

    let index = CoObservationIndex {
        cameras,
        offsets,
        perm: Vec::new(),
        num_cameras: problem.num_cameras(),
    };

    let mut perm = Vec::with_capacity(problem.num_observations());
    let mut uv = vec![Vector2::zeros(); problem.num_observations()];
    for obs in &problem.observations {
        let slot = index
            .slot(obs.point, obs.camera as u32)
            .expect("observation indexed during construction");
        perm.push(slot);
        uv[slot] = obs.uv;
    }

    (
        CoObservationIndex { perm, ..index },
        PointMajorObservations { uv },
    )
}

/// One histogram bucket of the co-observation distribution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CoBucket {
    pub count: usize,
    /// Share of observed points, in percent.
    pub percent: f64,
}

/// Distribution of co-observation values over observed points (`CO_i >= 1`);
/// unobserved points are skipped. Percentages sum to 100 when any bucket
/// exists, and absent CO values are omitted.
pub fn co_histogram(index: &CoObservationIndex) -> BTreeMap<u32, CoBucket> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut observed = 0usize;
    for point in 0..index.num_points() {
        let co = index.co(point);
        if co > 0 {
            *counts.entry(co as u32).or_insert(0) += 1;
            observed += 1;
        }
    }
    counts
        .into_iter()
        .map(|(co, count)| {
            (
                co,
                CoBucket {
                    count,
                    percent: 100.0 * count as f64 / observed as f64,
                },
            )
        })
        .collect()
}

/// Point-major array of residual/Jacobian blocks, one per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockJacobian<T: RealField + Copy = f64> {
    blocks: Vec<ResidualBlock<T>>,
}

impl<T: RealField + Copy> BlockJacobian<T> {
    pub fn from_blocks(blocks: Vec<ResidualBlock<T>>) -> Self {
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, slot: usize) -> &ResidualBlock<T> {
        &self.blocks[slot]
    }

    pub fn blocks(&self) -> &[ResidualBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ResidualBlock<T>] {
        &mut self.blocks
    }

    /// Squared norm of the stacked residual vector.
    pub fn cost(&self) -> T {
        self.blocks
            .iter()
            .fold(T::zero(), |acc, b| acc + b.residual.norm_squared())
    }
}

/// Degenerate projection encountered while evaluating blocks.
#[derive(Debug, Clone, Copy, Error)]
#[error("projection of point {point} in camera {camera} is degenerate: {source}")]
pub struct EvalError {
    pub point: usize,
    pub camera: usize,
    pub source: BehindCamera,
}

fn point_blocks(
    point: usize,
    cameras: &[BalCamera],
    position: &Vector3<f64>,
    index: &CoObservationIndex,
    observations: &PointMajorObservations,
) -> Result<Vec<ResidualBlock>, EvalError> {
    let base = index.offset(point);
    index
        .cameras_of(point)
        .iter()
        .enumerate()
        .map(|(k, &j)| {
            let cam = &cameras[j as usize];
            residual_block(
                &cam.extrinsics,
                &cam.intrinsics,
                position,
                observations.uv(base + k),
            )
            .map_err(|source| EvalError {
                point,
                camera: j as usize,
                source,
            })
        })
        .collect()
}

/// Evaluates all residual/Jacobian blocks in point-major order.
pub fn evaluate_blocks(
    cameras: &[BalCamera],
    points: &[Vector3<f64>],
    index: &CoObservationIndex,
    observations: &PointMajorObservations,
) -> Result<BlockJacobian, EvalError> {
    let mut blocks = Vec::with_capacity(index.num_observations());
    for (point, position) in points.iter().enumerate() {
        blocks.extend(point_blocks(point, cameras, position, index, observations)?);
    }
    Ok(BlockJacobian { blocks })
}

/// Parallel variant of [`evaluate_blocks`]; block values are identical
/// because each block is a pure function of its own inputs.
pub fn evaluate_blocks_parallel(
    cameras: &[BalCamera],
    points: &[Vector3<f64>],
    index: &CoObservationIndex,
    observations: &PointMajorObservations,
) -> Result<BlockJacobian, EvalError> {
    let per_point: Vec<Vec<ResidualBlock>> = points
        .par_iter()
        .enumerate()
        .map(|(point, position)| point_blocks(point, cameras, position, index, observations))
        .collect::<Result<_, _>>()?;
    Ok(BlockJacobian {
        blocks: per_point.into_iter().flatten().collect(),
    })
}

/// Total squared reprojection error at the given parameters, without
/// forming Jacobians. Used for candidate-step evaluation.
pub fn evaluate_cost(
    cameras: &[BalCamera],
    points: &[Vector3<f64>],
    index: &CoObservationIndex,
    observations: &PointMajorObservations,
) -> Result<f64, EvalError> {
    let mut cost = 0.0;
    for (point, position) in points.iter().enumerate() {
        let base = index.offset(point);
        for (k, &j) in index.cameras_of(point).iter().enumerate() {
            let cam = &cameras[j as usize];
            let projected = crate::camera::project(&cam.extrinsics, &cam.intrinsics, position)
                .map_err(|source| EvalError {
                    point,
                    camera: j as usize,
                    source,
                })?;
            cost += (observations.uv(base + k) - projected).norm_squared();
        }
    }
    Ok(cost)
}
