//! Reduced camera system construction by point-block elimination, and the
//! matching back substitution for point updates.
//!
//! For the damped normal equations the parameter blocks split into point
//! blocks (3x3 `U_i`) and camera blocks (6x6), coupled by 6x3 blocks
//! `W_ij = Jc_ij^T Jp_ij`. Eliminating the point blocks yields the reduced
//! camera system `S = V - W U^-1 W^T` and right-hand side
//! `r = g_c - W U^-1 g_p`, assembled here directly from the co-observation
//! index: each point contributes to exactly the camera pairs in its sorted
//! camera set, so the pair loop costs `CO_i^2` block operations per point.
//!
//! `S` is symmetric; only the full diagonal blocks and the strict upper
//! block triangle are stored. Elimination is bitwise deterministic: per
//! accumulation target, contributions are applied in point order with a
//! fixed intra-point order, whether points are processed sequentially or in
//! parallel.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, RealField, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::coobs::{BlockJacobian, CoObservationIndex};
use crate::linalg::inv3x3_with_floor;

/// Determinant floors for the per-point 3x3 inversion. Adjugate inversion
/// degrades gracefully, so only an effectively zero determinant aborts.
pub const SINGULAR_U_FLOOR_F64: f64 = 1e-300;
pub const SINGULAR_U_FLOOR_F32: f32 = 1e-30;

#[derive(Debug, Error)]
pub enum SchurError {
    #[error("point {point}: U block is numerically singular; raise the damping")]
    SingularPoint { point: usize },
}

/// Arithmetic width for elimination. The 32-bit mode mirrors a
/// single-precision hardware datapath: inputs are rounded once and every
/// intermediate is computed in `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    Binary32,
    Binary64,
}

/// The reduced camera system: 6x6 diagonal blocks, the strict upper block
/// triangle in row-major packed order, and the reduced right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurSystem<T: RealField + Copy = f64> {
    num_cameras: usize,
    diag: Vec<Matrix6<T>>,
    upper: Vec<Matrix6<T>>,
    pub r: Vec<T>,
}

impl<T: RealField + Copy> SchurSystem<T> {
    fn zeros(num_cameras: usize) -> Self {
        Self {
            num_cameras,
            diag: vec![Matrix6::zeros(); num_cameras],
            upper: vec![Matrix6::zeros(); num_cameras * num_cameras.saturating_sub(1) / 2],
            r: vec![T::zero(); 6 * num_cameras],
        }
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    /// Dimension of the assembled system (`6b`).
    pub fn dim(&self) -> usize {
        6 * self.num_cameras
    }

    /// Index of block (j1, j2), j1 < j2, in the packed strict upper triangle.
    pub fn off_index(&self, j1: usize, j2: usize) -> usize {
        debug_assert!(j1 < j2 && j2 < self.num_cameras);
        j1 * self.num_cameras - j1 * (j1 + 1) / 2 + (j2 - j1 - 1)
    }

    pub fn diag_block(&self, j: usize) -> &Matrix6<T> {
        &self.diag[j]
    }

    /// Stored block (j1, j2) of the strict upper triangle.
    pub fn upper_block(&self, j1: usize, j2: usize) -> &Matrix6<T> {
        &self.upper[self.off_index(j1, j2)]
    }

    /// Scalar entry of the full symmetric matrix.
    pub fn entry(&self, row: usize, col: usize) -> T {
        let (j1, r) = (row / 6, row % 6);
        let (j2, c) = (col / 6, col % 6);
        match j1.cmp(&j2) {
            std::cmp::Ordering::Equal => self.diag[j1][(r, c)],
            std::cmp::Ordering::Less => self.upper[self.off_index(j1, j2)][(r, c)],
            std::cmp::Ordering::Greater => self.upper[self.off_index(j2, j1)][(c, r)],
        }
    }

    /// Assembles the full symmetric matrix (mirroring is definitional, so
    /// the result is exactly symmetric).
    pub fn reassemble(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.entry(i, j))
    }

    /// Frobenius norm of the full symmetric matrix (off-diagonal blocks
    /// counted twice).
    pub fn frobenius(&self) -> T {
        let mut acc = T::zero();
        for block in &self.diag {
            acc += block.norm_squared();
        }
        for block in &self.upper {
            acc += block.norm_squared() * (T::one() + T::one());
        }
        acc.sqrt()
    }
}

impl SchurSystem<f32> {
    fn widen(&self) -> SchurSystem<f64> {
        SchurSystem {
            num_cameras: self.num_cameras,
            diag: self.diag.iter().map(|m| m.map(|v| v as f64)).collect(),
            upper: self.upper.iter().map(|m| m.map(|v| v as f64)).collect(),
            r: self.r.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Per-point working data kept for back substitution: `U_i`, its inverse,
/// the point gradient `g_i`, and the `W` blocks aligned with the
/// point-major block array.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAux<T: RealField + Copy = f64> {
    u: Vec<Matrix3<T>>,
    u_inv: Vec<Matrix3<T>>,
    g: Vec<Vector3<T>>,
    w: Vec<Matrix6x3<T>>,
    pair_visits: u64,
}

impl<T: RealField + Copy> PointAux<T> {
    pub fn u(&self, point: usize) -> &Matrix3<T> {
        &self.u[point]
    }

    pub fn u_inv(&self, point: usize) -> &Matrix3<T> {
        &self.u_inv[point]
    }

    pub fn point_gradient(&self, point: usize) -> &Vector3<T> {
        &self.g[point]
    }

    pub fn w(&self, slot: usize) -> &Matrix6x3<T> {
        &self.w[slot]
    }

    /// Camera-pair visits of the elimination loop, mirrored pairs included:
    /// sums to `CO_i^2` per point, and to `a * b^2` under full visibility.
    pub fn pair_visits(&self) -> u64 {
        self.pair_visits
    }
}

impl PointAux<f32> {
    fn widen(&self) -> PointAux<f64> {
        PointAux {
            u: self.u.iter().map(|m| m.map(|v| v as f64)).collect(),
            u_inv: self.u_inv.iter().map(|m| m.map(|v| v as f64)).collect(),
            g: self.g.iter().map(|m| m.map(|v| v as f64)).collect(),
            w: self.w.iter().map(|m| m.map(|v| v as f64)).collect(),
            pair_visits: self.pair_visits,
        }
    }
}

/// Everything one point adds to the system, recorded in the order the
/// sequential loop would apply it so both execution modes accumulate
/// identically.
struct PointContribution<T: RealField + Copy> {
    u: Matrix3<T>,
    u_inv: Matrix3<T>,
    g: Vector3<T>,
    w: Vec<Matrix6x3<T>>,
    add_diag: Vec<(usize, Matrix6<T>)>,
    add_r: Vec<(usize, Vector6<T>)>,
    sub_r: Vec<(usize, Vector6<T>)>,
    sub_diag: Vec<(usize, Matrix6<T>)>,
    sub_upper: Vec<(usize, Matrix6<T>)>,
    pair_visits: u64,
}

fn compute_point<T: RealField + Copy>(
    point: usize,
    blocks: &BlockJacobian<T>,
    index: &CoObservationIndex,
    mu: T,
    d: &[T],
    det_floor: T,
) -> Result<PointContribution<T>, SchurError> {
    let cams = index.cameras_of(point);
    let base = index.offset(point);
    let co = cams.len();

    // U_i seeded with the damping diagonal mu * D_i^p^T D_i^p.
    let mut u = Matrix3::zeros();
    for c in 0..3 {
        let s = d[3 * point + c];
        u[(c, c)] = mu * s * s;
    }
    let mut g = Vector3::zeros();
    let mut w = Vec::with_capacity(co);
    let mut add_diag = Vec::with_capacity(co);
    let mut add_r = Vec::with_capacity(co);
    for (k, &j) in cams.iter().enumerate() {
        let blk = blocks.block(base + k);
        let jpt = blk.jp.transpose();
        let jct = blk.jc.transpose();
        u += jpt * blk.jp;
        g += jpt * blk.residual;
        w.push(jct * blk.jp);
        add_diag.push((j as usize, jct * blk.jc));
        add_r.push((j as usize, jct * blk.residual));
    }

    let u_inv = inv3x3_with_floor(&u, det_floor).ok_or(SchurError::SingularPoint { point })?;

    let mut sub_r = Vec::with_capacity(co);
    let mut sub_diag = Vec::with_capacity(co);
    let mut sub_upper = Vec::with_capacity(co * co.saturating_sub(1) / 2);
    let mut pair_visits = 0u64;
    for k1 in 0..co {
        let j1 = cams[k1] as usize;
        let w1_inv = w[k1] * u_inv;
        sub_r.push((j1, w1_inv * g));
        for (k2, &j2) in cams.iter().enumerate().skip(k1) {
            let contrib = w1_inv * w[k2].transpose();
            if k1 == k2 {
                pair_visits += 1;
                // W inv W^T is symmetric in exact arithmetic but not
                // bitwise; average the halves so the diagonal block (and
                // with it the reassembled system) is exactly symmetric.
                let half = T::one() / (T::one() + T::one());
                sub_diag.push((j1, (contrib + contrib.transpose()) * half));
            } else {
                // The mirrored (j2, j1) block is definitional, so it counts
                // as a visit but is never computed.
                pair_visits += 2;
                sub_upper.push((
                    pack_off_index(j1, j2 as usize, index.num_cameras()),
                    contrib,
                ));
            }
        }
    }

    Ok(PointContribution {
        u,
        u_inv,
        g,
        w,
        add_diag,
        add_r,
        sub_r,
        sub_diag,
        sub_upper,
        pair_visits,
    })
}

fn pack_off_index(j1: usize, j2: usize, b: usize) -> usize {
    j1 * b - j1 * (j1 + 1) / 2 + (j2 - j1 - 1)
}

fn add_r6<T: RealField + Copy>(r: &mut [T], j: usize, v: &Vector6<T>, negate: bool) {
    for c in 0..6 {
        if negate {
            r[6 * j + c] -= v[c];
        } else {
            r[6 * j + c] += v[c];
        }
    }
}

fn apply_contribution<T: RealField + Copy>(
    system: &mut SchurSystem<T>,
    aux: &mut PointAux<T>,
    contribution: PointContribution<T>,
) {
    for (j, m) in &contribution.add_diag {
        system.diag[*j] += m;
    }
    for (j, v) in &contribution.add_r {
        add_r6(&mut system.r, *j, v, false);
    }
    for (j, v) in &contribution.sub_r {
        add_r6(&mut system.r, *j, v, true);
    }
    for (j, m) in &contribution.sub_diag {
        system.diag[*j] -= m;
    }
    for (idx, m) in &contribution.sub_upper {
        system.upper[*idx] -= m;
    }
    aux.u.push(contribution.u);
    aux.u_inv.push(contribution.u_inv);
    aux.g.push(contribution.g);
    aux.w.extend(contribution.w);
    aux.pair_visits += contribution.pair_visits;
}

fn eliminate_core<T: RealField + Copy + Send + Sync>(
    blocks: &BlockJacobian<T>,
    index: &CoObservationIndex,
    mu: T,
    d: &[T],
    det_floor: T,
    parallel: bool,
) -> Result<(SchurSystem<T>, PointAux<T>), SchurError> {
    let a = index.num_points();
    let b = index.num_cameras();
    assert_eq!(blocks.len(), index.num_observations(), "block count");
    assert_eq!(d.len(), 3 * a + 6 * b, "scaling vector length");

    let mut system = SchurSystem::zeros(b);
    // S_jj seeded with the camera damping diagonal mu * D_j^c^T D_j^c.
    for j in 0..b {
        for c in 0..6 {
            let s = d[3 * a + 6 * j + c];
            system.diag[j][(c, c)] = mu * s * s;
        }
    }

    let mut aux = PointAux {
        u: Vec::with_capacity(a),
        u_inv: Vec::with_capacity(a),
        g: Vec::with_capacity(a),
        w: Vec::with_capacity(blocks.len()),
        pair_visits: 0,
    };

    if parallel {
        let contributions: Vec<PointContribution<T>> = (0..a)
            .into_par_iter()
            .map(|i| compute_point(i, blocks, index, mu, d, det_floor))
            .collect::<Result<_, _>>()?;
        for contribution in contributions {
            apply_contribution(&mut system, &mut aux, contribution);
        }
    } else {
        for i in 0..a {
            let contribution = compute_point(i, blocks, index, mu, d, det_floor)?;
            apply_contribution(&mut system, &mut aux, contribution);
        }
    }

    Ok((system, aux))
}

/// Sequential elimination in 64-bit arithmetic. Bitwise reproducible.
pub fn schur_eliminate(
    blocks: &BlockJacobian,
    index: &CoObservationIndex,
    mu: f64,
    d: &[f64],
) -> Result<(SchurSystem, PointAux), SchurError> {
    eliminate_core(blocks, index, mu, d, SINGULAR_U_FLOOR_F64, false)
}

/// Parallel-over-points elimination. Per-point contributions are merged in
/// point order, so the result is bitwise equal to [`schur_eliminate`].
pub fn schur_eliminate_parallel(
    blocks: &BlockJacobian,
    index: &CoObservationIndex,
    mu: f64,
    d: &[f64],
) -> Result<(SchurSystem, PointAux), SchurError> {
    eliminate_core(blocks, index, mu, d, SINGULAR_U_FLOOR_F64, true)
}

/// Rounds every stored block value to the target width. `Binary64` is the
/// identity; `Binary32` rounds each value to the nearest `f32`.
pub fn convert_precision(blocks: &BlockJacobian, precision: Precision) -> BlockJacobian {
    match precision {
        Precision::Binary64 => blocks.clone(),
        Precision::Binary32 => BlockJacobian::from_blocks(
            blocks
                .blocks()
                .iter()
                .map(|b| crate::camera::ResidualBlock {
                    residual: b.residual.map(|v| v as f32 as f64),
                    jc: b.jc.map(|v| v as f32 as f64),
                    jp: b.jp.map(|v| v as f32 as f64),
                })
                .collect(),
        ),
    }
}

/// Elimination at the requested arithmetic width. In `Binary32` mode
/// inputs are rounded to `f32`, the whole elimination runs in `f32`, and
/// results are widened back for storage.
pub fn schur_eliminate_in(
    precision: Precision,
    blocks: &BlockJacobian,
    index: &CoObservationIndex,
    mu: f64,
    d: &[f64],
    parallel: bool,
) -> Result<(SchurSystem, PointAux), SchurError> {
    match precision {
        Precision::Binary64 => eliminate_core(blocks, index, mu, d, SINGULAR_U_FLOOR_F64, parallel),
        Precision::Binary32 => {
            let blocks32 = BlockJacobian::from_blocks(
                blocks
                    .blocks()
                    .iter()
                    .map(|b| crate::camera::ResidualBlock {
                        residual: b.residual.map(|v| v as f32),
                        jc: b.jc.map(|v| v as f32),
                        jp: b.jp.map(|v| v as f32),
                    })
                    .collect(),
            );
            let d32: Vec<f32> = d.iter().map(|&v| v as f32).collect();
            let (system, aux) = eliminate_core(
                &blocks32,
                index,
                mu as f32,
                &d32,
                SINGULAR_U_FLOOR_F32,
                parallel,
            )?;
            Ok((system.widen(), aux.widen()))
        }
    }
}

/// Recovers the point updates from the camera updates:
/// `dp_i = U_i^-1 (g_i - sum_j W_ij^T dc_j)`.
pub fn back_substitute(aux: &PointAux, delta_c: &[f64], index: &CoObservationIndex) -> Vec<f64> {
    assert_eq!(delta_c.len(), 6 * index.num_cameras());
    let mut delta_p = vec![0.0; 3 * index.num_points()];
    for i in 0..index.num_points() {
        let base = index.offset(i);
        let mut acc = *aux.point_gradient(i);
        for (k, &j) in index.cameras_of(i).iter().enumerate() {
            let dc = Vector6::from_column_slice(&delta_c[6 * j as usize..6 * j as usize + 6]);
            acc -= aux.w(base + k).transpose() * dc;
        }
        let dp = aux.u_inv(i) * acc;
        delta_p[3 * i..3 * i + 3].copy_from_slice(dp.as_slice());
    }
    delta_p
}

/// Dense assembly of the damped normal equations `(A + mu D^T D, g)` in the
/// stacked `[points; cameras]` layout. Test oracle and verification aid;
/// quadratic memory in the parameter count.
pub fn dense_normal_system(
    blocks: &BlockJacobian,
    index: &CoObservationIndex,
    mu: f64,
    d: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let a = index.num_points();
    let b = index.num_cameras();
    let m = 3 * a + 6 * b;
    assert_eq!(d.len(), m);

    let mut a_mat = DMatrix::zeros(m, m);
    let mut g = DVector::zeros(m);
    for i in 0..a {
        let base = index.offset(i);
        for (k, &j) in index.cameras_of(i).iter().enumerate() {
            let blk = blocks.block(base + k);
            let j = j as usize;
            let jpt_jp = blk.jp.transpose() * blk.jp;
            let jct_jc = blk.jc.transpose() * blk.jc;
            let w = blk.jc.transpose() * blk.jp;
            let pr = 3 * i;
            let cr = 3 * a + 6 * j;
            a_mat.view_mut((pr, pr), (3, 3)).add_assign(&jpt_jp);
            a_mat.view_mut((cr, cr), (6, 6)).add_assign(&jct_jc);
            a_mat.view_mut((cr, pr), (6, 3)).add_assign(&w);
            a_mat.view_mut((pr, cr), (3, 6)).add_assign(&w.transpose());
            g.rows_mut(pr, 3)
                .add_assign(&(blk.jp.transpose() * blk.residual));
            g.rows_mut(cr, 6)
                .add_assign(&(blk.jc.transpose() * blk.residual));
        }
    }
    for idx in 0..m {
        a_mat[(idx, idx)] += mu * d[idx] * d[idx];
    }
    (a_mat, g)
}

/// Ground-truth reduced system computed by explicit dense block algebra:
/// `S = V - W U^-1 W^T` and `r = g_c - W U^-1 g_p`.
///
/// The per-point 3x3 inversions use the general dense inverse, not the
/// adjugate kernel, keeping this path independent of the elimination it
/// checks. A singular point block (possible only for degenerate zero
/// inputs) contributes as zero.
pub fn dense_oracle(
    blocks: &BlockJacobian,
    index: &CoObservationIndex,
    mu: f64,
    d: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let a = index.num_points();
    let b = index.num_cameras();
    let (a_mat, g) = dense_normal_system(blocks, index, mu, d);

    let mut u_inv = DMatrix::zeros(3 * a, 3 * a);
    for i in 0..a {
        let u_block = a_mat.fixed_view::<3, 3>(3 * i, 3 * i).into_owned();
        let inv = u_block.try_inverse().unwrap_or_else(Matrix3::zeros);
        u_inv.view_mut((3 * i, 3 * i), (3, 3)).copy_from(&inv);
    }

    let w = a_mat.view((3 * a, 0), (6 * b, 3 * a)).into_owned();
    let v = a_mat.view((3 * a, 3 * a), (6 * b, 6 * b)).into_owned();
    let w_u_inv = &w * &u_inv;
    let s = v - &w_u_inv * w.transpose();
    let r = g.rows(3 * a, 6 * b).into_owned() - &w_u_inv * g.rows(0, 3 * a).into_owned();
    (s, r)
}
