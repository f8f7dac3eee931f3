//! BAL-convention projection model, reprojection residuals and analytic
//! Jacobian blocks.
//!
//! The convention matches the Bundler / BAL datasets: a world point `X` is
//! taken to the camera frame as `P = R(omega) * X + t`, perspective-divided
//! with a sign flip `p = -(P_x, P_y) / P_z` (cameras look down `-z`), then
//! scaled by focal length and radial distortion:
//!
//! ```text
//! out = f * (1 + k1 * |p|^2 + k2 * |p|^4) * p
//! ```
//!
//! There is no principal point or skew. Rotations use the angle-axis
//! (Rodrigues) chart stored in the BAL files; updates are applied
//! additively in that chart.

use nalgebra::{Matrix2, Matrix2x3, Matrix2x6, Matrix3, RealField, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Angle below which the Rodrigues formula switches to its second-order
/// Taylor expansion to avoid 0/0.
const SMALL_ANGLE: f64 = 1e-8;

/// Depth magnitude below which projection is reported as degenerate.
const MIN_DEPTH: f64 = 1e-12;

/// The six per-camera unknowns: angle-axis rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// Rodrigues vector (radians times unit axis).
    pub omega: Vector3<f64>,
    /// Translation, world units.
    pub t: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self { omega, t }
    }

    /// Rotation matrix for the current Rodrigues vector.
    pub fn rotation(&self) -> Matrix3<f64> {
        rodrigues(&self.omega)
    }

    /// Applies an additive step `[d_omega; d_t]` and canonicalizes the
    /// rotation so `|omega| < 2*pi` (wrap via axis renormalization).
    pub fn apply_step(&mut self, step: &Vector6<f64>) {
        self.omega += step.fixed_rows::<3>(0);
        self.t += step.fixed_rows::<3>(3);
        self.canonicalize();
    }

    /// Wraps the rotation angle into `[0, 2*pi)` keeping the axis.
    pub fn canonicalize(&mut self) {
        let theta = self.omega.norm();
        let two_pi = 2.0 * std::f64::consts::PI;
        if theta >= two_pi {
            let wrapped = theta % two_pi;
            self.omega *= wrapped / theta;
        }
    }
}

/// Frozen per-camera intrinsics: focal length and radial distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    /// Focal length, pixels.
    pub f: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Intrinsics {
    pub fn new(f: f64, k1: f64, k2: f64) -> Self {
        Self { f, k1, k2 }
    }
}

/// Residual and Jacobian blocks of one observation.
///
/// `jc` and `jp` are derivatives of the residual `observation - projection`,
/// so they carry the opposite sign of the projection derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualBlock<T: RealField + Copy = f64> {
    /// Reprojection residual, pixels.
    pub residual: Vector2<T>,
    /// d(residual) / d(omega, t), 2x6.
    pub jc: Matrix2x6<T>,
    /// d(residual) / d(point), 2x3.
    pub jp: Matrix2x3<T>,
}

/// Degenerate geometry: the point sits (numerically) on the camera plane.
#[derive(Debug, Clone, Copy, Error)]
#[error("point projects with |z| = {z_abs:e} below the depth floor")]
pub struct BehindCamera {
    pub z_abs: f64,
}

/// Skew-symmetric cross-product matrix `[v]x`.
fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation matrix.
///
/// Below an angle of 1e-8 the second-order Taylor expansion
/// `I + [w]x + [w]x^2 / 2` is used.
pub fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        Matrix3::identity() + k + k * k * 0.5
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity() + k * (theta.sin() / theta) + k * k * ((1.0 - theta.cos()) / theta2)
    }
}

/// Rotation matrix together with `d(R(omega) x) / d(omega)`.
///
/// Uses the compact closed form
/// `-R [x]x (omega omega^T + (R^T - I)[omega]x) / |omega|^2`,
/// with the limit `-R [x]x (I - [omega]x / 2)` near zero angle.
fn rotation_with_point_jacobian(
    omega: &Vector3<f64>,
    x: &Vector3<f64>,
) -> (Matrix3<f64>, Matrix3<f64>) {
    let r = rodrigues(omega);
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let m = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        Matrix3::identity() - k * 0.5
    } else {
        (omega * omega.transpose() + (r.transpose() - Matrix3::identity()) * k) / theta2
    };
    let drx = -r * skew(x) * m;
    (r, drx)
}

/// Projects a world point through the BAL camera model.
pub fn project(
    extrinsics: &CameraExtrinsics,
    intrinsics: &Intrinsics,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>, BehindCamera> {
    let p = extrinsics.rotation() * x + extrinsics.t;
    if p.z.abs() < MIN_DEPTH {
        return Err(BehindCamera { z_abs: p.z.abs() });
    }
    // Same arithmetic as residual_block, so cost-only evaluation and block
    // evaluation agree bitwise.
    let inv_z = 1.0 / p.z;
    let n = Vector2::new(-p.x * inv_z, -p.y * inv_z);
    let r2 = n.norm_squared();
    let d = 1.0 + r2 * (intrinsics.k1 + r2 * intrinsics.k2);
    Ok(n * (intrinsics.f * d))
}

/// Residual and analytic Jacobians of one observation.
pub fn residual_block(
    extrinsics: &CameraExtrinsics,
    intrinsics: &Intrinsics,
    x: &Vector3<f64>,
    observation: &Vector2<f64>,
) -> Result<ResidualBlock, BehindCamera> {
    let (r, drx_domega) = rotation_with_point_jacobian(&extrinsics.omega, x);
    let p = r * x + extrinsics.t;
    if p.z.abs() < MIN_DEPTH {
        return Err(BehindCamera { z_abs: p.z.abs() });
    }

    let inv_z = 1.0 / p.z;
    let n = Vector2::new(-p.x * inv_z, -p.y * inv_z);
    let r2 = n.norm_squared();
    let d = 1.0 + r2 * (intrinsics.k1 + r2 * intrinsics.k2);
    let projected = n * (intrinsics.f * d);

    // d(n)/d(P), 2x3.
    let dn_dp = Matrix2x3::new(
        -inv_z,
        0.0,
        p.x * inv_z * inv_z,
        0.0,
        -inv_z,
        p.y * inv_z * inv_z,
    );
    // d(out)/d(n) = f * (d I + 2 (k1 + 2 k2 r^2) n n^T), 2x2.
    let dd_scale = 2.0 * (intrinsics.k1 + 2.0 * intrinsics.k2 * r2);
    let dout_dn = (Matrix2::identity() * d + n * n.transpose() * dd_scale) * intrinsics.f;
    // Residual is observation - projection, hence the negation.
    let dres_dp = -(dout_dn * dn_dp);

    let mut jc = Matrix2x6::zeros();
    jc.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(dres_dp * drx_domega));
    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&dres_dp);
    let jp = dres_dp * r;

    Ok(ResidualBlock {
        residual: observation - projected,
        jc,
        jp,
    })
}

/// Central finite-difference Jacobians of the residual, step `h`.
///
/// Independent check of the analytic path in [`residual_block`]; used by the
/// verification command and the test suite. Returns `None` if any probe
/// projection is degenerate.
pub fn fd_residual_block(
    extrinsics: &CameraExtrinsics,
    intrinsics: &Intrinsics,
    x: &Vector3<f64>,
    observation: &Vector2<f64>,
    h: f64,
) -> Option<(Matrix2x6<f64>, Matrix2x3<f64>)> {
    let residual_at = |e: &CameraExtrinsics, pt: &Vector3<f64>| -> Option<Vector2<f64>> {
        project(e, intrinsics, pt)
            .ok()
            .map(|proj| observation - proj)
    };

    let mut jc = Matrix2x6::zeros();
    for col in 0..6 {
        let mut plus = *extrinsics;
        let mut minus = *extrinsics;
        if col < 3 {
            plus.omega[col] += h;
            minus.omega[col] -= h;
        } else {
            plus.t[col - 3] += h;
            minus.t[col - 3] -= h;
        }
        let diff = (residual_at(&plus, x)? - residual_at(&minus, x)?) / (2.0 * h);
        jc.set_column(col, &diff);
    }

    let mut jp = Matrix2x3::zeros();
    for col in 0..3 {
        let mut plus = *x;
        let mut minus = *x;
        plus[col] += h;
        minus[col] -= h;
        let diff = (residual_at(extrinsics, &plus)? - residual_at(extrinsics, &minus)?) / (2.0 * h);
        jp.set_column(col, &diff);
    }

    Some((jc, jp))
}
