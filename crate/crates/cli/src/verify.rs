//! Self-verification: re-derives Jacobians and the reduced camera system
//! through independent reference computations on a subsample of the input
//! and compares against the production paths.

use std::collections::BTreeMap;

use clap::Args;
use nalgebra::DVector;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use coba::bal_io::{BalProblem, Observation};
use coba::camera::fd_residual_block;
use coba::coobs::{build_index, evaluate_blocks};
use coba::linalg::cholesky_solve;
use coba::schur::{back_substitute, dense_normal_system, dense_oracle, schur_eliminate};

use crate::{load_problem, CliError, CommonArgs};

/// Central-difference step for the Jacobian check.
const FD_STEP: f64 = 1e-6;
/// Relative tolerances of the three checks.
const TOL_JACOBIAN: f64 = 1e-5;
const TOL_SCHUR: f64 = 1e-10;
const TOL_NORMAL_EQ: f64 = 1e-8;

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Subsample bounds: max points, then max cameras.
    #[arg(long, num_args = 2, value_names = ["A_MAX", "B_MAX"], default_values_t = [200, 8])]
    scale: Vec<usize>,
    /// Subsampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one analytic Jacobian entry before checking (test hook).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Seeded random subsample: keeps at most `b_max` cameras and `a_max`
/// points that remain observed, renumbering indices.
fn subsample(problem: &BalProblem, a_max: usize, b_max: usize, seed: u64) -> BalProblem {
    let mut rng = StdRng::seed_from_u64(seed);

    let mut camera_ids: Vec<usize> = (0..problem.num_cameras()).collect();
    camera_ids.shuffle(&mut rng);
    camera_ids.truncate(b_max);
    camera_ids.sort_unstable();
    let camera_pos: BTreeMap<usize, usize> = camera_ids
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();

    let mut observed_points: Vec<usize> = problem
        .observations
        .iter()
        .filter(|o| camera_pos.contains_key(&o.camera))
        .map(|o| o.point)
        .collect();
    observed_points.sort_unstable();
    observed_points.dedup();
    observed_points.shuffle(&mut rng);
    observed_points.truncate(a_max);
    observed_points.sort_unstable();
    let point_pos: BTreeMap<usize, usize> = observed_points
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();

    BalProblem {
        cameras: camera_ids.iter().map(|&j| problem.cameras[j]).collect(),
        points: observed_points.iter().map(|&i| problem.points[i]).collect(),
        observations: problem
            .observations
            .iter()
            .filter_map(|o| {
                Some(Observation {
                    camera: *camera_pos.get(&o.camera)?,
                    point: *point_pos.get(&o.point)?,
                    uv: o.uv,
                })
            })
            .collect(),
    }
}

pub fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let problem = load_problem(&args.common.input)?;
    let (a_max, b_max) = (args.scale[0], args.scale[1]);
    let sub = subsample(&problem, a_max, b_max, args.seed);
    if sub.num_observations() == 0 {
        return Err(CliError::Numerical(
            "subsample has no observations; nothing to verify".to_string(),
        ));
    }
    println!(
        "verifying on subsample: {} cameras, {} points, {} observations (seed {})",
        sub.num_cameras(),
        sub.num_points(),
        sub.num_observations(),
        args.seed
    );

    let (index, observations) = build_index(&sub);
    let mut blocks = evaluate_blocks(&sub.cameras, &sub.points, &index, &observations)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    if args.inject_fault {
        blocks.blocks_mut()[0].jc[(0, 0)] += 1.0;
    }

    let mut all_pass = true;

    // Jacobian check: analytic blocks against central differences on up to
    // 100 observations.
    let mut worst_jac = 0.0f64;
    let mut checked = 0usize;
    'outer: for i in 0..sub.num_points() {
        let base = index.offset(i);
        for (k, &j) in index.cameras_of(i).iter().enumerate() {
            if checked >= 100 {
                break 'outer;
            }
            let cam = &sub.cameras[j as usize];
            let blk = blocks.block(base + k);
            if let Some((fd_jc, fd_jp)) = fd_residual_block(
                &cam.extrinsics,
                &cam.intrinsics,
                &sub.points[i],
                observations.uv(base + k),
                FD_STEP,
            ) {
                let scale = blk.jc.norm().max(blk.jp.norm()).max(1.0);
                worst_jac = worst_jac.max((blk.jc - fd_jc).norm() / scale);
                worst_jac = worst_jac.max((blk.jp - fd_jp).norm() / scale);
                checked += 1;
            }
        }
    }
    all_pass &= report_check(
        "jacobian_finite_difference",
        worst_jac,
        TOL_JACOBIAN,
        &format!("{checked} observations"),
    );

    // Schur check: eliminated system against the dense reference.
    let a = index.num_points();
    let b = index.num_cameras();
    let mut diag = vec![0.0; 3 * a + 6 * b];
    for i in 0..a {
        let base = index.offset(i);
        for (k, &j) in index.cameras_of(i).iter().enumerate() {
            let blk = blocks.block(base + k);
            for c in 0..3 {
                diag[3 * i + c] += blk.jp.column(c).norm_squared();
            }
            for c in 0..6 {
                diag[3 * a + 6 * j as usize + c] += blk.jc.column(c).norm_squared();
            }
        }
    }
    let max_diag = diag.iter().cloned().fold(0.0, f64::max);
    let d: Vec<f64> = diag.iter().map(|v| v.sqrt()).collect();
    let mu = 1e-3 * max_diag;

    match schur_eliminate(&blocks, &index, mu, &d) {
        Ok((system, aux)) => {
            let (s_dense, r_dense) = dense_oracle(&blocks, &index, mu, &d);
            let s_err = (system.reassemble() - &s_dense).norm() / s_dense.norm();
            let r_vec = DVector::from_column_slice(&system.r);
            let r_err = (&r_vec - &r_dense).norm() / r_dense.norm().max(1e-300);
            all_pass &= report_check("schur_oracle_s", s_err, TOL_SCHUR, "relative Frobenius");
            all_pass &= report_check("schur_oracle_r", r_err, TOL_SCHUR, "relative norm");

            // Normal-equation check: the stacked update solves the dense
            // damped system.
            match cholesky_solve(&system, &system.r) {
                Ok(delta_c) => {
                    let delta_p = back_substitute(&aux, &delta_c, &index);
                    let (a_mat, g) = dense_normal_system(&blocks, &index, mu, &d);
                    let delta: Vec<f64> = delta_p.iter().chain(delta_c.iter()).copied().collect();
                    let delta = DVector::from_column_slice(&delta);
                    let res = (&a_mat * &delta - &g).norm() / g.norm().max(1e-300);
                    all_pass &=
                        report_check("normal_equation", res, TOL_NORMAL_EQ, "relative residual");
                }
                Err(e) => {
                    println!("FAIL normal_equation ({e})");
                    all_pass = false;
                }
            }
        }
        Err(e) => {
            println!("FAIL schur_oracle ({e})");
            all_pass = false;
        }
    }

    if all_pass {
        println!("verification passed");
        Ok(())
    } else {
        println!("verification FAILED");
        Err(CliError::Verification)
    }
}

fn report_check(name: &str, value: f64, tolerance: f64, detail: &str) -> bool {
    let pass = value <= tolerance;
    println!(
        "{} {name} ({detail}: {value:.3e}, tolerance {tolerance:.0e})",
        if pass { "PASS" } else { "FAIL" },
    );
    pass
}
