//! Levenberg-Marquardt driver over the Schur-eliminated normal equations.
//!
//! Residual blocks carry derivatives of `observation - projection`, so the
//! assembled right-hand side `g = J^T eps` is the negated Gauss-Newton
//! right-hand side and accepted steps subtract the solved update. All the
//! textbook update formulas (gain ratio, damping schedule, stop tests) are
//! unchanged under this sign convention.
//!
//! Damping scales by `D = sqrt(diag(J^T J))ᵀ`, recomputed whenever the
//! Jacobian changes. A rejected step re-runs the elimination with the
//! inflated damping on the cached blocks; the damping enters the reduced
//! system through every `U_i^-1`, so there is no cheaper exact update.
//!
//! No gauge fixing is applied: the global similarity ambiguity of bundle
//! adjustment is left to the damping to regularize, which can slow final
//! convergence on noisy problems.

use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::bal_io::{BalCamera, BalProblem};
use crate::coobs::{
    build_index, evaluate_blocks, evaluate_blocks_parallel, evaluate_cost, BlockJacobian,
    CoObservationIndex, EvalError,
};
use crate::linalg::cholesky_solve;
use crate::schur::{back_substitute, schur_eliminate_in, Precision};

/// Consecutive unsolvable-system retries (singular point block or
/// non-positive pivot) tolerated before aborting.
const MAX_DAMPING_CASCADE: u32 = 32;

/// User-facing optimizer parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    /// Initial damping scale; `mu_0 = tau * max(diag(J^T J))`.
    pub tau: f64,
    /// Gradient infinity-norm stop tolerance.
    pub eps1: f64,
    /// Relative step-size stop tolerance.
    pub eps2: f64,
    /// Iteration cap.
    pub k_max: usize,
    /// Arithmetic width of the elimination stage.
    pub precision: Precision,
    /// Evaluate blocks and eliminate points in parallel. Results are
    /// bitwise identical to the sequential mode.
    pub parallel: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            tau: 1e-3,
            eps1: 1e-10,
            eps2: 1e-10,
            k_max: 50,
            precision: Precision::Binary64,
            parallel: false,
        }
    }
}

/// Optimizer state after the latest accepted step.
#[derive(Debug, Clone)]
pub struct LmState {
    /// Stacked parameter vector `[points (3a); cameras (6b)]`.
    pub p: Vec<f64>,
    pub mu: f64,
    pub nu: f64,
    pub k: usize,
    /// Squared residual norm.
    pub cost: f64,
    /// Assembled `J^T eps`, stacked like `p`.
    pub g: Vec<f64>,
    /// Damping scales `sqrt(diag(J^T J))`, stacked like `p`.
    pub d: Vec<f64>,
}

/// Wall-clock milliseconds of the five phases of one iteration: Jacobian
/// update, Schur elimination, Cholesky factorization + solve, gain ratio
/// evaluation, trust region update.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PhaseTimings {
    pub ju: f64,
    pub se: f64,
    pub cfs: f64,
    pub gre: f64,
    pub tre: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IterationTrace {
    pub k: usize,
    pub cost: f64,
    pub g_inf: f64,
    pub mu: f64,
    /// Gain ratio; absent when the linear system was not solvable at the
    /// current damping. A candidate that failed cost evaluation yields
    /// `-inf`, which JSON output renders as null as well.
    pub rho: Option<f64>,
    pub accepted: bool,
    pub timings_ms: PhaseTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCause {
    /// `|g|_inf <= eps1`.
    Gradient,
    /// `|delta| <= eps2 |p|`.
    SmallStep,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub stop: StopCause,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub trace: Vec<IterationTrace>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("problem has no observations")]
    Empty,
    #[error("degenerate projection at the current parameters: {0}")]
    Degenerate(#[from] EvalError),
    #[error("no solvable system after {limit} consecutive damping inflations")]
    DampingCascade { limit: u32 },
}

/// Gain ratio `(cost_old - cost_new) / (delta^T (mu delta + g))`.
///
/// A non-positive denominator cannot occur for a step solved from a
/// positive definite system; it is mapped to `-1` so the caller rejects.
pub fn gain_ratio(cost_old: f64, cost_new: f64, delta: &[f64], mu: f64, g: &[f64]) -> f64 {
    debug_assert_eq!(delta.len(), g.len());
    let denom: f64 = delta
        .iter()
        .zip(g)
        .map(|(&dp, &gi)| dp * (mu * dp + gi))
        .sum();
    if denom <= 0.0 {
        return -1.0;
    }
    (cost_old - cost_new) / denom
}

/// Damping schedule: accepted steps scale `mu` by
/// `max(1/3, 1 - (2 rho - 1)^3)` and reset `nu`; rejected steps multiply
/// `mu` by `nu` and double `nu`.
pub fn update_mu(mu: f64, nu: f64, rho: f64) -> (f64, f64) {
    if rho > 0.0 {
        let factor = (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
        (mu * factor, 2.0)
    } else {
        (mu * nu, 2.0 * nu)
    }
}

/// Stacks `[points; cameras]` into one parameter vector.
fn stack_parameters(cameras: &[BalCamera], points: &[Vector3<f64>]) -> Vec<f64> {
    let mut p = Vec::with_capacity(3 * points.len() + 6 * cameras.len());
    for x in points {
        p.extend_from_slice(x.as_slice());
    }
    for cam in cameras {
        p.extend_from_slice(cam.extrinsics.omega.as_slice());
        p.extend_from_slice(cam.extrinsics.t.as_slice());
    }
    p
}

/// Damping scales `sqrt(diag(J^T J))` and the largest diagonal entry.
fn scaling(blocks: &BlockJacobian, index: &CoObservationIndex) -> (Vec<f64>, f64) {
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
    for v in &mut diag {
        *v = v.sqrt();
    }
    (diag, max_diag)
}

/// Assembled `J^T eps` in the stacked layout.
fn gradient(blocks: &BlockJacobian, index: &CoObservationIndex) -> Vec<f64> {
    let a = index.num_points();
    let b = index.num_cameras();
    let mut g = vec![0.0; 3 * a + 6 * b];
    for i in 0..a {
        let base = index.offset(i);
        for (k, &j) in index.cameras_of(i).iter().enumerate() {
            let blk = blocks.block(base + k);
            let gp = blk.jp.transpose() * blk.residual;
            let gc = blk.jc.transpose() * blk.residual;
            for c in 0..3 {
                g[3 * i + c] += gp[c];
            }
            for c in 0..6 {
                g[3 * a + 6 * j as usize + c] += gc[c];
            }
        }
    }
    g
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
}

fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

struct StepOutput {
    delta_points: Vec<f64>,
    delta_cameras: Vec<f64>,
    se_ms: f64,
    cfs_ms: f64,
}

/// The linear solve of one iteration: factor out so the driver can be
/// exercised against a dense reference in tests.
trait NormalStep {
    fn solve_step(
        &self,
        blocks: &BlockJacobian,
        index: &CoObservationIndex,
        mu: f64,
        d: &[f64],
    ) -> Option<StepOutput>;
}

/// Production path: Schur elimination, packed Cholesky, back substitution.
struct SchurStep {
    precision: Precision,
    parallel: bool,
}

impl NormalStep for SchurStep {
    fn solve_step(
        &self,
        blocks: &BlockJacobian,
        index: &CoObservationIndex,
        mu: f64,
        d: &[f64],
    ) -> Option<StepOutput> {
        let se_start = Instant::now();
        let (system, aux) =
            schur_eliminate_in(self.precision, blocks, index, mu, d, self.parallel).ok()?;
        let se_ms = se_start.elapsed().as_secs_f64() * 1e3;

        let cfs_start = Instant::now();
        let delta_cameras = cholesky_solve(&system, &system.r).ok()?;
        let delta_points = back_substitute(&aux, &delta_cameras, index);
        let cfs_ms = cfs_start.elapsed().as_secs_f64() * 1e3;

        Some(StepOutput {
            delta_points,
            delta_cameras,
            se_ms,
            cfs_ms,
        })
    }
}

fn apply_step(
    cameras: &[BalCamera],
    points: &[Vector3<f64>],
    step: &StepOutput,
) -> (Vec<BalCamera>, Vec<Vector3<f64>>) {
    let mut cams = cameras.to_vec();
    let mut pts = points.to_vec();
    // The solved delta points uphill (see module docs), so subtract.
    for (i, x) in pts.iter_mut().enumerate() {
        *x -= Vector3::from_column_slice(&step.delta_points[3 * i..3 * i + 3]);
    }
    for (j, cam) in cams.iter_mut().enumerate() {
        let d = &step.delta_cameras[6 * j..6 * j + 6];
        cam.extrinsics
            .apply_step(&-nalgebra::Vector6::from_column_slice(d));
    }
    (cams, pts)
}

/// Minimizes the total squared reprojection error. Returns the optimized
/// problem and the per-iteration trace.
///
/// ```
/// use coba::lm::{solve, LmConfig};
/// use coba::synthetic::{generate, perturbed, SyntheticConfig};
///
/// let truth = generate(&SyntheticConfig::new(3, 12, 1));
/// let problem = perturbed(&truth, 1e-3, 2);
/// let (_, report) = solve(&problem, &LmConfig::default()).unwrap();
/// assert!(report.final_cost < 1e-12 * report.initial_cost);
/// ```
pub fn solve(
    problem: &BalProblem,
    config: &LmConfig,
) -> Result<(BalProblem, SolveReport), SolveError> {
    let step = SchurStep {
        precision: config.precision,
        parallel: config.parallel,
    };
    solve_with(problem, config, &step)
}

fn solve_with(
    problem: &BalProblem,
    config: &LmConfig,
    step_solver: &dyn NormalStep,
) -> Result<(BalProblem, SolveReport), SolveError> {
    if problem.num_observations() == 0 {
        return Err(SolveError::Empty);
    }
    let (index, observations) = build_index(problem);
    let mut cameras = problem.cameras.clone();
    let mut points = problem.points.clone();

    let eval = |cams: &[BalCamera], pts: &[Vector3<f64>]| -> Result<BlockJacobian, EvalError> {
        if config.parallel {
            evaluate_blocks_parallel(cams, pts, &index, &observations)
        } else {
            evaluate_blocks(cams, pts, &index, &observations)
        }
    };

    let mut blocks = eval(&cameras, &points)?;
    let (mut d, max_diag) = scaling(&blocks, &index);
    let mut state = LmState {
        p: stack_parameters(&cameras, &points),
        mu: config.tau * max_diag,
        nu: 2.0,
        k: 0,
        cost: blocks.cost(),
        g: gradient(&blocks, &index),
        d: d.clone(),
    };
    let initial_cost = state.cost;
    let mut g_inf = inf_norm(&state.g);
    let mut stop = (g_inf <= config.eps1).then_some(StopCause::Gradient);

    let mut trace = Vec::new();
    let mut cascade = 0u32;

    while stop.is_none() && state.k < config.k_max {
        state.k += 1;
        let mut timings = PhaseTimings::default();

        let Some(step) = step_solver.solve_step(&blocks, &index, state.mu, &d) else {
            // Singular point block or non-positive pivot: inflate and retry.
            cascade += 1;
            if cascade > MAX_DAMPING_CASCADE {
                return Err(SolveError::DampingCascade {
                    limit: MAX_DAMPING_CASCADE,
                });
            }
            let (mu, nu) = update_mu(state.mu, state.nu, -1.0);
            state.mu = mu;
            state.nu = nu;
            trace.push(IterationTrace {
                k: state.k,
                cost: state.cost,
                g_inf,
                mu: state.mu,
                rho: None,
                accepted: false,
                timings_ms: timings,
            });
            continue;
        };
        cascade = 0;
        timings.se = step.se_ms;
        timings.cfs = step.cfs_ms;

        let delta_norm = (euclidean_norm(&step.delta_points).powi(2)
            + euclidean_norm(&step.delta_cameras).powi(2))
        .sqrt();
        if delta_norm <= config.eps2 * euclidean_norm(&state.p) {
            stop = Some(StopCause::SmallStep);
            trace.push(IterationTrace {
                k: state.k,
                cost: state.cost,
                g_inf,
                mu: state.mu,
                rho: None,
                accepted: false,
                timings_ms: timings,
            });
            break;
        }

        let gre_start = Instant::now();
        let (cand_cameras, cand_points) = apply_step(&cameras, &points, &step);
        // A candidate that projects degenerately is treated as infinitely
        // costly and rejected; the damping inflation shrinks the step.
        let cand_cost = evaluate_cost(&cand_cameras, &cand_points, &index, &observations)
            .unwrap_or(f64::INFINITY);
        let delta: Vec<f64> = step
            .delta_points
            .iter()
            .chain(step.delta_cameras.iter())
            .copied()
            .collect();
        let rho = gain_ratio(state.cost, cand_cost, &delta, state.mu, &state.g);
        timings.gre = gre_start.elapsed().as_secs_f64() * 1e3;

        let accepted = rho > 0.0;
        if accepted {
            cameras = cand_cameras;
            points = cand_points;

            let ju_start = Instant::now();
            blocks = eval(&cameras, &points)?;
            timings.ju = ju_start.elapsed().as_secs_f64() * 1e3;

            let (new_d, _) = scaling(&blocks, &index);
            d = new_d;
            state.p = stack_parameters(&cameras, &points);
            state.cost = cand_cost;
            state.g = gradient(&blocks, &index);
            state.d = d.clone();
            g_inf = inf_norm(&state.g);
            if g_inf <= config.eps1 {
                stop = Some(StopCause::Gradient);
            }
        }

        let tre_start = Instant::now();
        let (mu, nu) = update_mu(state.mu, state.nu, rho);
        state.mu = mu;
        state.nu = nu;
        timings.tre = tre_start.elapsed().as_secs_f64() * 1e3;

        trace.push(IterationTrace {
            k: state.k,
            cost: state.cost,
            g_inf,
            mu: state.mu,
            rho: Some(rho),
            accepted,
            timings_ms: timings,
        });
    }

    let report = SolveReport {
        stop: stop.unwrap_or(StopCause::MaxIterations),
        iterations: state.k,
        initial_cost,
        final_cost: state.cost,
        trace,
    };
    let optimized = BalProblem {
        cameras,
        points,
        observations: problem.observations.clone(),
    };
    Ok((optimized, report))
}
