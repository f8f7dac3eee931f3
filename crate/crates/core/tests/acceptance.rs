//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`).
//!
//! Criterion 5 additionally checks two public SfM datasets when they are
//! available locally (`BAL_DATA_DIR` or a `data/` directory in the
//! workspace root); without them it runs the synthetic substitute and
//! prints a skip notice.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DVector, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use coba::bal_io::read_problem;
use coba::camera::{fd_residual_block, residual_block, CameraExtrinsics, Intrinsics};
use coba::coobs::{build_index, co_histogram, evaluate_blocks, BlockJacobian, CoObservationIndex};
use coba::linalg::cholesky_solve;
use coba::lm::{solve, LmConfig};
use coba::pesim::{compare_configs, recommend_q, stage_latencies, transfer_model, PeConfig};
use coba::schur::{
    back_substitute, dense_normal_system, dense_oracle, schur_eliminate, schur_eliminate_in,
    Precision,
};
use coba::synthetic::{generate, perturbed, SyntheticConfig, Visibility};

fn pass(criterion: u32, detail: &str) {
    println!("ACCEPTANCE {criterion} PASS: {detail}");
}

/// Random-visibility problem with real projective geometry, its index and
/// evaluated blocks, plus LM-style damping scales. Parameters sit a
/// perturbation away from the observations' ground truth, matching the
/// states the optimizer actually linearizes at.
fn random_instance(
    cameras: usize,
    points: usize,
    seed: u64,
) -> (CoObservationIndex, BlockJacobian, Vec<f64>, f64) {
    let truth = generate(
        &SyntheticConfig::new(cameras, points, seed)
            .with_visibility(Visibility::Random { extra_prob: 0.35 }),
    );
    let problem = perturbed(&truth, 1e-2, seed ^ 0x5eed);
    let (index, observations) = build_index(&problem);
    let blocks = evaluate_blocks(&problem.cameras, &problem.points, &index, &observations)
        .expect("synthetic geometry projects");

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
    let d = diag.iter().map(|v| v.sqrt()).collect();
    (index, blocks, d, max_diag)
}

#[test]
fn acceptance_1_schur_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for round in 0..50 {
        let b = rng.gen_range(1..=8);
        let a = rng.gen_range(1..=200);
        let (index, blocks, d, max_diag) = random_instance(b, a, 1000 + round);
        // Damping levels the optimizer actually visits.
        let mu = 10f64.powf(rng.gen_range(-6.0..0.0)) * max_diag;

        let (system, _) = schur_eliminate(&blocks, &index, mu, &d).expect("solvable");
        let (s_dense, r_dense) = dense_oracle(&blocks, &index, mu, &d);

        let s_err = (system.reassemble() - &s_dense).norm() / s_dense.norm();
        let r_vec = DVector::from_column_slice(&system.r);
        let r_err = (&r_vec - &r_dense).norm() / r_dense.norm().max(1e-300);
        worst = worst.max(s_err).max(r_err);
        assert!(
            s_err <= 1e-10 && r_err <= 1e-10,
            "round {round}: S error {s_err:e}, r error {r_err:e}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "took {elapsed:.2}s, budget 10s");
    pass(
        1,
        &format!("50 random problems, worst relative error {worst:.2e} <= 1e-10, {elapsed:.2}s"),
    );
}

#[test]
fn acceptance_2_normal_equation_equivalence() {
    let mut rng = StdRng::seed_from_u64(200);
    let mut worst = 0.0f64;
    for round in 0..20 {
        let b = rng.gen_range(1..=5);
        let a = rng.gen_range(1..=40);
        let (index, blocks, d, max_diag) = random_instance(b, a, 2000 + round);
        let mu = 10f64.powf(rng.gen_range(-4.0..0.0)) * max_diag;

        let (system, aux) = schur_eliminate(&blocks, &index, mu, &d).expect("solvable");
        let delta_c = cholesky_solve(&system, &system.r).expect("positive definite");
        let delta_p = back_substitute(&aux, &delta_c, &index);

        let (a_mat, g) = dense_normal_system(&blocks, &index, mu, &d);
        let stacked: Vec<f64> = delta_p.iter().chain(delta_c.iter()).copied().collect();
        let stacked = DVector::from_column_slice(&stacked);
        let residual = (&a_mat * &stacked - &g).norm() / g.norm().max(1e-300);
        worst = worst.max(residual);
        assert!(residual <= 1e-8, "round {round}: residual {residual:e}");
    }
    pass(
        2,
        &format!("20 random problems, worst relative residual {worst:.2e} <= 1e-8"),
    );
}

#[test]
fn acceptance_3_jacobian_finite_differences() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(300);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let extrinsics = CameraExtrinsics::new(
            Vector3::from_fn(|_, _| rng.gen_range(-0.8..0.8)),
            Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                -4.0 + rng.gen_range(-0.5..0.5),
            ),
        );
        let intrinsics = Intrinsics::new(
            rng.gen_range(300.0..800.0),
            rng.gen_range(-1e-2..1e-2),
            rng.gen_range(-1e-3..1e-3),
        );
        let x = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let obs = Vector2::new(rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0));

        let block = residual_block(&extrinsics, &intrinsics, &x, &obs).expect("projects");
        let (fd_jc, fd_jp) =
            fd_residual_block(&extrinsics, &intrinsics, &x, &obs, 1e-6).expect("projects");
        let scale = block.jc.norm().max(block.jp.norm()).max(1.0);
        worst = worst.max((block.jc - fd_jc).norm() / scale);
        worst = worst.max((block.jp - fd_jp).norm() / scale);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
    assert!(elapsed < 1.0, "took {elapsed:.2}s, budget 1s");
    pass(
        3,
        &format!("100 configurations, worst relative error {worst:.2e} <= 1e-5, {elapsed:.2}s"),
    );
}

#[test]
fn acceptance_4_precision_study() {
    let (index, blocks, d, max_diag) = random_instance(16, 2000, 4000);
    let mu = 1e-3 * max_diag;
    let (s64, _) =
        schur_eliminate_in(Precision::Binary64, &blocks, &index, mu, &d, false).expect("solvable");
    let (s32, _) =
        schur_eliminate_in(Precision::Binary32, &blocks, &index, mu, &d, false).expect("solvable");
    let rel = (s32.frobenius() - s64.frobenius()).abs() / s64.frobenius();
    assert!(rel <= 1e-5, "norm divergence {rel:e}");
    pass(
        4,
        &format!(
            "a=2000 b=16: relative Frobenius-norm gap binary32 vs binary64 = {rel:.2e} <= 1e-5"
        ),
    );
}

#[test]
fn acceptance_5_histogram_reproduction() {
    // (file stem, expected percentage of CO = 2 points)
    let expectations = [("problem-16-22106", 38.89), ("problem-50-20431", 52.14)];
    let mut checked_real = 0;
    for (stem, expected) in expectations {
        let Some(path) = common::find_dataset(stem) else {
            println!(
                "ACCEPTANCE 5 NOTICE: dataset {stem}* not found locally; \
                 set BAL_DATA_DIR or place it under data/ to enable this check"
            );
            continue;
        };
        let problem = read_problem(&path).expect("dataset parses");
        let (index, _) = build_index(&problem);
        let hist = co_histogram(&index);
        let got = hist.get(&2).map(|b| b.percent).unwrap_or(0.0);
        assert!(
            (got - expected).abs() <= 0.5,
            "{stem}: CO=2 share {got:.2}% vs expected {expected:.2}%"
        );
        checked_real += 1;
        pass(
            5,
            &format!("{stem}: CO=2 share {got:.2}% within 0.5 of {expected:.2}%"),
        );
    }

    if checked_real == 0 {
        // Substitute: percentages over random problems total 100.
        for seed in 0..10 {
            let problem = generate(
                &SyntheticConfig::new(6, 300, 5000 + seed)
                    .with_visibility(Visibility::Random { extra_prob: 0.3 }),
            );
            let (index, _) = build_index(&problem);
            let total: f64 = co_histogram(&index).values().map(|b| b.percent).sum();
            assert!((total - 100.0).abs() <= 1e-9, "total {total}");
        }
        pass(
            5,
            "substitute check: histogram percentages sum to 100 +/- 1e-9 on 10 random problems",
        );
    }
}

#[test]
fn acceptance_6_spu_sizing() {
    assert_eq!(recommend_q(2), 2);
    for co in 1..=50u32 {
        let q = recommend_q(co);
        let target = (36 * co as u64).max(70);
        assert!(
            stage_latencies(co, q).s4 <= target,
            "co={co}: q={q} misses the target"
        );
        if q > 1 {
            assert!(
                stage_latencies(co, q - 1).s4 > target,
                "co={co}: q={q} is not minimal"
            );
        }
    }
    pass(
        6,
        "recommend_q(2) == 2 and minimality holds for co in [1, 50]",
    );
}

/// Co-observation distributions of the five sub-50-image evaluation
/// datasets: (name, points, observations, cameras, percent per CO value
/// starting at 2; the thin 21..=29 tail is folded into CO = 25).
fn reference_distributions() -> Vec<(String, BTreeMap<u32, usize>, usize, usize)> {
    let tables: [(&str, usize, usize, usize, &[(u32, f64)]); 5] = [
        (
            "d1",
            22106,
            83718,
            16,
            &[
                (2, 38.89),
                (3, 20.41),
                (4, 12.96),
                (5, 9.12),
                (6, 6.39),
                (7, 4.32),
                (8, 2.92),
                (9, 2.04),
                (10, 1.38),
                (11, 0.94),
                (12, 0.44),
                (13, 0.17),
                (14, 0.03),
            ],
        ),
        (
            "d2",
            11315,
            36455,
            21,
            &[
                (2, 51.78),
                (3, 19.60),
                (4, 10.97),
                (5, 6.57),
                (6, 4.05),
                (7, 2.85),
                (8, 1.74),
                (9, 1.09),
                (10, 0.65),
                (11, 0.27),
                (12, 0.18),
                (13, 0.15),
                (14, 0.07),
                (15, 0.04),
            ],
        ),
        (
            "d3",
            18060,
            63551,
            39,
            &[
                (2, 51.86),
                (3, 17.19),
                (4, 10.03),
                (5, 5.69),
                (6, 4.06),
                (7, 3.04),
                (8, 2.31),
                (9, 1.81),
                (10, 1.21),
                (11, 0.96),
                (12, 0.64),
                (13, 0.35),
                (14, 0.42),
                (15, 0.22),
                (16, 0.13),
                (17, 0.06),
                (18, 0.01),
                (19, 0.01),
                (20, 0.01),
            ],
        ),
        (
            "d4",
            7776,
            31843,
            49,
            &[
                (2, 44.35),
                (3, 17.84),
                (4, 10.60),
                (5, 6.73),
                (6, 5.00),
                (7, 3.33),
                (8, 2.73),
                (9, 2.13),
                (10, 1.62),
                (11, 1.53),
                (12, 1.02),
                (13, 0.64),
                (14, 0.51),
                (15, 0.35),
                (16, 0.40),
                (17, 0.35),
                (18, 0.17),
                (19, 0.21),
                (20, 0.12),
                (25, 0.39),
            ],
        ),
        (
            "d5",
            20431,
            73967,
            50,
            &[
                (2, 52.14),
                (3, 17.08),
                (4, 9.30),
                (5, 5.51),
                (6, 3.93),
                (7, 2.69),
                (8, 2.40),
                (9, 1.75),
                (10, 1.48),
                (11, 1.02),
                (12, 0.65),
                (13, 0.57),
                (14, 0.48),
                (15, 0.35),
                (16, 0.29),
                (17, 0.12),
                (18, 0.09),
                (19, 0.09),
                (20, 0.02),
                (25, 0.02),
            ],
        ),
    ];
    tables
        .into_iter()
        .map(|(name, points, observations, cameras, rows)| {
            let histogram: BTreeMap<u32, usize> = rows
                .iter()
                .map(|&(co, pct)| (co, (points as f64 * pct / 100.0).round() as usize))
                .collect();
            (name.to_string(), histogram, observations, cameras)
        })
        .collect()
}

#[test]
fn acceptance_7_simulator_ordering() {
    let problems = reference_distributions();
    let configs = vec![
        ("schur_1".to_string(), PeConfig::schur_1()),
        ("schur_2".to_string(), PeConfig::schur_2()),
        ("schur_3".to_string(), PeConfig::schur_3()),
    ];
    let rows = compare_configs(&problems, &configs).expect("covered");
    for row in &rows {
        let (t1, t2, t3) = (row.times_ms[0], row.times_ms[1], row.times_ms[2]);
        assert!(
            t3 < t2 && t2 < t1,
            "{}: expected t3 < t2 < t1, got {t1:.3} {t2:.3} {t3:.3}",
            row.problem
        );
        let r12 = t1 / t2;
        let r13 = t1 / t3;
        assert!(
            (1.5..=2.2).contains(&r12),
            "{}: t1/t2 = {r12:.3} outside [1.5, 2.2]",
            row.problem
        );
        assert!(
            (2.8..=4.5).contains(&r13),
            "{}: t1/t3 = {r13:.3} outside [2.8, 4.5]",
            row.problem
        );
    }
    let r12: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2}", r.times_ms[0] / r.times_ms[1]))
        .collect();
    let r13: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2}", r.times_ms[0] / r.times_ms[2]))
        .collect();
    pass(
        7,
        &format!(
            "five distributions ordered t3 < t2 < t1; t1/t2 in {{{}}}, t1/t3 in {{{}}}",
            r12.join(", "),
            r13.join(", ")
        ),
    );
}

#[test]
fn acceptance_8_lm_convergence() {
    let start = Instant::now();
    let truth = generate(&SyntheticConfig::new(4, 50, 8000));
    let problem = perturbed(&truth, 1e-3, 8001);
    let (_, report) = solve(&problem, &LmConfig::default()).expect("solves");
    assert!(
        report.final_cost <= 1e-10,
        "final cost {:e}",
        report.final_cost
    );
    assert!(report.iterations <= 50);
    let mut last = report.initial_cost;
    for it in report.trace.iter().filter(|t| t.accepted) {
        assert!(it.cost <= last, "accepted cost increased at k={}", it.k);
        last = it.cost;
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "took {elapsed:.2}s, budget 5s");
    pass(
        8,
        &format!(
            "cost {:.2e} -> {:.2e} in {} iterations, {elapsed:.2}s",
            report.initial_cost, report.final_cost, report.iterations
        ),
    );
}

#[test]
fn acceptance_9_transfer_volume() {
    let t = transfer_model(83718, 16, &PeConfig::schur_1());
    assert_eq!(t.words, 1_507_052);
    pass(
        9,
        "16-camera 83718-observation problem transfers 1507052 words",
    );
}
