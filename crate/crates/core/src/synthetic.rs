//! Seeded synthetic problem generation.
//!
//! Produces ground-truth consistent problems: observations are exact
//! projections of the generated geometry (optionally with pixel noise), so
//! a solver started at the ground truth has zero gradient, and a perturbed
//! start must recover a zero-cost optimum. Cameras sit on a slightly
//! jittered shell looking at a unit point cloud, which keeps every point
//! safely in front of every camera.

use nalgebra::{Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::bal_io::{BalCamera, BalProblem, Observation};
use crate::camera::{project, CameraExtrinsics, Intrinsics};

/// Visibility pattern of a generated problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Visibility {
    /// Every point observed by every camera.
    Full,
    /// Each point observed by one guaranteed random camera, plus each other
    /// camera independently with the given probability.
    Random { extra_prob: f64 },
}

/// Generation parameters. `pixel_noise` is the standard deviation of
/// Gaussian noise added to the exact projections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub cameras: usize,
    pub points: usize,
    pub visibility: Visibility,
    pub pixel_noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(cameras: usize, points: usize, seed: u64) -> Self {
        Self {
            cameras,
            points,
            visibility: Visibility::Full,
            pixel_noise: 0.0,
            seed,
        }
    }

    pub fn with_visibility(mut self, visibility: Visibility) -> Self {
        self.visibility = visibility;
        self
    }

    pub fn with_pixel_noise(mut self, pixel_noise: f64) -> Self {
        self.pixel_noise = pixel_noise;
        self
    }
}

/// Generates a problem whose observations project exactly (up to the
/// configured noise) from its own cameras and points.
pub fn generate(config: &SyntheticConfig) -> BalProblem {
    let mut rng = StdRng::seed_from_u64(config.seed);

    let cameras: Vec<BalCamera> = (0..config.cameras)
        .map(|_| {
            let omega = Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3));
            let t = Vector3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                -4.0 + rng.gen_range(-0.5..0.5),
            );
            BalCamera {
                extrinsics: CameraExtrinsics::new(omega, t),
                intrinsics: Intrinsics::new(
                    rng.gen_range(400.0..600.0),
                    rng.gen_range(-1e-3..1e-3),
                    rng.gen_range(-1e-4..1e-4),
                ),
            }
        })
        .collect();

    let points: Vec<Vector3<f64>> = (0..config.points)
        .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))
        .collect();

    // Visibility sets: each point sees at least one camera and each camera
    // sees at least one point, so the damped normal equations stay
    // nondegenerate.
    let mut visibility: Vec<Vec<usize>> = (0..config.points)
        .map(|_| match config.visibility {
            Visibility::Full => (0..config.cameras).collect(),
            Visibility::Random { extra_prob } => {
                let guaranteed = rng.gen_range(0..config.cameras);
                (0..config.cameras)
                    .filter(|&j| j == guaranteed || rng.gen_bool(extra_prob))
                    .collect()
            }
        })
        .collect();
    if config.points > 0 {
        for j in 0..config.cameras {
            if !visibility.iter().any(|seen| seen.contains(&j)) {
                let i = rng.gen_range(0..config.points);
                visibility[i].push(j);
            }
        }
    }

    let mut observations = Vec::new();
    for (i, x) in points.iter().enumerate() {
        let mut seen = std::mem::take(&mut visibility[i]);
        seen.sort_unstable();
        for j in seen {
            let cam = &cameras[j];
            let mut uv = project(&cam.extrinsics, &cam.intrinsics, x)
                .expect("generated geometry keeps points in front of cameras");
            if config.pixel_noise > 0.0 {
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                uv += Vector2::new(nx, ny) * config.pixel_noise;
            }
            observations.push(Observation {
                camera: j,
                point: i,
                uv,
            });
        }
    }

    BalProblem {
        cameras,
        points,
        observations,
    }
}

/// Returns a copy of the problem with every camera extrinsic component and
/// point coordinate shifted by a uniform offset in `[-magnitude, magnitude]`.
/// Intrinsics and observations are untouched.
pub fn perturbed(problem: &BalProblem, magnitude: f64, seed: u64) -> BalProblem {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = problem.clone();
    for cam in &mut out.cameras {
        let d = Vector3::from_fn(|_, _| rng.gen_range(-magnitude..magnitude));
        cam.extrinsics.omega += d;
        let d = Vector3::from_fn(|_, _| rng.gen_range(-magnitude..magnitude));
        cam.extrinsics.t += d;
    }
    for point in &mut out.points {
        *point += Vector3::from_fn(|_, _| rng.gen_range(-magnitude..magnitude));
    }
    out
}
