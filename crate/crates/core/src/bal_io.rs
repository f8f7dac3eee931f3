//! Parser and writer for the BAL plain-text problem format.
//!
//! Layout of a file:
//!
//! 1. header line `<num_cameras> <num_points> <num_observations>`
//! 2. one line per observation: `<camera_index> <point_index> <u> <v>`
//! 3. nine values per camera, one per line: angle-axis rotation (3),
//!    translation (3), focal length, k1, k2
//! 4. three values per point, one per line
//!
//! Parsing is whitespace-tolerant (values may share lines), all values are
//! read as 64-bit floats, and every error carries the offending line
//! number. Writing uses shortest round-trip float formatting so that
//! `parse(write(p))` reproduces `p` bit for bit.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::camera::{CameraExtrinsics, Intrinsics};

/// One camera record: the six optimized extrinsics plus frozen intrinsics.
///
/// BAL stores nine values per camera; only the extrinsics are unknowns
/// during optimization, keeping the parameter count at `3a + 6b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalCamera {
    pub extrinsics: CameraExtrinsics,
    pub intrinsics: Intrinsics,
}

/// A single image measurement of one point by one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    /// Pixel coordinates (u, v).
    pub uv: Vector2<f64>,
}

/// A parsed bundle adjustment problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BalProblem {
    pub cameras: Vec<BalCamera>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<Observation>,
}

impl BalProblem {
    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }
}

/// Dataset summary statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub points: usize,
    pub cameras: usize,
    pub observations: usize,
    /// Mean number of observations per point (`o / a`).
    pub observations_per_point_mean: f64,
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("line {line}: expected {expected}, found end of stream")]
    Truncated { line: usize, expected: &'static str },
    #[error("line {line}: invalid number {token:?}")]
    InvalidNumber { line: usize, token: String },
    #[error("line {line}: {what} index {index} out of range (count is {count})")]
    IndexOutOfRange {
        line: usize,
        what: &'static str,
        index: usize,
        count: usize,
    },
    #[error("line {line}: duplicate observation of point {point} by camera {camera}")]
    DuplicateObservation {
        line: usize,
        camera: usize,
        point: usize,
    },
    #[error("line {line}: trailing data after problem body")]
    TrailingData { line: usize },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Whitespace-separated token stream that tracks line numbers for error
/// reporting.
struct Tokens<R: BufRead> {
    reader: R,
    line: usize,
    pending: Vec<String>,
    pending_next: usize,
}

impl<R: BufRead> Tokens<R> {
    fn new(reader: R) -> Self {
        Self {
            reader,
            line: 0,
            pending: Vec::new(),
            pending_next: 0,
        }
    }

    fn next(&mut self) -> Result<Option<String>, ParseError> {
        loop {
            if self.pending_next < self.pending.len() {
                let token = std::mem::take(&mut self.pending[self.pending_next]);
                self.pending_next += 1;
                return Ok(Some(token));
            }
            let mut buf = String::new();
            if self.reader.read_line(&mut buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            self.pending.clear();
            self.pending_next = 0;
            self.pending
                .extend(buf.split_whitespace().map(str::to_owned));
        }
    }

    fn expect(&mut self, expected: &'static str) -> Result<String, ParseError> {
        self.next()?.ok_or(ParseError::Truncated {
            line: self.line + 1,
            expected,
        })
    }

    fn usize(&mut self, expected: &'static str) -> Result<usize, ParseError> {
        let token = self.expect(expected)?;
        token.parse().map_err(|_| ParseError::InvalidNumber {
            line: self.line,
            token,
        })
    }

    fn f64(&mut self, expected: &'static str) -> Result<f64, ParseError> {
        let token = self.expect(expected)?;
        token.parse().map_err(|_| ParseError::InvalidNumber {
            line: self.line,
            token,
        })
    }
}

/// Parses a BAL problem from a buffered reader.
///
/// ```
/// let text = "1 1 1\n0 0 0.5 -0.25\n0\n0\n0\n0\n0\n0\n500\n0\n0\n1\n2\n-3\n";
/// let problem = coba::bal_io::parse_bal(text.as_bytes()).unwrap();
/// assert_eq!(problem.num_cameras(), 1);
/// assert_eq!(problem.cameras[0].intrinsics.f, 500.0);
/// assert_eq!(problem.points[0].z, -3.0);
/// ```
pub fn parse_bal<R: BufRead>(reader: R) -> Result<BalProblem, ParseError> {
    let mut tokens = Tokens::new(reader);

    let num_cameras = tokens.usize("camera count")?;
    let num_points = tokens.usize("point count")?;
    let num_observations = tokens.usize("observation count")?;

    let mut observations = Vec::with_capacity(num_observations);
    let mut seen = HashSet::with_capacity(num_observations);
    for _ in 0..num_observations {
        let camera = tokens.usize("camera index")?;
        let point = tokens.usize("point index")?;
        let line = tokens.line;
        if camera >= num_cameras {
            return Err(ParseError::IndexOutOfRange {
                line,
                what: "camera",
                index: camera,
                count: num_cameras,
            });
        }
        if point >= num_points {
            return Err(ParseError::IndexOutOfRange {
                line,
                what: "point",
                index: point,
                count: num_points,
            });
        }
        if !seen.insert((camera, point)) {
            return Err(ParseError::DuplicateObservation {
                line,
                camera,
                point,
            });
        }
        let u = tokens.f64("observation u")?;
        let v = tokens.f64("observation v")?;
        observations.push(Observation {
            camera,
            point,
            uv: Vector2::new(u, v),
        });
    }

    let mut cameras = Vec::with_capacity(num_cameras);
    for _ in 0..num_cameras {
        let mut vals = [0.0; 9];
        for v in &mut vals {
            *v = tokens.f64("camera parameter")?;
        }
        cameras.push(BalCamera {
            extrinsics: CameraExtrinsics::new(
                Vector3::new(vals[0], vals[1], vals[2]),
                Vector3::new(vals[3], vals[4], vals[5]),
            ),
            intrinsics: Intrinsics::new(vals[6], vals[7], vals[8]),
        });
    }

    let mut points = Vec::with_capacity(num_points);
    for _ in 0..num_points {
        let x = tokens.f64("point coordinate")?;
        let y = tokens.f64("point coordinate")?;
        let z = tokens.f64("point coordinate")?;
        points.push(Vector3::new(x, y, z));
    }

    if tokens.next()?.is_some() {
        return Err(ParseError::TrailingData { line: tokens.line });
    }

    Ok(BalProblem {
        cameras,
        points,
        observations,
    })
}

/// Writes a problem in BAL text form. Floats use shortest round-trip
/// formatting, so the output re-parses to a bit-identical problem.
pub fn write_bal<W: Write>(problem: &BalProblem, mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "{} {} {}",
        problem.num_cameras(),
        problem.num_points(),
        problem.num_observations()
    )?;
    for obs in &problem.observations {
        writeln!(w, "{} {} {} {}", obs.camera, obs.point, obs.uv.x, obs.uv.y)?;
    }
    for cam in &problem.cameras {
        let e = &cam.extrinsics;
        let i = &cam.intrinsics;
        for value in [
            e.omega.x, e.omega.y, e.omega.z, e.t.x, e.t.y, e.t.z, i.f, i.k1, i.k2,
        ] {
            writeln!(w, "{value}")?;
        }
    }
    for point in &problem.points {
        for value in [point.x, point.y, point.z] {
            writeln!(w, "{value}")?;
        }
    }
    Ok(())
}

/// Summary statistics: counts and the mean observations-per-point ratio.
pub fn summarize(problem: &BalProblem) -> Summary {
    let points = problem.num_points();
    let observations = problem.num_observations();
    Summary {
        points,
        cameras: problem.num_cameras(),
        observations,
        observations_per_point_mean: if points == 0 {
            0.0
        } else {
            observations as f64 / points as f64
        },
    }
}

/// Opens a BAL file, transparently decompressing gzip input (detected by
/// the 0x1f 0x8b magic bytes).
pub fn read_problem(path: &Path) -> Result<BalProblem, ParseError> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let got = file.read(&mut magic)?;
    let is_gzip = got == 2 && magic == [0x1f, 0x8b];
    // Re-chain the sniffed bytes in front of the remaining stream.
    let stream = io::Cursor::new(magic[..got].to_vec()).chain(file);
    if is_gzip {
        parse_bal(BufReader::new(flate2::read::GzDecoder::new(stream)))
    } else {
        parse_bal(BufReader::new(stream))
    }
}
