//! The "Bundle Adjustment in the Large" text format.
//!
//! A header `num_cameras num_points num_observations`, then one
//! `camera point u v` line per observation, then 9 reals per camera
//! (Rodrigues rotation, translation, focal, k1, k2) and 3 per point, all
//! whitespace separated.
//!
//! BAL cameras look down their negative z axis and project
//! `p = -P / P_z` with `P = R X + t`. We convert with the flip
//! `F = diag(1, -1, -1)`: `R = F R_bal`, `t = F t_bal`, and the measured
//! pixel `(u, v)` becomes `(u, -v)`. Intrinsics become `fx = fy = f`,
//! `cx = cy = 0` and are held fixed.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};

use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3};
use crate::problem::{Camera, Measurement, Scene, SceneObservation};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalObservation {
    pub camera: usize,
    pub point: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalDataset {
    pub cameras: Vec<[f64; 9]>,
    pub points: Vec<[f64; 3]>,
    pub observations: Vec<BalObservation>,
}

struct Tokens<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    pending: Vec<String>,
}

impl<R: BufRead> Tokens<R> {
    fn next_token(&mut self, what: &str) -> Result<(String, usize)> {
        loop {
            if let Some(t) = self.pending.pop() {
                return Ok((t, self.line_no));
            }
            match self.lines.next() {
                Some(line) => {
                    self.line_no += 1;
                    self.pending = line?.split_whitespace().rev().map(str::to_owned).collect();
                }
                None => {
                    return Err(Error::Parse {
                        line: self.line_no,
                        msg: format!("unexpected end of file, expected {what}"),
                    })
                }
            }
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let (tok, line) = self.next_token(what)?;
        tok.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("cannot parse {what} from {tok:?}"),
        })
    }

    fn real(&mut self, what: &str) -> Result<f64> {
        let x: f64 = self.parse(what)?;
        if !x.is_finite() {
            return Err(Error::Parse {
                line: self.line_no,
                msg: format!("{what} is not finite"),
            });
        }
        Ok(x)
    }
}

pub fn parse_bal(input: impl BufRead) -> Result<BalDataset> {
    let mut t = Tokens {
        lines: input.lines(),
        line_no: 0,
        pending: Vec::new(),
    };
    let n_cam: usize = t.parse("camera count")?;
    let n_pt: usize = t.parse("point count")?;
    let n_obs: usize = t.parse("observation count")?;
    let mut observations = Vec::with_capacity(n_obs);
    for k in 0..n_obs {
        let camera: usize = t.parse("camera index")?;
        let point: usize = t.parse("point index")?;
        let u = t.real("u")?;
        let v = t.real("v")?;
        if camera >= n_cam || point >= n_pt {
            return Err(Error::Parse {
                line: t.line_no,
                msg: format!("observation {k} references camera {camera} / point {point} out of range"),
            });
        }
        observations.push(BalObservation { camera, point, u, v });
    }
    let mut cameras = Vec::with_capacity(n_cam);
    for _ in 0..n_cam {
        let mut c = [0.0; 9];
        for x in c.iter_mut() {
            *x = t.real("camera parameter")?;
        }
        cameras.push(c);
    }
    let mut points = Vec::with_capacity(n_pt);
    for _ in 0..n_pt {
        let mut p = [0.0; 3];
        for x in p.iter_mut() {
            *x = t.real("point coordinate")?;
        }
        points.push(p);
    }
    if let Ok((tok, line)) = t.next_token("end of file") {
        return Err(Error::Parse {
            line,
            msg: format!("trailing data {tok:?} after the counts given in the header"),
        });
    }
    Ok(BalDataset {
        cameras,
        points,
        observations,
    })
}

/// Shortest round-tripping decimal for every real.
pub fn write_bal(ds: &BalDataset, mut out: impl Write) -> Result<()> {
    writeln!(
        out,
        "{} {} {}",
        ds.cameras.len(),
        ds.points.len(),
        ds.observations.len()
    )?;
    for o in &ds.observations {
        writeln!(out, "{} {} {} {}", o.camera, o.point, o.u, o.v)?;
    }
    for c in &ds.cameras {
        for x in c {
            writeln!(out, "{x}")?;
        }
    }
    for p in &ds.points {
        for x in p {
            writeln!(out, "{x}")?;
        }
    }
    Ok(())
}

fn flip() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))
}

pub fn to_scene(ds: &BalDataset) -> Scene {
    let f = flip();
    let cameras = ds
        .cameras
        .iter()
        .map(|c| {
            let r_bal = Rotation3::new(Vec3::new(c[0], c[1], c[2]));
            let r = Rotation3::from_matrix_unchecked(f * r_bal.matrix());
            let t = f * Vec3::new(c[3], c[4], c[5]);
            Camera {
                pose: Pose::new(UnitQuaternion::from_rotation_matrix(&r), t),
                intrinsics: CameraIntrinsics {
                    k1: c[7],
                    k2: c[8],
                    ..CameraIntrinsics::pinhole(c[6], c[6], 0.0, 0.0)
                },
            }
        })
        .collect();
    Scene {
        cameras,
        points: ds.points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
        observations: ds
            .observations
            .iter()
            .map(|o| SceneObservation {
                camera: o.camera,
                point: o.point,
                measurement: Measurement::Pixel(Vec2::new(o.u, -o.v)),
                weight: 1.0,
            })
            .collect(),
    }
}

/// Inverse of [`to_scene`]. Needs `fx = fy`, zero principal point and
/// pixel measurements only.
pub fn from_scene(scene: &Scene) -> Result<BalDataset> {
    let f = flip();
    let cameras = scene
        .cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let i = &cam.intrinsics;
            if i.fx != i.fy || i.cx != 0.0 || i.cy != 0.0 {
                return Err(Error::InvalidProblem(format!(
                    "camera {k} has intrinsics BAL cannot express"
                )));
            }
            let r_bal = Rotation3::from_matrix_unchecked(f * cam.pose.rotation_matrix());
            let w = r_bal.scaled_axis();
            let t = f * cam.pose.translation;
            Ok([w.x, w.y, w.z, t.x, t.y, t.z, i.fx, i.k1, i.k2])
        })
        .collect::<Result<_>>()?;
    let observations = scene
        .observations
        .iter()
        .map(|o| match o.measurement {
            Measurement::Pixel(q) => Ok(BalObservation {
                camera: o.camera,
                point: o.point,
                u: q.x,
                v: -q.y,
            }),
            Measurement::Point(_) => Err(Error::InvalidProblem("BAL holds pixel observations only".into())),
        })
        .collect::<Result<_>>()?;
    Ok(BalDataset {
        cameras,
        points: scene.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        observations,
    })
}
