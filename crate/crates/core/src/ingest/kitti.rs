//! KITTI odometry formats.
//!
//! Scans are headerless binary files, 16 bytes per point: `x, y, z,
//! intensity` as little-endian `f32`. Pose files hold one pose per line as
//! twelve whitespace-separated numbers, the row-major 3×4 matrix `[R | t]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{nearest_rotation, orthonormality_deviation, Point, PointCloud, Pose};
use crate::scalar::Real;

const POINT_BYTES: usize = 16;

/// Rotations further than this from orthonormal are rejected outright.
pub const POSE_REJECT_TOLERANCE: f64 = 1e-3;

pub fn read_scan<T: Real>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes).map_err(|e| match e {
        DecodeError::Length => Error::MalformedScan {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        },
        DecodeError::NonFinite(index) => Error::NonFiniteScanPoint {
            path: path.to_path_buf(),
            index,
        },
    })
}

enum DecodeError {
    Length,
    NonFinite(usize),
}

fn decode_scan<T: Real>(bytes: &[u8]) -> std::result::Result<PointCloud<T>, DecodeError> {
    if !bytes.len().is_multiple_of(POINT_BYTES) {
        return Err(DecodeError::Length);
    }
    let mut points = Vec::with_capacity(bytes.len() / POINT_BYTES);
    for (index, chunk) in bytes.chunks_exact(POINT_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
        let (x, y, z, i) = (f(0), f(1), f(2), f(3));
        if !(x.is_finite() && y.is_finite() && z.is_finite() && i.is_finite()) {
            return Err(DecodeError::NonFinite(index));
        }
        points.push(Point::with_intensity(
            T::lit(x.into()),
            T::lit(y.into()),
            T::lit(z.into()),
            T::lit(i.into()),
        ));
    }
    Ok(PointCloud::from_finite(points, String::new()))
}

pub fn encode_scan<T: Real>(cloud: &PointCloud<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_BYTES);
    for p in cloud.points() {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_scan<T: Real>(path: impl AsRef<Path>, cloud: &PointCloud<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scan(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_poses<T: Real>(path: impl AsRef<Path>) -> Result<Vec<Pose<T>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

/// Parses pose lines, skipping blank ones. Line numbers in errors are 1-based.
pub fn parse_poses<T: Real>(text: &str) -> Result<Vec<Pose<T>>> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{tok}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 12 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 12 numbers, found {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        poses.push(pose_from_row_major(&values).map_err(|e| match e {
            Error::NonOrthonormal { deviation } => Error::Parse {
                line: line_no,
                message: format!("rotation is not orthonormal (deviation {deviation:e})"),
            },
            other => other,
        })?);
    }
    Ok(poses)
}

/// Builds a pose from a row-major `[R | t]`, projecting `R` onto SO(3) when
/// it has drifted and rejecting it beyond [`POSE_REJECT_TOLERANCE`].
pub fn pose_from_row_major<T: Real>(v: &[f64]) -> Result<Pose<T>> {
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let t = Vector3::new(v[3], v[7], v[11]);
    let deviation = orthonormality_deviation(&r);
    if deviation > POSE_REJECT_TOLERANCE {
        return Err(Error::NonOrthonormal { deviation });
    }
    let r = if deviation > f64::orthonormal_tolerance() {
        nearest_rotation(&r)
    } else {
        r
    };
    let pose = Pose::new(r, t)?.cast::<T>();
    if orthonormality_deviation(pose.rotation()) > T::orthonormal_tolerance() {
        return Ok(Pose::new_orthonormalized(pose.rotation(), *pose.translation()));
    }
    Ok(pose)
}

pub fn format_pose<T: Real>(pose: &Pose<T>) -> String {
    pose.to_row_major_3x4()
        .iter()
        .map(|v| format!("{:e}", v.as_f64()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_poses<T: Real>(path: impl AsRef<Path>, poses: &[Pose<T>]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for p in poses {
        writeln!(out, "{}", format_pose(p)).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
