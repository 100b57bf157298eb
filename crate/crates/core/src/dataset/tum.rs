use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::Pose;

/// Formats a world-to-camera pose as a TUM line, which stores the
/// camera-to-world transform.
pub fn format_tum_line(timestamp: f64, pose: &Pose) -> String {
    let c2w = pose.inverse();
    let t = c2w.translation;
    let q = c2w.rotation.quaternion();
    format!(
        "{timestamp} {} {} {} {} {} {} {}",
        t.x, t.y, t.z, q.i, q.j, q.k, q.w
    )
}

/// Parses `timestamp tx ty tz qx qy qz qw` into (timestamp, world-to-camera pose).
pub fn parse_tum_line(line: &str) -> Result<(f64, Pose)> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("bad TUM line {line:?}: {e}")))?;
    if vals.len() != 8 {
        return Err(Error::invalid(format!("TUM line needs 8 fields, got {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite value in TUM line {line:?}")));
    }
    let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
    if q.norm() < 1e-12 {
        return Err(Error::invalid(format!("zero quaternion in TUM line {line:?}")));
    }
    let c2w = Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3]));
    Ok((vals[0], c2w.inverse()))
}

fn is_content(line: &str) -> bool {
    let t = line.trim();
    !t.is_empty() && !t.starts_with('#')
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| is_content(l))
        .map(|(i, l)| parse_tum_line(l).map_err(|e| Error::load(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_trajectory(path: &Path, poses: &[(f64, Pose)]) -> Result<()> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (ts, p) in poses {
        out.push_str(&format_tum_line(*ts, p));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_round_trip() {
        let p = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, -0.5));
        let (ts, q) = parse_tum_line(&format_tum_line(1.25, &p)).unwrap();
        assert_eq!(ts, 1.25);
        assert!(p.rotation_distance(&q) < 1e-12);
        assert!((p.translation - q.translation).norm() < 1e-12);
    }

    #[test]
    fn stores_camera_center() {
        let p = Pose::from_translation(Vector3::new(0.0, 0.0, 2.0));
        let line = format_tum_line(0.0, &p);
        let f: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(&f[1..4], &[0.0, 0.0, -2.0]);
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_tum_line("1 2 3").is_err());
        assert!(parse_tum_line("0 0 0 0 0 0 0 0").is_err());
        assert!(parse_tum_line("0 0 0 0 0 0 x 1").is_err());
    }
}
