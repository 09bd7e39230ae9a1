//! On-disk formats: IMU and scan CSVs, TUM trajectories, TOML configs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imu_observation::ImuSample;
use crate::lidar_observation::TimedPoint;
use crate::lie_math::{Rot3, Vec3};

pub const IMU_HEADER: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];
pub const SCAN_HEADER: [&str; 4] = ["t", "x", "y", "z"];

/// Timestamped pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub rot: Rot3,
    pub pos: Vec3,
}

/// One LiDAR sweep in the sensor frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub t_end: f64,
    pub points: Vec<TimedPoint>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse { path: path.into(), line, msg: format!("{kind:?}") },
    }
}

/// Reads a headed numeric CSV with exactly `header.len()` columns.
fn read_rows<const N: usize>(path: &Path, header: &[&str; N]) -> Result<Vec<[f64; N]>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let got: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_owned).collect();
    if got != header.iter().map(|s| s.to_string()).collect::<Vec<_>>() {
        return Err(Error::Parse { path: path.into(), line: 1, msg: format!("expected header {}", header.join(",")) });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != N {
            return Err(Error::Parse { path: path.into(), line, msg: format!("expected {N} fields, found {}", rec.len()) });
        }
        let mut row = [0.0; N];
        for (i, field) in rec.iter().enumerate() {
            row[i] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse { path: path.into(), line, msg: format!("bad number {field:?} in column {}", header[i]) })?;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let rows = read_rows(path, &IMU_HEADER)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if out.last().is_some_and(|s: &ImuSample| s.t >= r[0]) {
            return Err(Error::Parse { path: path.into(), line: i + 2, msg: "timestamps must increase".into() });
        }
        out.push(ImuSample { t: r[0], gyro: Vec3::new(r[1], r[2], r[3]), acc: Vec3::new(r[4], r[5], r[6]) });
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", IMU_HEADER.join(",")).map_err(io)?;
    for s in samples {
        writeln!(
            w,
            "{:.9},{:.12},{:.12},{:.12},{:.12},{:.12},{:.12}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.acc.x, s.acc.y, s.acc.z
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_scan_csv(path: &Path) -> Result<Vec<TimedPoint>> {
    let rows = read_rows(path, &SCAN_HEADER)?;
    let mut pts: Vec<TimedPoint> = rows.iter().map(|r| TimedPoint { t: r[0], p: Vec3::new(r[1], r[2], r[3]) }).collect();
    pts.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(pts)
}

pub fn write_scan_csv(path: &Path, points: &[TimedPoint]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", SCAN_HEADER.join(",")).map_err(io)?;
    for p in points {
        writeln!(w, "{:.9},{:.9},{:.9},{:.9}", p.t, p.p.x, p.p.y, p.p.z).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Scan file name for index `i`.
pub fn scan_file_name(i: usize) -> String {
    format!("scan_{i:06}.csv")
}

/// Reads every `*.csv` in `dir` in name order. A frame ends at its latest
/// point; empty files are skipped.
pub fn read_scan_dir(dir: &Path) -> Result<Vec<Frame>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            files.push(path);
        }
    }
    files.sort();
    let mut frames = Vec::with_capacity(files.len());
    for f in files {
        let points = read_scan_csv(&f)?;
        if let Some(last) = points.last() {
            frames.push(Frame { t_end: last.t, points });
        }
    }
    Ok(frames)
}

/// `t x y z qx qy qz qw` lines; `#` starts a comment.
pub fn read_tum(path: &Path) -> Result<Vec<StampedPose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.into(), line: i + 1, msg };
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(format!("bad number {s:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 1e-9) || v.iter().any(|x| !x.is_finite()) {
            return Err(parse_err("invalid pose".into()));
        }
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        out.push(StampedPose { t: v[0], rot, pos: Vec3::new(v[1], v[2], v[3]) });
    }
    Ok(out)
}

pub fn write_tum(path: &Path, poses: &[StampedPose]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    for p in poses {
        let q = UnitQuaternion::from_rotation_matrix(&p.rot);
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.t, p.pos.x, p.pos.y, p.pos.z, q.i, q.j, q.k, q.w
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
        Error::Parse { path: path.into(), line, msg: e.message().to_owned() }
    })
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
