//! Synthetic point-cloud datasets with analytic class and part labels.
//!
//! Four surface classes, each split into two parts:
//!
//! | class    | surface                         | part 0            | part 1          |
//! |----------|---------------------------------|-------------------|-----------------|
//! | sphere   | radius 1                        | `z ≥ 0` hemisphere| `z < 0`         |
//! | cube     | boundary of `[-1, 1]³`          | side faces        | top/bottom faces|
//! | torus    | major 0.7, minor 0.3            | outer (`ρ ≥ 0.7`) | inner           |
//! | cylinder | radius 0.6, `z ∈ [-1, 1]`       | lateral surface   | end caps        |
//!
//! Points are area-uniform, perturbed by isotropic Gaussian noise, then
//! rotated about `z` by a uniform random angle. Part ids are global:
//! `2 · class + local part`. Coordinates are rounded to `f32` so the
//! in-memory dataset equals what the binary files hold.
//!
//! On disk a split lives in `{root}/{split}/`: `cloud_{i:05}.bin` (point
//! binary format of [`PointCloud::write_binary`]), `cloud_{i:05}.seg`
//! (`u32` count, then one `u8` part id per point) and `index.csv` with
//! `file,label` rows.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{Point, PointCloud};
use crate::rng::stream;

pub const PARTS_PER_CLASS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Sphere,
    Cube,
    Torus,
    Cylinder,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus, ShapeClass::Cylinder];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Torus => "torus",
            ShapeClass::Cylinder => "cylinder",
        }
    }

    /// One surface point and its local part (0 or 1), before noise.
    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> (Point, usize) {
        match self {
            ShapeClass::Sphere => loop {
                let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    let p = [v[0] / n, v[1] / n, v[2] / n];
                    break (p, usize::from(p[2] < 0.0));
                }
            },
            ShapeClass::Cube => {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                p[axis] = sign;
                (p, usize::from(axis == 2))
            }
            ShapeClass::Torus => {
                let (big, small) = (0.7, 0.3);
                // Area element ∝ (R + r cos θ); accept θ with that weight.
                let theta = loop {
                    let t = rng.random_range(0.0..2.0 * PI);
                    if rng.random_range(0.0..big + small) < big + small * t.cos() {
                        break t;
                    }
                };
                let phi = rng.random_range(0.0..2.0 * PI);
                let rho = big + small * theta.cos();
                ([rho * phi.cos(), rho * phi.sin(), small * theta.sin()], usize::from(rho < big))
            }
            ShapeClass::Cylinder => {
                let (r, h) = (0.6, 2.0);
                let lateral = 2.0 * PI * r * h;
                let caps = 2.0 * PI * r * r;
                let phi = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..lateral + caps) < lateral {
                    ([r * phi.cos(), r * phi.sin(), rng.random_range(-1.0..1.0)], 0)
                } else {
                    let rho = r * rng.random_range(0.0f64..1.0).sqrt();
                    let z = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    ([rho * phi.cos(), rho * phi.sin(), z], 1)
                }
            }
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShapeSpec {
    pub classes: Vec<ShapeClass>,
    pub points: usize,
    pub noise_std: f64,
    pub rotate: bool,
}

impl Default for SyntheticShapeSpec {
    fn default() -> Self {
        Self {
            classes: ShapeClass::ALL.to_vec(),
            points: 256,
            noise_std: 0.01,
            rotate: true,
        }
    }
}

impl SyntheticShapeSpec {
    /// `min_points` is the patch count the consumer will group into.
    pub fn validate(&self, min_points: usize) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("data.classes is empty".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::Config("data.classes lists a class twice".into()));
        }
        if self.points == 0 || self.points < min_points {
            return Err(Error::Config(format!(
                "data.points = {} is below the {min_points} points needed for grouping",
                self.points
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("data.noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn num_parts(&self) -> usize {
        ShapeClass::ALL.len() * PARTS_PER_CLASS
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    /// Position of the class in `spec.classes`.
    pub label: usize,
    pub class: ShapeClass,
    /// Global part id per point.
    pub parts: Vec<usize>,
}

/// Sample `i` has class `classes[i % len]` and draws from its own stream.
pub fn generate_one(spec: &SyntheticShapeSpec, i: usize, seed: u64) -> Result<Sample> {
    let label = i % spec.classes.len();
    let class = spec.classes[label];
    let mut rng = stream(seed, &[0xda7a, i as u64]);
    let angle = if spec.rotate { rng.random_range(0.0..2.0 * PI) } else { 0.0 };
    let (s, c) = angle.sin_cos();
    let mut points = Vec::with_capacity(spec.points);
    let mut parts = Vec::with_capacity(spec.points);
    for _ in 0..spec.points {
        let (p, part) = class.sample(&mut rng);
        let mut q = [0.0; 3];
        for (qa, pa) in q.iter_mut().zip(p) {
            let n: f64 = StandardNormal.sample(&mut rng);
            *qa = pa + spec.noise_std * n;
        }
        let rotated = [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]];
        points.push(rotated.map(|v| v as f32 as f64));
        parts.push(PARTS_PER_CLASS * class.index() + part);
    }
    Ok(Sample {
        cloud: PointCloud::new(points)?,
        label,
        class,
        parts,
    })
}

pub fn generate(spec: &SyntheticShapeSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_one(spec, i, seed)).collect()
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

/// Writes one split. Returns the number of files written.
pub fn write_split(root: &Path, split: &str, samples: &[Sample]) -> Result<usize> {
    let dir = split_dir(root, split);
    io(&dir, fs::create_dir_all(&dir))?;
    let mut index = String::from("file,label\n");
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("cloud_{i:05}");
        s.cloud.write_binary(dir.join(format!("{stem}.bin")))?;
        let seg = dir.join(format!("{stem}.seg"));
        let mut bytes = (s.parts.len() as u32).to_le_bytes().to_vec();
        bytes.extend(s.parts.iter().map(|&p| p as u8));
        io(&seg, fs::write(&seg, bytes))?;
        index.push_str(&format!("{stem}.bin,{}\n", s.class));
    }
    let idx = dir.join("index.csv");
    io(&idx, fs::write(&idx, index))?;
    Ok(2 * samples.len() + 1)
}

fn read_seg(path: &Path, expect: usize) -> Result<Vec<usize>> {
    let bytes = io(path, fs::read(path))?;
    let fmt = |msg: String| Error::Format {
        path: path.to_owned(),
        msg,
    };
    if bytes.len() < 4 {
        return Err(fmt("missing count header".into()));
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if n != expect || bytes.len() != 4 + n {
        return Err(fmt(format!("expected {expect} labels, header says {n}, body has {}", bytes.len() - 4)));
    }
    Ok(bytes[4..].iter().map(|&b| b as usize).collect())
}

/// Reads a split written by [`write_split`] (or any directory following the
/// same layout). Labels are resolved against `classes`.
pub fn read_split(root: &Path, split: &str, classes: &[ShapeClass]) -> Result<Vec<Sample>> {
    let dir = split_dir(root, split);
    let idx = dir.join("index.csv");
    let text = io(&idx, fs::read_to_string(&idx))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |msg: String| Error::Format {
            path: idx.clone(),
            msg: format!("line {}: {msg}", lineno + 1),
        };
        let (file, name) = line.split_once(',').ok_or_else(|| fmt("expected `file,label`".into()))?;
        let class: ShapeClass = name.trim().parse().map_err(|e: Error| fmt(e.to_string()))?;
        let label = classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| fmt(format!("class `{class}` not in the configured class list")))?;
        let path = dir.join(file.trim());
        let cloud = PointCloud::read_binary(&path)?;
        let parts = read_seg(&path.with_extension("seg"), cloud.len())?;
        out.push(Sample {
            cloud,
            label,
            class,
            parts,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticShapeSpec::default();
        let a = generate(&spec, 12, 3).unwrap();
        let b = generate(&spec, 12, 3).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 12, 4).unwrap();
        assert_ne!(a[0].cloud, c[0].cloud);
        for (i, s) in a.iter().enumerate() {
            assert_eq!(s.label, i % 4);
            assert_eq!(s.cloud.len(), 256);
            assert!(s.parts.iter().all(|&p| p / 2 == s.class.index()));
        }
    }

    #[test]
    fn sphere_radius_and_hemispheres() {
        let clean = SyntheticShapeSpec {
            classes: vec![ShapeClass::Sphere],
            noise_std: 0.0,
            points: 2000,
            ..SyntheticShapeSpec::default()
        };
        let s = generate_one(&clean, 0, 1).unwrap();
        for (p, &part) in s.cloud.points.iter().zip(&s.parts) {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-6, "{r}");
            assert_eq!(part, usize::from(p[2] < 0.0));
        }
        let frac = s.parts.iter().filter(|&&p| p == 0).count() as f64 / 2000.0;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");

        let noisy = SyntheticShapeSpec { noise_std: 0.02, ..clean };
        let s = generate_one(&noisy, 0, 2).unwrap();
        for p in &s.cloud.points {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 6.0 * 0.02, "{r}");
        }
    }

    #[test]
    fn surfaces_and_parts_match_geometry() {
        let spec = SyntheticShapeSpec {
            noise_std: 0.0,
            rotate: false,
            points: 4000,
            ..SyntheticShapeSpec::default()
        };
        let cube = generate_one(&spec, 1, 5).unwrap();
        for (p, &part) in cube.cloud.points.iter().zip(&cube.parts) {
            let m = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-6);
            if part == 3 {
                assert!((p[2].abs() - 1.0).abs() < 1e-6);
            }
        }
        // Top and bottom are 2 of 6 equal faces.
        let top = cube.parts.iter().filter(|&&p| p == 3).count() as f64 / 4000.0;
        assert!((top - 1.0 / 3.0).abs() < 0.03, "{top}");

        let torus = generate_one(&spec, 2, 6).unwrap();
        for p in &torus.cloud.points {
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(((rho - 0.7).powi(2) + p[2] * p[2]).sqrt() - 0.3 < 1e-6);
        }
        // Outer half of the tube carries area ∝ (πR + 2r) of 2πR.
        let outer = torus.parts.iter().filter(|&&p| p == 4).count() as f64 / 4000.0;
        let want = (PI * 0.7 + 2.0 * 0.3) / (2.0 * PI * 0.7);
        assert!((outer - want).abs() < 0.03, "{outer} vs {want}");

        let cyl = generate_one(&spec, 3, 7).unwrap();
        let caps = cyl.parts.iter().filter(|&&p| p == 7).count() as f64 / 4000.0;
        assert!((caps - 0.6 / (0.6 + 2.0)).abs() < 0.03, "{caps}");
    }

    #[test]
    fn file_round_trip_and_hash_equality() {
        let spec = SyntheticShapeSpec {
            points: 64,
            ..SyntheticShapeSpec::default()
        };
        let samples = generate(&spec, 8, 9).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_split(a.path(), "train", &samples).unwrap();
        write_split(b.path(), "train", &generate(&spec, 8, 9).unwrap()).unwrap();
        let back = read_split(a.path(), "train", &spec.classes).unwrap();
        assert_eq!(back, samples);
        let mut names: Vec<_> = fs::read_dir(a.path().join("train")).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 17);
        for n in names {
            let x = fs::read(a.path().join("train").join(&n)).unwrap();
            let y = fs::read(b.path().join("train").join(&n)).unwrap();
            assert_eq!(x, y, "{n:?}");
        }
    }

    #[test]
    fn read_errors_carry_paths() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_split(dir.path(), "test", &ShapeClass::ALL).unwrap_err().to_string();
        assert!(err.contains("index.csv"), "{err}");
        fs::create_dir_all(dir.path().join("test")).unwrap();
        fs::write(dir.path().join("test/index.csv"), "file,label\nx.bin,blob\n").unwrap();
        let err = read_split(dir.path(), "test", &ShapeClass::ALL).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("blob"), "{err}");
    }

    #[test]
    fn spec_validation() {
        let spec = SyntheticShapeSpec::default();
        assert!(spec.validate(64).is_ok());
        assert!(spec.validate(512).is_err());
        let dup = SyntheticShapeSpec {
            classes: vec![ShapeClass::Cube, ShapeClass::Cube],
            ..SyntheticShapeSpec::default()
        };
        assert!(dup.validate(1).is_err());
        assert!("pyramid".parse::<ShapeClass>().is_err());
        assert_eq!("torus".parse::<ShapeClass>().unwrap(), ShapeClass::Torus);
    }

    #[test]
    fn two_hundred_clouds_quickly() {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticShapeSpec::default();
        let samples = generate(&spec, 200, 1).unwrap();
        write_split(dir.path(), "train", &samples).unwrap();
        assert!(start.elapsed().as_secs_f64() < 5.0, "{:?}", start.elapsed());
    }
}
