//! Point clouds, farthest point sampling, kNN grouping and file readers.
//!
//! File formats:
//! - ASCII: one point per line, three whitespace-separated numbers `x y z`.
//!   Blank lines and lines starting with `#` are skipped.
//! - Binary: little-endian `u32` point count followed by `count × 3` `f32`
//!   coordinates (x, y, z interleaved).

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub type Point = [f64; 3];

pub fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Translates to zero mean and scales so the farthest point has norm 1.
    /// A cloud collapsed to a single location is only centered.
    pub fn normalized(&self) -> Self {
        let c = self.centroid();
        let mut pts: Vec<Point> = self
            .points
            .iter()
            .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
            .collect();
        let r = pts.iter().map(|p| dist2(p, &[0.0; 3])).fold(0.0, f64::max).sqrt();
        if r > 0.0 {
            pts.iter_mut().flatten().for_each(|v| *v /= r);
        }
        Self { points: pts }
    }

    pub fn read_ascii(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    path: path.into(),
                    msg: format!("line {}: {e}", lineno + 1),
                })?;
            if vals.len() != 3 {
                return Err(Error::Format {
                    path: path.into(),
                    msg: format!("line {}: expected 3 values, found {}", lineno + 1, vals.len()),
                });
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        Self::new(points).map_err(|e| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        })
    }

    pub fn write_ascii(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text: String = self
            .points
            .iter()
            .map(|p| format!("{} {} {}\n", p[0], p[1], p[2]))
            .collect();
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fmt = |msg: String| Error::Format {
            path: path.into(),
            msg,
        };
        if bytes.len() < 4 {
            return Err(fmt("missing point count header".into()));
        }
        let count = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let expected = 4 + count * 12;
        if bytes.len() != expected {
            return Err(fmt(format!(
                "{count} points need {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let coords: Vec<f64> = bytes[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let points = coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(points).map_err(|e| fmt(e.to_string()))
    }

    /// Coordinates are stored as `f32`.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(4 + 12 * self.points.len());
        bytes.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for v in self.points.iter().flatten() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// How farthest point sampling picks its first center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// The point nearest the centroid (lowest index on ties).
    Centroid,
    /// A uniformly random point drawn from a seeded stream.
    Seeded(u64),
    Index(usize),
}

impl FpsStart {
    /// Seed 0 selects the centroid start, any other seed a random start.
    pub fn from_seed(seed: u64) -> Self {
        if seed == 0 {
            FpsStart::Centroid
        } else {
            FpsStart::Seeded(seed)
        }
    }
}

/// Greedy max-min selection of `g` centers. Ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, g: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = cloud.len();
    if g == 0 || g > n {
        return Err(Error::InvalidArgument(format!("cannot sample {g} centers from {n} points")));
    }
    let pts = &cloud.points;
    let first = match start {
        FpsStart::Centroid => {
            let c = cloud.centroid();
            argmin_by(pts.iter().map(|p| dist2(p, &c)))
        }
        FpsStart::Seeded(seed) => stream(seed, &[0xf95]).random_range(0..n),
        FpsStart::Index(i) if i < n => i,
        FpsStart::Index(i) => {
            return Err(Error::InvalidArgument(format!("start index {i} out of range for {n} points")))
        }
    };
    let mut chosen = Vec::with_capacity(g);
    chosen.push(first);
    let mut mind: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[first])).collect();
    while chosen.len() < g {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in mind.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        chosen.push(best);
        for (i, m) in mind.iter_mut().enumerate() {
            *m = m.min(dist2(&pts[i], &pts[best]));
        }
    }
    Ok(chosen)
}

fn argmin_by(vals: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in vals.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Local patches around sampled centers.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    pub center_indices: Vec<usize>,
    /// `[G][S]` indices into the source cloud.
    pub neighbor_indices: Vec<Vec<usize>>,
    /// `[G][S]` neighbor coordinates minus their center.
    pub neighborhoods: Vec<Vec<Point>>,
}

impl PatchSet {
    pub fn num_patches(&self) -> usize {
        self.centers.len()
    }

    pub fn patch_size(&self) -> usize {
        self.neighborhoods.first().map_or(0, Vec::len)
    }

    /// Reorders patches: output patch `i` is input patch `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            centers: perm.iter().map(|&i| self.centers[i]).collect(),
            center_indices: perm.iter().map(|&i| self.center_indices[i]).collect(),
            neighbor_indices: perm.iter().map(|&i| self.neighbor_indices[i].clone()).collect(),
            neighborhoods: perm.iter().map(|&i| self.neighborhoods[i].clone()).collect(),
        }
    }
}

/// The `s` nearest points to each center (the center itself included),
/// ordered by distance with ties broken by lowest index.
pub fn knn_group(cloud: &PointCloud, center_indices: &[usize], s: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!("cannot take {s} neighbors from {n} points")));
    }
    if let Some(&bad) = center_indices.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidArgument(format!("center index {bad} out of range for {n} points")));
    }
    let pts = &cloud.points;
    let mut out = PatchSet {
        centers: Vec::with_capacity(center_indices.len()),
        center_indices: center_indices.to_vec(),
        neighbor_indices: Vec::with_capacity(center_indices.len()),
        neighborhoods: Vec::with_capacity(center_indices.len()),
    };
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &ci in center_indices {
        let c = pts[ci];
        order.clear();
        order.extend(pts.iter().enumerate().map(|(j, p)| (dist2(p, &c), j)));
        order.select_nth_unstable_by(s - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nearest = order[..s].to_vec();
        nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let idx: Vec<usize> = nearest.iter().map(|&(_, j)| j).collect();
        let local = idx
            .iter()
            .map(|&j| [pts[j][0] - c[0], pts[j][1] - c[1], pts[j][2] - c[2]])
            .collect();
        out.centers.push(c);
        out.neighbor_indices.push(idx);
        out.neighborhoods.push(local);
    }
    Ok(out)
}

/// FPS followed by kNN grouping.
pub fn group(cloud: &PointCloud, g: usize, s: usize, start: FpsStart) -> Result<PatchSet> {
    let centers = farthest_point_sample(cloud, g, start)?;
    knn_group(cloud, &centers, s)
}

/// Stacks neighborhoods into `[B, G, S, 3]`.
pub fn neighborhood_tensor(patches: &[PatchSet]) -> Result<Tensor> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("no patch sets".into()))?;
    let (g, s) = (first.num_patches(), first.patch_size());
    let mut data = Vec::with_capacity(patches.len() * g * s * 3);
    for p in patches {
        if p.num_patches() != g || p.patch_size() != s {
            return Err(Error::Shape("patch sets differ in G or S".into()));
        }
        data.extend(p.neighborhoods.iter().flatten().flatten());
    }
    Tensor::new(vec![patches.len(), g, s, 3], data)
}

/// Stacks centers into `[B, G, 3]`.
pub fn center_tensor(patches: &[PatchSet]) -> Result<Tensor> {
    let g = patches.first().map_or(0, PatchSet::num_patches);
    if patches.iter().any(|p| p.num_patches() != g) {
        return Err(Error::Shape("patch sets differ in G".into()));
    }
    let data: Vec<f64> = patches.iter().flat_map(|p| p.centers.iter().flatten().copied()).collect();
    Tensor::new(vec![patches.len(), g, 3], data)
}
