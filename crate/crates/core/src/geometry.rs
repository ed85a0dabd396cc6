//! Point-set utilities: k-NN graphs, farthest point sampling, unit-sphere
//! normalization, resampling, and the PCF file format.
//!
//! Ties are broken by lower index everywhere so results are reproducible
//! across platforms and parallel modes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::parallel;

/// Ordered list of 3-D points in object space.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::dimension(
                "point_cloud",
                format!("flat length {} not divisible by 3", flat.len()),
            ));
        }
        Ok(PointCloud {
            points: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        for k in &mut c {
            *k /= n;
        }
        c
    }

    /// Round every coordinate through f32, the storage precision of PCF.
    pub fn quantize_f32(&self) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] as f32 as f64, p[1] as f32 as f64, p[2] as f32 as f64])
                .collect(),
        }
    }
}

pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exact k-nearest-neighbor graph, self excluded.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    k: usize,
    /// Row i lists the k nearest indices to point i, nearest first.
    neighbors: Vec<u32>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Flat neighbor list, row-major.
    pub fn flat(&self) -> &[u32] {
        &self.neighbors
    }
}

/// Exact Euclidean k-NN by brute-force scan; distance ties break to the
/// lower index.
pub fn knn(pc: &PointCloud, k: usize) -> Result<KnnGraph> {
    let n = pc.len();
    if n <= k {
        return Err(Error::size(
            "knn",
            format!("need more points than neighbors: n={n}, k={k}"),
        ));
    }
    if k == 0 {
        return Err(Error::size("knn", "k must be positive"));
    }
    let pts = pc.points();
    let mut neighbors = vec![0u32; n * k];
    parallel::for_each_chunk(&mut neighbors, k, |i, row| {
        // (distance², index) pairs; lower index wins ties via lexicographic order.
        let mut best: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = dist2(pts[i], pts[j]);
            if best.len() == k && (d, j as u32) >= *best.last().unwrap() {
                continue;
            }
            let pos = best.partition_point(|&(bd, bj)| (bd, bj) < (d, j as u32));
            best.insert(pos, (d, j as u32));
            if best.len() > k {
                best.pop();
            }
        }
        for (slot, (_, j)) in row.iter_mut().zip(&best) {
            *slot = *j;
        }
    });
    Ok(KnnGraph { k, neighbors })
}

/// Greedy farthest-point (Gonzalez) selection starting from `seed_index`.
pub fn fps(pc: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if m > n {
        return Err(Error::size("fps", format!("m={m} exceeds n={n}")));
    }
    if seed_index >= n {
        return Err(Error::Index {
            op: "fps",
            index: seed_index,
            len: n,
        });
    }
    if m == 0 {
        return Ok(vec![]);
    }
    let pts = pc.points();
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut dist = vec![f64::INFINITY; n];
    selected.push(seed_index);
    taken[seed_index] = true;
    let mut last = seed_index;
    while selected.len() < m {
        parallel::for_each_item(&mut dist, |i, d| {
            let nd = dist2(pts[i], pts[last]);
            if nd < *d {
                *d = nd;
            }
        });
        let mut best = usize::MAX;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if best == usize::MAX || dist[i] > dist[best] {
                best = i;
            }
        }
        selected.push(best);
        taken[best] = true;
        last = best;
    }
    Ok(selected)
}

/// Center at the origin and scale so the farthest point sits at radius 1.
/// Returns the transformed cloud together with the removed centroid and the
/// scale that was divided out. All-coincident clouds keep scale 1.
pub fn normalize_unit_sphere(pc: &PointCloud) -> (PointCloud, [f64; 3], f64) {
    let c = pc.centroid();
    let mut max_r = 0.0f64;
    for p in pc.points() {
        max_r = max_r.max(dist2(*p, c).sqrt());
    }
    let scale = if max_r > 0.0 { max_r } else { 1.0 };
    let points = pc
        .points()
        .iter()
        .map(|p| {
            [
                (p[0] - c[0]) / scale,
                (p[1] - c[1]) / scale,
                (p[2] - c[2]) / scale,
            ]
        })
        .collect();
    (PointCloud::new(points), c, scale)
}

/// Resample to exactly `m` points: without replacement when `m <= n`,
/// otherwise every point plus uniform with-replacement fill.
pub fn resample<R: Rng>(pc: &PointCloud, m: usize, rng: &mut R) -> PointCloud {
    let n = pc.len();
    if m <= n {
        let idx = index_sample(rng, n, m).into_vec();
        pc.select(&idx)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.extend((0..m - n).map(|_| rng.random_range(0..n)));
        pc.select(&idx)
    }
}

const PCF_MAGIC: &[u8; 4] = b"PCF1";

/// Write a point cloud as PCF: magic, u32 LE count, then count x 3 f32 LE.
pub fn write_pcf(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PCF_MAGIC)?;
    w.write_all(&(pc.len() as u32).to_le_bytes())?;
    for p in pc.points() {
        for &c in p {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pcf(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if &magic != PCF_MAGIC {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            detail: format!("bad magic {magic:?}"),
        });
    }
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let n = u32::from_le_bytes(cnt) as usize;
    let mut points = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        let mut p = [0.0f64; 3];
        for c in &mut p {
            r.read_exact(&mut buf).map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                detail: format!("truncated point data: {e}"),
            })?;
            *c = f32::from_le_bytes(buf) as f64;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}
