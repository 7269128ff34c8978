//! Uniform-grid spatial index with exact radius and k-nearest queries.
//!
//! The contract callers rely on is exactness: radius queries return exactly
//! the points within `r`, and k-nearest returns the true k nearest (resolved
//! by ring expansion until no farther cell can improve the current best).

use std::collections::HashMap;

use crate::cloud::Point3;

pub type VoxelKey = [i32; 3];

/// Integer voxel index of a point at the given resolution.
pub fn voxel_index(p: &Point3, res: f64) -> VoxelKey {
    [
        (p.x / res).floor() as i32,
        (p.y / res).floor() as i32,
        (p.z / res).floor() as i32,
    ]
}

pub struct GridIndex {
    cell: f64,
    cells: HashMap<VoxelKey, Vec<u32>>,
    points: Vec<Point3>,
}

impl GridIndex {
    /// Build an index over `points` with the given cell size.
    pub fn build(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        let mut cells: HashMap<VoxelKey, Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_index(p, cell)).or_default().push(i as u32);
        }
        Self { cell, cells, points: points.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: u32) -> &Point3 {
        &self.points[i as usize]
    }

    /// Indices of all points with Euclidean distance <= r from `q`.
    pub fn within_radius(&self, q: &Point3, r: f64) -> Vec<u32> {
        let mut out = Vec::new();
        let r2 = r * r;
        let lo = voxel_index(&Point3::new(q.x - r, q.y - r, q.z - r), self.cell);
        let hi = voxel_index(&Point3::new(q.x + r, q.y + r, q.z + r), self.cell);
        for ix in lo[0]..=hi[0] {
            for iy in lo[1]..=hi[1] {
                for iz in lo[2]..=hi[2] {
                    if let Some(ids) = self.cells.get(&[ix, iy, iz]) {
                        for &i in ids {
                            if (self.points[i as usize] - q).norm_squared() <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Count of points within radius `r` of `q`.
    pub fn count_within(&self, q: &Point3, r: f64) -> usize {
        self.within_radius(q, r).len()
    }

    /// The true k nearest neighbors of `q`, closest first, as (index, distance).
    /// `skip` excludes one index (typically the query point itself).
    pub fn k_nearest(&self, q: &Point3, k: usize, skip: Option<u32>) -> Vec<(u32, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let center = voxel_index(q, self.cell);
        let mut best: Vec<(u32, f64)> = Vec::with_capacity(k + 1);
        let mut ring = 0i32;
        loop {
            let mut any_cell = false;
            for key in ring_cells(center, ring) {
                if let Some(ids) = self.cells.get(&key) {
                    any_cell = true;
                    for &i in ids {
                        if skip == Some(i) {
                            continue;
                        }
                        let d = (self.points[i as usize] - q).norm();
                        insert_bounded(&mut best, (i, d), k);
                    }
                }
            }
            // A point in ring L+1 is at least L*cell away, so once the k-th
            // best is within that bound no farther ring can improve it.
            let done = best.len() >= k && best[k - 1].1 <= ring as f64 * self.cell;
            let exhausted = !any_cell && ring as f64 * self.cell > self.max_extent() + self.cell;
            if done || exhausted {
                break;
            }
            ring += 1;
        }
        best
    }

    /// Nearest neighbor of `q`, or None for an empty index.
    pub fn nearest(&self, q: &Point3) -> Option<(u32, f64)> {
        self.k_nearest(q, 1, None).first().copied()
    }

    fn max_extent(&self) -> f64 {
        // Loose bound on the data diameter used only as a ring-expansion stop.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max)
    }
}

fn insert_bounded(best: &mut Vec<(u32, f64)>, item: (u32, f64), k: usize) {
    let pos = best
        .binary_search_by(|probe| probe.1.partial_cmp(&item.1).unwrap())
        .unwrap_or_else(|e| e);
    if pos < k {
        best.insert(pos, item);
        best.truncate(k);
    }
}

/// Keys of all cells at Chebyshev distance exactly `ring` from `center`.
fn ring_cells(center: VoxelKey, ring: i32) -> Vec<VoxelKey> {
    if ring == 0 {
        return vec![center];
    }
    let mut keys = Vec::new();
    let r = ring;
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                if dx.abs().max(dy.abs()).max(dz.abs()) == r {
                    keys.push([center[0] + dx, center[1] + dy, center[2] + dz]);
                }
            }
        }
    }
    keys
}
