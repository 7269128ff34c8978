//! Point-cloud primitives shared by the perception stages: storage,
//! downsampling, outlier filtering, neighborhood queries, normals, and local
//! SVD shape analysis.

use nalgebra::{Matrix3, Unit};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{voxel_index, GridIndex, VoxelKey};
use crate::par;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("leaf size must be positive, got {0}")]
    NonPositiveLeaf(f64),
    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("neighbor count must be at least {min}, got {got}")]
    BadNeighborCount { min: usize, got: usize },
    #[error("need at least {needed} points within the radius, found {found}")]
    InsufficientSupport { needed: usize, found: usize },
    #[error("labels length {labels} does not match point count {points}")]
    LabelMismatch { labels: usize, points: usize },
}

/// Per-point semantic tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Trunk,
    Cordon,
    Cane,
    Bud,
    Other,
}

/// 3D point set with optional per-point labels and a frame tag.
///
/// `sensor_origin` records where the sensor sat in this cloud's frame; normal
/// estimation orients normals toward it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<Label>>,
    pub frame: String,
    pub sensor_origin: Point3,
}

impl LabeledCloud {
    pub fn new(frame: impl Into<String>) -> Self {
        Self {
            points: Vec::new(),
            labels: None,
            frame: frame.into(),
            sensor_origin: Point3::origin(),
        }
    }

    pub fn from_points(frame: impl Into<String>, points: Vec<Point3>) -> Self {
        Self { points, labels: None, frame: frame.into(), sensor_origin: Point3::origin() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<Label> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Checks the labels-match-points invariant.
    pub fn validate(&self) -> Result<(), CloudError> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(CloudError::LabelMismatch {
                    labels: labels.len(),
                    points: self.points.len(),
                });
            }
        }
        Ok(())
    }

    /// Cloud with only the points at `indices`, labels carried along.
    pub fn select(&self, indices: &[u32]) -> LabeledCloud {
        LabeledCloud {
            points: indices.iter().map(|&i| self.points[i as usize]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i as usize]).collect()),
            frame: self.frame.clone(),
            sensor_origin: self.sensor_origin,
        }
    }

    /// Appends all points (and labels, when both sides carry them) of `other`.
    pub fn extend_from(&mut self, other: &LabeledCloud) {
        match (&mut self.labels, &other.labels) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(a), None) => a.extend(std::iter::repeat(Label::Other).take(other.len())),
            (None, Some(b)) => {
                let mut l = vec![Label::Other; self.points.len()];
                l.extend_from_slice(b);
                self.labels = Some(l);
            }
            (None, None) => {}
        }
        self.points.extend_from_slice(&other.points);
    }
}

/// Output of a local SVD shape probe: singular values sorted descending plus
/// the matching orthonormal directions and the neighborhood centroid.
#[derive(Debug, Clone)]
pub struct LocalShape {
    pub singular_values: [f64; 3],
    pub singular_vectors: [Unit<Vec3>; 3],
    pub centroid: Point3,
}

impl LocalShape {
    /// Singular values scaled to unit L2 norm, so the feature is invariant to
    /// point count and neighborhood scale.
    pub fn normalized_singular_values(&self) -> [f64; 3] {
        let s = self.singular_values;
        let n = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
        if n == 0.0 {
            [0.0; 3]
        } else {
            [s[0] / n, s[1] / n, s[2] / n]
        }
    }

    pub fn dominant(&self) -> Unit<Vec3> {
        self.singular_vectors[0]
    }
}

/// One output point per occupied voxel, placed at the voxel's point centroid.
/// The output label is the majority label of the voxel members (ties go to
/// the label encountered first, scanning members in input order).
pub fn voxel_downsample(cloud: &LabeledCloud, leaf: f64) -> Result<LabeledCloud, CloudError> {
    if leaf <= 0.0 {
        return Err(CloudError::NonPositiveLeaf(leaf));
    }
    let mut buckets: Vec<(VoxelKey, Vec<u32>)> = bucket_by_voxel(&cloud.points, leaf);
    // Deterministic output order.
    buckets.sort_unstable_by_key(|(k, _)| *k);

    let mut out = LabeledCloud::new(cloud.frame.clone());
    out.sensor_origin = cloud.sensor_origin;
    let mut labels = cloud.labels.as_ref().map(|_| Vec::with_capacity(buckets.len()));
    for (_, members) in &buckets {
        let mut c = Vec3::zeros();
        for &i in members {
            c += cloud.points[i as usize].coords;
        }
        out.points.push(Point3::from(c / members.len() as f64));
        if let (Some(out_labels), Some(in_labels)) = (&mut labels, &cloud.labels) {
            out_labels.push(majority_label(members, in_labels));
        }
    }
    out.labels = labels;
    Ok(out)
}

fn bucket_by_voxel(points: &[Point3], leaf: f64) -> Vec<(VoxelKey, Vec<u32>)> {
    let mut map: std::collections::HashMap<VoxelKey, Vec<u32>> = std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        map.entry(voxel_index(p, leaf)).or_default().push(i as u32);
    }
    map.into_iter().collect()
}

fn majority_label(members: &[u32], labels: &[Label]) -> Label {
    let mut counts: Vec<(Label, usize)> = Vec::new();
    for &i in members {
        let l = labels[i as usize];
        match counts.iter_mut().find(|(cl, _)| *cl == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    // First-encountered wins ties because `counts` preserves encounter order
    // and max_by_key returns the last maximum; compare strictly.
    let mut best = counts[0];
    for &c in &counts[1..] {
        if c.1 > best.1 {
            best = c;
        }
    }
    best.0
}

#[derive(Debug, Clone)]
pub struct OutlierReport {
    pub removed: Vec<u32>,
    pub threshold: f64,
    /// Set when the cloud was smaller than k+1 and returned unchanged.
    pub undersized: bool,
}

/// Removes every point whose mean distance to its k nearest neighbors exceeds
/// mean + stddev_mult * stddev of that statistic over the cloud.
pub fn statistical_outlier_filter(
    cloud: &LabeledCloud,
    k: usize,
    stddev_mult: f64,
) -> Result<(LabeledCloud, OutlierReport), CloudError> {
    if k < 1 {
        return Err(CloudError::BadNeighborCount { min: 1, got: k });
    }
    if cloud.len() < k + 1 {
        return Ok((
            cloud.clone(),
            OutlierReport { removed: Vec::new(), threshold: f64::INFINITY, undersized: true },
        ));
    }
    let cell = neighbor_cell_size(&cloud.points, k);
    let index = GridIndex::build(&cloud.points, cell);
    let mean_dists = par::map_range(cloud.len(), |i| {
        let nn = index.k_nearest(&cloud.points[i], k, Some(i as u32));
        nn.iter().map(|(_, d)| d).sum::<f64>() / nn.len() as f64
    });
    let n = mean_dists.len() as f64;
    let mean = mean_dists.iter().sum::<f64>() / n;
    let var = mean_dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let threshold = mean + stddev_mult * var.sqrt();

    let mut keep = Vec::new();
    let mut removed = Vec::new();
    for (i, d) in mean_dists.iter().enumerate() {
        if *d > threshold {
            removed.push(i as u32);
        } else {
            keep.push(i as u32);
        }
    }
    Ok((cloud.select(&keep), OutlierReport { removed, threshold, undersized: false }))
}

// Cell size that puts roughly k points per 3x3x3 block for typical densities.
fn neighbor_cell_size(points: &[Point3], k: usize) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let vol: f64 = (0..3).map(|a| (hi[a] - lo[a]).max(1e-6)).product();
    let per_point = (vol / points.len() as f64).cbrt();
    (per_point * (k as f64).cbrt()).max(1e-6)
}

/// Exactly the indices within Euclidean distance <= r of `query`.
pub fn radius_neighbors(
    cloud: &LabeledCloud,
    query: &Point3,
    r: f64,
) -> Result<Vec<u32>, CloudError> {
    if r <= 0.0 {
        return Err(CloudError::NonPositiveRadius(r));
    }
    let r2 = r * r;
    Ok(cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| (*p - query).norm_squared() <= r2)
        .map(|(i, _)| i as u32)
        .collect())
}

/// Per-point unit normals from the k-neighborhood covariance, oriented toward
/// the cloud's sensor origin. Degenerate (rank < 2) neighborhoods yield None
/// and are excluded from ICP correspondence.
pub fn estimate_normals(
    cloud: &LabeledCloud,
    k: usize,
) -> Result<Vec<Option<Unit<Vec3>>>, CloudError> {
    if k < 3 {
        return Err(CloudError::BadNeighborCount { min: 3, got: k });
    }
    if cloud.len() < 3 {
        return Ok(vec![None; cloud.len()]);
    }
    let cell = neighbor_cell_size(&cloud.points, k);
    let index = GridIndex::build(&cloud.points, cell);
    let origin = cloud.sensor_origin;
    Ok(par::map_range(cloud.len(), |i| {
        let nn = index.k_nearest(&cloud.points[i], k, Some(i as u32));
        if nn.len() < 2 {
            return None;
        }
        let mut pts: Vec<Point3> = nn.iter().map(|&(j, _)| cloud.points[j as usize]).collect();
        pts.push(cloud.points[i]);
        let shape = shape_from_points(&pts)?;
        let s = shape.singular_values;
        if s[1] <= 1e-8 * s[0] {
            return None; // rank < 2
        }
        let mut n = shape.singular_vectors[2].into_inner();
        if n.dot(&(origin - cloud.points[i])) < 0.0 {
            n = -n;
        }
        Some(Unit::new_normalize(n))
    }))
}

/// SVD of the mean-centered matrix of the points within `r` of `center`.
pub fn local_svd(cloud: &LabeledCloud, center: &Point3, r: f64) -> Result<LocalShape, CloudError> {
    if r <= 0.0 {
        return Err(CloudError::NonPositiveRadius(r));
    }
    let idx = radius_neighbors(cloud, center, r)?;
    let pts: Vec<Point3> = idx.iter().map(|&i| cloud.points[i as usize]).collect();
    shape_from_points(&pts).ok_or(CloudError::InsufficientSupport { needed: 3, found: pts.len() })
}

/// Shape of an explicit point set; None when fewer than 3 points.
///
/// Computed as the symmetric eigendecomposition of X^T X for the mean-centered
/// matrix X, so the reported values are the singular values of X itself.
pub fn shape_from_points(pts: &[Point3]) -> Option<LocalShape> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mut mean = Vec3::zeros();
    for p in pts {
        mean += p.coords;
    }
    mean /= n;
    let mut xtx = Matrix3::zeros();
    for p in pts {
        let d = p.coords - mean;
        xtx += d * d.transpose();
    }
    let eig = xtx.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_unstable_by(|&a, &b| {
        eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap()
    });
    let mut values = [0.0; 3];
    let mut vectors = [Unit::new_unchecked(Vec3::x()); 3];
    for (slot, &src) in order.iter().enumerate() {
        values[slot] = eig.eigenvalues[src].max(0.0).sqrt();
        let mut v: Vec3 = eig.eigenvectors.column(src).into();
        // Canonical sign: largest-magnitude component positive.
        let amax = (0..3).max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap()).unwrap();
        if v[amax] < 0.0 {
            v = -v;
        }
        vectors[slot] = Unit::new_normalize(v);
    }
    Some(LocalShape { singular_values: values, singular_vectors: vectors, centroid: Point3::from(mean) })
}
