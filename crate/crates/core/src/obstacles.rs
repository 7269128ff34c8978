//! Obstacle extraction: axis-constrained RANSAC for the vertical trunk/post
//! line and the horizontal cordon/trellis line, and the inflated occupancy
//! grid used by approach planning. Only those two lines become occupied
//! space; canes are deliberately left free.

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::cloud::{shape_from_points, LabeledCloud, Point3, Vec3};
use crate::config::ObstacleConfig;
use crate::grid::VoxelKey;
use crate::rng;

#[derive(Debug, Error)]
pub enum ObstacleError {
    #[error("no line satisfying the {0} constraint was found")]
    NotFound(&'static str),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
}

/// A fitted 3D line clipped to its inlier extent.
#[derive(Debug, Clone)]
pub struct Line3D {
    pub point: Point3,
    pub direction: Vec3,
    /// Extent along `direction` from `point`, covering all inliers.
    pub t_min: f64,
    pub t_max: f64,
    pub inliers: Vec<u32>,
    pub inlier_rms: f64,
}

impl Line3D {
    pub fn start(&self) -> Point3 {
        Point3::from(self.point.coords + self.direction * self.t_min)
    }

    pub fn end(&self) -> Point3 {
        Point3::from(self.point.coords + self.direction * self.t_max)
    }

    pub fn distance_to(&self, p: &Point3) -> f64 {
        let d = p - self.point;
        (d - self.direction * d.dot(&self.direction)).norm()
    }
}

/// Best-inlier line among sampled 2-point hypotheses whose direction lies
/// within `max_angle` of `axis`; refit by least squares on the inliers. The
/// refit is kept only when it does not lose inliers at the same tolerance.
pub fn ransac_line3d(
    cloud: &LabeledCloud,
    axis: &Vec3,
    max_angle: f64,
    iters: usize,
    inlier_tol: f64,
    seed: u64,
) -> Result<Line3D, ObstacleError> {
    let pts = &cloud.points;
    if pts.len() < 2 {
        return Err(ObstacleError::TooFewPoints(pts.len()));
    }
    let axis = axis.normalize();
    let cos_gate = max_angle.cos();
    let mut stream = rng::derive(seed, &[0x8A5AC]);
    let mut best: Option<(usize, Point3, Vec3)> = None;
    for _ in 0..iters {
        let i = stream.random_range(0..pts.len());
        let j = stream.random_range(0..pts.len());
        if i == j {
            continue;
        }
        let dir = pts[j] - pts[i];
        let norm = dir.norm();
        if norm < 1e-9 {
            continue;
        }
        let dir = dir / norm;
        if dir.dot(&axis).abs() < cos_gate {
            continue;
        }
        let count = count_inliers(pts, &pts[i], &dir, inlier_tol);
        if best.as_ref().map_or(true, |(c, _, _)| count > *c) {
            best = Some((count, pts[i], dir));
        }
    }
    let (_, p0, dir) = best.ok_or(ObstacleError::NotFound("axis"))?;

    let sampled = collect_line(pts, &p0, &dir, inlier_tol);
    // Least-squares refit: centroid + dominant direction of the inliers.
    let refit = refit_line(pts, &sampled.inliers).map(|(c, d)| {
        let d = if d.dot(&axis) < 0.0 { -d } else { d };
        collect_line(pts, &c, &d, inlier_tol)
    });
    let line = match refit {
        Some(r) if r.inliers.len() >= sampled.inliers.len() => r,
        _ => sampled,
    };
    Ok(line)
}

fn count_inliers(pts: &[Point3], p0: &Point3, dir: &Vec3, tol: f64) -> usize {
    pts.iter()
        .filter(|p| {
            let d = *p - p0;
            (d - dir * d.dot(dir)).norm() <= tol
        })
        .count()
}

fn collect_line(pts: &[Point3], p0: &Point3, dir: &Vec3, tol: f64) -> Line3D {
    let mut inliers = Vec::new();
    let mut sq = 0.0;
    let mut t_min = f64::INFINITY;
    let mut t_max = f64::NEG_INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = p - p0;
        let t = d.dot(dir);
        let r = (d - dir * t).norm();
        if r <= tol {
            inliers.push(i as u32);
            sq += r * r;
            t_min = t_min.min(t);
            t_max = t_max.max(t);
        }
    }
    let rms = if inliers.is_empty() { 0.0 } else { (sq / inliers.len() as f64).sqrt() };
    Line3D { point: *p0, direction: *dir, t_min, t_max, inliers, inlier_rms: rms }
}

fn refit_line(pts: &[Point3], inliers: &[u32]) -> Option<(Point3, Vec3)> {
    if inliers.len() < 2 {
        return None;
    }
    let sel: Vec<Point3> = inliers.iter().map(|&i| pts[i as usize]).collect();
    let shape = shape_from_points(&sel)?;
    Some((shape.centroid, shape.singular_vectors[0].into_inner()))
}

/// Trunk from vertical-constrained RANSAC, cordon from horizontal-constrained
/// RANSAC on the remaining points, both clipped to their inlier extent.
pub fn extract_trunk_cordon(
    cloud: &LabeledCloud,
    cfg: &ObstacleConfig,
    seed: u64,
) -> Result<(Line3D, Line3D), ObstacleError> {
    let trunk = ransac_line3d(cloud, &Vec3::z(), cfg.max_axis_angle, cfg.iters, cfg.inlier_tol, seed)
        .map_err(|_| ObstacleError::NotFound("trunk"))?;
    let trunk_set: BTreeSet<u32> = trunk.inliers.iter().copied().collect();
    let rest_idx: Vec<u32> =
        (0..cloud.len() as u32).filter(|i| !trunk_set.contains(i)).collect();
    let rest = cloud.select(&rest_idx);
    let cordon =
        ransac_line3d(&rest, &Vec3::x(), cfg.max_axis_angle, cfg.iters, cfg.inlier_tol, seed ^ 1)
            .map_err(|_| ObstacleError::NotFound("cordon"))?;
    // Map cordon inliers back to original indices.
    let cordon = Line3D {
        inliers: cordon.inliers.iter().map(|&i| rest_idx[i as usize]).collect(),
        ..cordon
    };
    Ok((trunk, cordon))
}

/// Occupancy grid: the set of voxels within `inflation` of any obstacle
/// segment. A voxel counts as occupied when the segment passes within
/// `inflation` of its cube.
#[derive(Debug, Clone)]
pub struct OccupancyOctree {
    pub resolution: f64,
    pub inflation: f64,
    pub occupied: BTreeSet<VoxelKey>,
}

impl OccupancyOctree {
    pub fn is_occupied(&self, key: &VoxelKey) -> bool {
        self.occupied.contains(key)
    }

    pub fn voxel_of(&self, p: &Point3) -> VoxelKey {
        crate::grid::voxel_index(p, self.resolution)
    }

    /// True when the straight segment a->b passes through occupied space.
    /// Checked by sampling at quarter-resolution steps.
    pub fn segment_blocked(&self, a: &Point3, b: &Point3) -> bool {
        let len = (b - a).norm();
        let steps = (len / (self.resolution * 0.25)).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let p = Point3::from(a.coords + (b - a) * t);
            if self.is_occupied(&self.voxel_of(&p)) {
                return true;
            }
        }
        false
    }
}

/// Marks every voxel whose cube lies within `inflation` of a segment.
pub fn build_occupancy(lines: &[Line3D], resolution: f64, inflation: f64) -> OccupancyOctree {
    let mut occupied = BTreeSet::new();
    for line in lines {
        let a = line.start();
        let b = line.end();
        let pad = inflation + 1e-12;
        let lo = Point3::new(
            a.x.min(b.x) - pad,
            a.y.min(b.y) - pad,
            a.z.min(b.z) - pad,
        );
        let hi = Point3::new(
            a.x.max(b.x) + pad,
            a.y.max(b.y) + pad,
            a.z.max(b.z) + pad,
        );
        let k_lo = crate::grid::voxel_index(&lo, resolution);
        let k_hi = crate::grid::voxel_index(&hi, resolution);
        for ix in k_lo[0]..=k_hi[0] {
            for iy in k_lo[1]..=k_hi[1] {
                for iz in k_lo[2]..=k_hi[2] {
                    let key = [ix, iy, iz];
                    if segment_box_distance(&a, &b, &key, resolution) <= inflation {
                        occupied.insert(key);
                    }
                }
            }
        }
    }
    OccupancyOctree { resolution, inflation, occupied }
}

/// Distance from a segment to an axis-aligned voxel cube. Point-to-box
/// distance is convex along the segment, so golden-section search finds the
/// global minimum.
pub fn segment_box_distance(a: &Point3, b: &Point3, key: &VoxelKey, res: f64) -> f64 {
    let lo = [key[0] as f64 * res, key[1] as f64 * res, key[2] as f64 * res];
    let hi = [lo[0] + res, lo[1] + res, lo[2] + res];
    let point_dist = |t: f64| -> f64 {
        let p = a.coords + (b - a) * t;
        let mut sq = 0.0;
        for i in 0..3 {
            let d = (lo[i] - p[i]).max(0.0).max(p[i] - hi[i]);
            sq += d * d;
        }
        sq.sqrt()
    };
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut l, mut r) = (0.0, 1.0);
    let mut x1 = r - phi * (r - l);
    let mut x2 = l + phi * (r - l);
    let (mut f1, mut f2) = (point_dist(x1), point_dist(x2));
    for _ in 0..80 {
        if f1 < f2 {
            r = x2;
            x2 = x1;
            f2 = f1;
            x1 = r - phi * (r - l);
            f1 = point_dist(x1);
        } else {
            l = x1;
            x1 = x2;
            f1 = f2;
            x2 = l + phi * (r - l);
            f2 = point_dist(x2);
        }
    }
    point_dist((l + r) / 2.0).min(point_dist(0.0)).min(point_dist(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vertical_line_cloud(n: usize) -> LabeledCloud {
        let pts = (0..n).map(|i| Point3::new(0.0, 0.0, i as f64 * 0.01)).collect();
        LabeledCloud::from_points("test", pts)
    }

    #[test]
    fn exact_vertical_line_recovered() {
        let cloud = vertical_line_cloud(100);
        let line =
            ransac_line3d(&cloud, &Vec3::z(), 15f64.to_radians(), 200, 0.005, 7).unwrap();
        let angle = line.direction.dot(&Vec3::z()).abs().clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 0.1, "angle {angle}");
        assert_eq!(line.inliers.len(), 100);
    }

    #[test]
    fn vertical_line_with_heavy_noise() {
        let mut cloud = vertical_line_cloud(200);
        let mut noise = crate::rng::derive(3, &[1]);
        for _ in 0..100 {
            cloud.points.push(Point3::new(
                noise.random_range(-0.5..0.5),
                noise.random_range(-0.5..0.5),
                noise.random_range(0.0..2.0),
            ));
        }
        let line =
            ransac_line3d(&cloud, &Vec3::z(), 15f64.to_radians(), 500, 0.01, 11).unwrap();
        let angle = line.direction.dot(&Vec3::z()).abs().clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 1.0, "angle {angle}");
        // line passes within 1 cm of the true axis
        let d = line.distance_to(&Point3::new(0.0, 0.0, 1.0));
        assert!(d < 0.01 + 1e-9, "axis offset {d}");
    }

    #[test]
    fn constraint_mismatch_not_found() {
        let pts = (0..100).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let cloud = LabeledCloud::from_points("test", pts);
        let err = ransac_line3d(&cloud, &Vec3::z(), 15f64.to_radians(), 300, 0.005, 5);
        assert!(matches!(err, Err(ObstacleError::NotFound(_))));
    }

    #[test]
    fn ransac_deterministic_for_fixed_seed() {
        let mut cloud = vertical_line_cloud(150);
        let mut noise = crate::rng::derive(9, &[2]);
        for _ in 0..80 {
            cloud.points.push(Point3::new(
                noise.random_range(-0.4..0.4),
                noise.random_range(-0.4..0.4),
                noise.random_range(0.0..1.5),
            ));
        }
        let a = ransac_line3d(&cloud, &Vec3::z(), 0.3, 300, 0.01, 42).unwrap();
        let b = ransac_line3d(&cloud, &Vec3::z(), 0.3, 300, 0.01, 42).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.direction, b.direction);
    }

    #[test]
    fn occupancy_single_vertical_segment() {
        let line = Line3D {
            point: Point3::new(0.025, 0.025, 0.0),
            direction: Vec3::z(),
            t_min: 0.0,
            t_max: 1.0,
            inliers: vec![],
            inlier_rms: 0.0,
        };
        let oct = build_occupancy(&[line], 0.05, 0.0);
        let column: BTreeSet<(i32, i32)> =
            oct.occupied.iter().map(|k| (k[0], k[1])).collect();
        assert_eq!(column.len(), 1, "zero inflation keeps one column");
        assert!((20..=21).contains(&oct.occupied.len()), "got {}", oct.occupied.len());
    }

    #[test]
    fn occupancy_empty_without_lines() {
        let oct = build_occupancy(&[], 0.05, 0.1);
        assert!(oct.occupied.is_empty());
    }

    #[test]
    fn occupancy_monotone_in_inflation() {
        let line = Line3D {
            point: Point3::new(0.01, 0.02, 0.0),
            direction: Vec3::new(0.3, 0.2, 0.93).normalize(),
            t_min: -0.3,
            t_max: 0.8,
            inliers: vec![],
            inlier_rms: 0.0,
        };
        let small = build_occupancy(&[line.clone()], 0.05, 0.03);
        let large = build_occupancy(&[line], 0.05, 0.12);
        assert!(small.occupied.is_subset(&large.occupied));
    }

    #[test]
    fn occupancy_matches_brute_force_distance_test() {
        let line = Line3D {
            point: Point3::new(0.04, -0.02, 0.1),
            direction: Vec3::new(0.1, 0.9, 0.4).normalize(),
            t_min: 0.0,
            t_max: 0.7,
            inliers: vec![],
            inlier_rms: 0.0,
        };
        let res = 0.05;
        let inflation = 0.1;
        let oct = build_occupancy(&[line.clone()], res, inflation);
        // Dense-sampling oracle: min distance from 0.2 mm segment samples to
        // each candidate voxel cube.
        let a = line.start();
        let b = line.end();
        let steps = ((b - a).norm() / 0.0002).ceil() as usize;
        let mut oracle = BTreeSet::new();
        for ix in -8..12i32 {
            for iy in -8..16i32 {
                for iz in -4..12i32 {
                    let key = [ix, iy, iz];
                    let lo = [ix as f64 * res, iy as f64 * res, iz as f64 * res];
                    let hi = [lo[0] + res, lo[1] + res, lo[2] + res];
                    let mut dmin = f64::INFINITY;
                    for s in 0..=steps {
                        let t = s as f64 / steps as f64;
                        let p = a.coords + (b - a) * t;
                        let mut sq = 0.0;
                        for i in 0..3 {
                            let d = (lo[i] - p[i]).max(0.0).max(p[i] - hi[i]);
                            sq += d * d;
                        }
                        dmin = dmin.min(sq.sqrt());
                        if dmin == 0.0 {
                            break;
                        }
                    }
                    if dmin <= inflation {
                        oracle.insert(key);
                    }
                }
            }
        }
        assert_eq!(oct.occupied, oracle);
    }

    #[test]
    fn segment_blocked_detects_crossings() {
        let line = Line3D {
            point: Point3::new(0.0, 0.0, 0.0),
            direction: Vec3::z(),
            t_min: 0.0,
            t_max: 2.0,
            inliers: vec![],
            inlier_rms: 0.0,
        };
        let oct = build_occupancy(&[line], 0.05, 0.05);
        assert!(oct.segment_blocked(
            &Point3::new(-0.5, 0.0, 1.0),
            &Point3::new(0.5, 0.0, 1.0)
        ));
        assert!(!oct.segment_blocked(
            &Point3::new(-0.5, 0.5, 1.0),
            &Point3::new(0.5, 0.5, 1.0)
        ));
    }
}
