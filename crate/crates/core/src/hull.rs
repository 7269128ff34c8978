//! 3D convex hull by quickhull (furthest-point insertion) and exact hull
//! volume via the divergence theorem over the returned facets.

use thiserror::Error;

use crate::cloud::{Point3, Vec3};

#[derive(Debug, Error)]
pub enum HullError {
    #[error("convex hull needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate input: points are coplanar (zero volume)")]
    ZeroVolume,
}

#[derive(Debug, Clone)]
pub struct ConvexHull {
    /// Triangular facets as indices into the input point set, outward wound.
    pub faces: Vec<[u32; 3]>,
    pub volume: f64,
}

struct Face {
    v: [u32; 3],
    normal: Vec3,
    offset: f64,
    outside: Vec<u32>,
    alive: bool,
}

impl Face {
    fn new(pts: &[Point3], v: [u32; 3], interior: &Point3) -> Self {
        let (a, b, c) = (pts[v[0] as usize], pts[v[1] as usize], pts[v[2] as usize]);
        let mut normal = (b - a).cross(&(c - a));
        let n = normal.norm();
        if n > 0.0 {
            normal /= n;
        }
        let mut offset = normal.dot(&a.coords);
        let mut v = v;
        // Keep the interior on the negative side.
        if normal.dot(&interior.coords) > offset {
            normal = -normal;
            offset = -offset;
            v.swap(1, 2);
        }
        Face { v, normal, offset, outside: Vec::new(), alive: true }
    }

    fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }
}

/// Convex hull volume; exact for the hull that quickhull returns.
pub fn hull_volume(points: &[Point3]) -> Result<f64, HullError> {
    Ok(convex_hull(points)?.volume)
}

pub fn convex_hull(points: &[Point3]) -> Result<ConvexHull, HullError> {
    if points.len() < 4 {
        return Err(HullError::TooFewPoints(points.len()));
    }
    let diag = bbox_diagonal(points);
    if diag == 0.0 {
        return Err(HullError::ZeroVolume);
    }
    let eps = diag * 1e-10;

    let (i0, i1) = furthest_pair(points);
    let d01 = points[i1 as usize] - points[i0 as usize];
    if d01.norm() <= eps {
        return Err(HullError::ZeroVolume);
    }
    // Furthest point from the line, then from the plane.
    let i2 = (0..points.len() as u32)
        .max_by(|&a, &b| {
            line_dist(points, i0, i1, a).partial_cmp(&line_dist(points, i0, i1, b)).unwrap()
        })
        .unwrap();
    if line_dist(points, i0, i1, i2) <= eps {
        return Err(HullError::ZeroVolume);
    }
    let n = (points[i1 as usize] - points[i0 as usize])
        .cross(&(points[i2 as usize] - points[i0 as usize]));
    let i3 = (0..points.len() as u32)
        .max_by(|&a, &b| {
            let da = (n.dot(&(points[a as usize] - points[i0 as usize]))).abs();
            let db = (n.dot(&(points[b as usize] - points[i0 as usize]))).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    if (n.dot(&(points[i3 as usize] - points[i0 as usize]))).abs() <= eps * n.norm().max(1e-300) {
        return Err(HullError::ZeroVolume);
    }

    let interior = Point3::from(
        (points[i0 as usize].coords
            + points[i1 as usize].coords
            + points[i2 as usize].coords
            + points[i3 as usize].coords)
            / 4.0,
    );
    let mut faces = vec![
        Face::new(points, [i0, i1, i2], &interior),
        Face::new(points, [i0, i1, i3], &interior),
        Face::new(points, [i0, i2, i3], &interior),
        Face::new(points, [i1, i2, i3], &interior),
    ];

    // Initial outside sets.
    for p in 0..points.len() as u32 {
        if p == i0 || p == i1 || p == i2 || p == i3 {
            continue;
        }
        for f in faces.iter_mut() {
            if f.signed_distance(&points[p as usize]) > eps {
                f.outside.push(p);
                break;
            }
        }
    }

    loop {
        // Furthest outside point over any alive face.
        let mut pick: Option<(usize, u32, f64)> = None;
        for (fi, f) in faces.iter().enumerate() {
            if !f.alive {
                continue;
            }
            for &p in &f.outside {
                let d = f.signed_distance(&points[p as usize]);
                if pick.map_or(true, |(_, _, bd)| d > bd) {
                    pick = Some((fi, p, d));
                }
            }
        }
        let Some((_, apex, _)) = pick else { break };
        let apex_pt = points[apex as usize];

        // All faces visible from the apex; their once-only directed edges
        // form the horizon.
        let mut visible = Vec::new();
        for (fi, f) in faces.iter().enumerate() {
            if f.alive && f.signed_distance(&apex_pt) > eps {
                visible.push(fi);
            }
        }
        let mut edge_count: std::collections::HashMap<(u32, u32), i32> =
            std::collections::HashMap::new();
        for &fi in &visible {
            let v = faces[fi].v;
            for (a, b) in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                *edge_count.entry((a, b)).or_insert(0) += 1;
            }
        }
        let mut orphans = Vec::new();
        for &fi in &visible {
            faces[fi].alive = false;
            orphans.append(&mut faces[fi].outside);
        }
        let mut new_faces = Vec::new();
        for &fi in &visible {
            let v = faces[fi].v;
            for (a, b) in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])] {
                // horizon edge: its reverse is not among visible edges
                if !edge_count.contains_key(&(b, a)) {
                    new_faces.push(Face::new(points, [a, b, apex], &interior));
                }
            }
        }
        for p in orphans {
            if p == apex {
                continue;
            }
            for f in new_faces.iter_mut() {
                if f.signed_distance(&points[p as usize]) > eps {
                    f.outside.push(p);
                    break;
                }
            }
        }
        faces.extend(new_faces);
    }

    let alive: Vec<&Face> = faces.iter().filter(|f| f.alive).collect();
    let mut volume = 0.0;
    let o = interior.coords;
    for f in &alive {
        let a = points[f.v[0] as usize].coords - o;
        let b = points[f.v[1] as usize].coords - o;
        let c = points[f.v[2] as usize].coords - o;
        volume += a.dot(&b.cross(&c)) / 6.0;
    }
    Ok(ConvexHull { faces: alive.iter().map(|f| f.v).collect(), volume: volume.abs() })
}

fn bbox_diagonal(points: &[Point3]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt()
}

fn furthest_pair(points: &[Point3]) -> (u32, u32) {
    // Pair of axis-extreme points with the largest separation.
    let mut extremes = Vec::new();
    for axis in 0..3 {
        let lo = (0..points.len() as u32)
            .min_by(|&a, &b| {
                points[a as usize][axis].partial_cmp(&points[b as usize][axis]).unwrap()
            })
            .unwrap();
        let hi = (0..points.len() as u32)
            .max_by(|&a, &b| {
                points[a as usize][axis].partial_cmp(&points[b as usize][axis]).unwrap()
            })
            .unwrap();
        extremes.push(lo);
        extremes.push(hi);
    }
    let mut best = (extremes[0], extremes[1], -1.0);
    for &a in &extremes {
        for &b in &extremes {
            let d = (points[a as usize] - points[b as usize]).norm_squared();
            if d > best.2 {
                best = (a, b, d);
            }
        }
    }
    (best.0, best.1)
}

fn line_dist(points: &[Point3], i0: u32, i1: u32, p: u32) -> f64 {
    let d = (points[i1 as usize] - points[i0 as usize]).normalize();
    let v = points[p as usize] - points[i0 as usize];
    (v - d * v.dot(&d)).norm()
}
