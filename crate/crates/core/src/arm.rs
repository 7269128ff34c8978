//! Kinematics and manipulation analysis for the prismatic-base 6R arm:
//! forward kinematics, Monte-Carlo workspace volume, cut-point reachability,
//! cut sequencing, approach-pose generation, and the cane cut-force model.

use nalgebra::{Translation3, Unit, UnitQuaternion};
use thiserror::Error;

use crate::cloud::{Point3, Vec3};
use crate::config::ArmConfig;
use crate::cutgraph::{direction_from_angles, CutPoint};
use crate::grid::GridIndex;
use crate::hull::{hull_volume, HullError};
use crate::obstacles::OccupancyOctree;
use crate::par;
use crate::register::RigidTransform;
use crate::rng;
use crate::synth::Side;

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("joint state has {got} revolute angles, chain expects {want}")]
    JointMismatch { got: usize, want: usize },
    #[error("approach segment passes through occupied space")]
    Blocked,
    #[error("cane diameter must be positive, got {0} mm")]
    BadDiameter(f64),
    #[error(transparent)]
    Hull(#[from] HullError),
}

/// Base slide position plus the six revolute angles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub slide: f64,
    pub angles: [f64; 6],
}

/// Pose of the tool tip in the arm base frame (x along the slide, y toward
/// the canopy, z up): prismatic translation composed with the six
/// offset-then-rotate link transforms and the fixed tool offset.
pub fn forward_kinematics(cfg: &ArmConfig, q: &JointState) -> RigidTransform {
    let mut t = RigidTransform::translation(q.slide, 0.0, 0.0);
    for (link, &angle) in cfg.links.iter().zip(q.angles.iter()) {
        let axis = Unit::new_normalize(Vec3::new(link.axis[0], link.axis[1], link.axis[2]));
        t = t * RigidTransform::from_parts(
            Translation3::new(link.offset[0], link.offset[1], link.offset[2]),
            UnitQuaternion::from_axis_angle(&axis, angle),
        );
    }
    t * RigidTransform::translation(cfg.tool_offset[0], cfg.tool_offset[1], cfg.tool_offset[2])
}

/// N tool positions from joint states uniform within limits. With
/// `use_base` false the slide stays at mid-travel. Sampling is sharded with
/// per-shard seeds, so results are identical across thread counts.
pub fn sample_workspace(cfg: &ArmConfig, n: usize, use_base: bool, seed: u64) -> Vec<Point3> {
    const SHARD: usize = 4096;
    let shards = n.div_ceil(SHARD);
    let chunks = par::map_range(shards, |s| {
        let mut stream = rng::derive(seed, &[0xA13, s as u64, use_base as u64]);
        let count = SHARD.min(n - s * SHARD);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let q = random_joint_state(cfg, use_base, &mut stream);
            out.push(Point3::from(forward_kinematics(cfg, &q).translation.vector));
        }
        out
    });
    chunks.into_iter().flatten().collect()
}

fn random_joint_state(
    cfg: &ArmConfig,
    use_base: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> JointState {
    use rand::Rng;
    let half = cfg.prismatic_travel / 2.0;
    let slide = if use_base { rng.random_range(-half..half) } else { 0.0 };
    let mut angles = [0.0; 6];
    for (a, (lo, hi)) in angles.iter_mut().zip(cfg.joint_limits.iter()) {
        *a = rng.random_range(*lo..*hi);
    }
    JointState { slide, angles }
}

/// Monte-Carlo workspace volumes for the 6-DoF (base fixed) and 7-DoF
/// (base articulated) cases.
pub struct WorkspaceComparison {
    pub volume_6dof: f64,
    pub volume_7dof: f64,
}

pub fn workspace_comparison(cfg: &ArmConfig, n: usize, seed: u64) -> Result<WorkspaceComparison, ArmError> {
    let fixed = sample_workspace(cfg, n, false, seed);
    let full = sample_workspace(cfg, n, true, seed);
    Ok(WorkspaceComparison {
        volume_6dof: hull_volume(&fixed)?,
        volume_7dof: hull_volume(&full)?,
    })
}

/// Arm base pose in the vine frame for one working side: the base sits
/// `side_offset` from the vine plane at `mount_height`, with its y axis
/// pointing into the canopy.
pub fn base_pose(cfg: &ArmConfig, side: Side) -> RigidTransform {
    let rot = match side {
        Side::A => UnitQuaternion::identity(),
        Side::B => UnitQuaternion::from_axis_angle(&Vec3::z_axis(), std::f64::consts::PI),
    };
    RigidTransform::from_parts(
        Translation3::new(0.0, side.sign() * cfg.side_offset, cfg.mount_height),
        rot,
    )
}

/// Reachability of cut points from one side, tested against a sampled
/// workspace: a cut is reachable when some sampled tool position lies within
/// `reach_epsilon` of it and its canopy depth from the base plane is within
/// the arm's maximum reach.
pub struct Reachability {
    pub reachable: Vec<bool>,
    pub coverage: f64,
}

pub fn reachability(
    cuts: &[CutPoint],
    cfg: &ArmConfig,
    side: Side,
    workspace: &[Point3],
) -> Reachability {
    let base = base_pose(cfg, side);
    let inv = base.inverse();
    let index = GridIndex::build(workspace, cfg.reach_epsilon.max(1e-4));
    let reachable: Vec<bool> = cuts
        .iter()
        .map(|cut| {
            let local = inv * cut.position;
            if local.y.abs() > cfg.max_canopy_depth {
                return false;
            }
            index.nearest(&local).is_some_and(|(_, d)| d <= cfg.reach_epsilon)
        })
        .collect();
    let coverage = if cuts.is_empty() {
        0.0
    } else {
        reachable.iter().filter(|r| **r).count() as f64 / cuts.len() as f64
    };
    Reachability { reachable, coverage }
}

/// Visit order and open-tour length (start leg included, no return leg).
pub fn tsp_sequence(points: &[Point3], start: &Point3) -> (Vec<usize>, f64) {
    const EXHAUSTIVE_LIMIT: usize = 10;
    if points.is_empty() {
        return (Vec::new(), 0.0);
    }
    if points.len() <= EXHAUSTIVE_LIMIT {
        exhaustive_tour(points, start)
    } else {
        nearest_neighbor_tour(points, start)
    }
}

/// Optimal open tour by full permutation enumeration.
pub fn exhaustive_tour(points: &[Point3], start: &Point3) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best_order = order.clone();
    let mut best_len = tour_length(points, start, &order);
    // Heap's algorithm over all permutations.
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            let len = tour_length(points, start, &order);
            if len < best_len {
                best_len = len;
                best_order = order.clone();
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best_order, best_len)
}

/// Greedy nearest-neighbor open tour.
pub fn nearest_neighbor_tour(points: &[Point3], start: &Point3) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cursor = *start;
    let mut total = 0.0;
    for _ in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if visited[i] {
                continue;
            }
            let d = (p - cursor).norm();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, d) = best.unwrap();
        visited[i] = true;
        order.push(i);
        total += d;
        cursor = points[i];
    }
    (order, total)
}

pub fn tour_length(points: &[Point3], start: &Point3, order: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut cursor = *start;
    for &i in order {
        total += (points[i] - cursor).norm();
        cursor = points[i];
    }
    total
}

/// Approach plan: a pre-pose retreated `standoff` along the tool approach
/// axis (perpendicular to the cane segment) and the straight final segment,
/// with constant orientation throughout.
#[derive(Debug, Clone)]
pub struct ApproachPlan {
    pub pre_position: Point3,
    pub cut_position: Point3,
    /// Orientation identical at the pre-pose and the cut pose.
    pub orientation: (f64, f64, f64),
    /// Unit direction of the final segment (pre-pose -> cut).
    pub approach_axis: Vec3,
}

/// Builds the approach for a cut, retreating toward `from_hint` (typically
/// the arm base); fails when the final straight segment crosses occupied
/// space.
pub fn approach_plan(
    cut: &CutPoint,
    standoff: f64,
    from_hint: &Vec3,
    octree: &OccupancyOctree,
) -> Result<ApproachPlan, ArmError> {
    let cane_dir = direction_from_angles(cut.roll, cut.pitch, cut.yaw);
    // Component of the hint perpendicular to the cane.
    let mut axis = from_hint - cane_dir * from_hint.dot(&cane_dir);
    if axis.norm() < 1e-9 {
        axis = crate::cloud::Vec3::new(-cane_dir.y, cane_dir.x, 0.0);
        if axis.norm() < 1e-9 {
            axis = Vec3::x();
        }
    }
    let axis = axis.normalize();
    let pre = Point3::from(cut.position.coords + axis * standoff);
    if octree.segment_blocked(&pre, &cut.position) {
        return Err(ArmError::Blocked);
    }
    Ok(ApproachPlan {
        pre_position: pre,
        cut_position: cut.position,
        orientation: (cut.roll, cut.pitch, cut.yaw),
        approach_axis: -axis,
    })
}

/// Cut-force prediction F = a*d + b for diameter d in mm, with feasibility
/// against the actuator capacity through the mechanical advantage and the
/// blade-opening gate.
#[derive(Debug, Clone, Copy)]
pub struct CutForce {
    pub force_n: f64,
    pub within_capacity: bool,
    pub within_blade: bool,
}

pub fn cut_force(diameter_mm: f64, cfg: &ArmConfig) -> Result<CutForce, ArmError> {
    if diameter_mm <= 0.0 {
        return Err(ArmError::BadDiameter(diameter_mm));
    }
    let force = cfg.force_slope * diameter_mm + cfg.force_intercept;
    Ok(CutForce {
        force_n: force,
        within_capacity: force <= cfg.actuator_force * cfg.mechanical_advantage,
        within_blade: diameter_mm <= cfg.blade_opening_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> ArmConfig {
        ArmConfig::default()
    }

    #[test]
    fn home_pose_matches_hand_composition() {
        // All joints zero: the pose is the sum of the link offsets.
        let cfg = cfg();
        let pose = forward_kinematics(&cfg, &JointState { slide: 0.0, angles: [0.0; 6] });
        let mut expected = Vec3::zeros();
        for link in &cfg.links {
            expected += Vec3::new(link.offset[0], link.offset[1], link.offset[2]);
        }
        expected += Vec3::new(cfg.tool_offset[0], cfg.tool_offset[1], cfg.tool_offset[2]);
        // golden values for the default chain
        assert_relative_eq!(expected.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(expected.y, 1.025, epsilon = 1e-12);
        assert_relative_eq!(expected.z, 0.179, epsilon = 1e-12);
        assert_relative_eq!(pose.translation.vector.x, expected.x, epsilon = 1e-12);
        assert_relative_eq!(pose.translation.vector.y, expected.y, epsilon = 1e-12);
        assert_relative_eq!(pose.translation.vector.z, expected.z, epsilon = 1e-12);
        assert!(pose.rotation.angle() < 1e-12);
    }

    #[test]
    fn prismatic_linearity() {
        let cfg = cfg();
        let q0 = JointState { slide: 0.0, angles: [0.3, -1.2, 0.8, 0.5, -0.7, 1.1] };
        let q1 = JointState { slide: 0.675, ..q0 };
        let p0 = forward_kinematics(&cfg, &q0);
        let p1 = forward_kinematics(&cfg, &q1);
        let shifted = RigidTransform::translation(0.675, 0.0, 0.0) * p0;
        assert!((p1.translation.vector - shifted.translation.vector).norm() < 1e-12);
        assert!(p1.rotation.angle_to(&shifted.rotation) < 1e-12);
    }

    #[test]
    fn wrist_roll_periodicity() {
        let cfg = cfg();
        let mut q = JointState { slide: 0.1, angles: [0.2, -0.9, 0.4, 0.1, 0.6, 0.7] };
        let a = forward_kinematics(&cfg, &q);
        q.angles[5] += std::f64::consts::TAU;
        let b = forward_kinematics(&cfg, &q);
        assert!((a.translation.vector - b.translation.vector).norm() < 1e-9);
        assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
    }

    #[test]
    fn workspace_sampling_reproducible_and_within_limits() {
        let cfg = cfg();
        let a = sample_workspace(&cfg, 1, true, 9);
        let b = sample_workspace(&cfg, 1, true, 9);
        assert_eq!(a, b);

        // Spread along the slide axis grows by about the travel length.
        let fixed = sample_workspace(&cfg, 5000, false, 10);
        let full = sample_workspace(&cfg, 5000, true, 10);
        let span = |pts: &[Point3]| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in pts {
                lo = lo.min(p.x);
                hi = hi.max(p.x);
            }
            hi - lo
        };
        let extra = span(&full) - span(&fixed);
        assert!(
            (extra - cfg.prismatic_travel).abs() < 0.12,
            "slide should add about {} m of x-span, added {extra}",
            cfg.prismatic_travel
        );
    }

    #[test]
    fn tsp_collinear_in_order() {
        let pts = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(3.0, 0.0, 0.0),
        ];
        let (order, len) = tsp_sequence(&pts, &Point3::origin());
        assert_eq!(order, vec![0, 1, 2]);
        assert_relative_eq!(len, 3.0);
    }

    #[test]
    fn tsp_single_point() {
        let pts = vec![Point3::new(0.0, 2.0, 0.0)];
        let (order, len) = tsp_sequence(&pts, &Point3::origin());
        assert_eq!(order, vec![0]);
        assert_relative_eq!(len, 2.0);
    }

    #[test]
    fn exhaustive_never_worse_than_nearest_neighbor() {
        use rand::Rng;
        let mut rng = rng::derive(31, &[0x7517]);
        for _ in 0..25 {
            let pts: Vec<Point3> = (0..8)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let start = Point3::origin();
            let (_, opt) = exhaustive_tour(&pts, &start);
            let (_, nn) = nearest_neighbor_tour(&pts, &start);
            assert!(opt <= nn + 1e-12, "exhaustive {opt} > nn {nn}");
        }
    }

    #[test]
    fn approach_standoff_and_constant_orientation() {
        let cut = CutPoint {
            position: Point3::new(0.3, 0.1, 1.9),
            roll: 0.0,
            pitch: std::f64::consts::FRAC_PI_2,
            yaw: 0.0,
            cane_id: 0,
            bud_index: 4,
            diameter_mm: 8.0,
        };
        let empty = OccupancyOctree {
            resolution: 0.05,
            inflation: 0.05,
            occupied: Default::default(),
        };
        let plan = approach_plan(&cut, 0.15, &Vec3::new(0.0, -1.0, 0.0), &empty).unwrap();
        assert_relative_eq!((plan.pre_position - cut.position).norm(), 0.15, epsilon = 1e-12);
        assert_eq!(plan.orientation, (cut.roll, cut.pitch, cut.yaw));
        // approach axis perpendicular to the cane (cane along +x here)
        assert!(plan.approach_axis.dot(&Vec3::x()).abs() < 1e-9);
    }

    #[test]
    fn approach_blocked_by_trunk() {
        use crate::obstacles::{build_occupancy, Line3D};
        let trunk = Line3D {
            point: Point3::new(0.0, 0.0, 0.0),
            direction: Vec3::z(),
            t_min: 0.0,
            t_max: 2.2,
            inliers: vec![],
            inlier_rms: 0.0,
        };
        let oct = build_occupancy(&[trunk], 0.05, 0.05);
        let cut = CutPoint {
            position: Point3::new(0.0, 0.12, 1.8),
            roll: 0.0,
            pitch: std::f64::consts::FRAC_PI_2,
            yaw: 0.0,
            cane_id: 0,
            bud_index: 4,
            diameter_mm: 8.0,
        };
        // approach from behind the trunk: the segment must cross it
        let blocked = approach_plan(&cut, 0.3, &Vec3::new(0.0, -1.0, 0.0), &oct);
        assert!(matches!(blocked, Err(ArmError::Blocked)));
    }

    #[test]
    fn cut_force_anchors() {
        let cfg = cfg();
        let f8 = cut_force(8.0, &cfg).unwrap();
        assert_relative_eq!(f8.force_n, 320.0);
        assert!(f8.within_capacity && f8.within_blade);

        let tiny = cut_force(0.001, &cfg).unwrap();
        assert_relative_eq!(tiny.force_n, cfg.force_intercept, epsilon = 0.05);

        let wide = cut_force(40.0, &cfg).unwrap();
        assert!(!wide.within_blade);

        assert!(matches!(cut_force(0.0, &cfg), Err(ArmError::BadDiameter(_))));
    }
}
