//! Procedural generator of dormant, pre-pruned grapevines with full ground
//! truth, plus the virtual dual-stereo scanner that produces the fourteen
//! per-vine views (seven slider stations, top and bottom cameras).
//!
//! Vine frame: origin at the trunk base, x along the row, y across the row,
//! z up. Each rendered view lives in its own camera frame (z forward, x
//! right, y down) with `true_pose` mapping it back into the vine frame.

use nalgebra::{Rotation3, Translation3, Unit, UnitQuaternion};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::budmap::{CameraModel, Detection2D};
use crate::cloud::{Label, LabeledCloud, Point3, Vec3};
use crate::config::ScenarioConfig;
use crate::cutgraph::CutInterval;
use crate::par;
use crate::register::RigidTransform;
use crate::rng;

const TAG_VINE: u64 = 0x56;
const TAG_PREPRUNE: u64 = 0x50;
const TAG_SCAN: u64 = 0x53;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("pre-prune fractions must sum to 1, got {0}")]
    BadFractions(f64),
}

/// One cane: a smooth polyline rooted on the cordon with ordered buds.
#[derive(Debug, Clone)]
pub struct Cane {
    /// Dense polyline from the cordon root outward.
    pub polyline: Vec<Point3>,
    /// Bud positions ordered from the cordon outward (monotone arc length).
    pub buds: Vec<Point3>,
    pub diameter_mm: f64,
    /// Which side of the row plane the cane leans to (+1 or -1 in y).
    pub lean: f64,
}

/// Ground-truth vine skeleton.
#[derive(Debug, Clone)]
pub struct VineTruth {
    pub vine_id: u32,
    pub trunk: Vec<Point3>,
    pub cordon: Vec<Point3>,
    pub canes: Vec<Cane>,
}

impl VineTruth {
    pub fn total_buds(&self) -> usize {
        self.canes.iter().map(|c| c.buds.len()).sum()
    }

    pub fn buds_per_cane(&self) -> Vec<usize> {
        self.canes.iter().map(|c| c.buds.len()).collect()
    }

    /// Valid cut intervals (bud n to bud n+1) of every prunable cane.
    pub fn cut_intervals(&self, rule_buds: usize) -> Vec<CutInterval> {
        self.canes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.buds.len() > rule_buds)
            .map(|(i, c)| CutInterval {
                start: c.buds[rule_buds - 1],
                end: c.buds[rule_buds],
                cane_id: i as u32,
            })
            .collect()
    }
}

/// Which side of the row the scanner rig and arm work from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    /// Sign of the y half-space the rig occupies.
    pub fn sign(&self) -> f64 {
        match self {
            Side::A => -1.0,
            Side::B => 1.0,
        }
    }

    pub fn tag(&self) -> u64 {
        match self {
            Side::A => 0,
            Side::B => 1,
        }
    }
}

/// One rendered camera view.
#[derive(Debug, Clone)]
pub struct CameraView {
    /// station * 2 for the bottom camera, station * 2 + 1 for the top.
    pub view_id: u32,
    /// Points in the camera frame; labels carried from the skeleton.
    pub cloud: LabeledCloud,
    pub true_pose: RigidTransform,
    pub prior_pose: RigidTransform,
    pub camera: CameraModel,
    pub gt_detections: Vec<Detection2D>,
}

/// The fourteen per-vine views of one scan pass.
#[derive(Debug, Clone)]
pub struct ScanSet {
    pub vine_id: u32,
    pub side: Side,
    pub views: Vec<CameraView>,
}

impl ScanSet {
    pub fn bottom_views(&self) -> Vec<&CameraView> {
        self.views.iter().filter(|v| v.view_id % 2 == 0).collect()
    }

    pub fn top_views(&self) -> Vec<&CameraView> {
        self.views.iter().filter(|v| v.view_id % 2 == 1).collect()
    }
}

/// Deterministic vine for (config.rng_seed, vine_id). Cane count is a
/// Poisson draw around the configured mean; buds start generous and are cut
/// back by [`apply_pre_prune`].
pub fn generate_vine(config: &ScenarioConfig, vine_id: u32) -> VineTruth {
    let g = &config.geometry;
    let mut rng = rng::derive(config.rng_seed, &[TAG_VINE, vine_id as u64]);

    // Trunk: near-vertical polyline to the cordon wire.
    let sway: f64 = rng.random_range(-0.01..0.01);
    let trunk: Vec<Point3> = (0..=20)
        .map(|i| {
            let t = i as f64 / 20.0;
            Point3::new(sway * (t * std::f64::consts::PI).sin(), 0.0, t * g.cordon_height)
        })
        .collect();

    // Bilateral cordon along x at cordon height, slightly wavy in z.
    let cordon: Vec<Point3> = (0..=40)
        .map(|i| {
            let t = i as f64 / 40.0;
            let x = (t - 0.5) * 2.0 * g.cordon_arm_len;
            let wob = 0.01 * (3.0 * std::f64::consts::PI * t).sin();
            Point3::new(x, 0.0, g.cordon_height + wob)
        })
        .collect();

    let cane_count = Poisson::new(g.mean_canes).unwrap().sample(&mut rng).round() as usize;
    let mut canes = Vec::with_capacity(cane_count);
    for c in 0..cane_count {
        canes.push(grow_cane(config, &mut rng, c, cane_count));
    }
    VineTruth { vine_id, trunk, cordon, canes }
}

fn grow_cane(
    config: &ScenarioConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    index: usize,
    total: usize,
) -> Cane {
    let g = &config.geometry;
    // Root spread evenly along the cordon with jitter, skipping the trunk slot.
    let span = 2.0 * g.cordon_arm_len;
    let base = (index as f64 + 0.5) / total.max(1) as f64;
    let mut root_x = (base - 0.5) * span + rng.random_range(-0.04..0.04);
    if root_x.abs() < 0.08 {
        root_x = 0.08f64.copysign(if root_x == 0.0 { 1.0 } else { root_x });
    }
    let root = Point3::new(root_x, 0.0, g.cordon_height);

    let lean: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let lateral = rng.random_range(0.3..1.0) * g.cane_lateral_spread * lean;
    let raw_buds = rng.random_range(g.raw_buds_per_cane.0..=g.raw_buds_per_cane.1);
    let spacing = g.inter_bud_spacing;
    let length = (raw_buds as f64 + 0.7) * spacing;

    // Control polygon: a direction random walk, mostly upward, leaning to one
    // side; Catmull-Rom through it gives the smooth centerline.
    let n_ctrl = 6;
    let mut dir = Vec3::new(
        rng.random_range(-0.25..0.25),
        lateral / length,
        1.0,
    )
    .normalize();
    let mut ctrl = vec![root];
    let step = length / (n_ctrl - 1) as f64;
    let mut pos = root;
    for _ in 1..n_ctrl {
        pos += dir * step;
        ctrl.push(pos);
        let turn = Rotation3::from_euler_angles(
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.35..0.35),
            0.0,
        );
        dir = (turn * dir).normalize();
        // keep canes heading mostly up
        if dir.z < 0.35 {
            dir.z = 0.35;
            dir = dir.normalize();
        }
    }
    let polyline = catmull_rom(&ctrl, 8);

    // Buds along arc length, first one half a spacing past the root.
    let arcs = cumulative_arcs(&polyline);
    let total_len = *arcs.last().unwrap();
    let mut buds = Vec::new();
    let mut s = spacing * 0.5;
    for _ in 0..raw_buds {
        s += spacing * rng.random_range(-g.bud_spacing_jitter..g.bud_spacing_jitter);
        if s > total_len {
            break;
        }
        buds.push(point_at_arc(&polyline, &arcs, s));
        s += spacing;
    }

    let diameter_mm = rng.random_range(g.cane_diameter_mm.0..g.cane_diameter_mm.1);
    Cane { polyline, buds, diameter_mm, lean }
}

fn catmull_rom(ctrl: &[Point3], per_segment: usize) -> Vec<Point3> {
    if ctrl.len() < 2 {
        return ctrl.to_vec();
    }
    let n = ctrl.len();
    let get = |i: isize| -> Vec3 {
        let i = i.clamp(0, n as isize - 1) as usize;
        ctrl[i].coords
    };
    let mut out = Vec::new();
    for seg in 0..n - 1 {
        let p0 = get(seg as isize - 1);
        let p1 = get(seg as isize);
        let p2 = get(seg as isize + 1);
        let p3 = get(seg as isize + 2);
        for k in 0..per_segment {
            let t = k as f64 / per_segment as f64;
            let t2 = t * t;
            let t3 = t2 * t;
            let v = 0.5
                * ((2.0 * p1)
                    + (p2 - p0) * t
                    + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
                    + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t3);
            out.push(Point3::from(v));
        }
    }
    out.push(ctrl[n - 1]);
    out
}

fn cumulative_arcs(poly: &[Point3]) -> Vec<f64> {
    let mut arcs = Vec::with_capacity(poly.len());
    let mut s = 0.0;
    arcs.push(0.0);
    for w in poly.windows(2) {
        s += (w[1] - w[0]).norm();
        arcs.push(s);
    }
    arcs
}

fn point_at_arc(poly: &[Point3], arcs: &[f64], s: f64) -> Point3 {
    let s = s.clamp(0.0, *arcs.last().unwrap());
    let i = arcs.partition_point(|&a| a < s).min(poly.len() - 1).max(1);
    let (a0, a1) = (arcs[i - 1], arcs[i]);
    let t = if a1 > a0 { (s - a0) / (a1 - a0) } else { 0.0 };
    Point3::from(poly[i - 1].coords + (poly[i].coords - poly[i - 1].coords) * t)
}

fn arc_prefix(poly: &[Point3], arcs: &[f64], s: f64) -> Vec<Point3> {
    let mut out: Vec<Point3> =
        poly.iter().zip(arcs).take_while(|(_, &a)| a <= s).map(|(p, _)| *p).collect();
    if out.len() < poly.len() {
        out.push(point_at_arc(poly, arcs, s));
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BudCategory {
    Exact,
    More,
    Fewer,
}

/// Truncates one vine's canes so the buds-per-cane population follows the
/// configured category fractions. Per-vine largest-remainder apportionment;
/// use [`apply_pre_prune_batch`] on a whole scenario for exact global splits.
pub fn apply_pre_prune(vine: &VineTruth, config: &ScenarioConfig) -> Result<VineTruth, SynthError> {
    let mut vines = vec![vine.clone()];
    apply_pre_prune_batch(&mut vines, config)?;
    Ok(vines.pop().unwrap())
}

/// Pre-prunes a whole scenario with a global running apportionment, so the
/// realized category counts track the configured fractions within one cane
/// per category.
pub fn apply_pre_prune_batch(
    vines: &mut [VineTruth],
    config: &ScenarioConfig,
) -> Result<(), SynthError> {
    let f = config.pre_prune.fractions;
    let sum = f.0 + f.1 + f.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadFractions(sum));
    }
    let n = config.pre_prune.rule_buds;
    let (lo, hi) = config.pre_prune.bud_range;
    let fractions = [f.0, f.1, f.2];
    let cats = [BudCategory::Exact, BudCategory::More, BudCategory::Fewer];

    // Greedy max-deficit assignment: after m canes the realized counts never
    // drift more than one cane from m * fraction.
    let mut assigned = [0usize; 3];
    let mut processed = 0usize;
    for vine in vines.iter_mut() {
        let mut rng = rng::derive(config.rng_seed, &[TAG_PREPRUNE, vine.vine_id as u64]);
        let mut vine_cats = Vec::with_capacity(vine.canes.len());
        for _ in 0..vine.canes.len() {
            processed += 1;
            let mut best = 0;
            let mut best_deficit = f64::NEG_INFINITY;
            for k in 0..3 {
                let deficit = fractions[k] * processed as f64 - assigned[k] as f64;
                if deficit > best_deficit {
                    best_deficit = deficit;
                    best = k;
                }
            }
            assigned[best] += 1;
            vine_cats.push(cats[best]);
        }
        // Decorrelate category from cane position within the vine.
        for i in (1..vine_cats.len()).rev() {
            let j = rng.random_range(0..=i);
            vine_cats.swap(i, j);
        }
        for (cane, cat) in vine.canes.iter_mut().zip(&vine_cats) {
            let target = match cat {
                BudCategory::Exact => n,
                BudCategory::More => draw_more(&mut rng, n, hi),
                BudCategory::Fewer => rng.random_range(lo..n.max(lo + 1)),
            };
            truncate_cane(cane, target, config.geometry.inter_bud_spacing);
        }
    }
    Ok(())
}

// Geometric tail above n+1: matches the field's concentration of "more than
// n" canes near the rule count while still reaching the configured maximum.
fn draw_more(rng: &mut rand_chacha::ChaCha8Rng, n: usize, hi: usize) -> usize {
    let mut c = n + 1;
    while c < hi && rng.random_bool(0.55) {
        c += 1;
    }
    c
}

fn truncate_cane(cane: &mut Cane, target: usize, spacing: f64) {
    let target = target.min(cane.buds.len()).max(0);
    cane.buds.truncate(target);
    let arcs = cumulative_arcs(&cane.polyline);
    let cut_arc = if let Some(last) = cane.buds.last() {
        // keep a short stub past the final bud
        let last_arc = nearest_arc(&cane.polyline, &arcs, last);
        last_arc + spacing * 0.45
    } else {
        spacing * 0.4
    };
    cane.polyline = arc_prefix(&cane.polyline, &arcs, cut_arc.min(*arcs.last().unwrap()));
}

fn nearest_arc(poly: &[Point3], arcs: &[f64], p: &Point3) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for (q, &a) in poly.iter().zip(arcs) {
        let d = (q - p).norm_squared();
        if d < best.0 {
            best = (d, a);
        }
    }
    best.1
}

/// Renders the fourteen views of one vine from one side of the row.
///
/// Surface points are sampled on cylinders swept along the skeleton, buds as
/// dense blobs at the bud positions. Each view applies an angular z-buffer
/// occlusion test, frustum clipping, per-point Gaussian depth noise along the
/// ray, and produces pinhole-projected ground-truth bud boxes. Prior poses
/// compose the true poses with the configured slider perturbation.
pub fn render_scan(vine: &VineTruth, config: &ScenarioConfig, side: Side) -> ScanSet {
    let scene = sample_scene(vine, config);
    let sc = &config.scanner;
    let stations = sc.stations;
    let views = par::map_range(stations * 2, |i| {
        let station = i / 2;
        let top = i % 2 == 1;
        let view_id = (station * 2 + if top { 1 } else { 0 }) as u32;
        let pose = camera_pose(config, station, top, side);
        render_view(vine, config, &scene, view_id, &pose, side)
    });
    ScanSet { vine_id: vine.vine_id, side, views }
}

struct ScenePoint {
    p: Point3,
    label: Label,
    bud_id: Option<u32>,
}

fn sample_scene(vine: &VineTruth, config: &ScenarioConfig) -> Vec<ScenePoint> {
    let g = &config.geometry;
    let spacing = config.scanner.point_spacing;
    let mut out = Vec::new();
    sample_tube(&vine.trunk, g.trunk_radius, spacing, Label::Trunk, &mut out);
    sample_tube(&vine.cordon, g.cordon_radius, spacing, Label::Cordon, &mut out);
    for cane in &vine.canes {
        sample_tube(&cane.polyline, g.cane_radius, spacing, Label::Cane, &mut out);
    }
    for (ci, cane) in vine.canes.iter().enumerate() {
        for (bi, bud) in cane.buds.iter().enumerate() {
            let id = bud_id(ci, bi);
            sample_bud_blob(bud, &mut out, id);
        }
    }
    out
}

pub fn bud_id(cane: usize, bud: usize) -> u32 {
    (cane as u32) << 12 | bud as u32
}

fn sample_tube(poly: &[Point3], radius: f64, spacing: f64, label: Label, out: &mut Vec<ScenePoint>) {
    if poly.len() < 2 {
        return;
    }
    let arcs = cumulative_arcs(poly);
    let total = *arcs.last().unwrap();
    let rings = (total / spacing).ceil().max(1.0) as usize;
    let circ = ((2.0 * std::f64::consts::PI * radius / spacing).ceil() as usize).max(4);
    for ring in 0..=rings {
        let s = total * ring as f64 / rings as f64;
        let c = point_at_arc(poly, &arcs, s);
        let i = arcs.partition_point(|&a| a < s).min(poly.len() - 1).max(1);
        let axis = (poly[i] - poly[i - 1]).normalize();
        let u = perpendicular(&axis);
        let v = axis.cross(&u);
        for k in 0..circ {
            // stagger alternate rings so the lattice has no seams
            let a = std::f64::consts::TAU * (k as f64 + 0.5 * (ring % 2) as f64) / circ as f64;
            out.push(ScenePoint {
                p: Point3::from(c.coords + radius * (a.cos() * u + a.sin() * v)),
                label,
                bud_id: None,
            });
        }
    }
}

fn perpendicular(axis: &Vec3) -> Vec3 {
    let candidate = if axis.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    axis.cross(&candidate).normalize()
}

// Buds render as tight blobs so the median in-box depth sits at the bud
// center; the detection box size comes from the nominal bud radius instead.
const BUD_BLOB_RADIUS: f64 = 0.0008;
const BUD_BLOB_POINTS: usize = 60;

fn sample_bud_blob(center: &Point3, out: &mut Vec<ScenePoint>, id: u32) {
    // Fibonacci sphere: even coverage, deterministic.
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for k in 0..BUD_BLOB_POINTS {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / BUD_BLOB_POINTS as f64;
        let r = (1.0 - z * z).sqrt();
        let a = golden * k as f64;
        let dir = Vec3::new(r * a.cos(), r * a.sin(), z);
        out.push(ScenePoint {
            p: Point3::from(center.coords + BUD_BLOB_RADIUS * dir),
            label: Label::Bud,
            bud_id: Some(id),
        });
    }
}

/// True camera pose (camera frame -> vine frame) for a slider station.
pub fn camera_pose(config: &ScenarioConfig, station: usize, top: bool, side: Side) -> RigidTransform {
    let sc = &config.scanner;
    let x = (station as f64 - (sc.stations as f64 - 1.0) / 2.0) * sc.slider_step;
    let y = side.sign() * sc.cam_standoff;
    let z = if top { sc.top_cam_height } else { sc.bottom_cam_height };
    let pos = Point3::new(x, y, z);
    let target = if top {
        Point3::new(x, 0.0, config.geometry.cordon_height)
    } else {
        Point3::new(x, 0.0, z)
    };
    look_at(&pos, &target)
}

/// Camera-to-world transform with z forward, x right, y down.
fn look_at(pos: &Point3, target: &Point3) -> RigidTransform {
    let forward = (target - pos).normalize();
    let up = Vec3::z();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rot = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    RigidTransform::from_parts(
        Translation3::from(pos.coords),
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot)),
    )
}

fn render_view(
    vine: &VineTruth,
    config: &ScenarioConfig,
    scene: &[ScenePoint],
    view_id: u32,
    pose: &RigidTransform,
    side: Side,
) -> CameraView {
    let sc = &config.scanner;
    let inv = pose.inverse();
    let cam_pts: Vec<(Point3, Label, Option<u32>)> =
        scene.iter().map(|s| (inv * s.p, s.label, s.bud_id)).collect();

    // Angular z-buffer at the configured resolution: nearest range per bin.
    let mut zbuf: std::collections::HashMap<(i32, i32), f64> = std::collections::HashMap::new();
    let bin = |p: &Point3| -> (i32, i32) {
        (
            ((p.x / p.z).atan() / sc.zbuffer_res).floor() as i32,
            ((p.y / p.z).atan() / sc.zbuffer_res).floor() as i32,
        )
    };
    let in_frustum = |p: &Point3| -> bool {
        if p.z < 0.05 {
            return false;
        }
        let u = sc.fx * p.x / p.z + sc.cx;
        let v = sc.fy * p.y / p.z + sc.cy;
        u >= 0.0 && u < sc.image_width as f64 && v >= 0.0 && v < sc.image_height as f64
    };
    for (p, _, _) in &cam_pts {
        if in_frustum(p) {
            let key = bin(p);
            let r = p.coords.norm();
            zbuf.entry(key).and_modify(|m| *m = m.min(r)).or_insert(r);
        }
    }

    let mut noise_rng = rng::derive(
        config.rng_seed,
        &[TAG_SCAN, vine.vine_id as u64, view_id as u64, side.tag()],
    );
    let depth_noise = Normal::new(0.0, sc.depth_sigma.max(1e-300)).unwrap();

    let mut cloud = LabeledCloud::new(format!("view-{view_id}"));
    cloud.labels = Some(Vec::new());
    cloud.sensor_origin = Point3::origin();
    let mut visible_per_bud: std::collections::HashMap<u32, usize> =
        std::collections::HashMap::new();
    for (p, label, bud) in &cam_pts {
        if !in_frustum(p) {
            continue;
        }
        let r = p.coords.norm();
        let front = zbuf[&bin(p)];
        if r > front + sc.zbuffer_slack {
            continue;
        }
        if let Some(id) = bud {
            *visible_per_bud.entry(*id).or_insert(0) += 1;
        }
        let noisy = if sc.depth_sigma > 0.0 {
            let dir = p.coords / r;
            Point3::from(p.coords + dir * depth_noise.sample(&mut noise_rng))
        } else {
            *p
        };
        cloud.points.push(noisy);
        cloud.labels.as_mut().unwrap().push(*label);
    }

    // Ground-truth boxes for buds with enough surviving blob points.
    let mut gt_detections = Vec::new();
    for (ci, cane) in vine.canes.iter().enumerate() {
        for (bi, bud) in cane.buds.iter().enumerate() {
            let id = bud_id(ci, bi);
            if visible_per_bud.get(&id).copied().unwrap_or(0) < BUD_BLOB_POINTS / 4 {
                continue;
            }
            let c = inv * bud;
            let u = sc.fx * c.x / c.z + sc.cx;
            let v = sc.fy * c.y / c.z + sc.cy;
            let w = 2.0 * config.geometry.bud_radius * sc.fx / c.z;
            let h = 2.0 * config.geometry.bud_radius * sc.fy / c.z;
            gt_detections.push(Detection2D {
                view_id,
                u,
                v,
                w,
                h,
                score: 1.0,
                bud_id: Some(id),
            });
        }
    }

    // Slider prior: the true pose with a small seeded perturbation.
    let mut prior_rng = rng::derive(
        config.rng_seed,
        &[TAG_SCAN, vine.vine_id as u64, view_id as u64, side.tag(), 0x707],
    );
    let tn = Normal::new(0.0, sc.prior_sigma_t.max(1e-300)).unwrap();
    let dt = Vec3::new(
        tn.sample(&mut prior_rng),
        tn.sample(&mut prior_rng),
        tn.sample(&mut prior_rng),
    );
    let dr = if sc.prior_sigma_r > 0.0 {
        let rn = Normal::new(0.0, sc.prior_sigma_r).unwrap();
        let axis = Vec3::new(
            prior_rng.random_range(-1.0..1.0),
            prior_rng.random_range(-1.0..1.0),
            prior_rng.random_range(-1.0..1.0),
        );
        let axis = Unit::new_normalize(if axis.norm() < 1e-9 { Vec3::x() } else { axis });
        UnitQuaternion::from_axis_angle(&axis, rn.sample(&mut prior_rng))
    } else {
        UnitQuaternion::identity()
    };
    let perturb = RigidTransform::from_parts(
        Translation3::from(if sc.prior_sigma_t > 0.0 { dt } else { Vec3::zeros() }),
        dr,
    );
    let prior_pose = pose * perturb;

    let camera = CameraModel {
        fx: sc.fx,
        fy: sc.fy,
        cx: sc.cx,
        cy: sc.cy,
        width: sc.image_width,
        height: sc.image_height,
        pose: *pose,
    };
    CameraView { view_id, cloud, true_pose: *pose, prior_pose, camera, gt_detections }
}

/// Full labeled scene cloud in the vine frame (no occlusion, no noise); the
/// reference model for segmentation and completeness oracles.
pub fn reference_cloud(vine: &VineTruth, config: &ScenarioConfig) -> LabeledCloud {
    let scene = sample_scene(vine, config);
    let mut cloud = LabeledCloud::new("vine");
    cloud.labels = Some(Vec::new());
    for s in scene {
        cloud.points.push(s.p);
        cloud.labels.as_mut().unwrap().push(s.label);
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    #[test]
    fn generate_is_deterministic() {
        let cfg = config();
        let a = generate_vine(&cfg, 3);
        let b = generate_vine(&cfg, 3);
        assert_eq!(a.canes.len(), b.canes.len());
        for (ca, cb) in a.canes.iter().zip(&b.canes) {
            assert_eq!(ca.buds, cb.buds);
            assert_eq!(ca.polyline, cb.polyline);
        }
    }

    #[test]
    fn zero_cane_config_keeps_trunk_and_cordon() {
        let mut cfg = config();
        cfg.geometry.mean_canes = 1e-9;
        let vine = generate_vine(&cfg, 0);
        assert!(vine.canes.is_empty());
        assert!(!vine.trunk.is_empty());
        assert!(!vine.cordon.is_empty());
    }

    #[test]
    fn cane_total_close_to_mean_times_vines() {
        let cfg = config();
        let total: usize = (0..20).map(|i| generate_vine(&cfg, i).canes.len()).sum();
        let expected = 20.0 * cfg.geometry.mean_canes;
        let sigma = expected.sqrt();
        assert!(
            (total as f64 - expected).abs() <= 3.0 * sigma,
            "total {total} vs {expected} +- {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn canes_root_on_cordon_and_buds_monotone() {
        let cfg = config();
        let vine = generate_vine(&cfg, 1);
        for cane in &vine.canes {
            assert!((cane.polyline[0].z - cfg.geometry.cordon_height).abs() < 0.02);
            let arcs = cumulative_arcs(&cane.polyline);
            let mut last = -1.0;
            for bud in &cane.buds {
                let a = nearest_arc(&cane.polyline, &arcs, bud);
                assert!(a > last, "bud arcs must increase");
                last = a;
            }
        }
    }

    #[test]
    fn preprune_all_more_gives_at_least_five_buds() {
        let mut cfg = config();
        cfg.pre_prune.fractions = (0.0, 1.0, 0.0);
        let vine = generate_vine(&cfg, 2);
        let pruned = apply_pre_prune(&vine, &cfg).unwrap();
        for cane in &pruned.canes {
            assert!(cane.buds.len() >= 5, "got {}", cane.buds.len());
        }
    }

    #[test]
    fn preprune_forced_fewer_single_cane() {
        let mut cfg = config();
        cfg.pre_prune.fractions = (0.0, 0.0, 1.0);
        cfg.geometry.mean_canes = 1.0;
        let mut vine = generate_vine(&cfg, 7);
        while vine.canes.len() != 1 {
            // any single-cane draw works; walk ids deterministically
            cfg.rng_seed += 1;
            vine = generate_vine(&cfg, 7);
        }
        let pruned = apply_pre_prune(&vine, &cfg).unwrap();
        assert!(pruned.canes[0].buds.len() <= 3);
    }

    #[test]
    fn preprune_rejects_bad_fractions() {
        let mut cfg = config();
        cfg.pre_prune.fractions = (0.5, 0.2, 0.2);
        let vine = generate_vine(&cfg, 0);
        assert!(apply_pre_prune(&vine, &cfg).is_err());
    }

    #[test]
    fn preprune_batch_tracks_fractions() {
        let cfg = config();
        let mut vines: Vec<VineTruth> = (0..20).map(|i| generate_vine(&cfg, i)).collect();
        apply_pre_prune_batch(&mut vines, &cfg).unwrap();
        let n = cfg.pre_prune.rule_buds;
        let total: usize = vines.iter().map(|v| v.canes.len()).sum();
        let exact: usize = vines
            .iter()
            .flat_map(|v| &v.canes)
            .filter(|c| c.buds.len() == n)
            .count();
        let more: usize = vines
            .iter()
            .flat_map(|v| &v.canes)
            .filter(|c| c.buds.len() > n)
            .count();
        let fewer = total - exact - more;
        let targets = [0.25 * total as f64, 0.35 * total as f64, 0.40 * total as f64];
        for (got, want) in [exact, more, fewer].iter().zip(targets) {
            assert!(
                (*got as f64 - want).abs() <= 3.0,
                "category {got} vs target {want:.1} (total {total})"
            );
        }
    }

    #[test]
    fn bud_totals_consistent_after_preprune() {
        let cfg = config();
        let vine = generate_vine(&cfg, 4);
        let before: usize = vine.canes.iter().map(|c| c.buds.len()).sum();
        assert_eq!(before, vine.total_buds());
        let pruned = apply_pre_prune(&vine, &cfg).unwrap();
        let after: usize = pruned.canes.iter().map(|c| c.buds.len()).sum();
        assert_eq!(after, pruned.total_buds());
        assert!(after <= before);
    }

    #[test]
    fn scan_is_deterministic_and_has_fourteen_views() {
        let cfg = config();
        let mut vine = generate_vine(&cfg, 0);
        vine = apply_pre_prune(&vine, &cfg).unwrap();
        let a = render_scan(&vine, &cfg, Side::A);
        let b = render_scan(&vine, &cfg, Side::A);
        assert_eq!(a.views.len(), 14);
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.cloud.points, vb.cloud.points);
            assert_eq!(va.gt_detections.len(), vb.gt_detections.len());
        }
    }

    #[test]
    fn zero_noise_points_lie_on_surfaces() {
        let mut cfg = config();
        cfg.scanner.depth_sigma = 0.0;
        cfg.scanner.prior_sigma_t = 0.0;
        let vine = generate_vine(&cfg, 5);
        let scan = render_scan(&vine, &cfg, Side::A);
        let view = &scan.views[6];
        // every point, mapped to the vine frame, is on some skeleton tube
        let g = &cfg.geometry;
        for (i, p) in view.cloud.points.iter().enumerate().step_by(37) {
            let world = view.true_pose * p;
            let label = view.cloud.labels.as_ref().unwrap()[i];
            let d = match label {
                Label::Trunk => dist_to_polyline(&vine.trunk, &world) - g.trunk_radius,
                Label::Cordon => dist_to_polyline(&vine.cordon, &world) - g.cordon_radius,
                Label::Cane => vine
                    .canes
                    .iter()
                    .map(|c| dist_to_polyline(&c.polyline, &world))
                    .fold(f64::INFINITY, f64::min)
                    - g.cane_radius,
                Label::Bud => {
                    vine.canes
                        .iter()
                        .flat_map(|c| &c.buds)
                        .map(|b| (b - world).norm())
                        .fold(f64::INFINITY, f64::min)
                        - BUD_BLOB_RADIUS
                }
                Label::Other => 0.0,
            };
            assert!(d.abs() < 2e-3, "point {i} off its surface by {d}");
        }
        assert_eq!(view.prior_pose, view.true_pose);
    }

    fn dist_to_polyline(poly: &[Point3], p: &Point3) -> f64 {
        let mut best = f64::INFINITY;
        for w in poly.windows(2) {
            let ab = w[1] - w[0];
            let t = ((p - w[0]).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            best = best.min((p - (w[0] + ab * t)).norm());
        }
        best
    }

    #[test]
    fn occluded_bud_missing_from_front_visible_from_top() {
        // Hand-built scene: a bud hidden directly behind the trunk at cordon
        // height for the straight-on bottom view; the tilted top view sees it.
        let cfg = config();
        let trunk: Vec<Point3> =
            (0..=20).map(|i| Point3::new(0.0, 0.0, i as f64 * 0.1)).collect();
        let bud = Point3::new(0.0, cfg.geometry.trunk_radius + 0.02, 1.45);
        let vine = VineTruth {
            vine_id: 0,
            trunk,
            cordon: vec![],
            canes: vec![Cane {
                polyline: vec![bud, Point3::new(0.0, cfg.geometry.trunk_radius + 0.02, 1.55)],
                buds: vec![bud],
                diameter_mm: 8.0,
                lean: 1.0,
            }],
        };
        let scan = render_scan(&vine, &cfg, Side::A);
        // station 3 is dead center: bottom view 6, top view 7
        let bottom = scan.views.iter().find(|v| v.view_id == 6).unwrap();
        let top = scan.views.iter().find(|v| v.view_id == 7).unwrap();
        assert!(
            bottom.gt_detections.iter().all(|d| d.bud_id != Some(bud_id(0, 0))),
            "bud behind the trunk must be occluded in the straight-on view"
        );
        assert!(
            top.gt_detections.iter().any(|d| d.bud_id == Some(bud_id(0, 0))),
            "tilted top view must see over the trunk"
        );
    }

    #[test]
    fn gt_boxes_backproject_onto_buds() {
        let mut cfg = config();
        cfg.scanner.depth_sigma = 0.0;
        let mut vine = generate_vine(&cfg, 6);
        vine = apply_pre_prune(&vine, &cfg).unwrap();
        let scan = render_scan(&vine, &cfg, Side::A);
        for view in &scan.views {
            for det in &view.gt_detections {
                let id = det.bud_id.unwrap();
                let (ci, bi) = ((id >> 12) as usize, (id & 0xfff) as usize);
                let gt = vine.canes[ci].buds[bi];
                let cam = view.true_pose.inverse() * gt;
                let back = Point3::new(
                    (det.u - cfg.scanner.cx) / cfg.scanner.fx * cam.z,
                    (det.v - cfg.scanner.cy) / cfg.scanner.fy * cam.z,
                    cam.z,
                );
                let world = view.true_pose * back;
                assert!((world - gt).norm() < 1e-3);
            }
        }
    }
}
