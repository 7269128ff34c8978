//! Bud-seeded region growing over the vine cloud: local SVD shape features
//! classified by a small linear SVM into cane vs. intersection regions, with
//! growth stepping along the dominant singular vector from each bud seed in
//! both directions until an intersection region or loss of support stops it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{shape_from_points, LocalShape, Point3};
use crate::config::SegmentationConfig;
use crate::grid::GridIndex;
use crate::obstacles::Line3D;
use crate::rng;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("SVM training needs both classes, got a single class")]
    SingleClass,
    #[error("training sample parse error at line {line}: {reason}")]
    BadSample { line: usize, reason: String },
}

/// Region class of a local neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    Cane,
    Intersection,
}

/// Linear maximum-margin classifier over L2-normalized singular values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: [f64; 3],
    pub bias: f64,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_size: usize,
    pub test_size: usize,
    pub test_accuracy: f64,
    pub test_f1: f64,
    /// Geometric margin of the held-out set (min over samples).
    pub min_margin: f64,
}

impl SvmModel {
    pub fn decision(&self, features: &[f64; 3]) -> f64 {
        self.weights[0] * features[0]
            + self.weights[1] * features[1]
            + self.weights[2] * features[2]
            + self.bias
    }
}

/// One labeled training sample: a singular-value triple and its class.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub values: [f64; 3],
    pub class: RegionClass,
}

fn normalize(values: &[f64; 3]) -> [f64; 3] {
    let n = (values[0] * values[0] + values[1] * values[1] + values[2] * values[2]).sqrt();
    if n == 0.0 {
        [0.0; 3]
    } else {
        [values[0] / n, values[1] / n, values[2] / n]
    }
}

/// Trains the linear SVM on a seeded split (default 70/30) by full-batch
/// Pegasos subgradient descent on the hinge loss; deterministic per seed.
pub fn train_svm(
    samples: &[TrainSample],
    cfg: &SegmentationConfig,
    seed: u64,
) -> Result<SvmModel, SegmentError> {
    let canes = samples.iter().filter(|s| s.class == RegionClass::Cane).count();
    if canes == 0 || canes == samples.len() {
        return Err(SegmentError::SingleClass);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut split_rng = rng::derive(seed, &[0x5F17]);
    for i in (1..order.len()).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((samples.len() as f64) * cfg.train_split).round() as usize;
    let n_train = n_train.clamp(2, samples.len().saturating_sub(1).max(2));
    let (train_idx, test_idx) = order.split_at(n_train.min(order.len()));

    let feats: Vec<([f64; 3], f64)> = samples
        .iter()
        .map(|s| {
            (normalize(&s.values), if s.class == RegionClass::Cane { 1.0 } else { -1.0 })
        })
        .collect();

    // Full-batch Pegasos: w <- (1 - eta lambda) w + eta * mean(y x | margin violated).
    let mut w = [0.0f64; 3];
    let mut b = 0.0f64;
    let lambda = cfg.svm_lambda;
    for epoch in 1..=cfg.svm_epochs {
        let eta = 1.0 / (lambda * epoch as f64);
        let mut gw = [0.0; 3];
        let mut gb = 0.0;
        let mut violations = 0.0;
        for &i in train_idx {
            let (x, y) = feats[i];
            let m = y * (w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b);
            if m < 1.0 {
                violations += 1.0;
                for k in 0..3 {
                    gw[k] += y * x[k];
                }
                gb += y;
            }
        }
        let inv = 1.0 / train_idx.len() as f64;
        for k in 0..3 {
            w[k] = (1.0 - eta * lambda) * w[k] + eta * gw[k] * inv;
        }
        b += eta * gb * inv;
        if violations == 0.0 {
            break;
        }
    }

    let mut report = TrainReport {
        train_size: train_idx.len(),
        test_size: test_idx.len(),
        ..Default::default()
    };
    let (mut tp, mut fp, mut fnn, mut correct) = (0usize, 0usize, 0usize, 0usize);
    let mut min_margin = f64::INFINITY;
    let wn = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt().max(1e-12);
    for &i in test_idx {
        let (x, y) = feats[i];
        let d = w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b;
        min_margin = min_margin.min(y * d / wn);
        let pred = if d > 0.0 { 1.0 } else { -1.0 };
        if pred == y {
            correct += 1;
        }
        match (pred > 0.0, y > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    if !test_idx.is_empty() {
        report.test_accuracy = correct as f64 / test_idx.len() as f64;
        let precision = tp as f64 / (tp + fp).max(1) as f64;
        let recall = tp as f64 / (tp + fnn).max(1) as f64;
        report.test_f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        report.min_margin = min_margin;
    }
    Ok(SvmModel { weights: w, bias: b, report })
}

/// Classifies a normalized singular-value triple; the hyperplane itself is
/// resolved to intersection, which conservatively stops growth.
pub fn classify_region(shape: &LocalShape, model: &SvmModel) -> RegionClass {
    let d = model.decision(&shape.normalized_singular_values());
    if d > 0.0 {
        RegionClass::Cane
    } else {
        RegionClass::Intersection
    }
}

/// Parses training samples from CSV lines `s1,s2,s3,label` where label is
/// `cane` or `intersection` (header line optional).
pub fn parse_training_csv(text: &str) -> Result<Vec<TrainSample>, SegmentError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.to_lowercase().starts_with("s1")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(SegmentError::BadSample {
                line: lineno + 1,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let mut values = [0.0; 3];
        for (k, f) in fields[..3].iter().enumerate() {
            values[k] = f.parse::<f64>().map_err(|e| SegmentError::BadSample {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        }
        let class = match fields[3] {
            "cane" => RegionClass::Cane,
            "intersection" => RegionClass::Intersection,
            other => {
                return Err(SegmentError::BadSample {
                    line: lineno + 1,
                    reason: format!("unknown label {other:?}"),
                })
            }
        };
        out.push(TrainSample { values, class });
    }
    Ok(out)
}

/// A grown cane segment: member point indices, the visited growth trace, and
/// what stopped each direction.
#[derive(Debug, Clone)]
pub struct CaneSegment {
    pub members: Vec<u32>,
    pub trace: Vec<Point3>,
    pub endpoints: [Point3; 2],
    /// True when the corresponding direction stopped at an intersection.
    pub intersection_flags: [bool; 2],
    /// Seed had no neighborhood at all.
    pub empty_seed: bool,
}

impl CaneSegment {
    /// Endpoints flagged as cane-cordon (or cane-cane) intersections.
    pub fn intersection_points(&self) -> Vec<Point3> {
        let mut out = Vec::new();
        for (i, flag) in self.intersection_flags.iter().enumerate() {
            if *flag {
                out.push(self.endpoints[i]);
            }
        }
        out
    }
}

/// Orders bud seeds by distance to the cordon line, nearest first.
pub fn sort_seeds_by_cordon(buds: &[Point3], cordon: &Line3D) -> Vec<Point3> {
    let mut order: Vec<(f64, &Point3)> =
        buds.iter().map(|b| (cordon.distance_to(b), b)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    order.into_iter().map(|(_, b)| *b).collect()
}

/// Region growing from bud seeds, in seed order.
///
/// `excluded` masks points removed from the growth set (cordon and trunk
/// inliers). Each unvisited seed grows in both directions: the neighborhood
/// within the growth radius is SVD-probed, classified, and on a cane verdict
/// its unvisited members join the segment while the probe steps one radius
/// along the dominant vector (sign chosen to continue the previous step).
/// An intersection verdict or loss of support ends the direction.
pub fn region_grow(
    points: &[Point3],
    excluded: &[bool],
    seeds: &[Point3],
    model: &SvmModel,
    cfg: &SegmentationConfig,
) -> Vec<CaneSegment> {
    assert_eq!(points.len(), excluded.len());
    let radius = cfg.growth_radius;
    let index = GridIndex::build(points, radius.max(1e-6));
    let mut visited = vec![false; points.len()];
    let mut segments = Vec::new();

    for seed in seeds {
        // Skip seeds whose neighborhood is already claimed.
        let seed_hood: Vec<u32> = index
            .within_radius(seed, radius)
            .into_iter()
            .filter(|&i| !excluded[i as usize])
            .collect();
        if seed_hood.is_empty() {
            segments.push(CaneSegment {
                members: Vec::new(),
                trace: vec![*seed],
                endpoints: [*seed, *seed],
                intersection_flags: [false, false],
                empty_seed: true,
            });
            continue;
        }
        if seed_hood.iter().all(|&i| visited[i as usize]) {
            continue;
        }

        let mut members: Vec<u32> = Vec::new();
        let mut traces: [Vec<Point3>; 2] = [Vec::new(), Vec::new()];
        let mut ends = [*seed, *seed];
        let mut flags = [false, false];
        for dir_idx in 0..2 {
            let sign0 = if dir_idx == 0 { 1.0 } else { -1.0 };
            let mut cursor = *seed;
            let mut prev_step: Option<crate::cloud::Vec3> = None;
            for step in 0..cfg.max_steps {
                let hood: Vec<u32> = index
                    .within_radius(&cursor, radius)
                    .into_iter()
                    .filter(|&i| !excluded[i as usize])
                    .collect();
                if hood.len() < cfg.min_support {
                    ends[dir_idx] = cursor;
                    flags[dir_idx] = false;
                    break;
                }
                let pts: Vec<Point3> =
                    hood.iter().map(|&i| points[i as usize]).collect();
                let Some(shape) = shape_from_points(&pts) else {
                    ends[dir_idx] = cursor;
                    break;
                };
                if classify_region(&shape, model) == RegionClass::Intersection {
                    ends[dir_idx] = cursor;
                    flags[dir_idx] = true;
                    break;
                }
                for &i in &hood {
                    if !visited[i as usize] {
                        visited[i as usize] = true;
                        members.push(i);
                    }
                }
                let mut dir = shape.dominant().into_inner();
                match prev_step {
                    Some(prev) => {
                        if dir.dot(&prev) < 0.0 {
                            dir = -dir;
                        }
                    }
                    None => dir *= sign0,
                }
                cursor += dir * radius;
                prev_step = Some(dir);
                traces[dir_idx].push(cursor);
                ends[dir_idx] = cursor;
                if step + 1 == cfg.max_steps {
                    flags[dir_idx] = false;
                }
            }
        }
        // Stitch: negative-direction trace reversed, seed, positive trace.
        let mut trace: Vec<Point3> = traces[1].iter().rev().copied().collect();
        trace.push(*seed);
        trace.extend(traces[0].iter().copied());
        segments.push(CaneSegment {
            members,
            trace,
            endpoints: [ends[1], ends[0]],
            intersection_flags: [flags[1], flags[0]],
            empty_seed: false,
        });
    }
    segments
}

/// Confusion matrix and per-class scores for binary cane/other labels.
#[derive(Debug, Clone)]
pub struct SegmentationMetrics {
    /// Rows: ground truth (cane, other); columns: prediction (cane, other).
    pub confusion: [[usize; 2]; 2],
    pub precision_cane: f64,
    pub recall_cane: f64,
    pub f1_cane: f64,
    pub precision_other: f64,
    pub recall_other: f64,
    pub f1_other: f64,
}

impl SegmentationMetrics {
    /// Row-normalized confusion matrix; rows sum to 1 where defined.
    pub fn normalized(&self) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for r in 0..2 {
            let total: usize = self.confusion[r].iter().sum();
            if total > 0 {
                for c in 0..2 {
                    out[r][c] = self.confusion[r][c] as f64 / total as f64;
                }
            }
        }
        out
    }
}

#[derive(Debug, Error)]
#[error("metric undefined: prediction and ground truth share no points")]
pub struct UndefinedMetric;

pub fn segmentation_metrics(
    predicted_cane: &[bool],
    gt_cane: &[bool],
) -> Result<SegmentationMetrics, UndefinedMetric> {
    if predicted_cane.len() != gt_cane.len() || predicted_cane.is_empty() {
        return Err(UndefinedMetric);
    }
    let mut confusion = [[0usize; 2]; 2];
    for (p, g) in predicted_cane.iter().zip(gt_cane) {
        let r = if *g { 0 } else { 1 };
        let c = if *p { 0 } else { 1 };
        confusion[r][c] += 1;
    }
    let f = |tp: usize, fp: usize, fnn: usize| -> (f64, f64, f64) {
        let p = tp as f64 / (tp + fp).max(1) as f64;
        let r = tp as f64 / (tp + fnn).max(1) as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f1)
    };
    let (pc, rc, fc) = f(confusion[0][0], confusion[1][0], confusion[0][1]);
    let (po, ro, fo) = f(confusion[1][1], confusion[0][1], confusion[1][0]);
    Ok(SegmentationMetrics {
        confusion,
        precision_cane: pc,
        recall_cane: rc,
        f1_cane: fc,
        precision_other: po,
        recall_other: ro,
        f1_other: fo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Vec3;
    use approx::assert_relative_eq;

    fn toy_samples(jitter: f64, seed: u64) -> Vec<TrainSample> {
        let mut rng = rng::derive(seed, &[0x70]);
        let mut out = Vec::new();
        for _ in 0..50 {
            let e: f64 = rng.random_range(-jitter..=jitter);
            out.push(TrainSample {
                values: [1.0, 0.02 + e.abs(), 0.01],
                class: RegionClass::Cane,
            });
            let e2: f64 = rng.random_range(-jitter..=jitter);
            out.push(TrainSample {
                values: [0.58 + e2, 0.58, 0.58],
                class: RegionClass::Intersection,
            });
        }
        out
    }

    fn seg_cfg() -> SegmentationConfig {
        SegmentationConfig::default()
    }

    #[test]
    fn separable_toy_set_perfect_f1() {
        let samples = toy_samples(0.05, 1);
        let model = train_svm(&samples, &seg_cfg(), 7).unwrap();
        assert_relative_eq!(model.report.test_f1, 1.0);
        assert_relative_eq!(model.report.test_accuracy, 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let samples: Vec<TrainSample> = (0..10)
            .map(|_| TrainSample { values: [1.0, 0.0, 0.0], class: RegionClass::Cane })
            .collect();
        assert!(matches!(train_svm(&samples, &seg_cfg(), 1), Err(SegmentError::SingleClass)));
    }

    #[test]
    fn label_flip_mirrors_weights() {
        let samples = toy_samples(0.03, 2);
        let flipped: Vec<TrainSample> = samples
            .iter()
            .map(|s| TrainSample {
                values: s.values,
                class: match s.class {
                    RegionClass::Cane => RegionClass::Intersection,
                    RegionClass::Intersection => RegionClass::Cane,
                },
            })
            .collect();
        let a = train_svm(&samples, &seg_cfg(), 3).unwrap();
        let b = train_svm(&flipped, &seg_cfg(), 3).unwrap();
        for k in 0..3 {
            assert_relative_eq!(a.weights[k], -b.weights[k], epsilon = 1e-9);
        }
        assert_relative_eq!(a.bias, -b.bias, epsilon = 1e-9);
    }

    fn trained_model() -> SvmModel {
        train_svm(&toy_samples(0.05, 4), &seg_cfg(), 11).unwrap()
    }

    fn shape_of(values: [f64; 3]) -> LocalShape {
        LocalShape {
            singular_values: values,
            singular_vectors: [
                nalgebra::Unit::new_normalize(Vec3::x()),
                nalgebra::Unit::new_normalize(Vec3::y()),
                nalgebra::Unit::new_normalize(Vec3::z()),
            ],
            centroid: Point3::origin(),
        }
    }

    #[test]
    fn classify_rank_one_as_cane_isotropic_as_intersection() {
        let model = trained_model();
        assert_eq!(classify_region(&shape_of([1.0, 0.0, 0.0]), &model), RegionClass::Cane);
        assert_eq!(
            classify_region(&shape_of([0.58, 0.58, 0.58]), &model),
            RegionClass::Intersection
        );
    }

    #[test]
    fn classify_scale_invariant() {
        let model = trained_model();
        for c in [0.01, 1.0, 250.0] {
            assert_eq!(
                classify_region(&shape_of([c, 0.02 * c, 0.01 * c]), &model),
                RegionClass::Cane
            );
        }
    }

    #[test]
    fn boundary_ties_resolve_to_intersection() {
        let model = SvmModel {
            weights: [1.0, -1.0, 0.0],
            bias: 0.0,
            report: TrainReport::default(),
        };
        // feature on the hyperplane: s1 == s2
        let d = model.decision(&normalize(&[0.5, 0.5, 0.0]));
        assert_relative_eq!(d, 0.0);
        assert_eq!(
            classify_region(&shape_of([0.5, 0.5, 0.0]), &model),
            RegionClass::Intersection
        );
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let text = "s1,s2,s3,label\n1.0,0.1,0.0,cane\n0.6,0.6,0.55,intersection\n";
        let samples = parse_training_csv(text).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].class, RegionClass::Cane);
        assert!(parse_training_csv("1.0,0.1,cane\n").is_err());
        assert!(parse_training_csv("1.0,0.1,0.0,stem\n").is_err());
    }

    fn straight_cane_points(len: f64, step: f64) -> Vec<Point3> {
        // dense line of points along x with slight thickness
        let mut pts = Vec::new();
        let n = (len / step) as usize;
        for i in 0..=n {
            let x = i as f64 * step;
            for (dy, dz) in [(0.0, 0.002), (0.0, -0.002), (0.002, 0.0), (-0.002, 0.0)] {
                pts.push(Point3::new(x, dy, dz));
            }
        }
        pts
    }

    #[test]
    fn parallel_canes_stay_disjoint() {
        let mut points = straight_cane_points(0.6, 0.01);
        let offset = points.len();
        points.extend(
            straight_cane_points(0.6, 0.01)
                .into_iter()
                .map(|p| Point3::new(p.x, p.y + 0.10, p.z)),
        );
        let excluded = vec![false; points.len()];
        let model = trained_model();
        let mut cfg = seg_cfg();
        cfg.growth_radius = 0.03;
        let seeds = vec![Point3::new(0.3, 0.0, 0.0), Point3::new(0.3, 0.10, 0.0)];
        let segments = region_grow(&points, &excluded, &seeds, &model, &cfg);
        assert_eq!(segments.len(), 2);
        let first_max = segments[0].members.iter().max().copied().unwrap() as usize;
        let second_min = segments[1].members.iter().min().copied().unwrap() as usize;
        assert!(first_max < offset);
        assert!(second_min >= offset);
        // visited-set exclusivity
        let mut seen = std::collections::BTreeSet::new();
        for seg in &segments {
            for &m in &seg.members {
                assert!(seen.insert(m), "point {m} claimed twice");
            }
        }
    }

    #[test]
    fn trace_steps_bounded_by_radius() {
        let points = straight_cane_points(0.8, 0.01);
        let excluded = vec![false; points.len()];
        let model = trained_model();
        let mut cfg = seg_cfg();
        cfg.growth_radius = 0.05;
        let segments =
            region_grow(&points, &excluded, &[Point3::new(0.4, 0.0, 0.0)], &model, &cfg);
        for seg in &segments {
            for w in seg.trace.windows(2) {
                assert!((w[1] - w[0]).norm() <= cfg.growth_radius + 1e-9);
            }
        }
    }

    #[test]
    fn empty_seed_recorded_with_warning() {
        let points = straight_cane_points(0.2, 0.01);
        let excluded = vec![false; points.len()];
        let model = trained_model();
        let segments = region_grow(
            &points,
            &excluded,
            &[Point3::new(5.0, 5.0, 5.0)],
            &model,
            &seg_cfg(),
        );
        assert_eq!(segments.len(), 1);
        assert!(segments[0].empty_seed);
        assert!(segments[0].members.is_empty());
    }

    #[test]
    fn metrics_identity_and_half_split() {
        let gt = vec![true, true, false, false];
        let m = segmentation_metrics(&gt, &gt).unwrap();
        assert_relative_eq!(m.f1_cane, 1.0);
        assert_eq!(m.confusion[0][1] + m.confusion[1][0], 0);

        let all_cane = vec![true, true, true, true];
        let m = segmentation_metrics(&all_cane, &gt).unwrap();
        assert_relative_eq!(m.recall_cane, 1.0);
        assert_relative_eq!(m.precision_cane, 0.5);
        let norm = m.normalized();
        for row in norm {
            assert_relative_eq!(row[0] + row[1], 1.0);
        }
    }
}
