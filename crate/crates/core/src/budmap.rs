//! Bud-detection ingestion (simulated or file-provided), 3D projection
//! through camera intrinsics, fusion into the registered vine cloud, and
//! detection/count quality metrics.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Label, LabeledCloud, Point3};
use crate::config::DetectorConfig;
use crate::grid::GridIndex;
use crate::register::RigidTransform;
use crate::rng;
use crate::synth::ScanSet;

#[derive(Debug, Error)]
pub enum BudError {
    #[error("detection quality rates must lie in [0,1]: {0}")]
    BadRate(f64),
    #[error("metric undefined: no ground-truth buds")]
    UndefinedMetric,
}

/// One 2D bud detection; (u, v) is the box center in pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection2D {
    pub view_id: u32,
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    /// Ground-truth identity when known (simulation or labeled data).
    pub bud_id: Option<u32>,
}

/// Pinhole camera with its pose in the vine frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// view -> vine transform.
    pub pose: RigidTransform,
}

impl CameraModel {
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Point3 {
        Point3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth)
    }
}

/// Simulates an object detector of the given quality over the ground-truth
/// boxes: drops boxes with probability 1-recall, jitters centers by the
/// pixel sigma, and adds false boxes so the expected precision matches.
pub fn simulate_detections(
    scan: &ScanSet,
    quality: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Detection2D>, BudError> {
    let (recall, precision, pixel_sigma) = quality;
    for rate in [recall, precision] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(BudError::BadRate(rate));
        }
    }
    let mut out = Vec::new();
    for view in &scan.views {
        let mut stream = rng::derive(seed, &[0xDE7, scan.side.tag(), view.view_id as u64]);
        let jitter = Normal::new(0.0, pixel_sigma.max(1e-300)).unwrap();
        let mut kept = 0usize;
        for det in &view.gt_detections {
            if recall < 1.0 && !stream.random_bool(recall) {
                continue;
            }
            kept += 1;
            let (du, dv) = if pixel_sigma > 0.0 {
                (jitter.sample(&mut stream), jitter.sample(&mut stream))
            } else {
                (0.0, 0.0)
            };
            out.push(Detection2D {
                view_id: view.view_id,
                u: det.u + du,
                v: det.v + dv,
                w: det.w,
                h: det.h,
                score: if pixel_sigma > 0.0 { stream.random_range(0.75..1.0) } else { 1.0 },
                bud_id: det.bud_id,
            });
        }
        // Expected false-positive count so TP / (TP + FP) == precision.
        if precision < 1.0 && kept > 0 {
            let lambda = kept as f64 * (1.0 - precision) / precision;
            let n_fp = sample_poisson(&mut stream, lambda);
            for _ in 0..n_fp {
                out.push(Detection2D {
                    view_id: view.view_id,
                    u: stream.random_range(0.0..view.camera.width as f64),
                    v: stream.random_range(0.0..view.camera.height as f64),
                    w: 20.0,
                    h: 20.0,
                    score: stream.random_range(0.4..0.9),
                    bud_id: None,
                });
            }
        }
    }
    Ok(out)
}

fn sample_poisson(rng: &mut rand_chacha::ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(lambda).map(|d| d.sample(rng) as usize).unwrap_or(0)
}

/// Buds projected into the vine frame, with propagated identities and a
/// count of detections skipped for want of depth support.
#[derive(Debug, Clone)]
pub struct ProjectedBuds {
    pub cloud: LabeledCloud,
    pub ids: Vec<Option<u32>>,
    pub skipped_no_depth: usize,
}

/// Back-projects each detection's box center through the pinhole at the
/// median depth of the view-cloud points inside the box, then maps it into
/// the vine frame with that view's optimized registration transform.
pub fn project_detections_3d(
    detections: &[Detection2D],
    views: &[(u32, &LabeledCloud, CameraModel, RigidTransform)],
) -> ProjectedBuds {
    let mut cloud = LabeledCloud::new("vine");
    cloud.labels = Some(Vec::new());
    let mut ids = Vec::new();
    let mut skipped = 0usize;
    for det in detections {
        let Some((_, view_cloud, camera, optimized)) =
            views.iter().find(|(id, _, _, _)| *id == det.view_id)
        else {
            skipped += 1;
            continue;
        };
        let mut depths: Vec<f64> = view_cloud
            .points
            .iter()
            .filter(|p| {
                if p.z <= 0.0 {
                    return false;
                }
                let u = camera.fx * p.x / p.z + camera.cx;
                let v = camera.fy * p.y / p.z + camera.cy;
                (u - det.u).abs() <= det.w / 2.0 && (v - det.v).abs() <= det.h / 2.0
            })
            .map(|p| p.z)
            .collect();
        if depths.is_empty() {
            skipped += 1;
            continue;
        }
        depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let depth = depths[depths.len() / 2];
        let in_cam = camera.back_project(det.u, det.v, depth);
        cloud.points.push(optimized * in_cam);
        cloud.labels.as_mut().unwrap().push(Label::Bud);
        ids.push(det.bud_id);
    }
    ProjectedBuds { cloud, ids, skipped_no_depth: skipped }
}

/// Merge result: the combined cloud plus the deduplicated bud positions.
#[derive(Debug, Clone)]
pub struct MergedBuds {
    pub cloud: LabeledCloud,
    pub bud_positions: Vec<Point3>,
}

/// Appends bud points to the vine cloud, merging buds from different views
/// that fall within `dedup_radius` to their cluster centroid (single-linkage).
pub fn merge_bud_cloud(
    vine_cloud: &LabeledCloud,
    bud_points: &LabeledCloud,
    dedup_radius: f64,
) -> MergedBuds {
    let n = bud_points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    if n > 0 {
        let index = GridIndex::build(&bud_points.points, dedup_radius.max(1e-6));
        for i in 0..n {
            for j in index.within_radius(&bud_points.points[i], dedup_radius) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j as usize));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut clusters: std::collections::BTreeMap<usize, Vec<usize>> =
        std::collections::BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        clusters.entry(r).or_default().push(i);
    }
    let mut cloud = vine_cloud.clone();
    if cloud.labels.is_none() {
        cloud.labels = Some(vec![Label::Other; cloud.len()]);
    }
    let mut bud_positions = Vec::with_capacity(clusters.len());
    for members in clusters.values() {
        let mut c = nalgebra::Vector3::zeros();
        for &i in members {
            c += bud_points.points[i].coords;
        }
        let centroid = Point3::from(c / members.len() as f64);
        bud_positions.push(centroid);
        cloud.points.push(centroid);
        cloud.labels.as_mut().unwrap().push(Label::Bud);
    }
    MergedBuds { cloud, bud_positions }
}

/// Detection and count quality against ground truth.
#[derive(Debug, Clone)]
pub struct BudMetrics {
    /// Precision-recall points swept over score, descending.
    pub pr_curve: Vec<(f64, f64)>,
    /// Average precision at IoU >= 0.5 (single class).
    pub map: f64,
    /// Mean absolute percentage error of per-vine counts.
    pub count_mape: f64,
    /// Squared Pearson correlation of predicted vs ground-truth counts.
    pub r_squared: f64,
}

/// 2D PR/mAP over matched boxes plus per-vine count statistics.
///
/// `detections_2d` are matched to `gt_2d` greedily by score at IoU >= 0.5;
/// `counts` pairs (predicted, ground-truth) bud counts per vine.
pub fn bud_metrics(
    detections_2d: &[Detection2D],
    gt_2d: &[Detection2D],
    counts: &[(usize, usize)],
) -> Result<BudMetrics, BudError> {
    if gt_2d.is_empty() || counts.iter().all(|(_, gt)| *gt == 0) {
        return Err(BudError::UndefinedMetric);
    }
    let mut order: Vec<usize> = (0..detections_2d.len()).collect();
    order.sort_by(|&a, &b| {
        detections_2d[b].score.partial_cmp(&detections_2d[a].score).unwrap()
    });
    let mut taken = vec![false; gt_2d.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr_curve = Vec::new();
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for &i in &order {
        let det = &detections_2d[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gt_2d.iter().enumerate() {
            if taken[j] || gt.view_id != det.view_id {
                continue;
            }
            let iou = box_iou(det, gt);
            if iou >= 0.5 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / gt_2d.len() as f64;
        ap += precision * (recall - last_recall);
        last_recall = recall;
        pr_curve.push((recall, precision));
    }

    let mape = counts
        .iter()
        .filter(|(_, gt)| *gt > 0)
        .map(|(p, gt)| ((*p as f64 - *gt as f64) / *gt as f64).abs())
        .sum::<f64>()
        / counts.iter().filter(|(_, gt)| *gt > 0).count().max(1) as f64;

    Ok(BudMetrics {
        pr_curve,
        map: ap,
        count_mape: mape * 100.0,
        r_squared: pearson_r2(counts),
    })
}

fn box_iou(a: &Detection2D, b: &Detection2D) -> f64 {
    let (ax0, ax1) = (a.u - a.w / 2.0, a.u + a.w / 2.0);
    let (ay0, ay1) = (a.v - a.h / 2.0, a.v + a.h / 2.0);
    let (bx0, bx1) = (b.u - b.w / 2.0, b.u + b.w / 2.0);
    let (by0, by1) = (b.v - b.h / 2.0, b.v + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn pearson_r2(counts: &[(usize, usize)]) -> f64 {
    let n = counts.len() as f64;
    if counts.len() < 2 {
        return 1.0;
    }
    let (mut sp, mut sg) = (0.0, 0.0);
    for (p, g) in counts {
        sp += *p as f64;
        sg += *g as f64;
    }
    let (mp, mg) = (sp / n, sg / n);
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (p, g) in counts {
        let dp = *p as f64 - mp;
        let dg = *g as f64 - mg;
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp <= 0.0 && vg <= 0.0 {
        return 1.0; // all counts identical and equal
    }
    if vp <= 0.0 || vg <= 0.0 {
        return 0.0;
    }
    (cov * cov) / (vp * vg)
}

/// Matches predicted 3D buds to ground-truth buds one-to-one within `radius`;
/// returns the matched count.
pub fn match_buds_3d(predicted: &[Point3], gt: &[Point3], radius: f64) -> usize {
    let mut taken = vec![false; gt.len()];
    let mut matched = 0usize;
    for p in predicted {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = (p - g).norm();
            if d <= radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matched += 1;
        }
    }
    matched
}

/// Convenience wrapper used by the pipeline: detector settings from config.
pub fn detector_quality(cfg: &DetectorConfig) -> (f64, f64, f64) {
    (cfg.recall, cfg.precision, cfg.pixel_sigma)
}
