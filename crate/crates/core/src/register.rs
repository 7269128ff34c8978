//! Point-to-plane ICP and the two-stage chain registration of the multi-view
//! scanner, plus objective point-cloud quality metrics.
//!
//! Each view pair is solved by iterated linearization: at the current
//! transform the point-to-plane residuals are linearized with the small-angle
//! rotation model and the resulting 6x6 normal equations are re-solved every
//! iteration. The slider prior seeds the first iterate, which keeps the
//! correspondence gate tight and convergence fast.

use nalgebra::{Matrix6, Translation3, Unit, UnitQuaternion, Vector6};
use thiserror::Error;

use crate::cloud::{
    estimate_normals, shape_from_points, statistical_outlier_filter, voxel_downsample,
    CloudError, LabeledCloud, Point3, Vec3,
};
use crate::config::{FilterConfig, IcpConfig};
use crate::cutgraph::PruneGraph;
use crate::grid::GridIndex;
use crate::par;

pub type RigidTransform = nalgebra::Isometry3<f64>;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("empty {side} cloud")]
    EmptyCloud { side: &'static str },
    #[error("rank-deficient system: {found} valid correspondences, need at least {needed}")]
    RankDeficient { found: usize, needed: usize },
    #[error("ICP diverged after {iterations} iterations (residual grew 5 times in a row)")]
    Divergence { iterations: usize, last_stable: Box<RigidTransform>, rms: f64 },
    #[error("chain registration failed at pair {pair}: {source}")]
    PairFailed {
        pair: usize,
        #[source]
        source: Box<RegisterError>,
    },
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Convergence record for one registered pair.
#[derive(Debug, Clone)]
pub struct PairReport {
    /// Final RMS point-to-plane residual [m].
    pub final_rms: f64,
    pub iterations: usize,
    pub correspondences: usize,
    /// |t_icp - t_prior|: how far the optimizer moved from the encoder prior [m].
    pub translation_error_vs_prior: f64,
    /// RMS at each accepted (improving) iteration; non-increasing.
    pub rms_history: Vec<f64>,
}

/// Report for a full slider chain.
#[derive(Debug, Clone, Default)]
pub struct ChainReport {
    pub pairs: Vec<PairReport>,
    /// Root-sum-square of the per-pair prior deviations [m]; the random-walk
    /// estimate of accumulated drift.
    pub accumulated_error_estimate: f64,
}

/// Registered chain output: the fused cloud plus the optimized transform of
/// every view into the chain (first view) frame.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub cloud: LabeledCloud,
    pub view_transforms: Vec<RigidTransform>,
    pub report: ChainReport,
}

/// Registers `moving` onto `fixed`, minimizing the squared point-to-plane
/// residual sum_i |(R m_i + t - f_i)^T n_i|^2, seeded at `init`.
///
/// Correspondences are nearest neighbors within `params.max_corr_dist`;
/// destination normals come from `params.normal_k`-neighborhoods and points
/// with degenerate normals are skipped. Stops when the parameter update norm
/// drops below `params.tol` or after `params.max_iters` iterations.
pub fn icp_point_to_plane(
    fixed: &LabeledCloud,
    moving: &LabeledCloud,
    init: &RigidTransform,
    params: &IcpConfig,
) -> Result<(RigidTransform, PairReport), RegisterError> {
    if fixed.is_empty() {
        return Err(RegisterError::EmptyCloud { side: "fixed" });
    }
    if moving.is_empty() {
        return Err(RegisterError::EmptyCloud { side: "moving" });
    }
    let k = params.normal_k.min(fixed.len().saturating_sub(1)).max(3);
    let normals = estimate_normals(fixed, k)?;
    let index = GridIndex::build(&fixed.points, params.max_corr_dist.max(1e-4));

    let mut current = *init;
    let mut best = *init;
    let mut best_rms = f64::INFINITY;
    let mut grow_streak = 0usize;
    let mut history = Vec::new();
    let mut iterations = 0usize;
    let mut final_corr = 0usize;

    for iter in 0..params.max_iters {
        iterations = iter + 1;
        let corr = correspondences(&index, fixed, &normals, moving, &current, params.max_corr_dist);
        if corr.len() < 6 {
            return Err(RegisterError::RankDeficient { found: corr.len(), needed: 6 });
        }
        final_corr = corr.len();
        let rms = (corr.iter().map(|c| c.residual * c.residual).sum::<f64>()
            / corr.len() as f64)
            .sqrt();
        if rms < best_rms {
            best_rms = rms;
            best = current;
            history.push(rms);
            grow_streak = 0;
        } else {
            grow_streak += 1;
            if grow_streak >= 5 {
                return Err(RegisterError::Divergence {
                    iterations,
                    last_stable: Box::new(best),
                    rms,
                });
            }
        }

        // Normal equations for xi = (omega, t).
        let mut ata = Matrix6::<f64>::zeros();
        let mut atb = Vector6::<f64>::zeros();
        for c in &corr {
            let j = Vector6::new(c.cross.x, c.cross.y, c.cross.z, c.normal.x, c.normal.y, c.normal.z);
            ata += j * j.transpose();
            atb -= j * c.residual;
        }
        let xi = match ata.cholesky().map(|ch| ch.solve(&atb)) {
            Some(x) => x,
            None => match ata.lu().solve(&atb) {
                Some(x) => x,
                None => return Err(RegisterError::RankDeficient { found: corr.len(), needed: 6 }),
            },
        };
        let omega = Vec3::new(xi[0], xi[1], xi[2]);
        let t = Vec3::new(xi[3], xi[4], xi[5]);
        let delta = RigidTransform::from_parts(
            Translation3::from(t),
            UnitQuaternion::from_scaled_axis(omega),
        );
        current = delta * current;
        if xi.norm() < params.tol {
            break;
        }
    }

    // Accept the final iterate if it improves on the best seen so far.
    let corr = correspondences(&index, fixed, &normals, moving, &current, params.max_corr_dist);
    if corr.len() >= 6 {
        let rms = (corr.iter().map(|c| c.residual * c.residual).sum::<f64>()
            / corr.len() as f64)
            .sqrt();
        if rms < best_rms {
            best_rms = rms;
            best = current;
            history.push(rms);
            final_corr = corr.len();
        }
    }

    let report = PairReport {
        final_rms: best_rms,
        iterations,
        correspondences: final_corr,
        translation_error_vs_prior: (best.translation.vector - init.translation.vector).norm(),
        rms_history: history,
    };
    Ok((best, report))
}

struct Correspondence {
    residual: f64,
    normal: Vec3,
    cross: Vec3,
}

fn correspondences(
    index: &GridIndex,
    fixed: &LabeledCloud,
    normals: &[Option<Unit<Vec3>>],
    moving: &LabeledCloud,
    transform: &RigidTransform,
    gate: f64,
) -> Vec<Correspondence> {
    par::map_slice(&moving.points, |m| {
        let p = transform * m;
        let (j, d) = index.nearest(&p)?;
        if d > gate {
            return None;
        }
        let n = normals[j as usize]?.into_inner();
        let f = fixed.points[j as usize];
        Some(Correspondence {
            residual: (p - f).dot(&n),
            normal: n,
            cross: p.coords.cross(&n),
        })
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Registers a slider chain of views into the frame of the first view.
///
/// `priors[i]` is the prior transform of view `i` into the chain frame (the
/// first view's frame). Each view is voxel-downsampled and outlier-filtered
/// before ICP, each consecutive pair is registered seeded by the relative
/// prior, and transforms accumulate to the chain origin.
pub fn register_chain(
    views: &[LabeledCloud],
    priors: &[RigidTransform],
    filter: &FilterConfig,
    icp: &IcpConfig,
) -> Result<ChainResult, RegisterError> {
    assert_eq!(views.len(), priors.len(), "one prior per view");
    if views.len() < 2 {
        return Err(RegisterError::EmptyCloud { side: "chain (need >= 2 views)" });
    }
    let filtered: Vec<LabeledCloud> = views
        .iter()
        .map(|v| condition_view(v, filter))
        .collect::<Result<_, _>>()?;

    let mut transforms = vec![RigidTransform::identity(); views.len()];
    let mut report = ChainReport::default();
    let mut sq_sum = 0.0;
    for i in 1..views.len() {
        let pair_prior = priors[i - 1].inverse() * priors[i];
        let (t_pair, pair_report) =
            icp_point_to_plane(&filtered[i - 1], &filtered[i], &pair_prior, icp).map_err(|e| {
                RegisterError::PairFailed { pair: i - 1, source: Box::new(e) }
            })?;
        sq_sum += pair_report.translation_error_vs_prior.powi(2);
        transforms[i] = transforms[i - 1] * t_pair;
        report.pairs.push(pair_report);
    }
    report.accumulated_error_estimate = sq_sum.sqrt();

    let mut cloud = filtered[0].clone();
    for i in 1..views.len() {
        cloud.extend_from(&transform_cloud(&filtered[i], &transforms[i]));
    }
    Ok(ChainResult { cloud, view_transforms: transforms, report })
}

/// Registers the bottom and top chains concurrently (when the `parallel`
/// feature is on) and merges them with the extrinsic-seeded refinement.
/// The result is independent of execution order.
#[allow(clippy::too_many_arguments)]
pub fn register_dual_chain(
    bottom_views: &[LabeledCloud],
    bottom_priors: &[RigidTransform],
    top_views: &[LabeledCloud],
    top_priors: &[RigidTransform],
    extrinsic_top_to_bottom: &RigidTransform,
    filter: &FilterConfig,
    icp: &IcpConfig,
) -> Result<DualChainResult, RegisterError> {
    let (bottom, top) = crate::par::join(
        || register_chain(bottom_views, bottom_priors, filter, icp),
        || register_chain(top_views, top_priors, filter, icp),
    );
    let bottom = bottom?;
    let top = top?;
    let (merged, refined, merge_report) =
        merge_top_bottom(&bottom.cloud, &top.cloud, extrinsic_top_to_bottom, icp)?;
    Ok(DualChainResult { merged, bottom, top, top_to_bottom: refined, merge_report })
}

#[derive(Debug, Clone)]
pub struct DualChainResult {
    pub merged: LabeledCloud,
    pub bottom: ChainResult,
    pub top: ChainResult,
    pub top_to_bottom: RigidTransform,
    pub merge_report: PairReport,
}

fn condition_view(view: &LabeledCloud, filter: &FilterConfig) -> Result<LabeledCloud, RegisterError> {
    let down = voxel_downsample(view, filter.voxel_leaf)?;
    let (clean, _) = statistical_outlier_filter(&down, filter.outlier_k, filter.outlier_mult)?;
    Ok(clean)
}

/// Applies a rigid transform to every point (sensor origin included).
pub fn transform_cloud(cloud: &LabeledCloud, t: &RigidTransform) -> LabeledCloud {
    LabeledCloud {
        points: cloud.points.iter().map(|p| t * p).collect(),
        labels: cloud.labels.clone(),
        frame: cloud.frame.clone(),
        sensor_origin: t * cloud.sensor_origin,
    }
}

/// Fuses the bottom and top chains with one final ICP refinement seeded by
/// the rig extrinsic. Returns bottom + top * T_refined.
pub fn merge_top_bottom(
    bottom: &LabeledCloud,
    top: &LabeledCloud,
    extrinsic: &RigidTransform,
    icp: &IcpConfig,
) -> Result<(LabeledCloud, RigidTransform, PairReport), RegisterError> {
    let (t, report) = icp_point_to_plane(bottom, top, extrinsic, icp)?;
    let mut merged = bottom.clone();
    merged.extend_from(&transform_cloud(top, &t));
    Ok((merged, t, report))
}

/// Objective quality metrics of a registered cloud at probe radius `r`.
#[derive(Debug, Clone)]
pub struct QualityMetrics {
    pub points: usize,
    /// Mean count of points within `r` of each point (the point included).
    pub mean_neighbors: f64,
    /// Mean distance to the best-fit plane of the r-neighborhood [mm].
    pub roughness_mm: f64,
    /// mean_neighbors / (pi r^2) [points/m^2].
    pub surface_density: f64,
    /// mean_neighbors / ((4/3) pi r^3) [points/m^3].
    pub volume_density: f64,
    pub probe_radius: f64,
}

pub fn cloud_quality_metrics(cloud: &LabeledCloud, r: f64) -> Result<QualityMetrics, RegisterError> {
    if cloud.is_empty() {
        return Err(RegisterError::EmptyCloud { side: "quality probe" });
    }
    let index = GridIndex::build(&cloud.points, r);
    let stats = par::map_slice(&cloud.points, |p| {
        let ids = index.within_radius(p, r);
        let rough = if ids.len() >= 3 {
            let pts: Vec<Point3> = ids.iter().map(|&i| *index.point(i)).collect();
            shape_from_points(&pts).map(|shape| {
                let n = shape.singular_vectors[2].into_inner();
                ((p - shape.centroid).dot(&n)).abs()
            })
        } else {
            None
        };
        (ids.len(), rough)
    });
    let n = stats.len() as f64;
    let mean_neighbors = stats.iter().map(|(c, _)| *c as f64).sum::<f64>() / n;
    let (rough_sum, rough_n) = stats
        .iter()
        .filter_map(|(_, r)| *r)
        .fold((0.0, 0usize), |(s, c), d| (s + d, c + 1));
    let roughness_mm = if rough_n > 0 { rough_sum / rough_n as f64 * 1000.0 } else { 0.0 };
    Ok(QualityMetrics {
        points: cloud.len(),
        mean_neighbors,
        roughness_mm,
        surface_density: mean_neighbors / (std::f64::consts::PI * r * r),
        volume_density: mean_neighbors / (4.0 / 3.0 * std::f64::consts::PI * r * r * r),
        probe_radius: r,
    })
}

/// Number of connected components of a pruning graph.
pub fn connected_components_count(graph: &PruneGraph) -> usize {
    graph.connected_components()
}
