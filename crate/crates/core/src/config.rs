//! Scenario configuration: every tunable of the pipeline plus the RNG seed.
//!
//! A scenario is a single structured JSON document; unknown keys are
//! rejected. Defaults reproduce the reference scenario used by the
//! acceptance suite.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub rng_seed: u64,
    pub vine_count: usize,
    pub geometry: VineGeometry,
    pub pre_prune: PrePruneConfig,
    pub scanner: ScannerConfig,
    pub filter: FilterConfig,
    pub icp: IcpConfig,
    pub detector: DetectorConfig,
    pub obstacles: ObstacleConfig,
    pub segmentation: SegmentationConfig,
    pub cutgraph: CutGraphConfig,
    pub arm: ArmConfig,
    pub vehicle: VehicleConfig,
    pub stage_costs: StageCostConfig,
    pub economics: EconConfig,
    /// Test hook: force a module failure on one vine to exercise the
    /// error-state path of the run loop.
    pub fault: Option<FaultInjection>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0xB0B1,
            vine_count: 20,
            geometry: VineGeometry::default(),
            pre_prune: PrePruneConfig::default(),
            scanner: ScannerConfig::default(),
            filter: FilterConfig::default(),
            icp: IcpConfig::default(),
            detector: DetectorConfig::default(),
            obstacles: ObstacleConfig::default(),
            segmentation: SegmentationConfig::default(),
            cutgraph: CutGraphConfig::default(),
            arm: ArmConfig::default(),
            vehicle: VehicleConfig::default(),
            stage_costs: StageCostConfig::default(),
            economics: EconConfig::default(),
            fault: None,
        }
    }
}

/// Field geometry and skeleton ranges for the vine generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VineGeometry {
    /// Cordon wire height above ground [m].
    pub cordon_height: f64,
    /// Half-length of each cordon arm from the trunk [m].
    pub cordon_arm_len: f64,
    /// Row spacing (aisle pitch) [m].
    pub row_spacing: f64,
    /// Vine spacing along the row [m].
    pub vine_spacing: f64,
    /// Mean cane count per vine (Poisson draw).
    pub mean_canes: f64,
    /// Mean spacing between consecutive buds along a cane [m].
    pub inter_bud_spacing: f64,
    /// Relative jitter applied to bud spacing (fraction of spacing).
    pub bud_spacing_jitter: f64,
    /// Cane diameter range [mm].
    pub cane_diameter_mm: (f64, f64),
    /// Bud count per cane before pre-pruning (generator draws in this range).
    pub raw_buds_per_cane: (usize, usize),
    /// Maximum lateral lean of a cane tip away from the row plane [m].
    pub cane_lateral_spread: f64,
    /// Trunk radius [m].
    pub trunk_radius: f64,
    /// Cordon radius [m].
    pub cordon_radius: f64,
    /// Cane radius [m].
    pub cane_radius: f64,
    /// Bud bump radius [m].
    pub bud_radius: f64,
}

impl Default for VineGeometry {
    fn default() -> Self {
        Self {
            cordon_height: 1.8,
            cordon_arm_len: 1.0,
            row_spacing: 2.6,
            vine_spacing: 2.4,
            mean_canes: 13.0,
            inter_bud_spacing: 0.075,
            bud_spacing_jitter: 0.15,
            cane_diameter_mm: (5.0, 11.0),
            raw_buds_per_cane: (15, 18),
            cane_lateral_spread: 0.28,
            trunk_radius: 0.030,
            cordon_radius: 0.018,
            cane_radius: 0.004,
            bud_radius: 0.009,
        }
    }
}

/// Targets for the simulated mechanical pre-pruning pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrePruneConfig {
    /// Spur rule bud count n: retain this many buds per cane.
    pub rule_buds: usize,
    /// Population fractions (exactly n, more than n, fewer than n).
    pub fractions: (f64, f64, f64),
    /// Bud count range after pre-pruning.
    pub bud_range: (usize, usize),
}

impl Default for PrePruneConfig {
    fn default() -> Self {
        Self { rule_buds: 4, fractions: (0.25, 0.35, 0.40), bud_range: (1, 14) }
    }
}

/// Virtual dual-stereo scanner parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScannerConfig {
    /// Number of slider stations per side.
    pub stations: usize,
    /// Slider step between stations [m].
    pub slider_step: f64,
    /// Surface sample spacing on skeleton cylinders [m].
    pub point_spacing: f64,
    /// Gaussian depth noise sigma along the viewing ray [m].
    pub depth_sigma: f64,
    /// Slider prior translation error sigma [m].
    pub prior_sigma_t: f64,
    /// Slider prior rotation error sigma [rad].
    pub prior_sigma_r: f64,
    /// Angular z-buffer bin size [rad]; occlusion test resolution.
    pub zbuffer_res: f64,
    /// Depth slack before a point counts as occluded [m].
    pub zbuffer_slack: f64,
    /// Bottom camera height [m] and standoff from the vine plane [m].
    pub bottom_cam_height: f64,
    pub cam_standoff: f64,
    /// Top camera height [m]; it pitches down toward the cordon.
    pub top_cam_height: f64,
    /// Pinhole intrinsics [px].
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for ScannerConfig {
    fn default() -> Self {
        Self {
            stations: 7,
            slider_step: 0.193,
            point_spacing: 0.006,
            depth_sigma: 0.001,
            prior_sigma_t: 0.002,
            prior_sigma_r: 0.0,
            zbuffer_res: 0.004,
            zbuffer_slack: 0.012,
            bottom_cam_height: 1.45,
            cam_standoff: 1.05,
            top_cam_height: 2.25,
            fx: 1400.0,
            fy: 1400.0,
            cx: 1224.0,
            cy: 1024.0,
            image_width: 2448,
            image_height: 2048,
        }
    }
}

/// Pre-registration cloud conditioning.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Voxel leaf for downsampling before ICP [m].
    pub voxel_leaf: f64,
    /// Statistical outlier filter neighbor count.
    pub outlier_k: usize,
    /// Statistical outlier filter stddev multiplier.
    pub outlier_mult: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { voxel_leaf: 0.005, outlier_k: 12, outlier_mult: 2.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpConfig {
    /// Neighborhood size for destination normals.
    pub normal_k: usize,
    /// Nearest-neighbor correspondence gate [m].
    pub max_corr_dist: f64,
    /// Stop when the parameter update norm falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { normal_k: 50, max_corr_dist: 0.03, tol: 1e-6, max_iters: 50 }
    }
}

/// Simulated 2D bud detector quality.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub recall: f64,
    pub precision: f64,
    /// Box-center jitter sigma [px].
    pub pixel_sigma: f64,
    /// Radius for merging 3D bud projections from different views [m].
    pub dedup_radius: f64,
    /// Match radius for 3D bud counting metrics [m].
    pub match_radius: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { recall: 0.95, precision: 0.93, pixel_sigma: 1.5, dedup_radius: 0.015, match_radius: 0.02 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleConfig {
    /// RANSAC iterations per line.
    pub iters: usize,
    /// Inlier distance tolerance [m].
    pub inlier_tol: f64,
    /// Max angle between a hypothesis and its constraint axis [rad].
    pub max_axis_angle: f64,
    /// Occupancy voxel resolution [m].
    pub resolution: f64,
    /// Obstacle inflation radius [m].
    pub inflation: f64,
}

impl Default for ObstacleConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            inlier_tol: 0.01,
            max_axis_angle: 15f64.to_radians(),
            resolution: 0.05,
            inflation: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Region-growing step/search radius [m]; defaults to the generator's
    /// mean inter-bud distance.
    pub growth_radius: f64,
    /// Minimum neighborhood support to keep growing.
    pub min_support: usize,
    /// Hard cap on growth steps per direction.
    pub max_steps: usize,
    /// SVM training samples to synthesize per class when no file is given.
    pub train_per_class: usize,
    /// Pegasos epochs and regularization for SVM training.
    pub svm_epochs: usize,
    pub svm_lambda: f64,
    /// Train/validation split fraction.
    pub train_split: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            growth_radius: 0.075,
            min_support: 4,
            max_steps: 400,
            train_per_class: 60,
            svm_epochs: 2000,
            svm_lambda: 1e-3,
            train_split: 0.7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CutGraphConfig {
    /// Octree leaf for cane voxelization [m].
    pub resolution: f64,
    /// Voxel adjacency kernel: 6, 18, or 26 neighbors.
    pub kernel: u8,
    /// Edge weights; bud edges must stay below standard edges.
    pub w_bud: f64,
    pub w_std: f64,
    /// Path similarity threshold for deduplication.
    pub path_similarity: f64,
    /// Capsule radius for judging a cut against a ground-truth interval [m].
    pub cut_match_radius: f64,
}

impl Default for CutGraphConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            kernel: 18,
            w_bud: 0.1,
            w_std: 1.0,
            path_similarity: 0.9,
            cut_match_radius: 0.05,
        }
    }
}

/// One revolute link: a fixed offset followed by a rotation about `axis`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub offset: [f64; 3],
    pub axis: [f64; 3],
}

/// P6R arm geometry, joint limits, and manipulation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    /// Prismatic travel [m]; the joint ranges over +-travel/2.
    pub prismatic_travel: f64,
    /// Revolute chain, proximal to distal, in the arm base frame
    /// (x along the slide, y toward the canopy, z up).
    pub links: Vec<LinkConfig>,
    /// Fixed tool offset past the last joint [m].
    pub tool_offset: [f64; 3],
    /// Revolute joint limits [rad], proximal to distal.
    pub joint_limits: [(f64, f64); 6],
    /// Mount height of the arm base above ground [m].
    pub mount_height: f64,
    /// Lateral offset of the arm base from the vine plane [m].
    pub side_offset: f64,
    /// Max canopy depth reach [m].
    pub max_canopy_depth: f64,
    /// Reachability proximity epsilon against sampled workspace [m].
    pub reach_epsilon: f64,
    /// Monte-Carlo workspace sample count.
    pub workspace_samples: usize,
    /// Tool standoff for the approach pre-pose [m].
    pub standoff: f64,
    /// Cut-force model F = a*d + b with d in mm.
    pub force_slope: f64,
    pub force_intercept: f64,
    /// Actuator force at the blade before mechanical advantage [N].
    pub actuator_force: f64,
    pub mechanical_advantage: f64,
    /// Widest blade opening [mm].
    pub blade_opening_mm: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            prismatic_travel: 1.35,
            links: vec![
                LinkConfig { offset: [0.0, 0.0, 0.089], axis: [0.0, 0.0, 1.0] },
                LinkConfig { offset: [0.0, 0.135, 0.0], axis: [1.0, 0.0, 0.0] },
                LinkConfig { offset: [0.0, 0.37, 0.0], axis: [1.0, 0.0, 0.0] },
                LinkConfig { offset: [0.0, 0.33, 0.0], axis: [1.0, 0.0, 0.0] },
                LinkConfig { offset: [0.0, 0.0, 0.09], axis: [0.0, 0.0, 1.0] },
                LinkConfig { offset: [0.0, 0.08, 0.0], axis: [0.0, 1.0, 0.0] },
            ],
            tool_offset: [0.0, 0.09, 0.0],
            joint_limits: [
                (-2.43, 2.01),
                (-2.62, 0.05),
                (-2.62, 0.05),
                (-3.14, 3.14),
                (-3.14, 3.14),
                (-3.14, 3.14),
            ],
            mount_height: 1.30,
            side_offset: 0.72,
            max_canopy_depth: 0.9,
            reach_epsilon: 0.02,
            workspace_samples: 200_000,
            standoff: 0.15,
            force_slope: 35.0,
            force_intercept: 40.0,
            actuator_force: 150.0,
            mechanical_advantage: 3.0,
            blade_opening_mm: 38.0,
        }
    }
}

/// Ground vehicle, sensing, and controller parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub cruise_speed: f64,
    pub max_speed: f64,
    pub max_accel: f64,
    pub max_yaw_rate: f64,
    /// Lateral acceleration budget for the curvature speed cap [m/s^2].
    pub lat_accel: f64,
    pub vehicle_width: f64,
    /// Control / simulation step [s].
    pub dt: f64,
    /// MPC horizon length (steps), stage weights, and control weights.
    pub horizon: usize,
    pub q_cross: f64,
    pub q_heading: f64,
    pub q_speed: f64,
    pub r_speed: f64,
    pub r_yaw: f64,
    pub qf_scale: f64,
    pub noise: SensorNoiseConfig,
    /// Arc-length resample step for global paths [m].
    pub path_step: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 0.58,
            max_speed: 1.2,
            max_accel: 0.25,
            max_yaw_rate: 0.6,
            lat_accel: 0.35,
            vehicle_width: 1.2,
            dt: 0.1,
            horizon: 20,
            q_cross: 12.0,
            q_heading: 4.0,
            q_speed: 1.0,
            r_speed: 0.5,
            r_yaw: 0.8,
            qf_scale: 4.0,
            noise: SensorNoiseConfig::default(),
            path_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorNoiseConfig {
    /// RTK GPS position sigma [m] and rate [Hz].
    pub gps_sigma: f64,
    pub gps_rate: f64,
    /// Wheel odometry speed sigma [m/s] and rate [Hz].
    pub odom_sigma: f64,
    pub odom_rate: f64,
    /// IMU yaw-rate sigma [rad/s] and rate [Hz].
    pub imu_sigma: f64,
    pub imu_rate: f64,
}

impl Default for SensorNoiseConfig {
    fn default() -> Self {
        Self {
            gps_sigma: 0.02,
            gps_rate: 5.0,
            odom_sigma: 0.03,
            odom_rate: 10.0,
            imu_sigma: 0.01,
            imu_rate: 10.0,
        }
    }
}

/// Deterministic simulated stage costs used for TPC accounting, so cycle
/// times are machine-independent. Wall-clock timings are recorded separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageCostConfig {
    /// Perception cost per side visit [s]: scan, register, detect, segment.
    pub perception_per_side: f64,
    /// Motion planning cost per cut [s].
    pub planning_per_cut: f64,
    /// Approach + cut + retract cost per cut [s].
    pub execution_per_cut: f64,
}

impl Default for StageCostConfig {
    fn default() -> Self {
        // Calibrated so the reference field averages (4.75 prunable canes per
        // vine, 68% reachable from the first side) come out at 137 s for a
        // single side and 213 s for both sides.
        Self { perception_per_side: 21.8, planning_per_cut: 4.0, execution_per_cut: 31.672 }
    }
}

/// Cost-model defaults for the economics calculator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EconConfig {
    pub hand_labor_hours: Option<f64>,
    pub wage_per_hour: Option<f64>,
    pub benefit_fraction: Option<f64>,
    pub preprune_equipment_hours: Option<f64>,
    pub preprune_equipment_rate: Option<f64>,
    pub preprune_labor_hours: Option<f64>,
    pub followup_labor_hours: Option<f64>,
    pub robot_run_hours: Option<f64>,
    pub robot_fuel_gallons: Option<f64>,
    pub generator_fuel_gallons: Option<f64>,
    pub fuel_price_per_gallon: Option<f64>,
    pub lubrication_per_hour: Option<f64>,
    pub robot_investment: Option<f64>,
    pub preprune_investment: Option<f64>,
}

impl Default for EconConfig {
    fn default() -> Self {
        Self {
            hand_labor_hours: Some(32.0),
            wage_per_hour: Some(15.0),
            benefit_fraction: Some(0.40),
            preprune_equipment_hours: Some(0.65),
            // 0.65 h * rate + 2.4 h * $21 direct labor = $81.25 per acre.
            preprune_equipment_rate: Some(30.85 / 0.65),
            preprune_labor_hours: Some(2.4),
            followup_labor_hours: Some(18.0),
            robot_run_hours: Some(18.0),
            robot_fuel_gallons: Some(9.0),
            generator_fuel_gallons: Some(9.0),
            fuel_price_per_gallon: Some(2.38),
            lubrication_per_hour: Some(2.1),
            robot_investment: Some(115_000.0),
            preprune_investment: Some(30_000.0),
        }
    }
}

/// Forces one stage to fail for a given vine; exercised by fault-injection
/// tests of the run loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    pub vine_id: u32,
    pub stage: FaultStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultStage {
    Registration,
    Segmentation,
    Planning,
}
