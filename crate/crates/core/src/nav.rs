//! Vineyard navigation simulation: spline global path from waypoints,
//! trapezoidal speed profile with per-vine stops, unicycle vehicle model,
//! EKF localization from simulated GPS / odometry / IMU, and a predictive
//! path-tracking controller solved by iterated linearization with projected
//! gradient steps.

use nalgebra::{Matrix5, SMatrix, SVector};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::config::{SensorNoiseConfig, VehicleConfig};
use crate::rng;

#[derive(Debug, Error)]
pub enum NavError {
    #[error("need at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("duplicate consecutive waypoints at index {0}")]
    DuplicateWaypoint(usize),
    #[error("stop at arc length {0} lies outside the path")]
    StopOutsidePath(f64),
    #[error("infeasible control bounds: lower {lo} > upper {hi}")]
    BadBounds { lo: f64, hi: f64 },
    #[error("covariance lost positive definiteness")]
    NumericalFailure,
}

#[derive(Debug, Clone, Copy)]
pub struct PathSample {
    pub x: f64,
    pub y: f64,
    /// Path tangent angle [rad].
    pub heading: f64,
    /// Signed curvature [1/m].
    pub curvature: f64,
    /// Arc length from the path start [m].
    pub s: f64,
}

/// Arc-length-parameterized global path with optional speed profile.
#[derive(Debug, Clone, Default)]
pub struct PathPlan {
    pub samples: Vec<PathSample>,
    /// v(s) aligned with `samples`; empty until a profile is attached.
    pub speeds: Vec<f64>,
    /// Sample indices where the vehicle must stop (v = 0).
    pub stop_indices: Vec<usize>,
}

impl PathPlan {
    pub fn length(&self) -> f64 {
        self.samples.last().map_or(0.0, |p| p.s)
    }

    /// Index of the sample nearest to (x, y), searched from `hint` outward.
    pub fn nearest_index(&self, x: f64, y: f64, hint: usize) -> usize {
        let lo = hint.saturating_sub(50);
        let hi = (hint + 120).min(self.samples.len());
        let mut best = (f64::INFINITY, hint.min(self.samples.len() - 1));
        for (i, p) in self.samples[lo..hi].iter().enumerate() {
            let d = (p.x - x).powi(2) + (p.y - y).powi(2);
            if d < best.0 {
                best = (d, lo + i);
            }
        }
        best.1
    }

    /// Signed lateral offset of (x, y) from the path at sample `i`.
    pub fn cross_track(&self, x: f64, y: f64, i: usize) -> f64 {
        let p = &self.samples[i];
        -(x - p.x) * p.heading.sin() + (y - p.y) * p.heading.cos()
    }
}

/// C1 interpolating spline (Catmull-Rom) through the waypoints, resampled at
/// uniform arc length; curvature from tangent finite differences.
pub fn build_global_path(waypoints: &[(f64, f64)], step: f64) -> Result<PathPlan, NavError> {
    if waypoints.len() < 2 {
        return Err(NavError::TooFewWaypoints(waypoints.len()));
    }
    for (i, w) in waypoints.windows(2).enumerate() {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        if d < 1e-9 {
            return Err(NavError::DuplicateWaypoint(i + 1));
        }
    }
    // Dense Catmull-Rom polyline, then uniform arc-length resampling.
    let n = waypoints.len();
    let get = |i: isize| -> (f64, f64) {
        let i = i.clamp(0, n as isize - 1) as usize;
        waypoints[i]
    };
    let mut dense: Vec<(f64, f64)> = Vec::new();
    const PER_SEG: usize = 64;
    for seg in 0..n - 1 {
        let p0 = get(seg as isize - 1);
        let p1 = get(seg as isize);
        let p2 = get(seg as isize + 1);
        let p3 = get(seg as isize + 2);
        for k in 0..PER_SEG {
            let t = k as f64 / PER_SEG as f64;
            dense.push(catmull(p0, p1, p2, p3, t));
        }
    }
    dense.push(waypoints[n - 1]);

    let mut arcs = vec![0.0];
    for w in dense.windows(2) {
        let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
        arcs.push(arcs.last().unwrap() + d);
    }
    let total = *arcs.last().unwrap();
    let count = (total / step).floor() as usize + 1;
    let mut pts: Vec<(f64, f64, f64)> = Vec::with_capacity(count + 1);
    for i in 0..=count {
        let s = (i as f64 * step).min(total);
        let j = arcs.partition_point(|&a| a < s).clamp(1, dense.len() - 1);
        let t = if arcs[j] > arcs[j - 1] { (s - arcs[j - 1]) / (arcs[j] - arcs[j - 1]) } else { 0.0 };
        let x = dense[j - 1].0 + (dense[j].0 - dense[j - 1].0) * t;
        let y = dense[j - 1].1 + (dense[j].1 - dense[j - 1].1) * t;
        pts.push((x, y, s));
    }

    let mut samples = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        let (prev, next) = (&pts[i.saturating_sub(1)], &pts[(i + 1).min(pts.len() - 1)]);
        let heading = (next.1 - prev.1).atan2(next.0 - prev.0);
        samples.push(PathSample { x: pts[i].0, y: pts[i].1, heading, curvature: 0.0, s: pts[i].2 });
    }
    for i in 0..samples.len() {
        let (prev, next) =
            (samples[i.saturating_sub(1)], samples[(i + 1).min(samples.len() - 1)]);
        let ds = (next.s - prev.s).max(1e-9);
        samples[i].curvature = wrap_angle(next.heading - prev.heading) / ds;
    }
    Ok(PathPlan { samples, speeds: Vec::new(), stop_indices: Vec::new() })
}

fn catmull(p0: (f64, f64), p1: (f64, f64), p2: (f64, f64), p3: (f64, f64), t: f64) -> (f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
            + (3.0 * b - a - 3.0 * c + d) * t3)
    };
    (f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1))
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Trapezoidal speed profile: v^2 changes by at most 2*accel per meter,
/// capped by the cruise speed and the curvature speed limit, pinned to zero
/// at the path ends and at every stop.
pub fn speed_profile(
    plan: &mut PathPlan,
    stop_arcs: &[f64],
    cfg: &VehicleConfig,
) -> Result<(), NavError> {
    let total = plan.length();
    let mut stop_indices = vec![0, plan.samples.len() - 1];
    for &s in stop_arcs {
        if !(0.0..=total + 1e-9).contains(&s) {
            return Err(NavError::StopOutsidePath(s));
        }
        let idx = plan
            .samples
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1.s - s).abs().partial_cmp(&(b.1.s - s).abs()).unwrap()
            })
            .unwrap()
            .0;
        stop_indices.push(idx);
    }
    stop_indices.sort_unstable();
    stop_indices.dedup();

    let n = plan.samples.len();
    let mut v = vec![0.0f64; n];
    for i in 0..n {
        let cap = (cfg.lat_accel / plan.samples[i].curvature.abs().max(1e-9)).sqrt();
        v[i] = cfg.cruise_speed.min(cap);
    }
    for &i in &stop_indices {
        v[i] = 0.0;
    }
    // Forward and backward passes enforce the acceleration bound.
    for i in 1..n {
        let ds = plan.samples[i].s - plan.samples[i - 1].s;
        let vmax = (v[i - 1] * v[i - 1] + 2.0 * cfg.max_accel * ds).sqrt();
        v[i] = v[i].min(vmax);
    }
    for i in (0..n - 1).rev() {
        let ds = plan.samples[i + 1].s - plan.samples[i].s;
        let vmax = (v[i + 1] * v[i + 1] + 2.0 * cfg.max_accel * ds).sqrt();
        v[i] = v[i].min(vmax);
    }
    plan.speeds = v;
    plan.stop_indices = stop_indices;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Control {
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Unicycle integration for one step: the commanded speed is rate-limited by
/// the acceleration bound, the yaw rate clamped to its limit, and the pose
/// advanced with the resulting values.
pub fn simulate_step(state: &VehicleState, cmd: &Control, dt: f64, cfg: &VehicleConfig) -> VehicleState {
    let dv = (cmd.speed.clamp(-cfg.max_speed, cfg.max_speed) - state.speed)
        .clamp(-cfg.max_accel * dt, cfg.max_accel * dt);
    let v = state.speed + dv;
    let w = cmd.yaw_rate.clamp(-cfg.max_yaw_rate, cfg.max_yaw_rate);
    VehicleState {
        x: state.x + v * state.heading.cos() * dt,
        y: state.y + v * state.heading.sin() * dt,
        heading: wrap_angle(state.heading + w * dt),
        speed: v,
    }
}

/// EKF over [x, y, heading, speed, yaw rate].
#[derive(Debug, Clone)]
pub struct Ekf {
    pub state: SVector<f64, 5>,
    pub cov: Matrix5<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum Measurement {
    /// GPS position fix with per-axis sigma.
    Gps { x: f64, y: f64, sigma: f64 },
    /// Wheel-odometry speed.
    OdomSpeed { v: f64, sigma: f64 },
    /// IMU yaw rate.
    ImuYawRate { w: f64, sigma: f64 },
}

impl Ekf {
    pub fn new(state: &VehicleState, yaw_rate: f64, pos_sigma: f64) -> Self {
        let mut cov = Matrix5::zeros();
        for (i, s) in [pos_sigma, pos_sigma, 0.05, 0.05, 0.05].iter().enumerate() {
            cov[(i, i)] = s * s;
        }
        Ekf {
            state: SVector::<f64, 5>::from([
                state.x,
                state.y,
                state.heading,
                state.speed,
                yaw_rate,
            ]),
            cov,
        }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.state[0], self.state[1])
    }

    pub fn as_vehicle_state(&self) -> VehicleState {
        VehicleState { x: self.state[0], y: self.state[1], heading: self.state[2], speed: self.state[3] }
    }
}

/// One predict + update cycle. The prediction mirrors [`simulate_step`]
/// (same rate limits); each supplied measurement is fused in order.
pub fn ekf_step(
    ekf: &mut Ekf,
    cmd: &Control,
    measurements: &[Measurement],
    dt: f64,
    cfg: &VehicleConfig,
) -> Result<(), NavError> {
    let (x, y, th, v, w) = (ekf.state[0], ekf.state[1], ekf.state[2], ekf.state[3], ekf.state[4]);
    let dv_raw = cmd.speed.clamp(-cfg.max_speed, cfg.max_speed) - v;
    let dv = dv_raw.clamp(-cfg.max_accel * dt, cfg.max_accel * dt);
    let saturated = dv_raw.abs() > cfg.max_accel * dt;
    let v_next = v + dv;
    let w_next = cmd.yaw_rate.clamp(-cfg.max_yaw_rate, cfg.max_yaw_rate);

    ekf.state[0] = x + v_next * th.cos() * dt;
    ekf.state[1] = y + v_next * th.sin() * dt;
    ekf.state[2] = wrap_angle(th + w * dt);
    ekf.state[3] = v_next;
    ekf.state[4] = w_next;

    let jv = if saturated { 1.0 } else { 0.0 };
    let mut f = Matrix5::identity();
    f[(0, 2)] = -v_next * th.sin() * dt;
    f[(0, 3)] = jv * th.cos() * dt;
    f[(1, 2)] = v_next * th.cos() * dt;
    f[(1, 3)] = jv * th.sin() * dt;
    f[(2, 4)] = dt;
    f[(3, 3)] = jv;
    f[(4, 4)] = 0.0;

    let mut q = Matrix5::zeros();
    q[(0, 0)] = 1e-6;
    q[(1, 1)] = 1e-6;
    q[(2, 2)] = 1e-6;
    q[(3, 3)] = (cfg.max_accel * dt).powi(2).max(1e-8);
    q[(4, 4)] = (0.5 * dt).powi(2).max(1e-8);
    ekf.cov = f * ekf.cov * f.transpose() + q;

    for m in measurements {
        match m {
            Measurement::Gps { x, y, sigma } => {
                let h = SMatrix::<f64, 2, 5>::from_rows(&[
                    SMatrix::<f64, 1, 5>::from([[1.0], [0.0], [0.0], [0.0], [0.0]]),
                    SMatrix::<f64, 1, 5>::from([[0.0], [1.0], [0.0], [0.0], [0.0]]),
                ]);
                let z = SVector::<f64, 2>::new(*x, *y);
                let pred = SVector::<f64, 2>::new(ekf.state[0], ekf.state[1]);
                let r = SMatrix::<f64, 2, 2>::identity() * sigma.max(1e-6).powi(2);
                kalman_update(ekf, &h, &(z - pred), &r)?;
            }
            Measurement::OdomSpeed { v, sigma } => {
                let h = SMatrix::<f64, 1, 5>::from([[0.0], [0.0], [0.0], [1.0], [0.0]]);
                let innov = SVector::<f64, 1>::new(v - ekf.state[3]);
                let r = SMatrix::<f64, 1, 1>::identity() * sigma.max(1e-6).powi(2);
                kalman_update(ekf, &h, &innov, &r)?;
            }
            Measurement::ImuYawRate { w, sigma } => {
                let h = SMatrix::<f64, 1, 5>::from([[0.0], [0.0], [0.0], [0.0], [1.0]]);
                let innov = SVector::<f64, 1>::new(w - ekf.state[4]);
                let r = SMatrix::<f64, 1, 1>::identity() * sigma.max(1e-6).powi(2);
                kalman_update(ekf, &h, &innov, &r)?;
            }
        }
    }
    Ok(())
}

fn kalman_update<const M: usize>(
    ekf: &mut Ekf,
    h: &SMatrix<f64, M, 5>,
    innovation: &SVector<f64, M>,
    r: &SMatrix<f64, M, M>,
) -> Result<(), NavError> {
    let s = h * ekf.cov * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(NavError::NumericalFailure)?;
    let k = ekf.cov * h.transpose() * s_inv;
    ekf.state += k * innovation;
    ekf.state[2] = wrap_angle(ekf.state[2]);
    let i = Matrix5::identity();
    // Joseph form keeps the covariance symmetric PSD.
    let a = i - k * h;
    ekf.cov = a * ekf.cov * a.transpose() + k * r * k.transpose();
    ekf.cov = (ekf.cov + ekf.cov.transpose()) * 0.5;
    if ekf.cov.cholesky().is_none() {
        return Err(NavError::NumericalFailure);
    }
    Ok(())
}

/// Reference window for the controller: one entry per horizon step.
#[derive(Debug, Clone, Copy)]
pub struct RefPoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

/// Builds the time-indexed reference window starting at path index `start`.
pub fn reference_window(plan: &PathPlan, start: usize, horizon: usize, dt: f64) -> Vec<RefPoint> {
    let mut out = Vec::with_capacity(horizon + 1);
    let mut idx = start.min(plan.samples.len() - 1);
    for _ in 0..=horizon {
        let p = plan.samples[idx];
        let v = plan.speeds.get(idx).copied().unwrap_or(0.0);
        out.push(RefPoint {
            x: p.x,
            y: p.y,
            heading: p.heading,
            speed: v,
            yaw_rate: p.curvature * v,
        });
        // advance by the distance the reference covers in dt
        let advance = v * dt;
        let target_s = plan.samples[idx].s + advance;
        while idx + 1 < plan.samples.len() && plan.samples[idx + 1].s < target_s {
            idx += 1;
        }
    }
    out
}

/// Predictive tracking controller: minimizes the quadratic path-frame error
/// cost over the horizon subject to control bounds, by projected gradient
/// descent with backtracking from the zero-correction (pure reference)
/// sequence; returns the first control. The returned sequence never costs
/// more than the zero-correction sequence.
pub fn mpc_control(
    estimate: &VehicleState,
    refs: &[RefPoint],
    cfg: &VehicleConfig,
    bounds: (f64, f64),
) -> Result<Control, NavError> {
    let (w_lo, w_hi) = (-bounds.1, bounds.1);
    let (v_lo, v_hi) = (0.0, bounds.0);
    if v_lo > v_hi || w_lo > w_hi {
        return Err(NavError::BadBounds { lo: w_lo, hi: w_hi });
    }
    let n = refs.len() - 1;
    if n == 0 {
        return Ok(Control { speed: refs[0].speed, yaw_rate: refs[0].yaw_rate });
    }
    let dt = cfg.dt;
    let mut controls: Vec<(f64, f64)> = refs[..n]
        .iter()
        .map(|r| (r.speed.clamp(v_lo, v_hi), r.yaw_rate.clamp(w_lo, w_hi)))
        .collect();

    let rollout = |u: &[(f64, f64)]| -> (f64, Vec<(f64, f64, f64)>) {
        let mut x = (estimate.x, estimate.y, estimate.heading);
        let mut traj = Vec::with_capacity(n + 1);
        traj.push(x);
        let mut cost = 0.0;
        for (t, &(v, w)) in u.iter().enumerate() {
            x = (x.0 + v * x.2.cos() * dt, x.1 + v * x.2.sin() * dt, x.2 + w * dt);
            traj.push(x);
            let r = &refs[t + 1];
            let (ey, eth) = path_error(&x, r);
            let scale = if t + 1 == n { cfg.qf_scale } else { 1.0 };
            cost += scale * (cfg.q_cross * ey * ey + cfg.q_heading * eth * eth)
                + cfg.q_speed * (v - refs[t].speed).powi(2)
                + cfg.r_speed * (v - refs[t].speed).powi(2)
                + cfg.r_yaw * (w - refs[t].yaw_rate).powi(2);
        }
        (cost, traj)
    };

    let (mut cost, mut traj) = rollout(&controls);
    let mut step = 0.4;
    for _ in 0..12 {
        // Backward adjoint pass for the gradient.
        let mut grad = vec![(0.0, 0.0); n];
        let mut lambda = (0.0f64, 0.0f64, 0.0f64);
        for t in (0..n).rev() {
            let xt1 = traj[t + 1];
            let r = &refs[t + 1];
            let (ey, eth) = path_error(&xt1, r);
            let scale = if t + 1 == n { cfg.qf_scale } else { 1.0 };
            let dl_dx = (
                scale * cfg.q_cross * 2.0 * ey * -r.heading.sin(),
                scale * cfg.q_cross * 2.0 * ey * r.heading.cos(),
                scale * cfg.q_heading * 2.0 * eth,
            );
            let lx = (lambda.0 + dl_dx.0, lambda.1 + dl_dx.1, lambda.2 + dl_dx.2);
            let (v, w) = controls[t];
            let th = traj[t].2;
            // du: dL/du + B^T lambda
            grad[t] = (
                2.0 * (cfg.q_speed + cfg.r_speed) * (v - refs[t].speed)
                    + lx.0 * th.cos() * dt
                    + lx.1 * th.sin() * dt,
                2.0 * cfg.r_yaw * (w - refs[t].yaw_rate) + lx.2 * dt,
            );
            let _ = w;
            // A^T lambda for the previous step
            lambda = (
                lx.0,
                lx.1,
                lx.2 + lx.0 * (-v * th.sin() * dt) + lx.1 * (v * th.cos() * dt),
            );
        }
        // Projected gradient step with backtracking.
        let mut improved = false;
        for _ in 0..6 {
            let candidate: Vec<(f64, f64)> = controls
                .iter()
                .zip(&grad)
                .map(|(&(v, w), &(gv, gw))| {
                    ((v - step * gv).clamp(v_lo, v_hi), (w - step * gw).clamp(w_lo, w_hi))
                })
                .collect();
            let (c_cost, c_traj) = rollout(&candidate);
            if c_cost < cost {
                controls = candidate;
                cost = c_cost;
                traj = c_traj;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(Control { speed: controls[0].0, yaw_rate: controls[0].1 })
}

fn path_error(x: &(f64, f64, f64), r: &RefPoint) -> (f64, f64) {
    let ey = -(x.0 - r.x) * r.heading.sin() + (x.1 - r.y) * r.heading.cos();
    let eth = wrap_angle(x.2 - r.heading);
    (ey, eth)
}

/// Mission summary.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NavReport {
    pub mean_cross_track: f64,
    pub max_cross_track: f64,
    pub mean_heading_error_deg: f64,
    /// RMS longitudinal error over the recorded stops [m].
    pub stop_rmse: f64,
    pub stops_recorded: usize,
    pub total_distance: f64,
    pub average_speed: f64,
    pub corridor_violations: usize,
    pub completed: bool,
    pub sim_time_s: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub cross_track: f64,
}

/// Runs a full mission over the plan, stopping at each stop index in order.
/// Returns the report and the driven trace.
pub fn run_mission(
    plan: &PathPlan,
    noise: &SensorNoiseConfig,
    cfg: &VehicleConfig,
    seed: u64,
) -> (NavReport, Vec<TraceRow>) {
    let dt = cfg.dt;
    let start = plan.samples[0];
    let mut truth = VehicleState { x: start.x, y: start.y, heading: start.heading, speed: 0.0 };
    let mut ekf = Ekf::new(&truth, 0.0, noise.gps_sigma.max(1e-4));
    let mut stream = rng::derive(seed, &[0x4A7]);
    let gps_noise = Normal::new(0.0, noise.gps_sigma.max(1e-300)).unwrap();
    let odom_noise = Normal::new(0.0, noise.odom_sigma.max(1e-300)).unwrap();
    let imu_noise = Normal::new(0.0, noise.imu_sigma.max(1e-300)).unwrap();

    let corridor = (2.6 - cfg.vehicle_width) / 2.0;
    let stops: Vec<usize> =
        plan.stop_indices.iter().copied().filter(|&i| i != 0).collect();
    let mut next_stop = 0usize;
    let mut stop_sq_err = 0.0;
    let mut stops_recorded = 0usize;

    let mut cross_sum = 0.0;
    let mut cross_max = 0.0f64;
    let mut heading_sum = 0.0;
    let mut ticks = 0usize;
    let mut violations = 0usize;
    let mut distance = 0.0;
    let mut moving_time = 0.0;
    let mut trace = Vec::new();
    let mut ref_idx = 0usize;
    let mut true_w = 0.0;
    let gps_every = (1.0 / (noise.gps_rate * dt)).round().max(1.0) as usize;

    let max_ticks = (plan.length() / cfg.cruise_speed.max(0.05) * 4.0 / dt) as usize + 4000;
    let mut completed = false;
    for tick in 0..max_ticks {
        // Sensors sample the truth.
        let mut meas = Vec::with_capacity(3);
        if tick % gps_every == 0 {
            meas.push(Measurement::Gps {
                x: truth.x + gps_noise.sample(&mut stream) * sign_accepted(noise.gps_sigma),
                y: truth.y + gps_noise.sample(&mut stream) * sign_accepted(noise.gps_sigma),
                sigma: noise.gps_sigma.max(1e-4),
            });
        }
        meas.push(Measurement::OdomSpeed {
            v: truth.speed + odom_noise.sample(&mut stream) * sign_accepted(noise.odom_sigma),
            sigma: noise.odom_sigma.max(1e-4),
        });
        meas.push(Measurement::ImuYawRate {
            w: true_w + imu_noise.sample(&mut stream) * sign_accepted(noise.imu_sigma),
            sigma: noise.imu_sigma.max(1e-4),
        });

        let est = ekf.as_vehicle_state();
        ref_idx = plan.nearest_index(est.x, est.y, ref_idx);
        let refs = reference_window(plan, ref_idx, cfg.horizon, dt);
        let cmd = mpc_control(&est, &refs, cfg, (cfg.max_speed, cfg.max_yaw_rate))
            .unwrap_or(Control { speed: 0.0, yaw_rate: 0.0 });

        // Plant and filter advance with the same command.
        let new_truth = simulate_step(&truth, &cmd, dt, cfg);
        true_w = wrap_angle(new_truth.heading - truth.heading) / dt;
        distance += ((new_truth.x - truth.x).powi(2) + (new_truth.y - truth.y).powi(2)).sqrt();
        if new_truth.speed.abs() > 0.01 {
            moving_time += dt;
        }
        truth = new_truth;
        let _ = ekf_step(&mut ekf, &cmd, &meas, dt, cfg);

        // Metrics against the true pose.
        let ni = plan.nearest_index(truth.x, truth.y, ref_idx);
        let cross = plan.cross_track(truth.x, truth.y, ni);
        let h_err = wrap_angle(truth.heading - plan.samples[ni].heading).abs();
        cross_sum += cross.abs();
        cross_max = cross_max.max(cross.abs());
        if truth.speed.abs() > 0.02 {
            heading_sum += h_err;
        }
        ticks += 1;
        if cross.abs() > corridor {
            violations += 1;
        }
        trace.push(TraceRow {
            t: tick as f64 * dt,
            x: truth.x,
            y: truth.y,
            heading: truth.heading,
            speed: truth.speed,
            cross_track: cross,
        });

        // Stop bookkeeping: target reached when the reference has run out of
        // speed at the stop index and the vehicle has settled.
        if next_stop < stops.len() {
            let si = stops[next_stop];
            let ds = plan.samples[si].s - plan.samples[ni].s;
            if ds.abs() < 0.6 && truth.speed.abs() < 0.015 {
                let p = plan.samples[si];
                let lon = (truth.x - p.x) * p.heading.cos() + (truth.y - p.y) * p.heading.sin();
                stop_sq_err += lon * lon;
                stops_recorded += 1;
                next_stop += 1;
                // release the vehicle: nudge the reference past the stop
                ref_idx = (si + 2).min(plan.samples.len() - 1);
            }
        } else if plan.length() - plan.samples[ni].s < 0.35 && truth.speed.abs() < 0.02 {
            completed = true;
            break;
        }
    }

    let report = NavReport {
        mean_cross_track: cross_sum / ticks.max(1) as f64,
        max_cross_track: cross_max,
        mean_heading_error_deg: (heading_sum / ticks.max(1) as f64).to_degrees(),
        stop_rmse: if stops_recorded > 0 { (stop_sq_err / stops_recorded as f64).sqrt() } else { 0.0 },
        stops_recorded,
        total_distance: distance,
        average_speed: if moving_time > 0.0 { distance / moving_time } else { 0.0 },
        corridor_violations: violations,
        completed: completed && stops_recorded == stops.len(),
        sim_time_s: ticks as f64 * dt,
    };
    (report, trace)
}

fn sign_accepted(sigma: f64) -> f64 {
    if sigma > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Waypoints for a straight row with evenly spaced vine stops; returns
/// (waypoints, stop arc positions).
pub fn straight_row(length: f64, stop_spacing: f64, lead_in: f64) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut waypoints = Vec::new();
    let n = (length / 20.0).ceil() as usize;
    for i in 0..=n {
        waypoints.push((length * i as f64 / n as f64, 0.0));
    }
    let mut stops = Vec::new();
    let mut s = lead_in;
    while s < length - 1.0 {
        stops.push(s);
        s += stop_spacing;
    }
    (waypoints, stops)
}

/// Serpentine block route: `rows` straight passes of `row_len`, joined by
/// half-circle turns of radius `turn_radius` (skip-row turns).
pub fn block_route(rows: usize, row_len: f64, turn_radius: f64) -> Vec<(f64, f64)> {
    let mut wp = Vec::new();
    for r in 0..rows {
        let y = 2.0 * turn_radius * r as f64;
        let forward = r % 2 == 0;
        let n = (row_len / 15.0).ceil() as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let x = if forward { row_len * t } else { row_len * (1.0 - t) };
            wp.push((x, y));
        }
        if r + 1 < rows {
            // half-circle turn to the next pass
            let cx = if forward { row_len } else { 0.0 };
            let cy = y + turn_radius;
            for k in 1..6 {
                let a = k as f64 / 6.0 * std::f64::consts::PI;
                let (sa, ca) = a.sin_cos();
                let x = if forward { cx + sa * turn_radius } else { cx - sa * turn_radius };
                wp.push((x, cy - ca * turn_radius));
            }
        }
    }
    wp
}
