//! Agent-side pipeline: scan-matching odometry, keyframe selection and
//! dynamic-point removal.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    normalize_angle, remove_outliers, voxel_downsample, Frame, Point3, PointCloud, Pose2, SpatialHash,
};
use crate::observation::{median_depth_filter, DepthFilterConfig, ObjectObservation};
use crate::scan_context::{self, ScanContextConfig, ScanDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_corr_dist: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Points at or below this height are ignored (ground removal).
    pub min_z: Option<f64>,
    /// Extra coarse stages run before the final one, each with twice the
    /// correspondence radius of the next.
    pub coarse_levels: usize,
    pub metric: IcpMetric,
    /// Neighbourhood radius for target line normals (point-to-line only).
    pub normal_radius: f64,
}

/// Error minimised by each ICP iteration. Correspondences are 3D nearest
/// neighbours either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcpMetric {
    /// Closed-form planar Kabsch on matched pairs.
    #[default]
    PointToPoint,
    /// Gauss-Newton on distances to the local vertical surface through each
    /// target point, whose horizontal normal comes from its neighbourhood.
    PointToLine,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_corr_dist: 2.0,
            tol: 1e-6,
            max_iters: 50,
            min_z: None,
            coarse_levels: 0,
            metric: IcpMetric::PointToPoint,
            normal_radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    /// Maps source points into the target frame.
    pub transform: Pose2,
    /// Mean squared 3D distance over correspondences within `max_corr_dist`;
    /// `+∞` when there are none.
    pub fitness: f64,
    pub inlier_fraction: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl IcpResult {
    fn rejected(init: Pose2) -> Self {
        Self {
            transform: init,
            fitness: f64::INFINITY,
            inlier_fraction: 0.0,
            iterations: 0,
            converged: false,
        }
    }
}

struct Pairs {
    src: Vec<(f64, f64)>,
    dst: Vec<(f64, f64)>,
    idx: Vec<usize>,
    sq_sum: f64,
}

fn correspond(source: &[Point3], grid: &SpatialHash<'_>, target: &[Point3], t: &Pose2, radius: f64) -> Pairs {
    let mut pairs = Pairs { src: Vec::new(), dst: Vec::new(), idx: Vec::new(), sq_sum: 0.0 };
    for s in source {
        let p = t.transform_point(s);
        if let Some((j, d2)) = grid.nearest_within(&p, radius) {
            pairs.src.push((p.x, p.y));
            pairs.dst.push((target[j].x, target[j].y));
            pairs.idx.push(j);
            pairs.sq_sum += d2;
        }
    }
    pairs
}

/// Horizontal unit normal of the neighbourhood of each point, when that
/// neighbourhood is close to a line in the ground plane.
pub fn line_normals(points: &[Point3], radius: f64) -> Vec<Option<(f64, f64)>> {
    let grid = SpatialHash::new(points, radius);
    points
        .iter()
        .map(|p| {
            let (mut n, mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            grid.for_each_within(p, radius, |i| {
                let (x, y) = (points[i].x - p.x, points[i].y - p.y);
                n += 1.0;
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
                syy += y * y;
            });
            if n < 3.0 {
                return None;
            }
            let (mx, my) = (sx / n, sy / n);
            let (a, b, c) = (sxx / n - mx * mx, sxy / n - mx * my, syy / n - my * my);
            let mid = 0.5 * (a + c);
            let half = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let (lo, hi) = (mid - half, mid + half);
            if hi < 1e-4 || lo > 0.05 * hi {
                return None;
            }
            let (u, v) = if (a - lo).abs() > (c - lo).abs() { (b, lo - a) } else { (lo - c, b) };
            let len = u.hypot(v);
            (len > 0.0).then(|| (u / len, v / len))
        })
        .collect()
}

/// One damped Gauss-Newton step on point-to-line distances.
fn point_to_line_step(pairs: &Pairs, normals: &[Option<(f64, f64)>]) -> Option<Pose2> {
    let mut h = Matrix3::<f64>::zeros();
    let mut g = Vector3::<f64>::zeros();
    let mut used = 0;
    for ((p, q), &j) in pairs.src.iter().zip(&pairs.dst).zip(&pairs.idx) {
        let Some((nx, ny)) = normals[j] else { continue };
        let r = nx * (p.0 - q.0) + ny * (p.1 - q.1);
        let jac = Vector3::new(nx, ny, ny * p.0 - nx * p.1);
        h += jac * jac.transpose();
        g += jac * r;
        used += 1;
    }
    if used < 3 {
        return None;
    }
    let damp = 1e-6 * h.trace().max(1e-12);
    let delta = (h + Matrix3::identity() * damp).cholesky()?.solve(&(-g));
    Some(Pose2::new(delta[0], delta[1], delta[2]))
}

/// Closed-form planar rigid alignment taking `src` onto `dst`.
fn kabsch_2d(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Pose2 {
    let n = src.len() as f64;
    let mean = |v: &[(f64, f64)]| {
        let (sx, sy) = v.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        (sx / n, sy / n)
    };
    let (ps, qs) = (mean(src), mean(dst));
    let (mut sxx, mut sxy, mut syx, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (px, py) = (p.0 - ps.0, p.1 - ps.1);
        let (qx, qy) = (q.0 - qs.0, q.1 - qs.1);
        sxx += px * qx;
        sxy += px * qy;
        syx += py * qx;
        syy += py * qy;
    }
    let theta = (sxy - syx).atan2(sxx + syy);
    let (s, c) = theta.sin_cos();
    Pose2::new(qs.0 - (c * ps.0 - s * ps.1), qs.1 - (s * ps.0 + c * ps.1), theta)
}

fn above(points: &[Point3], min_z: Option<f64>) -> Vec<Point3> {
    match min_z {
        Some(z0) => points.iter().filter(|p| p.z > z0).copied().collect(),
        None => points.to_vec(),
    }
}

/// ICP with 3D nearest-neighbour correspondences, planar alignment.
pub fn scan_match(source: &PointCloud, target: &PointCloud, init: Pose2, cfg: &IcpConfig) -> Result<IcpResult> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Registration("scan_match needs two non-empty clouds".into()));
    }
    if !(cfg.max_corr_dist > 0.0) {
        return Err(Error::Parameter("max_corr_dist must be positive".into()));
    }
    let src = above(&source.points, cfg.min_z);
    let dst = above(&target.points, cfg.min_z);
    if src.is_empty() || dst.is_empty() {
        return Ok(IcpResult::rejected(init));
    }

    let mut t = init;
    let mut iterations = 0;
    let mut converged = false;
    let mut normals = None;
    let grid = SpatialHash::new(&dst, 0.25 * cfg.max_corr_dist);
    for level in (0..=cfg.coarse_levels).rev() {
        let radius = cfg.max_corr_dist * f64::powi(2.0, level as i32);
        // coarse stages only need to land in the basin of the next one
        let tol = if level > 0 { cfg.tol.max(1e-3) } else { cfg.tol };
        converged = false;
        if cfg.metric == IcpMetric::PointToLine && normals.is_none() {
            normals = Some(line_normals(&dst, cfg.normal_radius));
        }
        while iterations < cfg.max_iters {
            let pairs = correspond(&src, &grid, &dst, &t, radius);
            if pairs.src.is_empty() {
                if iterations == 0 {
                    return Ok(IcpResult::rejected(init));
                }
                break;
            }
            iterations += 1;
            let delta = match &normals {
                Some(nrm) => match point_to_line_step(&pairs, nrm) {
                    Some(d) => d,
                    None => break,
                },
                None => kabsch_2d(&pairs.src, &pairs.dst),
            };
            t = delta.compose(&t);
            if delta.translation_norm() + delta.theta.abs() < tol {
                converged = true;
                break;
            }
        }
    }

    let pairs = correspond(&src, &grid, &dst, &t, cfg.max_corr_dist);
    let inliers = pairs.src.len();
    let fitness = if inliers == 0 { f64::INFINITY } else { pairs.sq_sum / inliers as f64 };
    Ok(IcpResult {
        transform: t,
        fitness,
        inlier_fraction: inliers as f64 / src.len() as f64,
        iterations,
        converged: converged && inliers > 0,
    })
}

/// Drops points inside any dynamic observation's box inflated by `margin`.
pub fn remove_dynamic_points(cloud: &PointCloud, dynamic_obs: &[ObjectObservation], margin: f64) -> PointCloud {
    let boxes: Vec<_> = dynamic_obs
        .iter()
        .filter(|o| o.is_dynamic())
        .map(|o| o.aabb().inflate(margin))
        .collect();
    if boxes.is_empty() {
        return cloud.clone();
    }
    let points = cloud
        .points
        .iter()
        .filter(|p| !boxes.iter().any(|b| b.contains(p)))
        .copied()
        .collect();
    PointCloud::new(points, cloud.frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryConfig {
    pub icp: IcpConfig,
    /// Voxel applied to the moving scan before matching.
    pub source_voxel: Option<f64>,
    /// Voxel applied to the scan kept as the next target.
    pub target_voxel: Option<f64>,
    /// Matches below this inlier fraction count as failures.
    pub min_inlier_fraction: f64,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            icp: IcpConfig {
                min_z: Some(0.3),
                coarse_levels: 1,
                metric: IcpMetric::PointToLine,
                ..IcpConfig::default()
            },
            source_voxel: Some(0.5),
            target_voxel: Some(0.5),
            min_inlier_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryStep {
    pub pose: Pose2,
    pub increment: Pose2,
    pub degraded: bool,
}

#[derive(Debug, Clone, Default)]
pub struct OdometryState {
    pub pose: Pose2,
    pub last_increment: Pose2,
    pub last_timestamp: Option<u64>,
    pub degraded_steps: usize,
    prev_scan: Option<PointCloud>,
}

impl OdometryState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `scan` against the previous one, seeded with the previous
    /// increment; on failure the previous increment is reused.
    pub fn step(&mut self, scan: &PointCloud, t: u64, cfg: &OdometryConfig) -> Result<OdometryStep> {
        if let Some(prev_t) = self.last_timestamp {
            if t <= prev_t {
                return Err(Error::Protocol(format!("scan timestamp {t} not after {prev_t}")));
            }
        }
        self.last_timestamp = Some(t);
        let thin = |v: Option<f64>| match v {
            Some(v) => voxel_downsample(scan, v),
            None => Ok(scan.clone()),
        };
        let source = thin(cfg.source_voxel)?;
        let target = if cfg.target_voxel == cfg.source_voxel { source.clone() } else { thin(cfg.target_voxel)? };
        let Some(prev) = self.prev_scan.replace(target) else {
            return Ok(OdometryStep { pose: self.pose, increment: Pose2::identity(), degraded: false });
        };
        let accepted = if source.is_empty() || prev.is_empty() {
            None
        } else {
            let r = scan_match(&source, &prev, self.last_increment, &cfg.icp)?;
            (r.fitness.is_finite() && r.inlier_fraction >= cfg.min_inlier_fraction).then_some(r.transform)
        };
        let degraded = accepted.is_none();
        if degraded {
            self.degraded_steps += 1;
        }
        let increment = accepted.unwrap_or(self.last_increment);
        self.last_increment = increment;
        self.pose = self.pose.compose(&increment);
        Ok(OdometryStep { pose: self.pose, increment, degraded })
    }
}

/// Free-function form of [`OdometryState::step`].
pub fn step_odometry(
    mut state: OdometryState,
    scan: &PointCloud,
    t: u64,
    cfg: &OdometryConfig,
) -> Result<(OdometryState, OdometryStep)> {
    let s = state.step(scan, t, cfg)?;
    Ok((state, s))
}

/// The unit of agent-to-server communication.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub agent_id: u16,
    pub keyframe_id: u32,
    pub timestamp_us: u64,
    pub odom_pose: Pose2,
    /// Downsampled, dynamic points removed.
    pub cloud: PointCloud,
    /// Downsampled, dynamic points retained.
    pub cloud_raw: PointCloud,
    pub descriptor: ScanDescriptor,
    pub observations: Vec<ObjectObservation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeConfig {
    pub kf_dist: f64,
    /// Radians.
    pub kf_angle: f64,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self { kf_dist: 2.0, kf_angle: 20f64.to_radians() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Keyframer {
    last: Option<Pose2>,
    next_id: u32,
}

impl Keyframer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn should_emit(&self, pose: &Pose2, cfg: &KeyframeConfig) -> bool {
        match &self.last {
            None => true,
            Some(last) => {
                last.planar_distance(pose) >= cfg.kf_dist
                    || normalize_angle(pose.theta - last.theta).abs() >= cfg.kf_angle
            }
        }
    }

    /// Returns the id assigned to a new keyframe at `pose`, if one is due.
    pub fn maybe_emit(&mut self, pose: &Pose2, cfg: &KeyframeConfig) -> Option<u32> {
        if !self.should_emit(pose, cfg) {
            return None;
        }
        self.last = Some(*pose);
        let id = self.next_id;
        self.next_id += 1;
        Some(id)
    }

    pub fn emitted(&self) -> u32 {
        self.next_id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub outlier_radius: f64,
    pub outlier_min_neighbors: usize,
    pub voxel: f64,
    pub dyn_margin: f64,
    pub sensor_height: f64,
    pub odometry: OdometryConfig,
    pub keyframe: KeyframeConfig,
    pub depth_filter: DepthFilterConfig,
    pub scan_context: ScanContextConfig,
    /// Std-dev of translation noise added to each odometry increment (m).
    pub odom_noise_trans: f64,
    /// Std-dev of heading noise added to each odometry increment (rad).
    pub odom_noise_rot: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            outlier_radius: 1.0,
            outlier_min_neighbors: 2,
            voxel: 0.5,
            dyn_margin: 0.2,
            sensor_height: 1.8,
            odometry: OdometryConfig::default(),
            keyframe: KeyframeConfig::default(),
            depth_filter: DepthFilterConfig::default(),
            scan_context: ScanContextConfig::default(),
            odom_noise_trans: 0.0,
            odom_noise_rot: 0.0,
        }
    }
}

/// Everything one agent runs before talking to the server.
#[derive(Debug, Clone)]
pub struct AgentFrontend {
    pub agent_id: u16,
    cfg: FrontendConfig,
    odom: OdometryState,
    keyframer: Keyframer,
    noisy_pose: Pose2,
    rng: ChaCha8Rng,
}

impl AgentFrontend {
    pub fn new(agent_id: u16, cfg: FrontendConfig, seed: u64) -> Self {
        let stream = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(agent_id as u64 + 1));
        Self {
            agent_id,
            cfg,
            odom: OdometryState::new(),
            keyframer: Keyframer::new(),
            noisy_pose: Pose2::identity(),
            rng: ChaCha8Rng::seed_from_u64(stream),
        }
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn pose(&self) -> Pose2 {
        self.noisy_pose
    }

    pub fn degraded_steps(&self) -> usize {
        self.odom.degraded_steps
    }

    fn perturb(&mut self, inc: Pose2) -> Pose2 {
        let (st, sr) = (self.cfg.odom_noise_trans, self.cfg.odom_noise_rot);
        if st <= 0.0 && sr <= 0.0 {
            return inc;
        }
        let mut draw = |s: f64| if s > 0.0 { Normal::new(0.0, s).expect("finite std").sample(&mut self.rng) } else { 0.0 };
        let (nx, ny, nt) = (draw(st), draw(st), draw(sr));
        Pose2::new(inc.x + nx, inc.y + ny, inc.theta + nt)
    }

    /// Processes one sensor-frame scan with the detections made on it.
    pub fn process(
        &mut self,
        scan: &PointCloud,
        timestamp_us: u64,
        detections: &[ObjectObservation],
    ) -> Result<Option<Keyframe>> {
        let cfg = &self.cfg;
        let filtered = remove_outliers(scan, cfg.outlier_radius, cfg.outlier_min_neighbors)?;
        let dynamic: Vec<ObjectObservation> = detections.iter().filter(|o| o.is_dynamic()).cloned().collect();
        let clean = remove_dynamic_points(&filtered, &dynamic, cfg.dyn_margin);

        let first = self.odom.last_timestamp.is_none();
        let step = self.odom.step(&clean, timestamp_us, &cfg.odometry)?;
        if !first {
            let inc = self.perturb(step.increment);
            self.noisy_pose = self.noisy_pose.compose(&inc);
        }

        let Some(keyframe_id) = self.keyframer.maybe_emit(&self.noisy_pose, &self.cfg.keyframe) else {
            return Ok(None);
        };
        let cfg = &self.cfg;
        let cloud_raw = voxel_downsample(&filtered, cfg.voxel)?;
        let cloud = remove_dynamic_points(&cloud_raw, &dynamic, cfg.dyn_margin);
        let descriptor = scan_context::encode(&clean, &cfg.scan_context);
        let viewpoint = Point3::new(0.0, 0.0, cfg.sensor_height);
        let observations = detections
            .iter()
            .map(|o| {
                let mut o = if o.is_dynamic() { o.clone() } else { median_depth_filter(o, viewpoint, &cfg.depth_filter) };
                o.keyframe_id = keyframe_id;
                o.timestamp_us = timestamp_us;
                o.agent_id = self.agent_id;
                o
            })
            .collect();
        let kf_frame = |c: PointCloud| PointCloud::new(c.points.iter().map(Point3::quantized).collect(), Frame::Keyframe);
        Ok(Some(Keyframe {
            agent_id: self.agent_id,
            keyframe_id,
            timestamp_us,
            odom_pose: self.noisy_pose,
            cloud: kf_frame(cloud),
            cloud_raw: kf_frame(cloud_raw),
            descriptor,
            observations,
        }))
    }
}
