//! Spinning multi-beam LiDAR raycast against prisms and a ground plane.

use std::borrow::Cow;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::world::{norm, sub, Prism, Vec2, World};
use crate::geometry::{Frame, Point3, PointCloud, Pose2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub n_az: usize,
    pub n_el: usize,
    pub el_min_deg: f64,
    pub el_max_deg: f64,
    pub r_sensor: f64,
    pub sensor_height: f64,
    /// Gaussian range noise std-dev (m).
    pub noise_sigma: f64,
    pub ground: bool,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            n_az: 360,
            n_el: 16,
            el_min_deg: -15.0,
            el_max_deg: 15.0,
            r_sensor: 80.0,
            sensor_height: 1.8,
            noise_sigma: 0.02,
            ground: true,
        }
    }
}

impl LidarConfig {
    pub fn azimuth(&self, i: usize) -> f64 {
        -PI + (i as f64 + 0.5) * 2.0 * PI / self.n_az as f64
    }

    pub fn elevation(&self, k: usize) -> f64 {
        if self.n_el <= 1 {
            return self.el_min_deg.to_radians();
        }
        (self.el_min_deg + k as f64 * (self.el_max_deg - self.el_min_deg) / (self.n_el - 1) as f64).to_radians()
    }
}

/// What a ray struck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HitTarget {
    Ground,
    Building(u32),
    Static(u32),
    Actor(u32),
}

/// A scan plus, per point, the surface it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan {
    pub cloud: PointCloud,
    pub labels: Vec<HitTarget>,
}

/// Entry and exit distances of a 2D ray through a convex footprint; `None`
/// when missed or when the origin is inside.
fn clip_ray(origin: Vec2, dir: Vec2, footprint: &[Vec2]) -> Option<(f64, f64)> {
    let n = footprint.len();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut entered = false;
    for i in 0..n {
        let (a, b) = (footprint[i], footprint[(i + 1) % n]);
        let e = sub(b, a);
        // outward normal of a counter-clockwise polygon
        let nrm = [e[1], -e[0]];
        let num = nrm[0] * (origin[0] - a[0]) + nrm[1] * (origin[1] - a[1]);
        let den = nrm[0] * dir[0] + nrm[1] * dir[1];
        if den == 0.0 {
            if num > 0.0 {
                return None;
            }
        } else if den < 0.0 {
            let t = -num / den;
            if t > lo {
                lo = t;
                entered = true;
            }
        } else {
            hi = hi.min(-num / den);
        }
    }
    (entered && lo <= hi).then_some((lo, hi))
}

struct Span {
    near: f64,
    far: f64,
    z_min: f64,
    z_max: f64,
    target: HitTarget,
}

/// Ray-casts one sweep; `seed` drives the range noise.
pub fn raycast(pose: &Pose2, world: &World, t: f64, cfg: &LidarConfig, seed: u64) -> LabeledScan {
    let origin = [pose.x, pose.y];
    let mut prisms: Vec<(Cow<'_, Prism>, HitTarget)> = Vec::new();
    let near = |p: &Prism| {
        let (c, r) = p.bounding_circle();
        norm(sub(c, origin)) - r <= cfg.r_sensor
    };
    for (i, b) in world.buildings.iter().enumerate() {
        if near(b) {
            prisms.push((Cow::Borrowed(b), HitTarget::Building(i as u32)));
        }
    }
    for (i, o) in world.static_objects.iter().enumerate() {
        let p = Prism::from_aabb(&o.aabb);
        if near(&p) {
            prisms.push((Cow::Owned(p), HitTarget::Static(i as u32)));
        }
    }
    for (i, a) in world.dynamic_actors.iter().enumerate() {
        let p = a.prism_at(t);
        if near(&p) {
            prisms.push((Cow::Owned(p), HitTarget::Actor(i as u32)));
        }
    }

    let h = cfg.sensor_height;
    let elevations: Vec<(f64, f64, f64)> = (0..cfg.n_el)
        .map(|k| {
            let el = cfg.elevation(k);
            (el.tan(), el.cos(), el.sin())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("finite sigma"));

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut spans: Vec<Span> = Vec::new();
    for i in 0..cfg.n_az {
        let az = cfg.azimuth(i);
        let world_az = pose.theta + az;
        let dir = [world_az.cos(), world_az.sin()];
        spans.clear();
        for (p, target) in &prisms {
            if let Some((near, far)) = clip_ray(origin, dir, &p.footprint) {
                if near <= cfg.r_sensor {
                    spans.push(Span { near, far, z_min: p.z_min, z_max: p.z_max, target: *target });
                }
            }
        }
        for &(tan_el, cos_el, sin_el) in &elevations {
            let mut best: Option<(f64, HitTarget)> = None;
            let mut consider = |rho: f64, target: HitTarget| {
                if best.is_none_or(|(b, _)| rho < b) {
                    best = Some((rho, target));
                }
            };
            if cfg.ground && tan_el < 0.0 {
                consider(-h / tan_el, HitTarget::Ground);
            }
            for s in &spans {
                let z_in = h + s.near * tan_el;
                if z_in >= s.z_min && z_in <= s.z_max {
                    consider(s.near, s.target);
                } else if z_in > s.z_max && tan_el < 0.0 {
                    let rho = (s.z_max - h) / tan_el;
                    if rho <= s.far {
                        consider(rho, s.target);
                    }
                } else if z_in < s.z_min && tan_el > 0.0 {
                    let rho = (s.z_min - h) / tan_el;
                    if rho <= s.far {
                        consider(rho, s.target);
                    }
                }
            }
            let Some((rho, target)) = best else { continue };
            let range = rho / cos_el;
            if range > cfg.r_sensor {
                continue;
            }
            let r = match &noise {
                Some(n) => (range + n.sample(&mut rng)).max(0.0),
                None => range,
            };
            let horiz = r * cos_el;
            points.push(Point3::new(horiz * az.cos(), horiz * az.sin(), h + r * sin_el));
            labels.push(target);
        }
    }
    LabeledScan { cloud: PointCloud::new(points, Frame::Sensor), labels }
}

pub fn simulate_scan(pose: &Pose2, world: &World, t: f64, cfg: &LidarConfig, seed: u64) -> PointCloud {
    raycast(pose, world, t, cfg, seed).cloud
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::world::{generate_world, WorldParams};

    fn wall_world() -> World {
        let mut w = World::empty();
        w.buildings.push(Prism::new(vec![[10.0, -50.0], [10.5, -50.0], [10.5, 50.0], [10.0, 50.0]], 0.0, 30.0));
        w
    }

    #[test]
    fn empty_world_no_ground() {
        let cfg = LidarConfig { ground: false, ..LidarConfig::default() };
        assert!(simulate_scan(&Pose2::identity(), &World::empty(), 0.0, &cfg, 1).is_empty());
    }

    #[test]
    fn wall_ranges_are_analytic() {
        let cfg = LidarConfig { ground: false, noise_sigma: 0.0, ..LidarConfig::default() };
        let scan = raycast(&Pose2::identity(), &wall_world(), 0.0, &cfg, 0);
        assert!(!scan.cloud.is_empty());
        for p in &scan.cloud.points {
            let az = p.y.atan2(p.x);
            let rho = p.x.hypot(p.y);
            assert!((rho - 10.0 / az.cos()).abs() < 1e-9, "{p:?}");
            assert!((p.x - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotated_sensor_sees_wall_behind() {
        let cfg = LidarConfig { ground: false, noise_sigma: 0.0, ..LidarConfig::default() };
        let scan = simulate_scan(&Pose2::new(0.0, 0.0, std::f64::consts::PI), &wall_world(), 0.0, &cfg, 0);
        assert!(scan.points.iter().all(|p| (p.x + 10.0).abs() < 1e-9));
    }

    #[test]
    fn roof_hits_from_above() {
        let mut w = World::empty();
        w.buildings.push(Prism::new(vec![[3.0, -5.0], [30.0, -5.0], [30.0, 5.0], [3.0, 5.0]], 0.0, 1.0));
        let cfg = LidarConfig { ground: false, noise_sigma: 0.0, ..LidarConfig::default() };
        let scan = simulate_scan(&Pose2::identity(), &w, 0.0, &cfg, 0);
        assert!(scan.points.iter().any(|p| (p.z - 1.0).abs() < 1e-9 && p.x > 3.0 + 1e-6));
    }

    #[test]
    fn deterministic_and_bounded() {
        let w = generate_world(2, &WorldParams::default()).unwrap();
        let cfg = LidarConfig::default();
        let pose = Pose2::new(40.0, 0.0, 0.3);
        let a = simulate_scan(&pose, &w, 3.0, &cfg, 17);
        assert_eq!(a, simulate_scan(&pose, &w, 3.0, &cfg, 17));
        assert!(a.len() <= cfg.n_az * cfg.n_el);
        assert!(a.len() > 1000);
    }
}
