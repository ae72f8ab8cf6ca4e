//! Agent routes over the town and the recording loop producing scans,
//! detections and ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lidar::{raycast, LidarConfig};
use super::oracle::{oracle_detect, OracleConfig, OracleDetection, OracleState};
use super::world::{add, generate_world, norm, scale, sub, turn_angle, unit, Vec2, World, WorldParams};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Pose2};
use crate::observation::ObjectObservation;

/// Closed loop through grid intersections, given by lattice indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RoutePlan {
    /// Counter-clockwise around a `w × h` block rectangle, passing straight
    /// through intermediate intersections.
    Perimeter { i0: usize, j0: usize, w: usize, h: usize },
    /// Alternating east/north steps up a diagonal and back, turning at every
    /// intersection it visits.
    Staircase { i0: usize, j0: usize, steps: usize },
}

impl RoutePlan {
    pub fn corners(&self, world: &World) -> Result<Vec<[usize; 2]>> {
        let (nx, ny) = (world.params.nx, world.params.ny);
        let cells = match *self {
            RoutePlan::Perimeter { i0, j0, w, h } => {
                if w == 0 || h == 0 {
                    return Err(Error::Parameter("perimeter route needs w, h ≥ 1".into()));
                }
                let mut c = Vec::new();
                c.extend((0..w).map(|k| [i0 + k, j0]));
                c.extend((0..h).map(|k| [i0 + w, j0 + k]));
                c.extend((0..w).map(|k| [i0 + w - k, j0 + h]));
                c.extend((0..h).map(|k| [i0, j0 + h - k]));
                c
            }
            RoutePlan::Staircase { i0, j0, steps } => {
                if steps == 0 {
                    return Err(Error::Parameter("staircase route needs ≥ 1 step".into()));
                }
                let mut c = Vec::new();
                for m in 0..steps {
                    c.push([i0 + m, j0 + m]);
                    c.push([i0 + m + 1, j0 + m]);
                }
                c.push([i0 + steps, j0 + steps]);
                for m in (0..steps).rev() {
                    c.push([i0 + m, j0 + m + 1]);
                    if m > 0 {
                        c.push([i0 + m, j0 + m]);
                    }
                }
                c
            }
        };
        if cells.iter().any(|[i, j]| *i >= nx || *j >= ny) {
            return Err(Error::Parameter(format!("route {self:?} leaves the {nx}×{ny} grid")));
        }
        Ok(cells)
    }
}

/// Dense closed polyline with arc-length lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl Route {
    /// Rounds every corner of the closed polygon `corners` with a circular
    /// fillet of `radius`.
    pub fn with_fillets(corners: &[Vec2], radius: f64) -> Route {
        let n = corners.len();
        let mut points = Vec::new();
        for i in 0..n {
            let (prev, c, next) = (corners[(i + n - 1) % n], corners[i], corners[(i + 1) % n]);
            let (u1, u2) = (unit(sub(c, prev)), unit(sub(next, c)));
            let alpha = turn_angle(u1, u2);
            if alpha.abs() < 1e-3 || radius <= 0.0 {
                points.push(c);
                continue;
            }
            let half_tan = (alpha.abs() / 2.0).tan();
            let d = (radius * half_tan).min(0.45 * norm(sub(c, prev)).min(norm(sub(next, c))));
            let r = d / half_tan;
            let start = sub(c, scale(u1, d));
            let left = [-u1[1], u1[0]];
            let centre = add(start, scale(left, r * alpha.signum()));
            let a0 = (start[1] - centre[1]).atan2(start[0] - centre[0]);
            let steps = (alpha.abs() / 5f64.to_radians()).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let a = a0 + alpha * k as f64 / steps as f64;
                points.push([centre[0] + r * a.cos(), centre[1] + r * a.sin()]);
            }
        }
        let mut cumulative = vec![0.0];
        for i in 0..points.len() {
            let d = norm(sub(points[(i + 1) % points.len()], points[i]));
            cumulative.push(cumulative[i] + d);
        }
        Route { points, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    pub fn pose_at(&self, s: f64) -> Pose2 {
        let s = s.rem_euclid(self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 1),
            Err(i) => i - 1,
        };
        let (a, b) = (self.points[i], self.points[(i + 1) % self.points.len()]);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let f = if seg > 0.0 { (s - self.cumulative[i]) / seg } else { 0.0 };
        let d = sub(b, a);
        Pose2::new(a[0] + f * d[0], a[1] + f * d[1], d[1].atan2(d[0]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPlan {
    pub route: RoutePlan,
    /// Start position as a fraction of the route length.
    pub start_fraction: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub world: WorldParams,
    pub agents: Vec<AgentPlan>,
    pub duration_s: f64,
    pub scan_period_us: u64,
    pub fillet_radius: f64,
    pub lidar: LidarConfig,
    pub oracle: OracleConfig,
}

pub const PRESETS: [&str; 4] = ["town", "staircase", "mixed", "convoy"];

impl ScenarioConfig {
    /// Named world/route layouts; agents start evenly spaced along their routes.
    pub fn preset(name: &str, seed: u64, n_agents: usize, duration_s: f64) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Parameter("at least one agent required".into()));
        }
        let speed = 8.0;
        let spread = |k: usize| k as f64 / n_agents as f64;
        let (world, agents) = match name {
            "town" => {
                let plans = (0..n_agents)
                    .map(|k| AgentPlan {
                        route: RoutePlan::Perimeter { i0: 0, j0: 0, w: 3, h: 3 },
                        start_fraction: spread(k),
                        speed,
                    })
                    .collect();
                (WorldParams::default(), plans)
            }
            "staircase" => {
                let plans = (0..n_agents)
                    .map(|k| AgentPlan {
                        route: RoutePlan::Staircase { i0: 0, j0: 0, steps: 3 },
                        start_fraction: spread(k),
                        speed,
                    })
                    .collect();
                (WorldParams::default(), plans)
            }
            "mixed" => {
                let plans = (0..n_agents)
                    .map(|k| AgentPlan {
                        route: if k == 0 {
                            RoutePlan::Staircase { i0: 0, j0: 0, steps: 3 }
                        } else {
                            RoutePlan::Perimeter { i0: 0, j0: 0, w: 3, h: 3 }
                        },
                        start_fraction: spread(k),
                        speed,
                    })
                    .collect();
                (WorldParams::default(), plans)
            }
            "convoy" => {
                // one shared loop, agents a few seconds apart
                let plans = (0..n_agents)
                    .map(|k| AgentPlan {
                        route: RoutePlan::Perimeter { i0: 0, j0: 0, w: 2, h: 2 },
                        start_fraction: 0.02 * k as f64,
                        speed,
                    })
                    .collect();
                (WorldParams::default(), plans)
            }
            other => {
                return Err(Error::Parameter(format!(
                    "unknown world preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        Ok(Self {
            seed,
            world,
            agents,
            duration_s,
            scan_period_us: 200_000,
            fillet_radius: 6.0,
            lidar: LidarConfig::default(),
            oracle: OracleConfig::default(),
        })
    }

    pub fn n_scans(&self) -> usize {
        ((self.duration_s * 1e6) / self.scan_period_us as f64).floor() as usize + 1
    }
}

/// One scan as an agent records it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub timestamp_us: u64,
    pub gt_pose: Pose2,
    pub cloud: PointCloud,
    pub detections: Vec<ObjectObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecording {
    pub agent_id: u16,
    pub scans: Vec<ScanRecord>,
    /// Oracle output with ground-truth links, parallel to `scans`.
    pub truth: Vec<Vec<OracleDetection>>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: ScenarioConfig,
    pub world: World,
    pub routes: Vec<Route>,
    pub agents: Vec<AgentRecording>,
}

/// Deterministic seed derivation (splitmix64 finaliser).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn quantize(c: &PointCloud) -> PointCloud {
    PointCloud::new(c.points.iter().map(Point3::quantized).collect(), c.frame)
}

pub fn build_routes(cfg: &ScenarioConfig, world: &World) -> Result<Vec<Route>> {
    cfg.agents
        .iter()
        .map(|a| {
            let corners: Vec<Vec2> = a.route.corners(world)?.into_iter().map(|[i, j]| world.intersection_at(i, j)).collect();
            Ok(Route::with_fillets(&corners, cfg.fillet_radius))
        })
        .collect()
}

fn record_agent(cfg: &ScenarioConfig, world: &World, route: &Route, k: usize) -> AgentRecording {
    let plan = &cfg.agents[k];
    let agent_id = k as u16;
    let s0 = plan.start_fraction * route.length();
    let mut oracle_state = OracleState::new();
    let mut scans = Vec::new();
    let mut truth = Vec::new();
    for idx in 0..cfg.n_scans() {
        let t_us = idx as u64 * cfg.scan_period_us;
        let t = t_us as f64 * 1e-6;
        let pose = route.pose_at(s0 + plan.speed * t);
        let labeled = raycast(&pose, world, t, &cfg.lidar, mix_seed(&[cfg.seed, k as u64, idx as u64, 1]));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, k as u64, idx as u64, 2]));
        let dets = oracle_detect(&mut oracle_state, &labeled, world, agent_id, idx as u32, t_us, &cfg.oracle, &mut rng);
        let dets: Vec<OracleDetection> = dets
            .into_iter()
            .map(|d| OracleDetection {
                obs: d.obs.with_points(quantize(d.obs.points())).expect("non-empty"),
                ..d
            })
            .collect();
        scans.push(ScanRecord {
            timestamp_us: t_us,
            gt_pose: pose,
            cloud: quantize(&labeled.cloud),
            detections: dets.iter().map(|d| d.obs.clone()).collect(),
        });
        truth.push(dets);
    }
    AgentRecording { agent_id, scans, truth }
}

/// Generates the world and records every agent (agents run in parallel;
/// the output does not depend on scheduling).
pub fn simulate(cfg: &ScenarioConfig) -> Result<Simulation> {
    if !(cfg.duration_s >= 0.0) || cfg.scan_period_us == 0 {
        return Err(Error::Parameter("duration must be ≥ 0 and scan period > 0".into()));
    }
    let world = generate_world(cfg.seed, &cfg.world)?;
    let routes = build_routes(cfg, &world)?;
    let agents = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.agents.len())
            .map(|k| {
                let (world, route) = (&world, &routes[k]);
                s.spawn(move || record_agent(cfg, world, route, k))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("recorder thread panicked")).collect()
    });
    Ok(Simulation { config: cfg.clone(), world, routes, agents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn square_route_length_and_headings() {
        let sq = [[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]];
        let r = Route::with_fillets(&sq, 6.0);
        // four straight sides shortened by 2r each, plus a full circle
        let expect = 400.0 - 8.0 * 6.0 + 2.0 * PI * 6.0;
        assert!((r.length() - expect).abs() < 0.05, "{}", r.length());
        // the loop starts on the fillet of the first corner
        let arc = 18.0 * 2.0 * 6.0 * (2.5f64).to_radians().sin();
        let p = r.pose_at(arc + 44.0);
        assert!((p.x - 50.0).abs() < 1e-9 && p.y.abs() < 1e-9 && p.theta.abs() < 1e-9, "{p:?}");
        let q = r.pose_at(r.length() / 4.0 + 50.0);
        assert!((q.theta - PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn staircase_turns_everywhere() {
        let w = generate_world(0, &WorldParams::default()).unwrap();
        let c = RoutePlan::Staircase { i0: 0, j0: 0, steps: 3 }.corners(&w).unwrap();
        assert_eq!(c.len(), 12);
        let n = c.len();
        for i in 0..n {
            let (a, b, d) = (c[(i + n - 1) % n], c[i], c[(i + 1) % n]);
            let u1 = [b[0] as i64 - a[0] as i64, b[1] as i64 - a[1] as i64];
            let u2 = [d[0] as i64 - b[0] as i64, d[1] as i64 - b[1] as i64];
            assert_ne!(u1, u2, "straight at {b:?}");
        }
        assert!(RoutePlan::Staircase { i0: 1, j0: 1, steps: 3 }.corners(&w).is_err());
    }

    #[test]
    fn recording_is_deterministic() {
        let mut cfg = ScenarioConfig::preset("town", 3, 2, 1.0).unwrap();
        cfg.lidar.n_az = 90;
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.agents, b.agents);
        assert_eq!(a.agents[0].scans.len(), 6);
        assert!(ScenarioConfig::preset("nowhere", 0, 1, 1.0).is_err());
    }
}
