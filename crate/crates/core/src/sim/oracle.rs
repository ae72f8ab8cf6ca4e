//! Detection oracle: turns labelled scan hits into noisy object observations.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lidar::{HitTarget, LabeledScan};
use super::world::World;
use crate::geometry::{normalize_angle, Point3, PointCloud};
use crate::observation::{ObjectObservation, ObservationKind};

pub const VOCABULARY: [&str; 8] = [
    "traffic light",
    "traffic sign",
    "pole",
    "car",
    "bus",
    "pedestrian",
    "bicycle",
    "mailbox",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Objects whose closest hit is farther than this are not reported.
    pub r_detect: f64,
    pub min_points: usize,
    /// Expected contaminant points per true point.
    pub rho_fp: f64,
    /// Azimuth margin (degrees) around the object where bleed points come from.
    pub contam_window_deg: f64,
    /// Minimum range difference between a contaminant and the object's median range.
    pub contam_min_offset: f64,
    pub p_miss: f64,
    pub p_cls: f64,
    pub p_sw: f64,
    pub sensor_height: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            r_detect: 40.0,
            min_points: 5,
            rho_fp: 0.0,
            contam_window_deg: 2.0,
            contam_min_offset: 0.0,
            p_miss: 0.0,
            p_cls: 0.0,
            p_sw: 0.0,
            sensor_height: 1.8,
        }
    }
}

impl OracleConfig {
    pub fn noiseless() -> Self {
        Self::default()
    }
}

/// Per-agent instance-id bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct OracleState {
    next_id: i64,
    ids: BTreeMap<u32, i64>,
}

impl OracleState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// An observation plus the ground truth behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleDetection {
    pub obs: ObjectObservation,
    pub target: HitTarget,
    /// The first `n_true` points are genuine object hits; the rest are bleed.
    pub n_true: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[allow(clippy::too_many_arguments)]
pub fn oracle_detect(
    state: &mut OracleState,
    scan: &LabeledScan,
    world: &World,
    agent_id: u16,
    keyframe_id: u32,
    timestamp_us: u64,
    cfg: &OracleConfig,
    rng: &mut impl Rng,
) -> Vec<OracleDetection> {
    let mut groups: BTreeMap<HitTarget, Vec<usize>> = BTreeMap::new();
    for (i, l) in scan.labels.iter().enumerate() {
        if matches!(l, HitTarget::Static(_) | HitTarget::Actor(_)) {
            groups.entry(*l).or_default().push(i);
        }
    }
    let pts = &scan.cloud.points;
    let viewpoint = Point3::new(0.0, 0.0, cfg.sensor_height);
    let mut out = Vec::new();
    for (target, members) in groups {
        if members.len() < cfg.min_points {
            continue;
        }
        let closest = members.iter().map(|&i| pts[i].x.hypot(pts[i].y)).fold(f64::INFINITY, f64::min);
        if closest > cfg.r_detect {
            continue;
        }
        let (true_class, kind, actor) = match target {
            HitTarget::Static(k) => (world.static_objects[k as usize].class_label.clone(), ObservationKind::Static, None),
            HitTarget::Actor(k) => (world.dynamic_actors[k as usize].class_label.clone(), ObservationKind::Dynamic, Some(k)),
            _ => unreachable!("only objects are grouped"),
        };

        // draws happen in a fixed order so every config consumes the stream alike
        let missed = rng.random::<f64>() < cfg.p_miss;
        let wrong_class = rng.random::<f64>() < cfg.p_cls;
        let alt_class = rng.random_range(0..VOCABULARY.len() - 1);
        let switched = rng.random::<f64>() < cfg.p_sw;

        let instance_id = actor.map(|k| {
            let fresh = |st: &mut OracleState| {
                let id = st.next_id;
                st.next_id += 1;
                id
            };
            let id = match state.ids.get(&k) {
                Some(&id) if !switched => id,
                _ => fresh(state),
            };
            state.ids.insert(k, id);
            id
        });

        let mut points: Vec<Point3> = members.iter().map(|&i| pts[i]).collect();
        let n_true = points.len();
        if cfg.rho_fp > 0.0 {
            let az = |p: &Point3| p.y.atan2(p.x);
            let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + az(p).cos(), b + az(p).sin()));
            let centre = sy.atan2(sx);
            let half = points.iter().map(|p| normalize_angle(az(p) - centre).abs()).fold(0.0, f64::max)
                + cfg.contam_window_deg.to_radians();
            let med = median(points.iter().map(|p| p.distance(&viewpoint)).collect());
            let candidates: Vec<usize> = (0..pts.len())
                .filter(|&i| scan.labels[i] != target)
                .filter(|&i| normalize_angle(az(&pts[i]) - centre).abs() <= half.min(PI))
                .filter(|&i| (pts[i].distance(&viewpoint) - med).abs() >= cfg.contam_min_offset)
                .collect();
            let wanted = (0..n_true).filter(|_| rng.random::<f64>() < cfg.rho_fp).count();
            let take = wanted.min(candidates.len());
            if take > 0 {
                let mut picked: Vec<usize> = sample(rng, candidates.len(), take).into_iter().collect();
                picked.sort_unstable();
                points.extend(picked.into_iter().map(|j| pts[candidates[j]]));
            }
        }
        if missed {
            continue;
        }
        let class_label = if wrong_class {
            let others: Vec<&str> = VOCABULARY.iter().copied().filter(|c| *c != true_class).collect();
            others[alt_class % others.len()].to_string()
        } else {
            true_class
        };
        let obs = ObjectObservation::new(
            agent_id,
            keyframe_id,
            timestamp_us,
            class_label,
            kind,
            instance_id,
            PointCloud::new(points, scan.cloud.frame),
        )
        .expect("groups are non-empty and actors carry ids");
        out.push(OracleDetection { obs, target, n_true });
    }
    out
}
