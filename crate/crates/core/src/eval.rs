//! Trajectory, intersection and object metrics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Aabb, Pose2};
use crate::scene_graph::{dbscan_min1, path_disfluency};
use crate::sim::RoadSegment;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub agent_id: u16,
    pub samples: Vec<(u64, Pose2)>,
}

impl Trajectory {
    pub fn new(agent_id: u16, samples: Vec<(u64, Pose2)>) -> Result<Self> {
        if samples.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Evaluation(format!("trajectory of agent {agent_id} is not strictly time-ordered")));
        }
        Ok(Self { agent_id, samples })
    }

    pub fn poses(&self) -> Vec<Pose2> {
        self.samples.iter().map(|s| s.1).collect()
    }

    /// Ground-truth sample nearest in time to `t`, if within `max_dt`.
    pub fn nearest(&self, t: u64, max_dt: u64) -> Option<Pose2> {
        let i = self.samples.partition_point(|(ts, _)| *ts < t);
        let mut best: Option<(u64, Pose2)> = None;
        for j in [i.wrapping_sub(1), i] {
            if let Some(&(ts, p)) = self.samples.get(j) {
                let dt = ts.abs_diff(t);
                if dt <= max_dt && best.is_none_or(|(b, _)| dt < b) {
                    best = Some((dt, p));
                }
            }
        }
        best.map(|(_, p)| p)
    }
}

/// Estimate/ground-truth pairs by nearest timestamp; unmatched estimates are dropped.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: u64) -> Vec<(Pose2, Pose2)> {
    let pairs: Vec<(Pose2, Pose2)> =
        est.samples.iter().filter_map(|&(t, p)| gt.nearest(t, max_dt).map(|g| (p, g))).collect();
    let dropped = est.samples.len() - pairs.len();
    if dropped > 0 {
        warn!("agent {}: {dropped} estimates without ground truth within {max_dt} us", est.agent_id);
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), count: values.len() })
    }
}

/// Planar position errors of matched pairs, without alignment.
pub fn ate_errors(est: &Trajectory, gt: &Trajectory, max_dt: u64) -> Vec<f64> {
    associate(est, gt, max_dt).iter().map(|(e, g)| e.planar_distance(g)).collect()
}

pub fn ate(est: &Trajectory, gt: &Trajectory, max_dt: u64) -> Result<MeanStd> {
    MeanStd::of(&ate_errors(est, gt, max_dt))
        .ok_or_else(|| Error::Evaluation(format!("agent {}: no estimate matches ground truth", est.agent_id)))
}

pub const DEFAULT_SEGMENTS: [f64; 4] = [50.0, 100.0, 150.0, 200.0];

/// Segment-averaged relative errors: (translation %, rotation deg/km).
pub fn relative_errors(est: &Trajectory, gt: &Trajectory, segment_lengths: &[f64], max_dt: u64) -> Result<(f64, f64)> {
    let pairs = associate(est, gt, max_dt);
    let mut dist = vec![0.0; pairs.len()];
    for i in 1..pairs.len() {
        dist[i] = dist[i - 1] + pairs[i].1.planar_distance(&pairs[i - 1].1);
    }
    let (mut et, mut er, mut n) = (0.0, 0.0, 0usize);
    for i in 0..pairs.len() {
        for &len in segment_lengths {
            let target = dist[i] + len;
            let j = dist.partition_point(|&d| d < target);
            if j >= pairs.len() {
                continue;
            }
            let d_gt = pairs[i].1.between(&pairs[j].1);
            let d_est = pairs[i].0.between(&pairs[j].0);
            let err = d_gt.between(&d_est);
            et += err.translation_norm() / len;
            er += normalize_angle(err.theta).abs().to_degrees() / (len / 1000.0);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Evaluation(format!(
            "agent {}: trajectory shorter than the shortest segment",
            est.agent_id
        )));
    }
    Ok((100.0 * et / n as f64, er / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceScope {
    All,
    Turned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionReference {
    pub positions: Vec<[f64; 2]>,
    pub scope: ReferenceScope,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn intersection_prf(est: &[[f64; 2]], reference: &IntersectionReference, r_match: f64) -> Prf {
    let refs = &reference.positions;
    if est.is_empty() || refs.is_empty() {
        return Prf::default();
    }
    let mut detected = vec![false; refs.len()];
    let mut correct = 0;
    for &e in est {
        let (k, d) = refs
            .iter()
            .enumerate()
            .map(|(k, &r)| (k, dist(e, r)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty reference");
        if d < r_match {
            correct += 1;
            detected[k] = true;
        }
    }
    let hits = detected.iter().filter(|&&d| d).count();
    Prf::new(correct as f64 / est.len() as f64, hits as f64 / refs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectScores {
    pub precision: f64,
    pub recall: f64,
    pub mean_iou: f64,
    pub matches: usize,
}

/// Greedy one-to-one box matching by descending IoU.
pub fn object_prf(est: &[(&str, Aabb)], gt: &[(&str, Aabb)], r_match: f64, class_strict: bool) -> ObjectScores {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (ce, be)) in est.iter().enumerate() {
        for (j, (cg, bg)) in gt.iter().enumerate() {
            if class_strict && ce != cg {
                continue;
            }
            if be.center().distance(&bg.center()) >= r_match {
                continue;
            }
            cand.push((be.iou(bg), i, j));
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_e, mut used_g) = (vec![false; est.len()], vec![false; gt.len()]);
    let (mut matches, mut iou_sum) = (0usize, 0.0);
    for (iou, i, j) in cand {
        if used_e[i] || used_g[j] {
            continue;
        }
        used_e[i] = true;
        used_g[j] = true;
        matches += 1;
        iou_sum += iou;
    }
    let ratio = |m: usize, n: usize| if n == 0 { 0.0 } else { m as f64 / n as f64 };
    ObjectScores {
        precision: ratio(matches, est.len()),
        recall: ratio(matches, gt.len()),
        mean_iou: if matches == 0 { 0.0 } else { iou_sum / matches as f64 },
        matches,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    /// Junction points closer than this are merged.
    pub d_merge: f64,
    /// A junction is kept if the route passes closer than this.
    pub route_dist: f64,
    pub r_assoc: f64,
    pub theta_turn_deg: f64,
    pub disfluency_window: usize,
    /// Arc-length spacing the route is resampled to before the turn test.
    pub route_spacing: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { d_merge: 15.0, route_dist: 12.0, r_assoc: 25.0, theta_turn_deg: 45.0, disfluency_window: 3, route_spacing: 2.0 }
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

fn resample(route: &[Pose2], spacing: f64) -> Vec<Pose2> {
    let mut out: Vec<Pose2> = Vec::new();
    for p in route {
        if out.last().is_none_or(|q| q.planar_distance(p) >= spacing) {
            out.push(*p);
        }
    }
    out
}

/// Reference intersections from named road segments and the driven routes.
pub fn reference_from_map(
    roads: &[RoadSegment],
    routes: &[Vec<Pose2>],
    scope: ReferenceScope,
    cfg: &ReferenceConfig,
) -> IntersectionReference {
    // endpoints meeting at the same point, with the names that meet there
    let mut ends: Vec<([f64; 2], Vec<&str>)> = Vec::new();
    for r in roads {
        let (Some(first), Some(last)) = (r.polyline.first(), r.polyline.last()) else { continue };
        for p in [*first, *last] {
            match ends.iter_mut().find(|(q, _)| dist(*q, p) < 1e-6) {
                Some((_, names)) => {
                    if !names.contains(&r.name.as_str()) {
                        names.push(&r.name);
                    }
                }
                None => ends.push((p, vec![&r.name])),
            }
        }
    }
    let mut junctions: Vec<[f64; 2]> = ends.into_iter().filter(|(_, n)| n.len() >= 2).map(|(p, _)| p).collect();
    junctions.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let merged: Vec<[f64; 2]> = dbscan_min1(&junctions, cfg.d_merge)
        .into_iter()
        .map(|m| {
            let n = m.len() as f64;
            let s = m.iter().fold([0.0, 0.0], |a, &i| [a[0] + junctions[i][0], a[1] + junctions[i][1]]);
            [s[0] / n, s[1] / n]
        })
        .collect();

    let route_distance = |p: [f64; 2]| {
        routes
            .iter()
            .flat_map(|r| {
                r.windows(2).map(move |w| point_segment_distance(p, [w[0].x, w[0].y], [w[1].x, w[1].y])).chain(
                    r.first().filter(|_| r.len() == 1).map(|q| dist(p, [q.x, q.y])),
                )
            })
            .fold(f64::INFINITY, f64::min)
    };
    let theta = cfg.theta_turn_deg.to_radians();
    let turn_points: Vec<[f64; 2]> = routes
        .iter()
        .flat_map(|r| {
            let s = resample(r, cfg.route_spacing);
            let d = path_disfluency(&s, cfg.disfluency_window);
            s.into_iter().zip(d).filter(|(_, d)| *d > theta).map(|(p, _)| [p.x, p.y]).collect::<Vec<_>>()
        })
        .collect();

    let positions = merged
        .into_iter()
        .filter(|&p| route_distance(p) < cfg.route_dist)
        .filter(|&p| scope == ReferenceScope::All || turn_points.iter().any(|&t| dist(p, t) <= cfg.r_assoc))
        .collect();
    IntersectionReference { positions, scope }
}
