//! Five-layer scene graph: root, regions (intersections and roads), fused
//! static objects, dynamic tracks, and a reference to the map revision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Aabb, Frame, Point3, PointCloud, Pose2};
use crate::observation::{ObjectObservation, ObservationKind};
use crate::pose_graph::{NodeId, PoseGraph};
use crate::server::MapUpdate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGraphConfig {
    pub tau_ov: f64,
    pub tau_upd: f64,
    pub track_gap: f64,
    pub moving_threshold: f64,
    pub disfluency_window: usize,
    pub theta_turn_deg: f64,
    pub eps_int: f64,
    pub r_assoc: f64,
}

impl Default for SceneGraphConfig {
    fn default() -> Self {
        Self {
            tau_ov: 0.3,
            tau_upd: 0.5,
            track_gap: 30.0,
            moving_threshold: 8.0,
            disfluency_window: 3,
            theta_turn_deg: 45.0,
            eps_int: 15.0,
            r_assoc: 25.0,
        }
    }
}

/// Source of current world poses for keyframe nodes.
pub trait PoseLookup {
    fn pose_of(&self, node: NodeId) -> Option<Pose2>;
}

impl PoseLookup for PoseGraph {
    fn pose_of(&self, node: NodeId) -> Option<Pose2> {
        self.pose(node)
    }
}

impl PoseLookup for [Pose2] {
    fn pose_of(&self, node: NodeId) -> Option<Pose2> {
        self.get(node.0 as usize).copied()
    }
}

impl PoseLookup for Vec<Pose2> {
    fn pose_of(&self, node: NodeId) -> Option<Pose2> {
        self.as_slice().pose_of(node)
    }
}

impl PoseLookup for BTreeMap<NodeId, Pose2> {
    fn pose_of(&self, node: NodeId) -> Option<Pose2> {
        self.get(&node).copied()
    }
}

/// Canonical ordering key of an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObsKey {
    pub timestamp_us: u64,
    pub agent_id: u16,
    pub keyframe_id: u32,
    pub seq: u32,
}

#[derive(Debug, Clone)]
struct Contribution {
    key: ObsKey,
    node: NodeId,
    obs: ObjectObservation,
    applied: Pose2,
    world: Vec<Point3>,
    aabb: Aabb,
}

impl Contribution {
    fn new(key: ObsKey, node: NodeId, obs: ObjectObservation, pose: Pose2) -> Self {
        let mut c = Self { key, node, obs, applied: pose, world: Vec::new(), aabb: Aabb::new(Point3::default(), Point3::default()) };
        c.apply(pose);
        c
    }

    fn apply(&mut self, pose: Pose2) {
        self.applied = pose;
        self.world = self.obs.points().points.iter().map(|p| pose.transform_point(p)).collect();
        self.aabb = Aabb::from_points(&self.world).expect("observations are non-empty");
    }

    fn world_centroid(&self) -> Point3 {
        self.applied.transform_point(&self.obs.centroid())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionRef {
    Root,
    Intersection(u32),
    Road(u32),
}

impl RegionRef {
    pub fn token(&self) -> String {
        match self {
            RegionRef::Root => "root".into(),
            RegionRef::Intersection(i) => format!("intersection:{i}"),
            RegionRef::Road(i) => format!("road:{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticObjectNode {
    pub object_id: u64,
    pub class_label: String,
    /// Observation keys and the pose-graph nodes they were seen from.
    pub contributing: Vec<(ObsKey, NodeId)>,
    pub world_points: PointCloud,
    pub world_aabb: Aabb,
    pub observer_agents: BTreeSet<u16>,
    pub region: RegionRef,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub timestamp_us: u64,
    pub position: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackNode {
    pub track_id: u64,
    pub agent_id: u16,
    pub instance_id: i64,
    pub class_label: String,
    pub samples: Vec<TrackSample>,
    pub moving: bool,
    pub region: RegionRef,
    keys: Vec<ObsKey>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntersectionNode {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadEdge {
    pub id: u32,
    pub a: u32,
    pub b: u32,
    pub polyline: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateReport {
    pub triggered: bool,
    pub retransformed: usize,
    pub merges: usize,
    pub splits: usize,
}

/// Working cluster used by association, split and merge.
#[derive(Debug, Clone)]
struct Group {
    class: String,
    members: Vec<usize>,
    aabb: Aabb,
}

#[derive(Debug, Clone)]
pub struct SceneGraph {
    cfg: SceneGraphConfig,
    revision: u64,
    statics: Vec<Contribution>,
    dynamics: Vec<Contribution>,
    objects: Vec<(u64, Group)>,
    tracks: Vec<TrackNode>,
    open_tracks: BTreeMap<(u16, i64), usize>,
    intersections: Vec<IntersectionNode>,
    roads: Vec<RoadEdge>,
    next_object: u64,
    next_track: u64,
    track_hints: BTreeMap<ObsKey, u64>,
    latest: Option<ObsKey>,
    /// Something arrived out of canonical order since the last re-association.
    unordered: bool,
}

impl SceneGraph {
    pub fn new(cfg: SceneGraphConfig) -> Self {
        Self {
            cfg,
            revision: 0,
            statics: Vec::new(),
            dynamics: Vec::new(),
            objects: Vec::new(),
            tracks: Vec::new(),
            open_tracks: BTreeMap::new(),
            intersections: Vec::new(),
            roads: Vec::new(),
            next_object: 0,
            next_track: 0,
            track_hints: BTreeMap::new(),
            latest: None,
            unordered: false,
        }
    }

    pub fn config(&self) -> &SceneGraphConfig {
        &self.cfg
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn intersections(&self) -> &[IntersectionNode] {
        &self.intersections
    }

    pub fn roads(&self) -> &[RoadEdge] {
        &self.roads
    }

    pub fn tracks(&self) -> &[TrackNode] {
        &self.tracks
    }

    /// Static object nodes ordered by id.
    pub fn static_objects(&self) -> Vec<StaticObjectNode> {
        self.objects.iter().map(|(id, g)| self.materialize(*id, g)).collect()
    }

    pub fn static_count(&self) -> usize {
        self.objects.len()
    }

    fn materialize(&self, id: u64, g: &Group) -> StaticObjectNode {
        let mut members = g.members.clone();
        members.sort_by_key(|&i| self.statics[i].key);
        let mut pts = Vec::new();
        let mut agents = BTreeSet::new();
        for &i in &members {
            pts.extend_from_slice(&self.statics[i].world);
            agents.insert(self.statics[i].key.agent_id);
        }
        StaticObjectNode {
            object_id: id,
            class_label: g.class.clone(),
            contributing: members.iter().map(|&i| (self.statics[i].key, self.statics[i].node)).collect(),
            world_points: PointCloud::new(pts, Frame::World),
            world_aabb: g.aabb,
            observer_agents: agents,
            region: self.region_of(&g.aabb.center()),
        }
    }

    /// Adds a static observation seen from `node` and returns the id of the
    /// object it ends up in.
    pub fn fuse_static_observation(
        &mut self,
        obs: &ObjectObservation,
        seq: u32,
        node: NodeId,
        poses: &(impl PoseLookup + ?Sized),
    ) -> Result<u64> {
        if obs.kind != ObservationKind::Static {
            return Err(Error::Parameter("fuse_static_observation needs a static observation".into()));
        }
        let pose = poses.pose_of(node).ok_or(Error::Stale(node.0))?;
        let key = obs_key(obs, seq);
        self.note_key(key);
        let c = Contribution::new(key, node, obs.clone(), pose);
        let idx = self.statics.len();
        let aabb = c.aabb;
        self.statics.push(c);

        let k = match best_group(self.objects.iter().map(|(_, g)| g), &obs.class_label, &aabb, self.cfg.tau_ov) {
            Some(k) => {
                let g = &mut self.objects[k].1;
                g.members.push(idx);
                g.aabb = g.aabb.union(&aabb);
                k
            }
            None => {
                let id = self.next_object;
                self.next_object += 1;
                self.objects.push((id, Group { class: obs.class_label.clone(), members: vec![idx], aabb }));
                self.objects.len() - 1
            }
        };
        let k = merge_from(&mut self.objects, k, self.cfg.tau_ov).0;
        Ok(self.objects[k].0)
    }

    /// Appends a dynamic observation to its (agent, instance) track.
    pub fn ingest_dynamic_observation(
        &mut self,
        obs: &ObjectObservation,
        seq: u32,
        node: NodeId,
        poses: &(impl PoseLookup + ?Sized),
    ) -> Result<u64> {
        let Some(instance) = obs.instance_id.filter(|_| obs.kind == ObservationKind::Dynamic) else {
            return Err(Error::Parameter("dynamic observation without instance id".into()));
        };
        let pose = poses.pose_of(node).ok_or(Error::Stale(node.0))?;
        let key = obs_key(obs, seq);
        self.note_key(key);
        let c = Contribution::new(key, node, obs.clone(), pose);
        let idx = self.dynamics.len();
        self.dynamics.push(c);
        Ok(self.append_track_sample(idx, instance))
    }

    fn append_track_sample(&mut self, idx: usize, instance: i64) -> u64 {
        let c = &self.dynamics[idx];
        let pos = c.world_centroid();
        let sample = TrackSample { timestamp_us: c.key.timestamp_us, position: pos };
        let key = (c.key.agent_id, instance);
        if let Some(&t) = self.open_tracks.get(&key) {
            let tr = &mut self.tracks[t];
            let last = *tr.samples.last().expect("tracks are never empty");
            if sample.timestamp_us <= last.timestamp_us {
                return tr.track_id;
            }
            let gap = planar(&last.position, &pos);
            if gap <= self.cfg.track_gap {
                tr.samples.push(sample);
                tr.keys.push(c.key);
                tr.moving = planar(&tr.samples[0].position, &pos) > self.cfg.moving_threshold || tr.moving;
                return tr.track_id;
            }
        }
        let id = match self.track_hints.get(&c.key) {
            Some(&id) => id,
            None => {
                self.next_track += 1;
                self.next_track - 1
            }
        };
        let region = self.region_of(&pos);
        self.tracks.push(TrackNode {
            track_id: id,
            agent_id: c.key.agent_id,
            instance_id: instance,
            class_label: c.obs.class_label.clone(),
            samples: vec![sample],
            moving: false,
            region,
            keys: vec![c.key],
        });
        self.open_tracks.insert(key, self.tracks.len() - 1);
        id
    }

    /// Largest planar movement of any contributing node since its
    /// observations were last transformed.
    pub fn stale_drift(&self, poses: &(impl PoseLookup + ?Sized)) -> f64 {
        self.statics
            .iter()
            .chain(&self.dynamics)
            .filter_map(|c| poses.pose_of(c.node).map(|p| p.planar_distance(&c.applied)))
            .fold(0.0, f64::max)
    }

    /// Re-transforms observations after a large pose change, splitting
    /// objects whose contributors no longer associate and merging objects
    /// that now overlap.
    pub fn on_map_update(&mut self, update: &MapUpdate, poses: &(impl PoseLookup + ?Sized)) -> UpdateReport {
        self.revision = self.revision.max(update.revision);
        let mut report = UpdateReport::default();
        let drift = update.max_pose_delta.max(self.stale_drift(poses));
        if drift < self.cfg.tau_upd {
            return report;
        }
        report.triggered = true;
        for c in self.statics.iter_mut().chain(self.dynamics.iter_mut()) {
            if let Some(p) = poses.pose_of(c.node) {
                if p != c.applied {
                    c.apply(p);
                    report.retransformed += 1;
                }
            }
        }

        let (merges, splits) = self.reassociate();
        report.merges = merges;
        report.splits = splits;
        self.rebuild_tracks();
        report
    }

    fn note_key(&mut self, key: ObsKey) {
        if self.latest.is_some_and(|l| key < l) {
            self.unordered = true;
        }
        self.latest = self.latest.max(Some(key));
    }

    /// Re-transforms anything stale and re-associates, even below the
    /// update threshold or when observations arrived out of canonical order.
    /// Used once the final poses are known.
    pub fn refresh(&mut self, poses: &(impl PoseLookup + ?Sized)) -> UpdateReport {
        let mut report = UpdateReport::default();
        if self.stale_drift(poses) == 0.0 && !self.unordered {
            return report;
        }
        report.triggered = true;
        for c in self.statics.iter_mut().chain(self.dynamics.iter_mut()) {
            if let Some(p) = poses.pose_of(c.node) {
                if p != c.applied {
                    c.apply(p);
                    report.retransformed += 1;
                }
            }
        }
        let (merges, splits) = self.reassociate();
        report.merges = merges;
        report.splits = splits;
        self.rebuild_tracks();
        report
    }

    /// Recomputes static membership in canonical order. A new object takes
    /// the id of the object that held its earliest contributor unless an
    /// earlier object already claimed it. Returns (merges, splits).
    fn reassociate(&mut self) -> (usize, usize) {
        let mut old_of = vec![u64::MAX; self.statics.len()];
        for (id, g) in &self.objects {
            for &i in &g.members {
                old_of[i] = *id;
            }
        }
        let groups = associate(&self.statics, self.cfg.tau_ov);
        let earliest = |g: &Group| g.members.iter().map(|&i| self.statics[i].key).min().expect("groups are non-empty");
        let mut by_age: Vec<usize> = (0..groups.len()).collect();
        by_age.sort_by_key(|&k| earliest(&groups[k]));
        let mut ids = vec![0u64; groups.len()];
        let mut claimed = BTreeSet::new();
        for k in by_age {
            let first = groups[k].members.iter().min_by_key(|&&i| self.statics[i].key).copied().expect("non-empty");
            let want = old_of[first];
            ids[k] = if want != u64::MAX && claimed.insert(want) {
                want
            } else {
                self.next_object += 1;
                self.next_object - 1
            };
        }
        let mut merges = 0;
        let mut parts: BTreeMap<u64, usize> = BTreeMap::new();
        for g in &groups {
            let olds: BTreeSet<u64> = g.members.iter().map(|&i| old_of[i]).filter(|&o| o != u64::MAX).collect();
            merges += olds.len().saturating_sub(1);
            for o in olds {
                *parts.entry(o).or_default() += 1;
            }
        }
        let splits = parts.values().map(|n| n - 1).sum();
        self.objects = ids.into_iter().zip(groups).collect();
        self.unordered = false;
        (merges, splits)
    }

    fn rebuild_tracks(&mut self) {
        self.track_hints = self.tracks.iter().map(|t| (t.keys[0], t.track_id)).collect();
        self.tracks.clear();
        self.open_tracks.clear();
        let mut order: Vec<usize> = (0..self.dynamics.len()).collect();
        order.sort_by_key(|&i| self.dynamics[i].key);
        for i in order {
            let inst = self.dynamics[i].obs.instance_id.expect("dynamic contributions carry ids");
            self.append_track_sample(i, inst);
        }
        self.track_hints.clear();
        self.tracks.sort_by_key(|t| t.track_id);
        self.open_tracks = self
            .tracks
            .iter()
            .enumerate()
            .map(|(i, t)| ((t.agent_id, t.instance_id), i, t.keys[t.keys.len() - 1]))
            .fold(BTreeMap::new(), |mut m: BTreeMap<(u16, i64), (usize, ObsKey)>, (k, i, last)| {
                if m.get(&k).is_none_or(|(_, l)| *l < last) {
                    m.insert(k, (i, last));
                }
                m
            })
            .into_iter()
            .map(|(k, (i, _))| (k, i))
            .collect();
    }

    /// Static objects produced by replaying every static observation in
    /// canonical order against the current transforms.
    pub fn replay_static(&self) -> Vec<(String, Vec<ObsKey>)> {
        canonical(&self.statics, associate(&self.statics, self.cfg.tau_ov))
    }

    /// The live static layer in the same canonical form as [`replay_static`].
    ///
    /// [`replay_static`]: SceneGraph::replay_static
    pub fn static_partition(&self) -> Vec<(String, Vec<ObsKey>)> {
        canonical(&self.statics, self.objects.iter().map(|(_, g)| g.clone()).collect())
    }

    /// Rebuilds the region layer from per-agent keyframe trajectories.
    pub fn rebuild_regions(&mut self, trajectories: &[Vec<Pose2>]) {
        self.intersections = detect_intersections(trajectories, &self.cfg);
        self.roads = build_road_edges(trajectories, &self.intersections, &self.cfg);
        let regions: Vec<RegionRef> = self.tracks.iter().map(|t| self.region_of(&t.samples[0].position)).collect();
        for (t, r) in self.tracks.iter_mut().zip(regions) {
            t.region = r;
        }
    }

    /// Nearest intersection within `r_assoc`, else the nearest road, else the root.
    pub fn region_of(&self, p: &Point3) -> RegionRef {
        let q = [p.x, p.y];
        let near_int = self
            .intersections
            .iter()
            .map(|n| (dist2(q, [n.x, n.y]).sqrt(), n.id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((d, id)) = near_int {
            if d <= self.cfg.r_assoc {
                return RegionRef::Intersection(id);
            }
        }
        let near_road = self
            .roads
            .iter()
            .map(|r| (polyline_distance(q, &r.polyline), r.id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        match (near_road, near_int) {
            (Some((_, id)), _) => RegionRef::Road(id),
            (None, Some((_, id))) => RegionRef::Intersection(id),
            (None, None) => RegionRef::Root,
        }
    }

    pub fn set_revision(&mut self, revision: u64) {
        self.revision = revision;
    }

    /// Export content with coordinates rounded to the exported precision.
    pub fn document(&self) -> SceneGraphDocument {
        let r = |v: f64| round6(v);
        let p3 = |p: &Point3| [r(p.x), r(p.y), r(p.z)];
        SceneGraphDocument {
            revision: self.revision,
            root: RootDoc { id: "root".into(), label: "environment".into() },
            intersections: self.intersections.iter().map(|n| IntersectionDoc { id: n.id, x: r(n.x), y: r(n.y) }).collect(),
            roads: self
                .roads
                .iter()
                .map(|e| RoadDoc { id: e.id, a: e.a, b: e.b, polyline: e.polyline.iter().map(|p| [r(p[0]), r(p[1])]).collect() })
                .collect(),
            static_objects: self
                .static_objects()
                .into_iter()
                .map(|o| StaticObjectDoc {
                    id: o.object_id,
                    class: o.class_label,
                    aabb: AabbDoc { min: p3(&o.world_aabb.min), max: p3(&o.world_aabb.max) },
                    region: o.region.token(),
                    observers: o.observer_agents.into_iter().collect(),
                })
                .collect(),
            tracks: {
                let mut t: Vec<&TrackNode> = self.tracks.iter().collect();
                t.sort_by_key(|t| t.track_id);
                t.into_iter()
                    .map(|t| TrackDoc {
                        id: t.track_id,
                        agent: t.agent_id,
                        instance: t.instance_id,
                        class: t.class_label.clone(),
                        moving: t.moving,
                        region: t.region.token(),
                        samples: t
                            .samples
                            .iter()
                            .map(|s| SampleDoc { t_us: s.timestamp_us, x: r(s.position.x), y: r(s.position.y), z: r(s.position.z) })
                            .collect(),
                    })
                    .collect()
            },
        }
    }

    pub fn export_json(&self) -> String {
        self.document().to_json()
    }
}

fn obs_key(obs: &ObjectObservation, seq: u32) -> ObsKey {
    ObsKey { timestamp_us: obs.timestamp_us, agent_id: obs.agent_id, keyframe_id: obs.keyframe_id, seq }
}

fn planar(a: &Point3, b: &Point3) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

fn best_group<'a>(groups: impl Iterator<Item = &'a Group>, class: &str, aabb: &Aabb, tau: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in groups.enumerate() {
        if g.class != class {
            continue;
        }
        let r = g.aabb.overlap_ratio(aabb);
        if r >= tau && best.is_none_or(|(_, b)| r > b) {
            best = Some((k, r));
        }
    }
    best.map(|(k, _)| k)
}

/// Sequential association of every static contribution in canonical order,
/// with the same merge rule as live fusion.
fn associate(statics: &[Contribution], tau: f64) -> Vec<Group> {
    let mut order: Vec<usize> = (0..statics.len()).collect();
    order.sort_by_key(|&i| statics[i].key);
    let mut groups: Vec<(u64, Group)> = Vec::new();
    for i in order {
        let c = &statics[i];
        let k = match best_group(groups.iter().map(|(_, g)| g), &c.obs.class_label, &c.aabb, tau) {
            Some(k) => {
                groups[k].1.members.push(i);
                groups[k].1.aabb = groups[k].1.aabb.union(&c.aabb);
                k
            }
            None => {
                groups.push((groups.len() as u64, Group { class: c.obs.class_label.clone(), members: vec![i], aabb: c.aabb }));
                groups.len() - 1
            }
        };
        merge_from(&mut groups, k, tau);
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Merges group `k` with same-class groups its box overlaps by at least
/// `tau`, lowest position first, until none do. The merged group sits at the
/// lower position and keeps the lower id. Returns its final position and the
/// (kept, absorbed) id pairs.
///
/// When no other pair overlaps beforehand this is the global fixpoint.
fn merge_from(groups: &mut Vec<(u64, Group)>, mut k: usize, tau: f64) -> (usize, Vec<(u64, u64)>) {
    let mut merged = Vec::new();
    loop {
        let hit = (0..groups.len()).find(|&m| {
            m != k && groups[m].1.class == groups[k].1.class && groups[m].1.aabb.overlap_ratio(&groups[k].1.aabb) >= tau
        });
        let Some(m) = hit else { break };
        let (lo, hi) = (m.min(k), m.max(k));
        let (gone_id, gone) = groups.remove(hi);
        let keep = &mut groups[lo];
        keep.1.members.extend(gone.members);
        keep.1.aabb = keep.1.aabb.union(&gone.aabb);
        let (a, b) = (keep.0.min(gone_id), keep.0.max(gone_id));
        keep.0 = a;
        merged.push((a, b));
        k = lo;
    }
    (k, merged)
}

fn canonical(statics: &[Contribution], groups: Vec<Group>) -> Vec<(String, Vec<ObsKey>)> {
    let mut out: Vec<(String, Vec<ObsKey>)> = groups
        .into_iter()
        .map(|g| {
            let mut keys: Vec<ObsKey> = g.members.iter().map(|&i| statics[i].key).collect();
            keys.sort();
            (g.class, keys)
        })
        .collect();
    out.sort_by(|a, b| a.1.cmp(&b.1));
    out
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn polyline_distance(q: [f64; 2], line: &[[f64; 2]]) -> f64 {
    match line.len() {
        0 => f64::INFINITY,
        1 => dist2(q, line[0]).sqrt(),
        _ => line
            .windows(2)
            .map(|w| {
                let (a, b) = (w[0], w[1]);
                let ab = [b[0] - a[0], b[1] - a[1]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                let t = if len2 > 0.0 { (((q[0] - a[0]) * ab[0] + (q[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
                dist2(q, [a[0] + t * ab[0], a[1] + t * ab[1]]).sqrt()
            })
            .fold(f64::INFINITY, f64::min),
    }
}

/// Heading change magnitude over a window of `w` keyframes on each side.
/// Entry `i` belongs to keyframe `i`; entries without a full window are zero.
pub fn path_disfluency(traj: &[Pose2], w: usize) -> Vec<f64> {
    let n = traj.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    let mut headings: Vec<f64> = Vec::with_capacity(n - 1);
    for j in 0..n - 1 {
        let (dx, dy) = (traj[j + 1].x - traj[j].x, traj[j + 1].y - traj[j].y);
        let h = if dx == 0.0 && dy == 0.0 { headings.last().copied().unwrap_or(traj[j].theta) } else { dy.atan2(dx) };
        headings.push(h);
    }
    for (i, o) in out.iter_mut().enumerate() {
        if i >= w && i + w < n - 1 {
            *o = normalize_angle(headings[i + w] - headings[i - w]).abs();
        }
    }
    out
}

/// Single-link clusters of points under `eps` (DBSCAN with minPts = 1).
pub fn dbscan_min1(points: &[[f64; 2]], eps: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut label = vec![usize::MAX; n];
    let mut clusters = Vec::new();
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let c = clusters.len();
        let mut members = vec![s];
        label[s] = c;
        let mut k = 0;
        while k < members.len() {
            let p = points[members[k]];
            for j in 0..n {
                if label[j] == usize::MAX && dist2(p, points[j]) <= eps * eps {
                    label[j] = c;
                    members.push(j);
                }
            }
            k += 1;
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters
}

pub fn detect_intersections(trajectories: &[Vec<Pose2>], cfg: &SceneGraphConfig) -> Vec<IntersectionNode> {
    let theta = cfg.theta_turn_deg.to_radians();
    let mut turns: Vec<[f64; 2]> = Vec::new();
    for traj in trajectories {
        if traj.len() < 2 {
            continue;
        }
        for (i, d) in path_disfluency(traj, cfg.disfluency_window).into_iter().enumerate() {
            if d > theta {
                turns.push([traj[i].x, traj[i].y]);
            }
        }
    }
    // canonical point order keeps the result independent of agent order
    turns.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut centres: Vec<[f64; 2]> = dbscan_min1(&turns, cfg.eps_int)
        .into_iter()
        .map(|m| {
            let n = m.len() as f64;
            let (sx, sy) = m.iter().fold((0.0, 0.0), |a, &i| (a.0 + turns[i][0], a.1 + turns[i][1]));
            [sx / n, sy / n]
        })
        .collect();
    centres.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    centres.into_iter().enumerate().map(|(i, c)| IntersectionNode { id: i as u32, x: c[0], y: c[1] }).collect()
}

pub fn build_road_edges(trajectories: &[Vec<Pose2>], intersections: &[IntersectionNode], cfg: &SceneGraphConfig) -> Vec<RoadEdge> {
    let r2 = cfg.r_assoc * cfg.r_assoc;
    let inside = |p: [f64; 2]| {
        intersections
            .iter()
            .map(|n| (dist2(p, [n.x, n.y]), n.id))
            .filter(|(d, _)| *d <= r2)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    };
    let mut edges: Vec<RoadEdge> = Vec::new();
    let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
    for traj in trajectories {
        let mut last: Option<u32> = None;
        let mut current: Option<u32> = None;
        let mut line: Vec<[f64; 2]> = Vec::new();
        for p in traj {
            let q = [p.x, p.y];
            let here = inside(q);
            if let Some(k) = here.filter(|_| here != current) {
                if let Some(a) = last.filter(|&a| a != k) {
                    let pair = (a.min(k), a.max(k));
                    if seen.insert(pair) {
                        line.push(q);
                        edges.push(RoadEdge { id: edges.len() as u32, a: pair.0, b: pair.1, polyline: std::mem::take(&mut line) });
                    }
                }
                last = Some(k);
                line.clear();
            }
            if here.is_none() || line.is_empty() {
                line.push(q);
            }
            current = here;
        }
    }
    edges
}

/// Serialized form of the scene graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphDocument {
    pub revision: u64,
    pub root: RootDoc,
    pub intersections: Vec<IntersectionDoc>,
    pub roads: Vec<RoadDoc>,
    pub static_objects: Vec<StaticObjectDoc>,
    pub tracks: Vec<TrackDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootDoc {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionDoc {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadDoc {
    pub id: u32,
    pub a: u32,
    pub b: u32,
    pub polyline: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AabbDoc {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticObjectDoc {
    pub id: u64,
    pub class: String,
    pub aabb: AabbDoc,
    pub region: String,
    pub observers: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDoc {
    pub t_us: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackDoc {
    pub id: u64,
    pub agent: u16,
    pub instance: i64,
    pub class: String,
    pub moving: bool,
    pub region: String,
    pub samples: Vec<SampleDoc>,
}

fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

fn num(out: &mut String, v: f64) {
    let v = if v == 0.0 { 0.0 } else { v };
    let _ = write!(out, "{v:.6}");
}

fn text(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings serialize"));
}

impl SceneGraphDocument {
    /// Compact JSON, one array element per line, fixed key order and six
    /// decimals for coordinates.
    pub fn to_json(&self) -> String {
        let mut o = String::new();
        let _ = write!(o, "{{\n\"revision\": {},\n\"root\": {{\"id\": ", self.revision);
        text(&mut o, &self.root.id);
        o.push_str(", \"label\": ");
        text(&mut o, &self.root.label);
        o.push_str("},\n\"intersections\": [");
        for (k, n) in self.intersections.iter().enumerate() {
            o.push_str(if k == 0 { "\n  " } else { ",\n  " });
            let _ = write!(o, "{{\"id\": {}, \"x\": ", n.id);
            num(&mut o, n.x);
            o.push_str(", \"y\": ");
            num(&mut o, n.y);
            o.push('}');
        }
        o.push_str("\n],\n\"roads\": [");
        for (k, r) in self.roads.iter().enumerate() {
            o.push_str(if k == 0 { "\n  " } else { ",\n  " });
            let _ = write!(o, "{{\"id\": {}, \"a\": {}, \"b\": {}, \"polyline\": [", r.id, r.a, r.b);
            for (i, p) in r.polyline.iter().enumerate() {
                if i > 0 {
                    o.push_str(", ");
                }
                o.push('[');
                num(&mut o, p[0]);
                o.push_str(", ");
                num(&mut o, p[1]);
                o.push(']');
            }
            o.push_str("]}");
        }
        o.push_str("\n],\n\"static_objects\": [");
        for (k, s) in self.static_objects.iter().enumerate() {
            o.push_str(if k == 0 { "\n  " } else { ",\n  " });
            let _ = write!(o, "{{\"id\": {}, \"class\": ", s.id);
            text(&mut o, &s.class);
            o.push_str(", \"aabb\": {\"min\": [");
            for (i, v) in s.aabb.min.iter().enumerate() {
                if i > 0 {
                    o.push_str(", ");
                }
                num(&mut o, *v);
            }
            o.push_str("], \"max\": [");
            for (i, v) in s.aabb.max.iter().enumerate() {
                if i > 0 {
                    o.push_str(", ");
                }
                num(&mut o, *v);
            }
            o.push_str("]}, \"region\": ");
            text(&mut o, &s.region);
            o.push_str(", \"observers\": [");
            let obs: Vec<String> = s.observers.iter().map(|a| a.to_string()).collect();
            o.push_str(&obs.join(", "));
            o.push_str("]}");
        }
        o.push_str("\n],\n\"tracks\": [");
        for (k, t) in self.tracks.iter().enumerate() {
            o.push_str(if k == 0 { "\n  " } else { ",\n  " });
            let _ = write!(o, "{{\"id\": {}, \"agent\": {}, \"instance\": {}, \"class\": ", t.id, t.agent, t.instance);
            text(&mut o, &t.class);
            let _ = write!(o, ", \"moving\": {}, \"region\": ", t.moving);
            text(&mut o, &t.region);
            o.push_str(", \"samples\": [");
            for (i, s) in t.samples.iter().enumerate() {
                if i > 0 {
                    o.push_str(", ");
                }
                let _ = write!(o, "{{\"t_us\": {}, \"x\": ", s.t_us);
                num(&mut o, s.x);
                o.push_str(", \"y\": ");
                num(&mut o, s.y);
                o.push_str(", \"z\": ");
                num(&mut o, s.z);
                o.push('}');
            }
            o.push_str("]}");
        }
        o.push_str("\n]\n}\n");
        o
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
