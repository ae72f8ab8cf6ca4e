//! Central mapping backend: keyframe ingest, loop-closure search and
//! validation, component merging and optimization scheduling.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{scan_match, IcpConfig, IcpMetric, Keyframe};
use crate::geometry::{transform_cloud, voxel_groups, Aabb, Frame, Point3, PointCloud, Pose2};
use crate::observation::ObservationKind;
use crate::pose_graph::{EdgeKind, GraphEdge, NodeId, OptimizerConfig, PoseGraph, UnionFind};
use crate::scan_context::{DescriptorIndex, ScanContextConfig};
use crate::wire;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub r_loop: f64,
    pub w_recent: u32,
    pub f_max: f64,
    pub i_min: f64,
    pub c_max: usize,
    /// Optimize after this many keyframes without an accepted loop.
    pub n_opt: usize,
    pub optimize_on_loop: bool,
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub descriptor_search: bool,
    pub map_voxel: f64,
    pub icp: IcpConfig,
    /// Validation ICP for descriptor candidates, which start from a yaw-only guess.
    pub icp_descriptor: IcpConfig,
    pub scan_context: ScanContextConfig,
    pub optimizer: OptimizerConfig,
    /// World pose given to an agent's first keyframe; identity when absent.
    pub anchors: BTreeMap<u16, Pose2>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let icp = IcpConfig {
            min_z: Some(0.3),
            coarse_levels: 1,
            metric: IcpMetric::PointToLine,
            ..IcpConfig::default()
        };
        Self {
            r_loop: 15.0,
            w_recent: 30,
            f_max: 0.12,
            i_min: 0.6,
            c_max: 5,
            n_opt: 10,
            optimize_on_loop: true,
            sigma_t: 0.1,
            sigma_r: 0.01,
            descriptor_search: true,
            map_voxel: 0.5,
            icp_descriptor: IcpConfig { coarse_levels: 2, ..icp.clone() },
            icp,
            scan_context: ScanContextConfig::default(),
            optimizer: OptimizerConfig::default(),
            anchors: BTreeMap::new(),
        }
    }
}

impl ServerConfig {
    pub fn odometry_information(&self) -> Matrix3<f64> {
        let (t, r) = (1.0 / (self.sigma_t * self.sigma_t), 1.0 / (self.sigma_r * self.sigma_r));
        Matrix3::from_diagonal(&[t, t, r].into())
    }

    /// Odometry information scaled by the inverse fitness, at most tenfold.
    pub fn loop_information(&self, fitness: f64) -> Matrix3<f64> {
        self.odometry_information() * (1.0 / fitness.max(1e-4)).min(10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateSource {
    Radius,
    Descriptor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    pub query: NodeId,
    pub matched: NodeId,
    pub source: CandidateSource,
    /// Guess for the query pose relative to the match.
    pub init_guess: Pose2,
    pub descriptor_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapUpdate {
    pub revision: u64,
    /// Largest planar movement of a previously existing node during this update.
    pub max_pose_delta: f64,
    /// (surviving component, absorbed component), each named by its anchor.
    pub merged_components: Vec<(NodeId, NodeId)>,
    pub node: Option<NodeId>,
    pub loops_accepted: usize,
    pub optimized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LoopStats {
    pub intra: usize,
    pub inter: usize,
    pub rejected: usize,
}

/// Record of an accepted loop closure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptedLoop {
    pub edge_index: usize,
    pub source: CandidateSource,
    pub fitness: f64,
    pub timestamp_us: u64,
}

#[derive(Debug, Clone)]
struct AgentCursor {
    last_node: NodeId,
    last_keyframe: u32,
    last_timestamp: u64,
    last_odom: Pose2,
}

pub struct SlamServer {
    cfg: ServerConfig,
    graph: PoseGraph,
    keyframes: Vec<Keyframe>,
    agents: BTreeMap<u16, AgentCursor>,
    index: DescriptorIndex<NodeId>,
    uf: UnionFind,
    revision: u64,
    since_opt: usize,
    stats: LoopStats,
    loops: Vec<AcceptedLoop>,
    bytes: BTreeMap<u16, u64>,
    dropped: usize,
}

impl SlamServer {
    pub fn new(cfg: ServerConfig) -> Self {
        let index = DescriptorIndex::new(cfg.scan_context.clone());
        Self {
            cfg,
            graph: PoseGraph::new(),
            keyframes: Vec::new(),
            agents: BTreeMap::new(),
            index,
            uf: UnionFind::new(0),
            revision: 0,
            since_opt: 0,
            stats: LoopStats::default(),
            loops: Vec::new(),
            bytes: BTreeMap::new(),
            dropped: 0,
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    /// Keyframe stored for a node. The raw cloud is not retained.
    pub fn keyframe(&self, id: NodeId) -> Option<&Keyframe> {
        self.keyframes.get(id.0 as usize)
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn loop_stats(&self) -> LoopStats {
        self.stats
    }

    pub fn accepted_loops(&self) -> &[AcceptedLoop] {
        &self.loops
    }

    pub fn bandwidth(&self) -> &BTreeMap<u16, u64> {
        &self.bytes
    }

    /// Messages refused for protocol violations.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Anchor node of the component holding `id`.
    pub fn component_of(&mut self, id: NodeId) -> NodeId {
        NodeId(self.uf.find(id.0 as usize) as u32)
    }

    pub fn component_count(&mut self) -> usize {
        let n = self.keyframes.len();
        (0..n).filter(|&i| self.uf.find(i) == i).count()
    }

    /// Component anchors with their member nodes, ordered by anchor.
    pub fn components(&mut self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for i in 0..self.keyframes.len() {
            out.entry(NodeId(self.uf.find(i) as u32)).or_default().push(NodeId(i as u32));
        }
        out
    }

    /// Decodes a wire record, charges its size to the sender and ingests it.
    pub fn ingest_bytes(&mut self, bytes: &[u8]) -> Result<MapUpdate> {
        let sc = &self.cfg.scan_context;
        let kf = wire::decode_keyframe(bytes, sc.n_ring, sc.n_sector)?;
        *self.bytes.entry(kf.agent_id).or_default() += bytes.len() as u64;
        self.ingest_keyframe(kf)
    }

    pub fn ingest_keyframe(&mut self, mut kf: Keyframe) -> Result<MapUpdate> {
        let agent = kf.agent_id;
        let prev = self.agents.get(&agent).cloned();
        if let Some(c) = &prev {
            if kf.keyframe_id <= c.last_keyframe || kf.timestamp_us <= c.last_timestamp {
                self.dropped += 1;
                warn!(
                    "dropping keyframe {} of agent {agent}: last accepted was {} at {} us",
                    kf.keyframe_id, c.last_keyframe, c.last_timestamp
                );
                return Err(Error::Protocol(format!(
                    "agent {agent}: keyframe {} at {} us is not after keyframe {} at {} us",
                    kf.keyframe_id, kf.timestamp_us, c.last_keyframe, c.last_timestamp
                )));
            }
        }
        let before: Vec<Pose2> = self.graph.nodes().iter().map(|n| n.pose).collect();

        let id = match &prev {
            None => {
                let anchor = self.cfg.anchors.get(&agent).copied().unwrap_or_else(Pose2::identity);
                self.graph.add_node(agent, kf.keyframe_id, anchor, true)
            }
            Some(c) => {
                let inc = c.last_odom.between(&kf.odom_pose);
                let pose = self.graph.pose(c.last_node).expect("cursor node exists").compose(&inc);
                let id = self.graph.add_node(agent, kf.keyframe_id, pose, false);
                self.graph.add_edge(GraphEdge {
                    from: c.last_node,
                    to: id,
                    measurement: inc,
                    information: self.cfg.odometry_information(),
                    kind: EdgeKind::Odometry,
                })?;
                id
            }
        };
        let slot = self.uf.push();
        debug_assert_eq!(slot, id.0 as usize);
        if let Some(c) = prev {
            self.uf.union(c.last_node.0 as usize, slot);
        }
        self.agents.insert(
            agent,
            AgentCursor { last_node: id, last_keyframe: kf.keyframe_id, last_timestamp: kf.timestamp_us, last_odom: kf.odom_pose },
        );
        kf.cloud_raw = PointCloud::empty(Frame::Keyframe);
        self.keyframes.push(kf);

        let mut update = MapUpdate { node: Some(id), ..MapUpdate::default() };
        let candidates = self.find_candidates(id);
        for c in candidates {
            // earlier acceptances may already have joined these components
            let Some((edge, fitness)) = self.validate_candidate(&c)? else {
                self.stats.rejected += 1;
                continue;
            };
            assert!(fitness <= self.cfg.f_max, "accepted loop above the fitness gate");
            match edge.kind {
                EdgeKind::LoopInter => self.stats.inter += 1,
                _ => self.stats.intra += 1,
            }
            let (ca, cb) = (self.component_of(edge.from), self.component_of(edge.to));
            if ca != cb {
                update.merged_components.push(self.merge_components(&edge)?);
            }
            self.graph.add_edge(edge)?;
            self.loops.push(AcceptedLoop {
                edge_index: self.graph.edges().len() - 1,
                source: c.source,
                fitness,
                timestamp_us: self.keyframes[id.0 as usize].timestamp_us,
            });
            update.loops_accepted += 1;
        }
        let desc = self.keyframes[id.0 as usize].descriptor.clone();
        self.index.insert(id, desc);

        self.since_opt += 1;
        let due = (self.cfg.optimize_on_loop && update.loops_accepted > 0) || self.since_opt >= self.cfg.n_opt;
        if due {
            let report = self.graph.optimize(&self.cfg.optimizer)?;
            debug!(
                "optimized after node {id}: chi2 {:.4} -> {:.4} in {} iterations",
                report.initial_chi2, report.final_chi2, report.iterations
            );
            self.since_opt = 0;
            update.optimized = true;
        }
        update.max_pose_delta = before
            .iter()
            .zip(self.graph.nodes())
            .map(|(a, n)| a.planar_distance(&n.pose))
            .fold(0.0, f64::max);
        self.revision += 1;
        update.revision = self.revision;
        Ok(update)
    }

    fn is_recent(&self, query: NodeId, other: NodeId) -> bool {
        let (q, o) = (&self.keyframes[query.0 as usize], &self.keyframes[other.0 as usize]);
        q.agent_id == o.agent_id && q.keyframe_id.saturating_sub(o.keyframe_id) <= self.cfg.w_recent
    }

    /// Radius candidates in the node's own component, then descriptor
    /// candidates; other components' descriptor matches come first.
    pub fn find_candidates(&mut self, node: NodeId) -> Vec<LoopCandidate> {
        let Some(q_pose) = self.graph.pose(node) else { return Vec::new() };
        let q_comp = self.component_of(node);
        let comp: Vec<NodeId> = (0..self.keyframes.len()).map(|i| self.component_of(NodeId(i as u32))).collect();

        let mut radius: Vec<(f64, LoopCandidate)> = Vec::new();
        let mut near = vec![false; self.keyframes.len()];
        for n in self.graph.nodes() {
            if n.id == node || comp[n.id.0 as usize] != q_comp {
                continue;
            }
            let d = n.pose.planar_distance(&q_pose);
            if d > self.cfg.r_loop {
                continue;
            }
            near[n.id.0 as usize] = true;
            if self.is_recent(node, n.id) {
                continue;
            }
            radius.push((
                d,
                LoopCandidate {
                    query: node,
                    matched: n.id,
                    source: CandidateSource::Radius,
                    init_guess: n.pose.between(&q_pose),
                    descriptor_distance: None,
                },
            ));
        }
        radius.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.matched.cmp(&b.1.matched)));

        let mut foreign = Vec::new();
        let mut local = Vec::new();
        if self.cfg.descriptor_search {
            let q_desc = &self.keyframes[node.0 as usize].descriptor;
            let exclude = |h: NodeId| h == node || near[h.0 as usize] || self.is_recent(node, h);
            for m in self.index.query(q_desc, self.cfg.c_max, exclude) {
                let c = LoopCandidate {
                    query: node,
                    matched: m.handle,
                    source: CandidateSource::Descriptor,
                    init_guess: Pose2::new(0.0, 0.0, self.cfg.scan_context.shift_to_yaw(m.shift)),
                    descriptor_distance: Some(m.distance),
                };
                if comp[m.handle.0 as usize] == q_comp {
                    local.push(c);
                } else {
                    foreign.push(c);
                }
            }
        }
        let mut out = foreign;
        out.extend(radius.into_iter().map(|(_, c)| c));
        out.extend(local);
        out.truncate(self.cfg.c_max);
        out
    }

    /// Scan-matches the candidate's dynamic-free clouds; returns the edge and
    /// its fitness when the match passes the gates.
    pub fn validate_candidate(&self, c: &LoopCandidate) -> Result<Option<(GraphEdge, f64)>> {
        let (q, m) = match (self.keyframes.get(c.query.0 as usize), self.keyframes.get(c.matched.0 as usize)) {
            (Some(q), Some(m)) => (q, m),
            _ => return Err(Error::Graph(format!("candidate {} -> {} names a missing node", c.query, c.matched))),
        };
        if q.cloud.is_empty() || m.cloud.is_empty() {
            return Ok(None);
        }
        let icp = match c.source {
            CandidateSource::Radius => &self.cfg.icp,
            CandidateSource::Descriptor => &self.cfg.icp_descriptor,
        };
        let r = scan_match(&q.cloud, &m.cloud, c.init_guess, icp)?;
        let ok = r.converged && r.fitness <= self.cfg.f_max && r.inlier_fraction >= self.cfg.i_min;
        debug!(
            "candidate {} -> {} ({:?}): fitness {:.3} inliers {:.2} converged {} => {}",
            c.query, c.matched, c.source, r.fitness, r.inlier_fraction, r.converged, ok
        );
        if !ok {
            return Ok(None);
        }
        let kind = if q.agent_id == m.agent_id { EdgeKind::LoopIntra } else { EdgeKind::LoopInter };
        let edge = GraphEdge {
            from: c.matched,
            to: c.query,
            measurement: r.transform,
            information: self.cfg.loop_information(r.fitness),
            kind,
        };
        Ok(Some((edge, r.fitness)))
    }

    /// Re-expresses the younger of the edge's two components so that the
    /// edge holds exactly, then drops that component's anchor.
    pub fn merge_components(&mut self, edge: &GraphEdge) -> Result<(NodeId, NodeId)> {
        let (ca, cb) = (self.component_of(edge.from), self.component_of(edge.to));
        if ca == cb {
            return Ok((ca, cb));
        }
        let (keep, moved) = if ca < cb { (ca, cb) } else { (cb, ca) };
        let from = self.graph.node(edge.from)?.pose;
        let to = self.graph.node(edge.to)?.pose;
        let correction = if moved == cb {
            from.compose(&edge.measurement).compose(&to.inverse())
        } else {
            to.compose(&edge.measurement.inverse()).compose(&from.inverse())
        };
        for i in 0..self.keyframes.len() {
            let id = NodeId(i as u32);
            if self.component_of(id) == moved {
                let p = self.graph.node(id)?.pose;
                self.graph.set_pose(id, correction.compose(&p))?;
            }
        }
        self.graph.set_fixed(moved, false)?;
        self.uf.union(keep.0 as usize, moved.0 as usize);
        debug!("merged component {moved} into {keep}");
        Ok((keep, moved))
    }

    /// Runs the optimizer outside the regular schedule.
    pub fn optimize_now(&mut self) -> Result<MapUpdate> {
        let before: Vec<Pose2> = self.graph.nodes().iter().map(|n| n.pose).collect();
        self.graph.optimize(&self.cfg.optimizer)?;
        self.since_opt = 0;
        self.revision += 1;
        let max_pose_delta =
            before.iter().zip(self.graph.nodes()).map(|(a, n)| a.planar_distance(&n.pose)).fold(0.0, f64::max);
        Ok(MapUpdate { revision: self.revision, max_pose_delta, optimized: true, ..MapUpdate::default() })
    }

    pub fn assemble_map(&self) -> Result<SemanticMap> {
        assemble_map(&self.graph, &self.keyframes, self.cfg.map_voxel)
    }
}

/// World-frame map cloud with a class label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub cloud: PointCloud,
    pub labels: Vec<String>,
}

pub const UNLABELED: &str = "unlabeled";

/// Transforms every keyframe's dynamic-free cloud by its node pose, labels
/// points inside static observation boxes, and voxel-downsamples. A voxel
/// takes the label of its first labelled member.
pub fn assemble_map(graph: &PoseGraph, keyframes: &[Keyframe], voxel: f64) -> Result<SemanticMap> {
    if !(voxel > 0.0) {
        return Err(Error::Parameter(format!("map voxel must be positive, got {voxel}")));
    }
    let mut points = Vec::new();
    let mut labels: Vec<&str> = Vec::new();
    for node in graph.nodes() {
        let Some(kf) = keyframes.get(node.id.0 as usize) else { continue };
        let boxes: Vec<(Aabb, &str)> = kf
            .observations
            .iter()
            .filter(|o| o.kind == ObservationKind::Static)
            .map(|o| (o.aabb(), o.class_label.as_str()))
            .collect();
        for p in &kf.cloud.points {
            labels.push(boxes.iter().find(|(b, _)| b.contains(p)).map_or(UNLABELED, |(_, l)| l));
        }
        points.extend(transform_cloud(&node.pose, &kf.cloud).points);
    }
    let mut out_pts = Vec::new();
    let mut out_labels = Vec::new();
    for (_, members) in voxel_groups(&points, voxel) {
        let n = members.len() as f64;
        let (sx, sy, sz) = members.iter().fold((0.0, 0.0, 0.0), |a, &i| (a.0 + points[i].x, a.1 + points[i].y, a.2 + points[i].z));
        out_pts.push(Point3::new(sx / n, sy / n, sz / n));
        let label = members.iter().map(|&i| labels[i]).find(|l| *l != UNLABELED).unwrap_or(UNLABELED);
        out_labels.push(label.to_string());
    }
    Ok(SemanticMap { cloud: PointCloud::new(out_pts, Frame::World), labels: out_labels })
}
