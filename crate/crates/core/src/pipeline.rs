//! End-to-end multi-agent run: agent frontends, the wire, the server and
//! the scene graph.

use std::collections::BTreeMap;
use std::sync::mpsc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::frontend::{AgentFrontend, FrontendConfig};
use crate::geometry::{PointCloud, Pose2};
use crate::observation::{ObjectObservation, ObservationKind};
use crate::pose_graph::{EdgeKind, NodeId, PoseGraph};
use crate::scene_graph::{SceneGraph, SceneGraphConfig, UpdateReport};
use crate::server::{LoopStats, MapUpdate, ServerConfig, SlamServer};
use crate::sim::{AgentRecording, Simulation};
use crate::wire;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanInput {
    pub timestamp_us: u64,
    pub cloud: PointCloud,
    pub detections: Vec<ObjectObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentInput {
    pub agent_id: u16,
    pub scans: Vec<ScanInput>,
    /// Optional ground truth, used for anchoring and the online ATE series.
    pub ground_truth: Vec<(u64, Pose2)>,
}

impl AgentInput {
    pub fn from_recording(rec: &AgentRecording) -> Self {
        Self {
            agent_id: rec.agent_id,
            scans: rec
                .scans
                .iter()
                .map(|s| ScanInput { timestamp_us: s.timestamp_us, cloud: s.cloud.clone(), detections: s.detections.clone() })
                .collect(),
            ground_truth: rec.scans.iter().map(|s| (s.timestamp_us, s.gt_pose)).collect(),
        }
    }

    pub fn from_simulation(sim: &Simulation) -> Vec<Self> {
        sim.agents.iter().map(Self::from_recording).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub server: ServerConfig,
    pub scene_graph: SceneGraphConfig,
    /// Agents whose first keyframe is anchored at its ground-truth pose.
    pub anchor_agents: Vec<u16>,
    /// Timestamp association window for ground truth (µs).
    pub max_dt_us: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frontend: FrontendConfig::default(),
            server: ServerConfig::default(),
            scene_graph: SceneGraphConfig::default(),
            anchor_agents: vec![0],
            max_dt_us: 100_000,
        }
    }
}

/// One point of the online error curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteSample {
    pub timestamp_us: u64,
    pub revision: u64,
    /// Nodes of the reference component that have ground truth.
    pub nodes: usize,
    pub agents: usize,
    pub ate_mean: f64,
    pub loops_accepted: usize,
    pub inter_loops: usize,
    /// Mean error over the previously existing reference nodes, before and
    /// after this update; recorded when a loop was accepted.
    pub same_set_before: Option<f64>,
    pub same_set_after: Option<f64>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub graph: PoseGraph,
    pub scene_graph: SceneGraph,
    /// Final keyframe pose estimates per agent.
    pub trajectories: BTreeMap<u16, Vec<(u64, Pose2)>>,
    pub bandwidth: BTreeMap<u16, u64>,
    pub loop_stats: LoopStats,
    pub ate_series: Vec<AteSample>,
    pub first_inter_closure_us: Option<u64>,
    pub merges: Vec<(u64, NodeId, NodeId)>,
    pub scene_updates: Vec<(u64, UpdateReport)>,
    pub components: usize,
    pub keyframes: usize,
    /// Agents with nodes in the component of the first node.
    pub reference_agents: Vec<u16>,
}

struct GroundTruth {
    by_agent: BTreeMap<u16, Vec<(u64, Pose2)>>,
    max_dt: u64,
}

impl GroundTruth {
    fn lookup(&self, agent: u16, t: u64) -> Option<Pose2> {
        let v = self.by_agent.get(&agent)?;
        let i = v.partition_point(|(ts, _)| *ts < t);
        let mut best: Option<(u64, Pose2)> = None;
        for j in [i.wrapping_sub(1), i] {
            if let Some(&(ts, p)) = v.get(j) {
                let dt = ts.abs_diff(t);
                if dt <= self.max_dt && best.is_none_or(|(b, _)| dt < b) {
                    best = Some((dt, p));
                }
            }
        }
        best.map(|(_, p)| p)
    }
}

struct Backend {
    server: SlamServer,
    sg: SceneGraph,
    gt: GroundTruth,
    series: Vec<AteSample>,
    first_inter: Option<u64>,
    merges: Vec<(u64, NodeId, NodeId)>,
    scene_updates: Vec<(u64, UpdateReport)>,
}

impl Backend {
    fn reference_nodes(&mut self) -> Vec<NodeId> {
        if self.server.graph().is_empty() {
            return Vec::new();
        }
        let root = self.server.component_of(NodeId(0));
        self.server.components().remove(&root).unwrap_or_default()
    }

    fn mean_error(&self, nodes: &[NodeId], poses: &[Pose2]) -> Option<(f64, usize)> {
        let g = self.server.graph();
        let errs: Vec<f64> = nodes
            .iter()
            .filter_map(|&id| {
                let n = g.node(id).ok()?;
                let kf = self.server.keyframe(id)?;
                let truth = self.gt.lookup(n.agent_id, kf.timestamp_us)?;
                Some(poses[id.0 as usize].planar_distance(&truth))
            })
            .collect();
        (!errs.is_empty()).then(|| (errs.iter().sum::<f64>() / errs.len() as f64, errs.len()))
    }

    fn handle(&mut self, bytes: &[u8]) -> Result<()> {
        let before_nodes = self.reference_nodes();
        let before_poses: Vec<Pose2> = self.server.graph().nodes().iter().map(|n| n.pose).collect();
        let n_edges = self.server.graph().edges().len();
        let update = match self.server.ingest_bytes(bytes) {
            Ok(u) => u,
            Err(crate::Error::Protocol(msg)) => {
                warn!("{msg}");
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let node = update.node.expect("ingest reports its node");
        let kf = self.server.keyframe(node).expect("node was just added");
        let ts = kf.timestamp_us;
        let inter_now = self.server.graph().edges()[n_edges..].iter().filter(|e| e.kind == EdgeKind::LoopInter).count();
        if inter_now > 0 && self.first_inter.is_none() {
            self.first_inter = Some(ts);
            info!("first inter-agent loop closure at {ts} us");
        }
        for &(a, b) in &update.merged_components {
            self.merges.push((ts, a, b));
        }

        let observations = kf.observations.clone();
        let graph = self.server.graph();
        for (seq, obs) in observations.iter().enumerate() {
            let r = match obs.kind {
                ObservationKind::Static => self.sg.fuse_static_observation(obs, seq as u32, node, graph),
                ObservationKind::Dynamic => self.sg.ingest_dynamic_observation(obs, seq as u32, node, graph),
            };
            if let Err(e) = r {
                warn!("observation {seq} of node {node} skipped: {e}");
            }
        }
        let report = self.sg.on_map_update(&update, graph);
        if report.triggered {
            self.scene_updates.push((ts, report));
        }
        if report.triggered || update.optimized {
            self.refresh_regions();
        }
        self.record(&update, ts, &before_nodes, &before_poses, inter_now);
        Ok(())
    }

    fn refresh_regions(&mut self) {
        let nodes = self.reference_nodes();
        let g = self.server.graph();
        let mut per_agent: BTreeMap<u16, Vec<Pose2>> = BTreeMap::new();
        for id in nodes {
            let n = g.node(id).expect("component members exist");
            per_agent.entry(n.agent_id).or_default().push(n.pose);
        }
        let trajs: Vec<Vec<Pose2>> = per_agent.into_values().collect();
        self.sg.rebuild_regions(&trajs);
    }

    fn record(&mut self, update: &MapUpdate, ts: u64, before_nodes: &[NodeId], before_poses: &[Pose2], inter: usize) {
        if self.gt.by_agent.is_empty() {
            return;
        }
        let nodes = self.reference_nodes();
        let poses: Vec<Pose2> = self.server.graph().nodes().iter().map(|n| n.pose).collect();
        let Some((ate, count)) = self.mean_error(&nodes, &poses) else { return };
        let agents = {
            let g = self.server.graph();
            let set: std::collections::BTreeSet<u16> = nodes.iter().map(|&id| g.node(id).expect("exists").agent_id).collect();
            set.len()
        };
        let (same_before, same_after) = if update.loops_accepted > 0 && !before_nodes.is_empty() {
            (self.mean_error(before_nodes, before_poses).map(|v| v.0), self.mean_error(before_nodes, &poses).map(|v| v.0))
        } else {
            (None, None)
        };
        self.series.push(AteSample {
            timestamp_us: ts,
            revision: update.revision,
            nodes: count,
            agents,
            ate_mean: ate,
            loops_accepted: update.loops_accepted,
            inter_loops: inter,
            same_set_before: same_before,
            same_set_after: same_after,
        });
    }
}

/// Runs every agent's frontend and the backend.
///
/// With `deterministic`, scans are processed on one thread in
/// (timestamp, agent) order. Otherwise each agent runs on its own thread and
/// the server consumes keyframes in arrival order.
pub fn run(inputs: &[AgentInput], cfg: &PipelineConfig, deterministic: bool) -> Result<RunOutput> {
    let mut server_cfg = cfg.server.clone();
    for a in inputs {
        if cfg.anchor_agents.contains(&a.agent_id) {
            if let Some(&(_, p)) = a.ground_truth.first() {
                server_cfg.anchors.insert(a.agent_id, p);
            }
        }
    }
    let mut backend = Backend {
        server: SlamServer::new(server_cfg),
        sg: SceneGraph::new(cfg.scene_graph.clone()),
        gt: GroundTruth {
            by_agent: inputs.iter().filter(|a| !a.ground_truth.is_empty()).map(|a| (a.agent_id, a.ground_truth.clone())).collect(),
            max_dt: cfg.max_dt_us,
        },
        series: Vec::new(),
        first_inter: None,
        merges: Vec::new(),
        scene_updates: Vec::new(),
    };

    if deterministic {
        // agents are independent until the server, so running each frontend
        // to completion and merging by (timestamp, agent) matches an
        // interleaved schedule exactly
        let mut messages: Vec<(u64, u16, Vec<u8>)> = Vec::new();
        for a in inputs {
            let mut fe = AgentFrontend::new(a.agent_id, cfg.frontend.clone(), cfg.seed);
            for s in &a.scans {
                if let Some(kf) = fe.process(&s.cloud, s.timestamp_us, &s.detections)? {
                    messages.push((kf.timestamp_us, kf.agent_id, wire::encode_keyframe(&kf)));
                }
            }
        }
        messages.sort_by_key(|m| (m.0, m.1));
        for (_, _, bytes) in messages {
            backend.handle(&bytes)?;
        }
    } else {
        let (tx, rx) = mpsc::channel::<Result<Vec<u8>>>();
        std::thread::scope(|scope| -> Result<()> {
            for a in inputs {
                let tx = tx.clone();
                let fcfg = cfg.frontend.clone();
                let seed = cfg.seed;
                scope.spawn(move || {
                    let mut fe = AgentFrontend::new(a.agent_id, fcfg, seed);
                    for s in &a.scans {
                        match fe.process(&s.cloud, s.timestamp_us, &s.detections) {
                            Ok(Some(kf)) => {
                                if tx.send(Ok(wire::encode_keyframe(&kf))).is_err() {
                                    return;
                                }
                            }
                            Ok(None) => {}
                            Err(e) => {
                                let _ = tx.send(Err(e));
                                return;
                            }
                        }
                    }
                });
            }
            drop(tx);
            for msg in rx {
                backend.handle(&msg?)?;
            }
            Ok(())
        })?;
    }

    let final_update = backend.sg.refresh(backend.server.graph());
    if final_update.triggered {
        backend.scene_updates.push((u64::MAX, final_update));
    }
    backend.refresh_regions();
    backend.sg.set_revision(backend.server.revision());
    let mut trajectories: BTreeMap<u16, Vec<(u64, Pose2)>> = BTreeMap::new();
    for n in backend.server.graph().nodes() {
        let ts = backend.server.keyframe(n.id).expect("node has keyframe").timestamp_us;
        trajectories.entry(n.agent_id).or_default().push((ts, n.pose));
    }
    let components = backend.server.component_count();
    let reference_agents: Vec<u16> = {
        let set: std::collections::BTreeSet<u16> = backend
            .reference_nodes()
            .into_iter()
            .map(|id| backend.server.graph().node(id).expect("exists").agent_id)
            .collect();
        set.into_iter().collect()
    };
    let keyframes = backend.server.keyframes().len();
    Ok(RunOutput {
        graph: backend.server.graph().clone(),
        bandwidth: backend.server.bandwidth().clone(),
        loop_stats: backend.server.loop_stats(),
        scene_graph: backend.sg,
        trajectories,
        ate_series: backend.series,
        first_inter_closure_us: backend.first_inter,
        merges: backend.merges,
        scene_updates: backend.scene_updates,
        components,
        keyframes,
        reference_agents,
    })
}
