//! On-disk datasets and run artifacts, and the metrics report computed from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    ate_errors, intersection_prf, object_prf, reference_from_map, relative_errors, MeanStd, ObjectScores, Prf,
    ReferenceConfig, ReferenceScope, Trajectory, DEFAULT_SEGMENTS,
};
use crate::geometry::{Aabb, Frame, Point3, Pose2};
use crate::observation::{decode_records, encode_records, ObservationKind};
use crate::pipeline::{AgentInput, RunOutput, ScanInput};
use crate::scene_graph::SceneGraphDocument;
use crate::server::LoopStats;
use crate::sim::{Simulation, World};
use crate::wire::{Reader, Writer};

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={v}");
    }
    Ok(fs::write(path, s)?)
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn write_trajectory_csv(path: &Path, samples: &[(u64, Pose2)]) -> Result<()> {
    let mut s = String::from("timestamp_us,x,y,theta\n");
    for (t, p) in samples {
        let _ = writeln!(s, "{t},{},{},{}", p.x, p.y, p.theta);
    }
    Ok(fs::write(path, s)?)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<(u64, Pose2)>> {
    let text = read_to_string(path)?;
    let bad = |i: usize| Error::Format(format!("{}:{}: malformed trajectory row", path.display(), i + 1));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(i));
        }
        let t: u64 = f[0].trim().parse().map_err(|_| bad(i))?;
        let v: Vec<f64> = f[1..].iter().map(|x| x.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad(i))?;
        out.push((t, Pose2::new(v[0], v[1], v[2])));
    }
    Ok(out)
}

/// A recorded multi-agent dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: BTreeMap<String, String>,
    pub world: World,
    pub agents: Vec<AgentInput>,
}

pub fn write_simulation(sim: &Simulation, preset: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &sim.config;
    let mut m = BTreeMap::new();
    m.insert("agents".to_string(), sim.agents.len().to_string());
    m.insert("seed".to_string(), c.seed.to_string());
    m.insert("world_seed".to_string(), sim.world.seed.to_string());
    m.insert("world_preset".to_string(), preset.to_string());
    m.insert("duration_s".to_string(), c.duration_s.to_string());
    m.insert("scan_period_us".to_string(), c.scan_period_us.to_string());
    m.insert("lidar_n_az".to_string(), c.lidar.n_az.to_string());
    m.insert("lidar_n_el".to_string(), c.lidar.n_el.to_string());
    m.insert("lidar_range".to_string(), c.lidar.r_sensor.to_string());
    m.insert("lidar_noise_sigma".to_string(), c.lidar.noise_sigma.to_string());
    m.insert("sensor_height".to_string(), c.lidar.sensor_height.to_string());
    write_manifest(&dir.join("manifest.txt"), &m)?;
    fs::write(dir.join("world.json"), serde_json::to_string(&sim.world)?)?;
    for a in &sim.agents {
        let adir = dir.join(format!("agent{}", a.agent_id));
        fs::create_dir_all(&adir)?;
        let (mut scans, mut dets) = (Writer::new(), Writer::new());
        for s in &a.scans {
            scans.u64(s.timestamp_us);
            scans.cloud(&s.cloud);
            let rec = encode_records(&s.detections);
            dets.u64(s.timestamp_us);
            dets.u32(rec.len() as u32);
            dets.buf.extend_from_slice(&rec);
        }
        fs::write(adir.join("scans.bin"), scans.buf)?;
        fs::write(adir.join("detections.bin"), dets.buf)?;
        let gt: Vec<(u64, Pose2)> = a.scans.iter().map(|s| (s.timestamp_us, s.gt_pose)).collect();
        write_trajectory_csv(&adir.join("gt.csv"), &gt)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&dir.join("manifest.txt"))?;
    let n: u16 = manifest
        .get("agents")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("manifest lacks a valid agents entry".into()))?;
    let world: World = serde_json::from_str(&read_to_string(&dir.join("world.json"))?)?;
    let mut agents = Vec::with_capacity(n as usize);
    for k in 0..n {
        let adir = dir.join(format!("agent{k}"));
        let scan_bytes = read_bytes(&adir.join("scans.bin"))?;
        let det_bytes = read_bytes(&adir.join("detections.bin"))?;
        let (mut r, mut d) = (Reader::new(&scan_bytes), Reader::new(&det_bytes));
        let mut scans = Vec::new();
        while !r.is_empty() {
            let timestamp_us = r.u64()?;
            let cloud = r.cloud(Frame::Sensor)?;
            let t2 = d.u64()?;
            if t2 != timestamp_us {
                return Err(Error::Format(format!("agent{k}: detections at {t2} do not match scan at {timestamp_us}")));
            }
            let len = d.u32()? as usize;
            let detections = decode_records(d.take(len)?)?;
            scans.push(ScanInput { timestamp_us, cloud, detections });
        }
        if !d.is_empty() {
            return Err(Error::Format(format!("agent{k}: trailing detection records")));
        }
        let ground_truth = read_trajectory_csv(&adir.join("gt.csv"))?;
        agents.push(AgentInput { agent_id: k, scans, ground_truth });
    }
    Ok(Dataset { manifest, world, agents })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub keyframes: usize,
    pub components: usize,
    pub reference_agents: Vec<u16>,
    pub first_inter_closure_us: Option<u64>,
    pub loop_closures: LoopStats,
    pub component_merges: usize,
    pub scene_updates: usize,
}

pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (agent, traj) in &out.trajectories {
        let adir = dir.join(format!("agent{agent}"));
        fs::create_dir_all(&adir)?;
        write_trajectory_csv(&adir.join("traj_est.csv"), traj)?;
    }
    fs::write(dir.join("graph.txt"), out.graph.dump())?;
    fs::write(dir.join("scenegraph.json"), out.scene_graph.export_json())?;
    let bw: BTreeMap<String, u64> = out.bandwidth.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    fs::write(dir.join("bandwidth.json"), serde_json::to_string_pretty(&bw)? + "\n")?;
    let mut s = String::from(
        "timestamp_us,revision,nodes,agents,ate_mean,loops_accepted,inter_loops,same_set_before,same_set_after\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for a in &out.ate_series {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            a.timestamp_us,
            a.revision,
            a.nodes,
            a.agents,
            a.ate_mean,
            a.loops_accepted,
            a.inter_loops,
            opt(a.same_set_before),
            opt(a.same_set_after)
        );
    }
    fs::write(dir.join("ate_series.csv"), s)?;
    let summary = RunSummary {
        keyframes: out.keyframes,
        components: out.components,
        reference_agents: out.reference_agents.clone(),
        first_inter_closure_us: out.first_inter_closure_us,
        loop_closures: out.loop_stats,
        component_merges: out.merges.len(),
        scene_updates: out.scene_updates.len(),
    };
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

/// Run artifacts read back for evaluation.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub trajectories: BTreeMap<u16, Vec<(u64, Pose2)>>,
    pub scene_graph: SceneGraphDocument,
    pub bandwidth: BTreeMap<String, u64>,
    pub summary: RunSummary,
}

pub fn read_run(dir: &Path) -> Result<RunArtifacts> {
    if !dir.is_dir() {
        return Err(Error::Format(format!("run directory {} does not exist", dir.display())));
    }
    let summary: RunSummary = serde_json::from_str(&read_to_string(&dir.join("summary.json"))?)?;
    let scene_graph = SceneGraphDocument::from_json(&read_to_string(&dir.join("scenegraph.json"))?)?;
    let bandwidth = serde_json::from_str(&read_to_string(&dir.join("bandwidth.json"))?)?;
    let mut trajectories = BTreeMap::new();
    let mut names: Vec<(u16, std::path::PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k = name.strip_prefix("agent")?.parse().ok()?;
            Some((k, e.path()))
        })
        .collect();
    names.sort();
    for (k, path) in names {
        trajectories.insert(k, read_trajectory_csv(&path.join("traj_est.csv"))?);
    }
    Ok(RunArtifacts { trajectories, scene_graph, bandwidth, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_dt_us: u64,
    pub segments: Vec<f64>,
    pub r_match_intersection: f64,
    pub r_match_object: f64,
    pub class_strict: bool,
    /// Margin around a ground-truth box within which a detection centroid
    /// counts as having observed it.
    pub observed_margin: f64,
    pub reference: ReferenceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_dt_us: 100_000,
            segments: DEFAULT_SEGMENTS.to_vec(),
            r_match_intersection: 50.0,
            r_match_object: 2.0,
            class_strict: true,
            observed_margin: 1.0,
            reference: ReferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ate_mean_m: f64,
    pub ate_std_m: f64,
    pub etrans_pct: Option<f64>,
    pub erot_deg_per_km: Option<f64>,
    pub intersections_all: Prf,
    pub intersections_turned: Prf,
    pub objects: ObjectScores,
    pub bandwidth_bytes_per_agent: BTreeMap<String, u64>,
    pub loop_closures: LoopStats,
}

impl Metrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// World static objects hit by at least one static detection, placed with ground truth.
pub fn observed_objects<'w>(world: &'w World, agents: &[AgentInput], margin: f64) -> Vec<(&'w str, Aabb)> {
    let mut seen = vec![false; world.static_objects.len()];
    for a in agents {
        for s in &a.scans {
            let Some(&(_, pose)) = a.ground_truth.iter().find(|(t, _)| *t == s.timestamp_us) else { continue };
            for o in s.detections.iter().filter(|o| o.kind == ObservationKind::Static) {
                let c = pose.transform_point(&o.centroid());
                for (k, obj) in world.static_objects.iter().enumerate() {
                    if !seen[k] && obj.aabb.inflate(margin).contains(&c) {
                        seen[k] = true;
                    }
                }
            }
        }
    }
    world
        .static_objects
        .iter()
        .zip(seen)
        .filter(|(_, s)| *s)
        .map(|(o, _)| (o.class_label.as_str(), o.aabb))
        .collect()
}

pub fn evaluate(run: &RunArtifacts, data: &Dataset, cfg: &EvalConfig) -> Result<Metrics> {
    let gts: BTreeMap<u16, Trajectory> = data
        .agents
        .iter()
        .map(|a| Ok((a.agent_id, Trajectory::new(a.agent_id, a.ground_truth.clone())?)))
        .collect::<Result<_>>()?;
    // Multi-agent ATE counts from the first inter-agent closure; without one
    // only the anchored agent is in the reference frame and counts throughout.
    let start = run.summary.first_inter_closure_us.unwrap_or(0);

    let mut errors = Vec::new();
    let (mut et, mut er, mut n_rel) = (0.0, 0.0, 0usize);
    for (&agent, samples) in &run.trajectories {
        let Some(gt) = gts.get(&agent) else {
            warn!("no ground truth for agent {agent}");
            continue;
        };
        let est = Trajectory::new(agent, samples.clone())?;
        if run.summary.reference_agents.contains(&agent) {
            let late = Trajectory::new(agent, samples.iter().copied().filter(|(t, _)| *t >= start).collect())?;
            errors.extend(ate_errors(&late, gt, cfg.max_dt_us));
        }
        match relative_errors(&est, gt, &cfg.segments, cfg.max_dt_us) {
            Ok((t, r)) => {
                et += t;
                er += r;
                n_rel += 1;
            }
            Err(e) => warn!("{e}"),
        }
    }
    let ate = MeanStd::of(&errors).ok_or_else(|| Error::Evaluation("no estimate matched ground truth".into()))?;

    let est_int: Vec<[f64; 2]> = run.scene_graph.intersections.iter().map(|i| [i.x, i.y]).collect();
    let routes: Vec<Vec<Pose2>> = gts.values().map(|t| t.poses()).collect();
    let prf = |scope| {
        let r = reference_from_map(&data.world.roads, &routes, scope, &cfg.reference);
        intersection_prf(&est_int, &r, cfg.r_match_intersection)
    };

    let est_obj: Vec<(&str, Aabb)> = run
        .scene_graph
        .static_objects
        .iter()
        .map(|o| {
            let [a, b, c] = o.aabb.min;
            let [d, e, f] = o.aabb.max;
            (o.class.as_str(), Aabb::new(Point3::new(a, b, c), Point3::new(d, e, f)))
        })
        .collect();
    let gt_obj = observed_objects(&data.world, &data.agents, cfg.observed_margin);

    Ok(Metrics {
        ate_mean_m: ate.mean,
        ate_std_m: ate.std,
        etrans_pct: (n_rel > 0).then(|| et / n_rel as f64),
        erot_deg_per_km: (n_rel > 0).then(|| er / n_rel as f64),
        intersections_all: prf(ReferenceScope::All),
        intersections_turned: prf(ReferenceScope::Turned),
        objects: object_prf(&est_obj, &gt_obj, cfg.r_match_object, cfg.class_strict),
        bandwidth_bytes_per_agent: run.bandwidth.clone(),
        loop_closures: run.summary.loop_closures,
    })
}
