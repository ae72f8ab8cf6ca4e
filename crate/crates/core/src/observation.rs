//! 3D object observations and their geometric post-processing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_cloud_into, Aabb, Frame, Point3, PointCloud, Pose2};
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObservationKind {
    Static,
    Dynamic,
}

impl ObservationKind {
    fn code(self) -> u8 {
        match self {
            ObservationKind::Static => 0,
            ObservationKind::Dynamic => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ObservationKind::Static),
            1 => Ok(ObservationKind::Dynamic),
            other => Err(Error::Format(format!("unknown observation kind {other}"))),
        }
    }
}

/// A detected object: its member points plus derived centroid and box.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation {
    pub agent_id: u16,
    pub keyframe_id: u32,
    pub timestamp_us: u64,
    pub class_label: String,
    pub kind: ObservationKind,
    pub instance_id: Option<i64>,
    points: PointCloud,
    centroid: Point3,
    aabb: Aabb,
}

impl ObjectObservation {
    /// Fails when `points` is empty or a dynamic observation lacks an instance id.
    pub fn new(
        agent_id: u16,
        keyframe_id: u32,
        timestamp_us: u64,
        class_label: impl Into<String>,
        kind: ObservationKind,
        instance_id: Option<i64>,
        points: PointCloud,
    ) -> Result<Self> {
        if kind == ObservationKind::Dynamic && instance_id.is_none() {
            return Err(Error::Parameter("dynamic observation requires an instance id".into()));
        }
        let (centroid, aabb) = match (points.centroid(), points.aabb()) {
            (Some(c), Some(b)) => (c, b),
            _ => return Err(Error::Parameter("observation has no points".into())),
        };
        Ok(Self {
            agent_id,
            keyframe_id,
            timestamp_us,
            class_label: class_label.into(),
            kind,
            instance_id,
            points,
            centroid,
            aabb,
        })
    }

    pub fn points(&self) -> &PointCloud {
        &self.points
    }

    pub fn centroid(&self) -> Point3 {
        self.centroid
    }

    pub fn aabb(&self) -> Aabb {
        self.aabb
    }

    /// Same observation with a new point set (non-empty).
    pub fn with_points(&self, points: PointCloud) -> Result<Self> {
        Self::new(
            self.agent_id,
            self.keyframe_id,
            self.timestamp_us,
            self.class_label.clone(),
            self.kind,
            self.instance_id,
            points,
        )
    }

    /// Points re-expressed by `pose`, tagged as `frame`.
    pub fn transformed(&self, pose: &Pose2, frame: Frame) -> Self {
        let points = transform_cloud_into(pose, &self.points, frame);
        self.with_points(points).expect("transform preserves point count")
    }

    pub fn is_dynamic(&self) -> bool {
        self.kind == ObservationKind::Dynamic
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u16(self.agent_id);
        w.u32(self.keyframe_id);
        w.u64(self.timestamp_us);
        w.u8(self.kind.code());
        w.i64(self.instance_id.unwrap_or(-1));
        let label = self.class_label.as_bytes();
        let len = label.len().min(u16::MAX as usize);
        w.u16(len as u16);
        w.buf.extend_from_slice(&label[..len]);
        w.cloud(&self.points);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let agent_id = r.u16()?;
        let keyframe_id = r.u32()?;
        let timestamp_us = r.u64()?;
        let kind = ObservationKind::from_code(r.u8()?)?;
        let raw_id = r.i64()?;
        let instance_id = if raw_id < 0 { None } else { Some(raw_id) };
        let len = r.u16()? as usize;
        let label = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("class label is not UTF-8: {e}")))?
            .to_owned();
        let points = r.cloud(Frame::Keyframe)?;
        Self::new(agent_id, keyframe_id, timestamp_us, label, kind, instance_id, points)
            .map_err(|e| Error::Format(format!("invalid observation record: {e}")))
    }
}

/// Serializes observations back to back, as in a recorded-detections file.
pub fn encode_records(obs: &[ObjectObservation]) -> Vec<u8> {
    let mut w = Writer::new();
    for o in obs {
        o.encode(&mut w);
    }
    w.buf
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<ObjectObservation>> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(ObjectObservation::decode(&mut r)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthFilterConfig {
    pub delta_min: f64,
    pub k_mad: f64,
}

impl Default for DepthFilterConfig {
    fn default() -> Self {
        Self { delta_min: 1.0, k_mad: 2.0 }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Drops points whose range from `viewpoint` strays from the median range by
/// more than `max(delta_min, k_mad · MAD)`.
pub fn median_depth_filter(
    obs: &ObjectObservation,
    viewpoint: Point3,
    cfg: &DepthFilterConfig,
) -> ObjectObservation {
    let pts = &obs.points.points;
    if pts.len() < 2 {
        return obs.clone();
    }
    let ranges: Vec<f64> = pts.iter().map(|p| p.distance(&viewpoint)).collect();
    let mut sorted = ranges.clone();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut dev: Vec<f64> = sorted.iter().map(|r| (r - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    let band = cfg.delta_min.max(cfg.k_mad * median(&dev));
    let kept: Vec<Point3> = pts
        .iter()
        .zip(&ranges)
        .filter(|(_, r)| (*r - med).abs() <= band)
        .map(|(p, _)| *p)
        .collect();
    // the median point always lies inside the band, so `kept` is non-empty
    obs.with_points(PointCloud::new(kept, obs.points.frame))
        .expect("median band retains at least one point")
}
