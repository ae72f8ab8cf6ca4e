//! Little-endian binary records exchanged between agents and the server.
//!
//! Keyframe record layout (after a `u32` byte-length prefix):
//!
//! ```text
//! agent_id u16 | keyframe_id u32 | timestamp_us u64
//! pose x,y,theta f64×3
//! cloud (dynamic-free): count u32, x,y,z f32 × count
//! cloud (raw):          count u32, x,y,z f32 × count
//! descriptor: n_ring·n_sector f32
//! observations: count u32, observation records
//! ```

use crate::error::{Error, Result};
use crate::frontend::Keyframe;
use crate::geometry::{Frame, Point3, PointCloud, Pose2};
use crate::observation::ObjectObservation;
use crate::scan_context::ScanDescriptor;

#[derive(Debug, Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn cloud(&mut self, c: &PointCloud) {
        self.u32(c.points.len() as u32);
        for p in &c.points {
            self.f32(p.x as f32);
            self.f32(p.y as f32);
            self.f32(p.z as f32);
        }
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

macro_rules! read_le {
    ($name:ident, $t:ty) => {
        pub fn $name(&mut self) -> Result<$t> {
            const N: usize = std::mem::size_of::<$t>();
            let bytes = self.take(N)?;
            Ok(<$t>::from_le_bytes(bytes.try_into().expect("slice length checked")))
        }
    };
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated record: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    read_le!(u16, u16);
    read_le!(u32, u32);
    read_le!(u64, u64);
    read_le!(i64, i64);
    read_le!(f32, f32);
    read_le!(f64, f64);

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn cloud(&mut self, frame: Frame) -> Result<PointCloud> {
        let n = self.u32()? as usize;
        if self.remaining() < n.saturating_mul(12) {
            return Err(Error::Format(format!("cloud claims {n} points beyond end of record")));
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let p = Point3::new(self.f32()? as f64, self.f32()? as f64, self.f32()? as f64);
            if !p.is_finite() {
                return Err(Error::Format("non-finite point coordinate".into()));
            }
            points.push(p);
        }
        Ok(PointCloud::new(points, frame))
    }
}

/// Serializes a keyframe, length prefix included.
pub fn encode_keyframe(kf: &Keyframe) -> Vec<u8> {
    let mut w = Writer::new();
    w.u16(kf.agent_id);
    w.u32(kf.keyframe_id);
    w.u64(kf.timestamp_us);
    w.f64(kf.odom_pose.x);
    w.f64(kf.odom_pose.y);
    w.f64(kf.odom_pose.theta);
    w.cloud(&kf.cloud);
    w.cloud(&kf.cloud_raw);
    for v in kf.descriptor.grid() {
        w.f32(*v as f32);
    }
    w.u32(kf.observations.len() as u32);
    for o in &kf.observations {
        o.encode(&mut w);
    }
    let mut out = Vec::with_capacity(w.buf.len() + 4);
    out.extend_from_slice(&(w.buf.len() as u32).to_le_bytes());
    out.extend_from_slice(&w.buf);
    out
}

/// Parses one length-prefixed keyframe record; `n_ring`/`n_sector` give the
/// descriptor layout agreed out of band.
pub fn decode_keyframe(bytes: &[u8], n_ring: usize, n_sector: usize) -> Result<Keyframe> {
    let mut outer = Reader::new(bytes);
    let len = outer.u32()? as usize;
    let body = outer.take(len)?;
    if !outer.is_empty() {
        return Err(Error::Format("trailing bytes after keyframe record".into()));
    }
    let mut r = Reader::new(body);
    let agent_id = r.u16()?;
    let keyframe_id = r.u32()?;
    let timestamp_us = r.u64()?;
    let odom_pose = Pose2 { x: r.f64()?, y: r.f64()?, theta: r.f64()? };
    let cloud = r.cloud(Frame::Keyframe)?;
    let cloud_raw = r.cloud(Frame::Keyframe)?;
    let grid = (0..n_ring * n_sector)
        .map(|_| r.f32().map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    let descriptor = ScanDescriptor::from_grid(n_ring, n_sector, grid)?;
    let n_obs = r.u32()? as usize;
    let mut observations = Vec::with_capacity(n_obs.min(1024));
    for _ in 0..n_obs {
        observations.push(ObjectObservation::decode(&mut r)?);
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes inside keyframe record".into()));
    }
    Ok(Keyframe {
        agent_id,
        keyframe_id,
        timestamp_us,
        odom_pose,
        cloud,
        cloud_raw,
        descriptor,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::ObservationKind;
    use crate::scan_context::{encode, ScanContextConfig};

    fn keyframe() -> Keyframe {
        let pts: Vec<Point3> = (0..50).map(|i| Point3::new(i as f64 * 0.5, 3.0 - i as f64 * 0.25, 1.5).quantized()).collect();
        let cloud = PointCloud::new(pts, Frame::Keyframe);
        let obs = ObjectObservation::new(2, 9, 77, "car", ObservationKind::Dynamic, Some(4), PointCloud::new(vec![Point3::new(1.0, 2.0, 0.5)], Frame::Keyframe))
            .unwrap();
        let mut d = encode(&cloud, &ScanContextConfig::default());
        d = ScanDescriptor::from_grid(20, 60, d.grid().iter().map(|v| *v as f32 as f64).collect()).unwrap();
        Keyframe {
            agent_id: 2,
            keyframe_id: 9,
            timestamp_us: 77,
            odom_pose: Pose2::new(1.5, -2.0, 0.25),
            cloud: cloud.clone(),
            cloud_raw: cloud,
            descriptor: d,
            observations: vec![obs],
        }
    }

    #[test]
    fn keyframe_round_trip() {
        let kf = keyframe();
        let bytes = encode_keyframe(&kf);
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        assert_eq!(decode_keyframe(&bytes, 20, 60).unwrap(), kf);
    }

    #[test]
    fn truncated_and_padded_records_fail() {
        let bytes = encode_keyframe(&keyframe());
        assert!(matches!(decode_keyframe(&bytes[..bytes.len() - 1], 20, 60), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_keyframe(&long, 20, 60), Err(Error::Format(_))));
        assert!(decode_keyframe(&bytes, 20, 59).is_err());
    }
}
