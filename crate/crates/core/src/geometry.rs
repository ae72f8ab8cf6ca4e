//! Planar rigid-body math, 3D points, and point-cloud preprocessing.
//!
//! Poses live in SE(2); clouds stay 3D and carry `z` through every planar
//! transform untouched.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// An se(2) increment `(dx, dy, dtheta)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tangent2 {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Tangent2 {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self { dx, dy, dtheta }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dtheta]
    }

    pub fn norm(&self) -> f64 {
        (self.dx * self.dx + self.dy * self.dy + self.dtheta * self.dtheta).sqrt()
    }
}

// sin(t)/t and (1 - cos(t))/t with series expansions near zero.
fn so2_coeffs(t: f64) -> (f64, f64) {
    if t.abs() < 1e-6 {
        let t2 = t * t;
        (1.0 - t2 / 6.0, t / 2.0 - t * t2 / 24.0)
    } else {
        (t.sin() / t, (1.0 - t.cos()) / t)
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn compose(&self, b: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * b.x - s * b.y,
            self.y + s * b.x + c * b.y,
            self.theta + b.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)
    }

    /// `self⁻¹ ⊕ other`: `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        let (s, c) = self.theta.sin_cos();
        Point3::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y, p.z)
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn planar_distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn exp(t: &Tangent2) -> Pose2 {
        let (a, b) = so2_coeffs(t.dtheta);
        Pose2::new(a * t.dx - b * t.dy, b * t.dx + a * t.dy, t.dtheta)
    }

    pub fn log(&self) -> Tangent2 {
        let (a, b) = so2_coeffs(self.theta);
        let det = a * a + b * b;
        Tangent2::new(
            (a * self.x + b * self.y) / det,
            (-b * self.x + a * self.y) / det,
            self.theta,
        )
    }

    /// Retraction used by the optimizer: `self ⊕ exp(delta)`.
    pub fn retract(&self, delta: &Tangent2) -> Pose2 {
        self.compose(&Pose2::exp(delta))
    }

    /// Adjoint of the pose acting on `(dx, dy, dtheta)` tangents.
    pub fn adjoint(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.theta.sin_cos();
        [[c, -s, self.y], [s, c, -self.x], [0.0, 0.0, 1.0]]
    }
}

/// Inverse of the SE(2) right Jacobian evaluated at `t`.
pub fn right_jacobian_inv(t: &Tangent2) -> [[f64; 3]; 3] {
    let th = t.dtheta;
    let (r1, r2) = (t.dx, t.dy);
    let (a, b) = so2_coeffs(th);
    let (c13, c23) = if th.abs() < 1e-6 {
        (-r2 / 2.0 + r1 * th / 6.0, r1 / 2.0 + r2 * th / 6.0)
    } else {
        let (s, c) = th.sin_cos();
        let t2 = th * th;
        (
            (th * r1 - r2 + r2 * c - r1 * s) / t2,
            (r1 + th * r2 - r1 * c - r2 * s) / t2,
        )
    };
    // Jr = [[a, b, c13], [-b, a, c23], [0, 0, 1]]
    let det = a * a + b * b;
    let inv = [[a / det, -b / det], [b / det, a / det]];
    let e13 = -(inv[0][0] * c13 + inv[0][1] * c23);
    let e23 = -(inv[1][0] * c13 + inv[1][1] * c23);
    [
        [inv[0][0], inv[0][1], e13],
        [inv[1][0], inv[1][1], e23],
        [0.0, 0.0, 1.0],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance_sq(&self, o: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }

    pub fn distance(&self, o: &Point3) -> f64 {
        self.distance_sq(o).sqrt()
    }

    pub fn planar_distance(&self, o: &Point3) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Rounds every coordinate through `f32`, the precision used on the wire.
    pub fn quantized(&self) -> Point3 {
        Point3::new(self.x as f32 as f64, self.y as f32 as f64, self.z as f32 as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Frame {
    #[default]
    Sensor,
    Keyframe,
    World,
}

impl Frame {
    /// Frame reached by applying one more pose: sensor scans become keyframe
    /// relative, keyframe clouds become world clouds.
    pub fn advance(self) -> Frame {
        match self {
            Frame::Sensor => Frame::Keyframe,
            Frame::Keyframe | Frame::World => Frame::World,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn empty(frame: Frame) -> Self {
        Self::new(Vec::new(), frame)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let n = self.points.len() as f64;
        let (sx, sy, sz) = self
            .points
            .iter()
            .fold((0.0, 0.0, 0.0), |(a, b, c), p| (a + p.x, b + p.y, c + p.z));
        Some(Point3::new(sx / n, sy / n, sz / n))
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.points)
    }
}

pub fn transform_cloud(pose: &Pose2, cloud: &PointCloud) -> PointCloud {
    transform_cloud_into(pose, cloud, cloud.frame.advance())
}

pub fn transform_cloud_into(pose: &Pose2, cloud: &PointCloud, frame: Frame) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
        frame,
    }
}

/// Axis-aligned 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn from_center_size(c: Point3, size: [f64; 3]) -> Self {
        let h = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
        Self::new(
            Point3::new(c.x - h[0], c.y - h[1], c.z - h[2]),
            Point3::new(c.x + h[0], c.y + h[1], c.z + h[2]),
        )
    }

    pub fn from_points(points: &[Point3]) -> Option<Aabb> {
        let first = points.first()?;
        let mut b = Aabb::new(*first, *first);
        for p in &points[1..] {
            b.expand(p);
        }
        Some(b)
    }

    pub fn expand(&mut self, p: &Point3) {
        self.min.x = self.min.x.min(p.x);
        self.min.y = self.min.y.min(p.y);
        self.min.z = self.min.z.min(p.z);
        self.max.x = self.max.x.max(p.x);
        self.max.y = self.max.y.max(p.y);
        self.max.z = self.max.z.max(p.z);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        let mut b = *self;
        b.expand(&o.min);
        b.expand(&o.max);
        b
    }

    pub fn inflate(&self, m: f64) -> Aabb {
        Aabb::new(
            Point3::new(self.min.x - m, self.min.y - m, self.min.z - m),
            Point3::new(self.max.x + m, self.max.y + m, self.max.z + m),
        )
    }

    pub fn contains(&self, p: &Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            (self.max.x - self.min.x).max(0.0),
            (self.max.y - self.min.y).max(0.0),
            (self.max.z - self.min.z).max(0.0),
        ]
    }

    pub fn center(&self) -> Point3 {
        Point3::new(
            (self.min.x + self.max.x) / 2.0,
            (self.min.y + self.max.y) / 2.0,
            (self.min.z + self.max.z) / 2.0,
        )
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn intersection_volume(&self, o: &Aabb) -> f64 {
        let dx = self.max.x.min(o.max.x) - self.min.x.max(o.min.x);
        let dy = self.max.y.min(o.max.y) - self.min.y.max(o.min.y);
        let dz = self.max.z.min(o.max.z) - self.min.z.max(o.min.z);
        if dx <= 0.0 || dy <= 0.0 || dz <= 0.0 {
            0.0
        } else {
            dx * dy * dz
        }
    }

    pub fn iou(&self, o: &Aabb) -> f64 {
        let inter = self.intersection_volume(o);
        let uni = self.volume() + o.volume() - inter;
        if uni <= 0.0 {
            0.0
        } else {
            inter / uni
        }
    }

    /// Intersection volume normalized by the smaller of the two volumes.
    ///
    /// Degenerate (zero-volume) boxes are padded by `MIN_EXTENT` per axis so
    /// flat or single-point observations can still associate.
    pub fn overlap_ratio(&self, o: &Aabb) -> f64 {
        let a = self.padded();
        let b = o.padded();
        let inter = a.intersection_volume(&b);
        let denom = a.volume().min(b.volume());
        if denom <= 0.0 {
            0.0
        } else {
            inter / denom
        }
    }

    fn padded(&self) -> Aabb {
        const MIN_EXTENT: f64 = 0.5;
        let e = self.extent();
        let c = self.center();
        Aabb::from_center_size(
            c,
            [e[0].max(MIN_EXTENT), e[1].max(MIN_EXTENT), e[2].max(MIN_EXTENT)],
        )
    }
}

type CellKey = (i64, i64, i64);

fn cell_of(p: &Point3, cell: f64) -> CellKey {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Column grid over a point set for exact radius queries. Points are
/// bucketed by (x, y) only; the distance test is 3D.
#[derive(Debug, Clone)]
pub struct SpatialHash<'a> {
    points: &'a [Point3],
    cell: f64,
    origin: (f64, f64),
    dims: (i64, i64),
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [Point3], cell: f64) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        if points.is_empty() {
            (x0, y0, x1, y1) = (0.0, 0.0, 0.0, 0.0);
        }
        // keep the table comparable to the point count
        let budget = (16 * points.len()).max(64) as f64;
        let mut cell = cell;
        while ((x1 - x0) / cell + 1.0) * ((y1 - y0) / cell + 1.0) > budget {
            cell *= 2.0;
        }
        let dims = (((x1 - x0) / cell).floor() as i64 + 1, ((y1 - y0) / cell).floor() as i64 + 1);
        let n_cells = (dims.0 * dims.1) as usize;
        let key = |p: &Point3| {
            let cx = ((p.x - x0) / cell).floor() as i64;
            let cy = ((p.y - y0) / cell).floor() as i64;
            (cx.clamp(0, dims.0 - 1) * dims.1 + cy.clamp(0, dims.1 - 1)) as usize
        };
        let mut starts = vec![0u32; n_cells + 1];
        for p in points {
            starts[key(p) + 1] += 1;
        }
        for i in 0..n_cells {
            starts[i + 1] += starts[i];
        }
        let mut fill = starts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let k = key(p);
            order[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        Self { points, cell, origin: (x0, y0), dims, starts, order }
    }

    fn for_each_candidate(&self, p: &Point3, radius: f64, mut f: impl FnMut(usize)) {
        self.try_each_candidate(p, radius, |i| {
            f(i);
            true
        });
    }

    /// Like `for_each_candidate`; stops when `f` returns false.
    fn try_each_candidate(&self, p: &Point3, radius: f64, mut f: impl FnMut(usize) -> bool) {
        let span = |v: f64, o: f64, n: i64| {
            let lo = ((v - radius - o) / self.cell).floor().max(0.0);
            let hi = ((v + radius - o) / self.cell).floor().min((n - 1) as f64);
            (lo as i64, hi as i64)
        };
        let (ax, bx) = span(p.x, self.origin.0, self.dims.0);
        let (ay, by) = span(p.y, self.origin.1, self.dims.1);
        if ay > by {
            return;
        }
        for cx in ax..=bx {
            let row = cx * self.dims.1;
            let lo = self.starts[(row + ay) as usize];
            let hi = self.starts[(row + by + 1) as usize];
            for &i in &self.order[lo as usize..hi as usize] {
                if !f(i as usize) {
                    return;
                }
            }
        }
    }

    /// Whether at least `k` indexed points other than `skip` lie within `radius` of `p`.
    pub fn has_at_least(&self, p: &Point3, radius: f64, skip: Option<usize>, k: usize) -> bool {
        let r2 = radius * radius;
        let mut n = 0;
        self.try_each_candidate(p, radius, |i| {
            if Some(i) != skip && self.points[i].distance_sq(p) <= r2 {
                n += 1;
            }
            n < k
        });
        n >= k
    }

    /// Number of indexed points within `radius` of `p` (inclusive), skipping `skip`.
    pub fn count_within(&self, p: &Point3, radius: f64, skip: Option<usize>) -> usize {
        let r2 = radius * radius;
        let mut n = 0;
        self.for_each_candidate(p, radius, |i| {
            if Some(i) != skip && self.points[i].distance_sq(p) <= r2 {
                n += 1;
            }
        });
        n
    }

    /// Calls `f` for every indexed point within `radius` of `p`.
    pub fn for_each_within(&self, p: &Point3, radius: f64, mut f: impl FnMut(usize)) {
        let r2 = radius * radius;
        self.for_each_candidate(p, radius, |i| {
            if self.points[i].distance_sq(p) <= r2 {
                f(i);
            }
        });
    }

    /// Nearest indexed point within `radius`; ties resolve to the lower index.
    ///
    /// Searches rings of cells outward and stops once no unvisited cell can
    /// hold a closer point.
    pub fn nearest_within(&self, p: &Point3, radius: f64) -> Option<(usize, f64)> {
        let r2 = radius * radius;
        let mut best: Option<(usize, f64)> = None;
        let cx = ((p.x - self.origin.0) / self.cell).floor();
        let cy = ((p.y - self.origin.1) / self.cell).floor();
        if !(cx.is_finite() && cy.is_finite()) {
            return None;
        }
        let (nx, ny) = self.dims;
        let (cx, cy) = (cx.clamp(-1e12, 1e12) as i64, cy.clamp(-1e12, 1e12) as i64);
        // gap between p and the grid, in whole cells
        let outside = (-cx).max(cx - (nx - 1)).max(-cy).max(cy - (ny - 1)).max(0);
        let max_ring = (radius / self.cell).ceil() as i64 + 1;
        let visit = |lo: u32, hi: u32, best: &mut Option<(usize, f64)>| {
            for &i in &self.order[lo as usize..hi as usize] {
                let i = i as usize;
                let d2 = self.points[i].distance_sq(p);
                if d2 <= r2 {
                    match *best {
                        Some((bi, bd)) if bd < d2 || (bd == d2 && bi < i) => {}
                        _ => *best = Some((i, d2)),
                    }
                }
            }
        };
        let mut k = outside;
        while k <= max_ring {
            let (ay, by) = ((cy - k).max(0), (cy + k).min(ny - 1));
            for x in (cx - k).max(0)..=(cx + k).min(nx - 1) {
                let row = x * ny;
                if (x - cx).abs() == k {
                    if ay <= by {
                        visit(self.starts[(row + ay) as usize], self.starts[(row + by + 1) as usize], &mut best);
                    }
                } else {
                    for y in [cy - k, cy + k] {
                        if (0..ny).contains(&y) {
                            visit(self.starts[(row + y) as usize], self.starts[(row + y + 1) as usize], &mut best);
                        }
                    }
                }
            }
            // every unvisited cell is at least k cells away in the plane
            if let Some((_, bd)) = best {
                let reach = k as f64 * self.cell;
                if bd < reach * reach {
                    break;
                }
            }
            k += 1;
        }
        best
    }
}

/// Multiplicative hasher for integer cell keys.
#[derive(Default)]
struct CellHasher(u64);

impl Hasher for CellHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    fn write_i64(&mut self, v: i64) {
        self.write_u64(v as u64);
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(5) ^ v).wrapping_mul(0x517c_c1b7_2722_0a95);
    }
}

/// Voxel slot of every point, slots numbered in order of first appearance,
/// and the key of each slot.
fn voxel_slots(points: &[Point3], voxel: f64) -> (Vec<usize>, Vec<CellKey>) {
    let mut slot: HashMap<CellKey, usize, BuildHasherDefault<CellHasher>> = HashMap::default();
    slot.reserve(points.len());
    let mut keys = Vec::new();
    let of = points
        .iter()
        .map(|p| {
            let key = cell_of(p, voxel);
            *slot.entry(key).or_insert_with(|| {
                keys.push(key);
                keys.len() - 1
            })
        })
        .collect();
    (of, keys)
}

/// Groups point indices by voxel, in order of first appearance.
pub fn voxel_groups(points: &[Point3], voxel: f64) -> Vec<(CellKey, Vec<usize>)> {
    let (of, keys) = voxel_slots(points, voxel);
    let mut groups: Vec<(CellKey, Vec<usize>)> = keys.into_iter().map(|k| (k, Vec::new())).collect();
    for (i, g) in of.into_iter().enumerate() {
        groups[g].1.push(i);
    }
    groups
}

/// Replaces each occupied voxel by the centroid of its points.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::Parameter(format!("voxel size must be positive, got {voxel}")));
    }
    let (of, keys) = voxel_slots(&cloud.points, voxel);
    // (sum, count, first member)
    let mut acc = vec![(Point3::default(), 0usize, usize::MAX); keys.len()];
    for (i, (&g, p)) in of.iter().zip(&cloud.points).enumerate() {
        let a = &mut acc[g];
        a.0.x += p.x;
        a.0.y += p.y;
        a.0.z += p.z;
        a.1 += 1;
        a.2 = a.2.min(i);
    }
    let points = acc
        .iter()
        .zip(&keys)
        .map(|((sum, count, first), key)| {
            let n = *count as f64;
            let c = Point3::new(sum.x / n, sum.y / n, sum.z / n);
            // rounding can push a centroid across a voxel face
            if cell_of(&c, voxel) == *key {
                c
            } else {
                cloud.points[*first]
            }
        })
        .collect();
    Ok(PointCloud::new(points, cloud.frame))
}

/// Keeps points with at least `min_neighbors` other points within `radius`.
pub fn remove_outliers(cloud: &PointCloud, radius: f64, min_neighbors: usize) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!("outlier radius must be positive, got {radius}")));
    }
    if min_neighbors == 0 {
        return Ok(cloud.clone());
    }
    let grid = SpatialHash::new(&cloud.points, radius);
    let points = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(i, p)| grid.has_at_least(p, radius, Some(*i), min_neighbors))
        .map(|(_, p)| *p)
        .collect();
    Ok(PointCloud::new(points, cloud.frame))
}
