//! Procedural grid town: perturbed street lattice, buildings along every
//! street, roadside furniture near intersections and moving actors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Point3};

pub type Vec2 = [f64; 2];

pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}
pub(crate) fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}
pub(crate) fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}
pub(crate) fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}
pub(crate) fn unit(a: Vec2) -> Vec2 {
    scale(a, 1.0 / norm(a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    /// Intersections along x.
    pub nx: usize,
    /// Intersections along y.
    pub ny: usize,
    pub spacing: f64,
    /// Max per-axis displacement of each intersection from the lattice.
    pub jitter: f64,
    pub road_width: f64,
    pub building_height: (f64, f64),
    pub pole_spacing: f64,
    pub n_moving: usize,
    pub n_parked: usize,
    pub n_pedestrians: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            nx: 4,
            ny: 4,
            spacing: 80.0,
            jitter: 6.0,
            road_width: 12.0,
            building_height: (6.0, 24.0),
            pole_spacing: 30.0,
            n_moving: 10,
            n_parked: 8,
            n_pedestrians: 6,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Parameter(format!("grid must be at least 2×2, got {}×{}", self.nx, self.ny)));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Parameter(format!("spacing must be positive, got {}", self.spacing)));
        }
        if self.jitter < 0.0 || 4.0 * self.jitter >= self.spacing {
            return Err(Error::Parameter(format!("jitter {} must lie in [0, spacing/4)", self.jitter)));
        }
        if !(self.road_width > 0.0) || self.building_height.0 > self.building_height.1 {
            return Err(Error::Parameter("invalid road width or building heights".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: usize,
    pub pos: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub a: usize,
    pub b: usize,
    pub name: String,
    pub polyline: Vec<Vec2>,
}

/// Vertical extrusion of a convex counter-clockwise footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prism {
    pub footprint: Vec<Vec2>,
    pub z_min: f64,
    pub z_max: f64,
}

impl Prism {
    pub fn new(mut footprint: Vec<Vec2>, z_min: f64, z_max: f64) -> Self {
        let area: f64 = (0..footprint.len())
            .map(|i| {
                let (p, q) = (footprint[i], footprint[(i + 1) % footprint.len()]);
                p[0] * q[1] - q[0] * p[1]
            })
            .sum();
        if area < 0.0 {
            footprint.reverse();
        }
        Self { footprint, z_min, z_max }
    }

    pub fn from_aabb(b: &Aabb) -> Self {
        Self::new(
            vec![[b.min.x, b.min.y], [b.max.x, b.min.y], [b.max.x, b.max.y], [b.min.x, b.max.y]],
            b.min.z,
            b.max.z,
        )
    }

    /// Oriented box with footprint centre `c`, heading `yaw`, size `[l, w, h]`.
    pub fn oriented_box(c: Vec2, yaw: f64, size: [f64; 3]) -> Self {
        let (s, co) = yaw.sin_cos();
        let (hl, hw) = (size[0] / 2.0, size[1] / 2.0);
        let corner = |a: f64, b: f64| [c[0] + co * a - s * b, c[1] + s * a + co * b];
        Self::new(vec![corner(-hl, -hw), corner(hl, -hw), corner(hl, hw), corner(-hl, hw)], 0.0, size[2])
    }

    pub fn bounding_circle(&self) -> (Vec2, f64) {
        let n = self.footprint.len() as f64;
        let c = self.footprint.iter().fold([0.0, 0.0], |a, p| add(a, scale(*p, 1.0 / n)));
        let r = self.footprint.iter().map(|p| norm(sub(*p, c))).fold(0.0, f64::max);
        (c, r)
    }

    pub fn contains_2d(&self, p: Vec2) -> bool {
        let n = self.footprint.len();
        (0..n).all(|i| {
            let (a, b) = (self.footprint[i], self.footprint[(i + 1) % n]);
            let e = sub(b, a);
            let d = sub(p, a);
            e[0] * d[1] - e[1] * d[0] >= 0.0
        })
    }

    pub fn aabb(&self) -> Aabb {
        let mut b = Aabb::new(
            Point3::new(f64::INFINITY, f64::INFINITY, self.z_min),
            Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, self.z_max),
        );
        for p in &self.footprint {
            b.expand(&Point3::new(p[0], p[1], self.z_min));
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticObject {
    pub class_label: String,
    pub aabb: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicActor {
    pub class_label: String,
    /// Closed route; a single vertex means the actor is parked.
    pub route: Vec<Vec2>,
    pub speed: f64,
    /// Arc length along the route at t = 0; for parked actors, the heading.
    pub phase: f64,
    pub size: [f64; 3],
}

impl DynamicActor {
    fn route_length(&self) -> f64 {
        let n = self.route.len();
        if n < 2 {
            return 0.0;
        }
        (0..n).map(|i| norm(sub(self.route[(i + 1) % n], self.route[i]))).sum()
    }

    /// Footprint centre and heading at time `t` seconds.
    pub fn state_at(&self, t: f64) -> (Vec2, f64) {
        let n = self.route.len();
        if n == 1 {
            return (self.route[0], self.phase);
        }
        let len = self.route_length();
        let mut s = (self.phase + self.speed * t).rem_euclid(len);
        for i in 0..n {
            let (a, b) = (self.route[i], self.route[(i + 1) % n]);
            let d = norm(sub(b, a));
            if s <= d || i == n - 1 {
                let u = unit(sub(b, a));
                return (add(a, scale(u, s.min(d))), u[1].atan2(u[0]));
            }
            s -= d;
        }
        unreachable!("route walk covers the full length")
    }

    pub fn prism_at(&self, t: f64) -> Prism {
        let (c, yaw) = self.state_at(t);
        Prism::oriented_box(c, yaw, self.size)
    }

    pub fn is_parked(&self) -> bool {
        self.route.len() == 1 || self.speed == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub params: WorldParams,
    pub seed: u64,
    pub intersections: Vec<Intersection>,
    pub roads: Vec<RoadSegment>,
    pub buildings: Vec<Prism>,
    pub static_objects: Vec<StaticObject>,
    pub dynamic_actors: Vec<DynamicActor>,
}

impl World {
    pub fn intersection_at(&self, i: usize, j: usize) -> Vec2 {
        self.intersections[j * self.params.nx + i].pos
    }

    /// Empty world with no ground structure, for sensor tests.
    pub fn empty() -> Self {
        Self {
            params: WorldParams::default(),
            seed: 0,
            intersections: Vec::new(),
            roads: Vec::new(),
            buildings: Vec::new(),
            static_objects: Vec::new(),
            dynamic_actors: Vec::new(),
        }
    }
}

/// Offsets a closed convex loop inward (towards its centroid) by `d`.
fn inset_loop(pts: &[Vec2], d: f64) -> Vec<Vec2> {
    let n = pts.len();
    let c = pts.iter().fold([0.0, 0.0], |a, p| add(a, scale(*p, 1.0 / n as f64)));
    (0..n)
        .map(|i| {
            let prev = pts[(i + n - 1) % n];
            let next = pts[(i + 1) % n];
            let p = pts[i];
            let inward = |a: Vec2, b: Vec2| {
                let u = unit(sub(b, a));
                let nrm = [-u[1], u[0]];
                let mid = scale(add(a, b), 0.5);
                if (c[0] - mid[0]) * nrm[0] + (c[1] - mid[1]) * nrm[1] >= 0.0 {
                    nrm
                } else {
                    [u[1], -u[0]]
                }
            };
            let (n1, n2) = (inward(prev, p), inward(p, next));
            let bis = add(n1, n2);
            let cos_half = (n1[0] * bis[0] + n1[1] * bis[1]) / norm(bis);
            add(p, scale(unit(bis), d / cos_half))
        })
        .collect()
}

pub fn generate_world(seed: u64, params: &WorldParams) -> Result<World> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, ny) = (params.nx, params.ny);
    let mut intersections = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let jit = |rng: &mut ChaCha8Rng| {
                if params.jitter > 0.0 {
                    rng.random_range(-params.jitter..=params.jitter)
                } else {
                    0.0
                }
            };
            let pos = [i as f64 * params.spacing + jit(&mut rng), j as f64 * params.spacing + jit(&mut rng)];
            intersections.push(Intersection { id: j * nx + i, pos });
        }
    }
    let at = |i: usize, j: usize| intersections[j * nx + i].pos;

    let mut roads = Vec::new();
    for j in 0..ny {
        for i in 0..nx - 1 {
            let (a, b) = (j * nx + i, j * nx + i + 1);
            roads.push(RoadSegment { a, b, name: format!("Street {j}"), polyline: vec![at(i, j), at(i + 1, j)] });
        }
    }
    for i in 0..nx {
        for j in 0..ny - 1 {
            let (a, b) = (j * nx + i, (j + 1) * nx + i);
            roads.push(RoadSegment { a, b, name: format!("Avenue {i}"), polyline: vec![at(i, j), at(i, j + 1)] });
        }
    }

    let half_road = params.road_width / 2.0;
    let corner_clear = half_road + 6.0;
    let mut buildings = Vec::new();
    let mut static_objects = Vec::new();
    for road in &roads {
        let (a, b) = (road.polyline[0], road.polyline[1]);
        let len = norm(sub(b, a));
        let u = unit(sub(b, a));
        for side in [1.0, -1.0] {
            let nrm = scale([-u[1], u[0]], side);
            let mut t = corner_clear + rng.random_range(0.0..4.0);
            while len - corner_clear - t > 6.0 {
                let l = rng.random_range(10.0..28.0f64).min(len - corner_clear - t);
                let setback = rng.random_range(2.0..5.0);
                let depth = rng.random_range(8.0..16.0);
                let h = rng.random_range(params.building_height.0..=params.building_height.1);
                if rng.random::<f64>() > 0.12 {
                    let base0 = add(a, scale(u, t));
                    let base1 = add(a, scale(u, t + l));
                    let off0 = scale(nrm, half_road + setback);
                    let off1 = scale(nrm, half_road + setback + depth);
                    buildings.push(Prism::new(
                        vec![add(base0, off0), add(base1, off0), add(base1, off1), add(base0, off1)],
                        0.0,
                        h,
                    ));
                }
                t += l + rng.random_range(1.0..7.0);
            }
        }
        // street-side poles
        let mut t = 15.0 + rng.random_range(0.0..params.pole_spacing);
        while t < len - 15.0 {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let p = add(add(a, scale(u, t)), scale([-u[1], u[0]], side * (half_road + 0.8)));
            static_objects.push(StaticObject {
                class_label: "pole".into(),
                aabb: Aabb::from_center_size(Point3::new(p[0], p[1], 3.5), [0.35, 0.35, 7.0]),
            });
            t += params.pole_spacing * rng.random_range(0.7..1.3);
        }
    }

    let corner_off = half_road + 1.0;
    for inter in &intersections {
        let corners = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        let first = rng.random_range(0..4usize);
        for k in 0..4 {
            let c = corners[(first + k) % 4];
            let p = add(inter.pos, scale(c, corner_off));
            let (label, size) = match k {
                0 => ("traffic light", [0.5, 0.5, 5.5]),
                1 if rng.random::<f64>() < 0.7 => ("traffic sign", [0.25, 0.9, 2.6]),
                2 if rng.random::<f64>() < 0.5 => ("traffic light", [0.5, 0.5, 5.5]),
                3 if rng.random::<f64>() < 0.5 => ("pole", [0.35, 0.35, 7.0]),
                _ => continue,
            };
            static_objects.push(StaticObject {
                class_label: label.into(),
                aabb: Aabb::from_center_size(Point3::new(p[0], p[1], size[2] / 2.0), size),
            });
        }
    }

    let mut dynamic_actors = Vec::new();
    let block = |rng: &mut ChaCha8Rng| {
        let (i, j) = (rng.random_range(0..nx - 1), rng.random_range(0..ny - 1));
        let mut pts = vec![at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
        if rng.random::<bool>() {
            pts.reverse();
        }
        pts
    };
    for _ in 0..params.n_moving {
        let route = inset_loop(&block(&mut rng), 3.5);
        let bus = rng.random::<f64>() < 0.2;
        let actor = DynamicActor {
            class_label: if bus { "bus" } else { "car" }.into(),
            speed: rng.random_range(4.0..9.0),
            phase: rng.random_range(0.0..4.0 * params.spacing),
            size: if bus { [11.0, 2.5, 3.2] } else { [4.5, 1.9, 1.5] },
            route,
        };
        dynamic_actors.push(actor);
    }
    for _ in 0..params.n_parked {
        let road = &roads[rng.random_range(0..roads.len())];
        let (a, b) = (road.polyline[0], road.polyline[1]);
        let u = unit(sub(b, a));
        let t = rng.random_range(0.3..0.7) * norm(sub(b, a));
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let p = add(add(a, scale(u, t)), scale([-u[1], u[0]], side * (half_road - 1.0)));
        dynamic_actors.push(DynamicActor {
            class_label: "car".into(),
            route: vec![p],
            speed: 0.0,
            phase: u[1].atan2(u[0]),
            size: [4.5, 1.9, 1.5],
        });
    }
    for _ in 0..params.n_pedestrians {
        let route = inset_loop(&block(&mut rng), half_road + 1.6);
        dynamic_actors.push(DynamicActor {
            class_label: "pedestrian".into(),
            speed: rng.random_range(1.0..1.8),
            phase: rng.random_range(0.0..4.0 * params.spacing),
            size: [0.6, 0.6, 1.75],
            route,
        });
    }

    Ok(World { params: params.clone(), seed, intersections, roads, buildings, static_objects, dynamic_actors })
}

/// Angle between consecutive heading vectors, used by route fillets.
pub(crate) fn turn_angle(u1: Vec2, u2: Vec2) -> f64 {
    let cross = u1[0] * u2[1] - u1[1] * u2[0];
    let dot = u1[0] * u2[0] + u1[1] * u2[1];
    cross.atan2(dot)
}
