//! Polar height descriptors for place recognition across agents.
//!
//! A scan is binned into `n_ring × n_sector` polar cells around the sensor;
//! each cell stores the maximum point height. The ring key (occupancy per
//! ring) is rotation invariant and pre-filters the index before the
//! column-shift cosine distance picks the best match and relative yaw.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanContextConfig {
    pub n_ring: usize,
    pub n_sector: usize,
    pub r_max: f64,
    /// Added to every point height before clamping at zero.
    pub height_offset: f64,
    pub n_ringkey: usize,
    pub d_sc: f64,
}

impl Default for ScanContextConfig {
    fn default() -> Self {
        Self {
            n_ring: 20,
            n_sector: 60,
            r_max: 80.0,
            height_offset: 0.0,
            n_ringkey: 10,
            d_sc: 0.25,
        }
    }
}

impl ScanContextConfig {
    pub fn sector_width(&self) -> f64 {
        2.0 * PI / self.n_sector as f64
    }

    /// Yaw (radians) corresponding to a column shift.
    pub fn shift_to_yaw(&self, shift: usize) -> f64 {
        crate::geometry::normalize_angle(shift as f64 * self.sector_width())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanDescriptor {
    n_ring: usize,
    n_sector: usize,
    /// Row-major `n_ring × n_sector` heights.
    grid: Vec<f64>,
    ring_key: Vec<f64>,
}

impl ScanDescriptor {
    pub fn zeros(n_ring: usize, n_sector: usize) -> Self {
        Self {
            n_ring,
            n_sector,
            grid: vec![0.0; n_ring * n_sector],
            ring_key: vec![0.0; n_ring],
        }
    }

    /// Rebuilds a descriptor from its height grid; a bin counts as occupied
    /// when its height is positive.
    pub fn from_grid(n_ring: usize, n_sector: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != n_ring * n_sector || n_ring == 0 || n_sector == 0 {
            return Err(Error::Parameter(format!(
                "descriptor grid has {} cells, expected {n_ring}×{n_sector}",
                grid.len()
            )));
        }
        if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("descriptor heights must be finite and ≥ 0".into()));
        }
        let ring_key = grid
            .chunks(n_sector)
            .map(|row| row.iter().filter(|&&v| v > 0.0).count() as f64 / n_sector as f64)
            .collect();
        Ok(Self { n_ring, n_sector, grid, ring_key })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_ring, self.n_sector)
    }

    pub fn get(&self, ring: usize, sector: usize) -> f64 {
        self.grid[ring * self.n_sector + sector]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn ring_key(&self) -> &[f64] {
        &self.ring_key
    }
}

pub fn encode(cloud: &PointCloud, cfg: &ScanContextConfig) -> ScanDescriptor {
    let (nr, ns) = (cfg.n_ring, cfg.n_sector);
    let mut grid = vec![0.0f64; nr * ns];
    let ring_width = cfg.r_max / nr as f64;
    for p in &cloud.points {
        let r = p.x.hypot(p.y);
        if r > cfg.r_max || !p.is_finite() {
            continue;
        }
        let ring = ((r / ring_width).floor() as usize).min(nr - 1);
        let frac = (p.y.atan2(p.x) + PI) / (2.0 * PI);
        let sector = ((frac * ns as f64).floor() as usize) % ns;
        let h = (p.z + cfg.height_offset).max(0.0);
        let cell = &mut grid[ring * ns + sector];
        if h > *cell {
            *cell = h;
        }
    }
    ScanDescriptor::from_grid(nr, ns, grid).expect("grid built with configured dimensions")
}

/// Minimum over cyclic column shifts of the mean column cosine distance.
///
/// Column `j` of `a` is compared with column `(j + shift) mod n_sector` of `b`.
pub fn descriptor_distance(a: &ScanDescriptor, b: &ScanDescriptor) -> Result<(f64, usize)> {
    if a.dims() != b.dims() {
        return Err(Error::Parameter(format!(
            "descriptor dimensions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (nr, ns) = a.dims();
    let col_norms = |d: &ScanDescriptor| -> Vec<f64> {
        (0..ns)
            .map(|j| (0..nr).map(|i| d.get(i, j).powi(2)).sum::<f64>())
            .collect()
    };
    let (na, nb) = (col_norms(a), col_norms(b)); // squared
    let mut best = (1.0f64, 0usize);
    let mut first = true;
    for shift in 0..ns {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..ns {
            let k = (j + shift) % ns;
            if na[j] == 0.0 || nb[k] == 0.0 {
                continue;
            }
            let dot: f64 = (0..nr).map(|i| a.get(i, j) * b.get(i, k)).sum();
            // sqrt(x·x) is exact, so identical columns give exactly zero
            sum += 1.0 - dot / (na[j] * nb[k]).sqrt();
            count += 1;
        }
        let d = if count == 0 { 1.0 } else { (sum / count as f64).clamp(0.0, 1.0) };
        if first || d < best.0 {
            best = (d, shift);
            first = false;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorMatch<H> {
    pub handle: H,
    pub distance: f64,
    pub shift: usize,
}

/// Descriptor store with exact ring-key pre-filtering.
#[derive(Debug, Clone)]
pub struct DescriptorIndex<H> {
    cfg: ScanContextConfig,
    entries: Vec<(H, ScanDescriptor)>,
    slots: BTreeMap<H, usize>,
}

impl<H: Copy + Ord> DescriptorIndex<H> {
    pub fn new(cfg: ScanContextConfig) -> Self {
        Self { cfg, entries: Vec::new(), slots: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or replaces the descriptor stored under `handle`.
    pub fn insert(&mut self, handle: H, descriptor: ScanDescriptor) {
        match self.slots.get(&handle) {
            Some(&i) => self.entries[i].1 = descriptor,
            None => {
                self.slots.insert(handle, self.entries.len());
                self.entries.push((handle, descriptor));
            }
        }
    }

    pub fn get(&self, handle: H) -> Option<&ScanDescriptor> {
        self.slots.get(&handle).map(|&i| &self.entries[i].1)
    }

    pub fn query(
        &self,
        q: &ScanDescriptor,
        k: usize,
        exclude: impl Fn(H) -> bool,
    ) -> Vec<DescriptorMatch<H>> {
        self.query_with_threshold(q, k, self.cfg.d_sc, exclude)
    }

    pub fn query_with_threshold(
        &self,
        q: &ScanDescriptor,
        k: usize,
        d_sc: f64,
        exclude: impl Fn(H) -> bool,
    ) -> Vec<DescriptorMatch<H>> {
        let mut shortlist: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, (h, d))| !exclude(*h) && d.dims() == q.dims())
            .map(|(i, (_, d))| {
                let dist2: f64 = d
                    .ring_key()
                    .iter()
                    .zip(q.ring_key())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (dist2, i)
            })
            .collect();
        shortlist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        shortlist.truncate(self.cfg.n_ringkey);

        let mut out: Vec<DescriptorMatch<H>> = shortlist
            .into_iter()
            .filter_map(|(_, i)| {
                let (h, d) = &self.entries[i];
                let (distance, shift) = descriptor_distance(q, d).ok()?;
                (distance <= d_sc).then_some(DescriptorMatch { handle: *h, distance, shift })
            })
            .collect();
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.handle.cmp(&b.handle)));
        out.truncate(k);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_cloud, Frame, Point3, Pose2};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-1.0..12.0),
                )
            })
            .collect();
        PointCloud::new(pts, Frame::Sensor)
    }

    #[test]
    fn empty_cloud_is_zero() {
        let d = encode(&PointCloud::empty(Frame::Sensor), &ScanContextConfig::default());
        assert!(d.grid().iter().all(|&v| v == 0.0));
        assert!(d.ring_key().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_binning() {
        let cfg = ScanContextConfig::default();
        // bearing just past -π lands in sector 0
        let c = PointCloud::new(vec![Point3::new(-10.0, -1e-3, 1.5)], Frame::Sensor);
        let d = encode(&c, &cfg);
        assert_eq!(d.get(2, 0), 1.5);
        assert_abs_diff_eq!(d.ring_key()[2], 1.0 / 60.0);
        assert_eq!(d.grid().iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn one_sector_rotation_shifts_columns() {
        let cfg = ScanContextConfig::default();
        // points at sector centres avoid boundary rounding
        let w = cfg.sector_width();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3> = (0..400)
            .map(|_| {
                let s = rng.random_range(0..60) as f64;
                let ang = -PI + (s + 0.5) * w;
                let r = rng.random_range(1.0..79.0);
                Point3::new(r * ang.cos(), r * ang.sin(), rng.random_range(0.1..9.0))
            })
            .collect();
        let c = PointCloud::new(pts, Frame::Sensor);
        let rotated = transform_cloud(&Pose2::new(0.0, 0.0, w), &c);
        let (a, b) = (encode(&c, &cfg), encode(&rotated, &cfg));
        for i in 0..20 {
            for j in 0..60 {
                assert_eq!(b.get(i, (j + 1) % 60), a.get(i, j));
            }
        }
    }

    fn shifted(d: &ScanDescriptor, s: usize) -> ScanDescriptor {
        let (nr, ns) = d.dims();
        let mut g = vec![0.0; nr * ns];
        for i in 0..nr {
            for j in 0..ns {
                g[i * ns + (j + s) % ns] = d.get(i, j);
            }
        }
        ScanDescriptor::from_grid(nr, ns, g).unwrap()
    }

    #[test]
    fn distance_examples() {
        let cfg = ScanContextConfig::default();
        let d = encode(&random_cloud(1, 500), &cfg);
        let (dist, shift) = descriptor_distance(&d, &d).unwrap();
        assert_abs_diff_eq!(dist, 0.0, epsilon = 1e-12);
        assert_eq!(shift, 0);
        let (dist, shift) = descriptor_distance(&d, &shifted(&d, 7)).unwrap();
        assert_abs_diff_eq!(dist, 0.0, epsilon = 1e-12);
        assert_eq!(shift, 7);
        let z = ScanDescriptor::zeros(20, 60);
        assert_eq!(descriptor_distance(&d, &z).unwrap().0, 1.0);
        let small = ScanDescriptor::zeros(10, 60);
        assert!(descriptor_distance(&d, &small).is_err());
    }

    #[test]
    fn query_examples() {
        let cfg = ScanContextConfig::default();
        let idx: DescriptorIndex<u32> = DescriptorIndex::new(cfg.clone());
        assert!(idx.query(&ScanDescriptor::zeros(20, 60), 5, |_| false).is_empty());

        let mut idx = DescriptorIndex::new(cfg.clone());
        for h in 0..30u32 {
            idx.insert(h, encode(&random_cloud(100 + h as u64, 400), &cfg));
        }
        let q = shifted(idx.get(12).unwrap(), 5);
        let res = idx.query(&q, 3, |_| false);
        assert_eq!(res[0].handle, 12);
        assert!(res[0].distance < 0.05);
        assert_eq!(res[0].shift, 55);
        for w in res.windows(2) {
            assert!(w[0].distance <= w[1].distance);
        }
        let none = idx.query_with_threshold(&encode(&random_cloud(999, 400), &cfg), 3, 0.0, |_| false);
        assert!(none.is_empty());
        let excluded = idx.query(&q, 3, |h| h == 12);
        assert!(excluded.iter().all(|m| m.handle != 12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn rotation_by_whole_sectors_is_invisible(seed in 0u64..1000, k in 0usize..60) {
            let cfg = ScanContextConfig::default();
            let w = cfg.sector_width();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..200).map(|_| {
                let s = rng.random_range(0..60) as f64;
                let ang = -PI + (s + rng.random_range(0.2..0.8)) * w;
                let r = rng.random_range(1.0..79.0);
                Point3::new(r * ang.cos(), r * ang.sin(), rng.random_range(0.1..9.0))
            }).collect();
            let c = PointCloud::new(pts, Frame::Sensor);
            let r = transform_cloud(&Pose2::new(0.0, 0.0, k as f64 * w), &c);
            let (dist, _) = descriptor_distance(&encode(&c, &cfg), &encode(&r, &cfg)).unwrap();
            prop_assert_eq!(dist, 0.0);
        }

        #[test]
        fn distance_symmetric(s1 in 0u64..500, s2 in 0u64..500) {
            let cfg = ScanContextConfig::default();
            let a = encode(&random_cloud(s1, 150), &cfg);
            let b = encode(&random_cloud(s2, 150), &cfg);
            let ab = descriptor_distance(&a, &b).unwrap().0;
            let ba = descriptor_distance(&b, &a).unwrap().0;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn encode_ignores_point_order(seed in 0u64..500) {
            let cfg = ScanContextConfig::default();
            let c = random_cloud(seed, 120);
            let mut rev = c.clone();
            rev.points.reverse();
            prop_assert_eq!(encode(&c, &cfg), encode(&rev, &cfg));
        }
    }
}
