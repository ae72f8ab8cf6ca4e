//! Indexes ScanContext descriptors along a drive and re-finds each place
//! from a scan taken facing another way.

use urbangraph::geometry::Pose2;
use urbangraph::scan_context::{encode, DescriptorIndex, ScanContextConfig};
use urbangraph::sim::{simulate, simulate_scan, ScenarioConfig};

fn main() -> urbangraph::Result<()> {
    let sc = ScenarioConfig::preset("staircase", 2, 1, 30.0)?;
    let sim = simulate(&sc)?;
    let cfg = ScanContextConfig::default();
    let scans: Vec<_> = sim.agents[0].scans.iter().step_by(5).collect();
    let mut index = DescriptorIndex::new(cfg.clone());
    for (i, s) in scans.iter().enumerate() {
        index.insert(i, encode(&s.cloud, &cfg));
    }

    let mut found = 0;
    for (i, s) in scans.iter().enumerate() {
        let turn = 17.0 * cfg.sector_width();
        let p = Pose2::new(s.gt_pose.x, s.gt_pose.y, s.gt_pose.theta + turn);
        let q = encode(&simulate_scan(&p, &sim.world, s.timestamp_us as f64 * 1e-6, &sc.lidar, 99 + i as u64), &cfg);
        match index.query(&q, 1, |_| false).first() {
            Some(m) if m.handle == i => {
                found += 1;
                let yaw = cfg.shift_to_yaw(m.shift).to_degrees();
                println!("place {i:2}: distance {:.3}, estimated yaw {yaw:6.1} deg", m.distance);
            }
            other => println!("place {i:2}: best {other:?}"),
        }
    }
    println!("{found}/{} places re-found", scans.len());
    Ok(())
}
