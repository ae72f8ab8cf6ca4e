//! Registers a simulated street scan against a displaced copy of itself.

use urbangraph::frontend::{scan_match, IcpConfig, IcpMetric};
use urbangraph::geometry::{transform_cloud, Frame, PointCloud, Pose2};
use urbangraph::sim::scenario::build_routes;
use urbangraph::sim::{generate_world, simulate_scan, ScenarioConfig};

fn main() -> urbangraph::Result<()> {
    let sc = ScenarioConfig::preset("town", 1, 1, 0.0)?;
    let world = generate_world(sc.seed, &sc.world)?;
    let route = build_routes(&sc, &world)?.remove(0);
    let pose = route.pose_at(140.0);
    let target = simulate_scan(&pose, &world, 0.0, &sc.lidar, 1);
    let truth = Pose2::new(0.6, -0.3, 8f64.to_radians());
    let again = simulate_scan(&pose, &world, 0.0, &sc.lidar, 2);
    let source = PointCloud::new(transform_cloud(&truth.inverse(), &again).points, Frame::Sensor);

    for metric in [IcpMetric::PointToPoint, IcpMetric::PointToLine] {
        let cfg = IcpConfig { min_z: Some(0.3), coarse_levels: 2, metric, ..IcpConfig::default() };
        let r = scan_match(&source, &target, Pose2::identity(), &cfg)?;
        let err = r.transform.between(&truth);
        println!(
            "{metric:?}: {} iterations, fitness {:.4} m², inliers {:.0}%, error {:.4} m / {:.3} deg",
            r.iterations,
            r.fitness,
            100.0 * r.inlier_fraction,
            err.translation_norm(),
            err.theta.to_degrees()
        );
    }
    Ok(())
}
