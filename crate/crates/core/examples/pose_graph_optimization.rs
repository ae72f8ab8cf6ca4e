//! A square loop with drifting odometry, closed by one loop edge.

use urbangraph::geometry::Pose2;
use urbangraph::pose_graph::{EdgeKind, GraphEdge, NodeId, OptimizerConfig, PoseGraph};
use nalgebra::Matrix3;

fn main() -> urbangraph::Result<()> {
    let info = Matrix3::from_diagonal(&nalgebra::Vector3::new(100.0, 100.0, 1000.0));
    let step = Pose2::new(10.0, 0.0, std::f64::consts::FRAC_PI_2);
    // odometry that over-turns by a degree each corner
    let measured = Pose2::new(10.0, 0.0, step.theta + 1f64.to_radians());

    let mut g = PoseGraph::new();
    let mut pose = Pose2::identity();
    g.add_node(0, 0, pose, true);
    for k in 1..4u32 {
        pose = pose.compose(&measured);
        g.add_node(0, k, pose, false);
        let edge = GraphEdge { from: NodeId(k - 1), to: NodeId(k), measurement: measured, information: info, kind: EdgeKind::Odometry };
        g.add_edge(edge)?;
    }
    g.add_edge(GraphEdge { from: NodeId(3), to: NodeId(0), measurement: step, information: info, kind: EdgeKind::LoopIntra })?;

    let report = g.optimize(&OptimizerConfig::default())?;
    println!("chi2 {:.4} -> {:.6} in {} iterations", report.initial_chi2, report.final_chi2, report.iterations);
    for n in g.nodes() {
        println!("node {}: ({:7.3}, {:7.3}, {:6.1} deg)", n.id, n.pose.x, n.pose.y, n.pose.theta.to_degrees());
    }
    print!("{}", g.dump());
    Ok(())
}
