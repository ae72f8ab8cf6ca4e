//! Generates a town, records two agents and writes the dataset to disk.
//!
//! `cargo run --example simulate_town -- /tmp/town`

use urbangraph::dataset::{read_dataset, write_simulation};
use urbangraph::sim::{simulate, ScenarioConfig};

fn main() -> urbangraph::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("urbangraph-town").display().to_string());
    let sim = simulate(&ScenarioConfig::preset("town", 42, 2, 10.0)?)?;
    let w = &sim.world;
    println!(
        "{} intersections, {} road segments, {} buildings, {} static objects, {} actors",
        w.intersections.len(),
        w.roads.len(),
        w.buildings.len(),
        w.static_objects.len(),
        w.dynamic_actors.len()
    );
    for a in &sim.agents {
        let pts: usize = a.scans.iter().map(|s| s.cloud.len()).sum();
        let dets: usize = a.scans.iter().map(|s| s.detections.len()).sum();
        println!("agent {}: {} scans, {} points, {} detections", a.agent_id, a.scans.len(), pts, dets);
    }
    write_simulation(&sim, "town", dir.as_ref())?;
    let back = read_dataset(dir.as_ref())?;
    println!("wrote {dir} ({} agents, manifest {:?})", back.agents.len(), back.manifest.get("duration_s"));
    Ok(())
}
