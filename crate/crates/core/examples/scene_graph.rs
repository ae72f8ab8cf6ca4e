//! Builds the urban scene graph of a short run and prints its layers.

use urbangraph::pipeline::{run, AgentInput, PipelineConfig};
use urbangraph::sim::{simulate, ScenarioConfig};

fn main() -> urbangraph::Result<()> {
    let sim = simulate(&ScenarioConfig::preset("staircase", 4, 2, 40.0)?)?;
    let out = run(&AgentInput::from_simulation(&sim), &PipelineConfig::default(), true)?;
    let sg = &out.scene_graph;

    println!("{} intersections, {} roads", sg.intersections().len(), sg.roads().len());
    for i in sg.intersections() {
        println!("  intersection {} at ({:.1}, {:.1})", i.id, i.x, i.y);
    }
    let mut by_class = std::collections::BTreeMap::<String, usize>::new();
    for o in sg.static_objects() {
        *by_class.entry(o.class_label).or_default() += 1;
    }
    println!("static objects {by_class:?}");
    let moving = sg.tracks().iter().filter(|t| t.moving).count();
    println!("{} tracks, {moving} moving", sg.tracks().len());
    println!("rebuild equivalent: {}", sg.static_partition() == sg.replay_static());

    let json = sg.export_json();
    println!("export: {} bytes, begins {}", json.len(), json[..json.len().min(80)].replace('\n', " "));
    Ok(())
}
