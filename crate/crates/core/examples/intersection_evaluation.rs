//! Scores detected intersections against the map on two route layouts.

use urbangraph::dataset::{evaluate, read_dataset, read_run, write_run, write_simulation, EvalConfig};
use urbangraph::pipeline::{run, PipelineConfig};
use urbangraph::sim::{simulate, ScenarioConfig};

fn main() -> urbangraph::Result<()> {
    let root = tempfile_dir();
    for preset in ["staircase", "mixed"] {
        let (data_dir, run_dir) = (root.join(format!("{preset}-data")), root.join(format!("{preset}-run")));
        write_simulation(&simulate(&ScenarioConfig::preset(preset, 3, 3, 60.0)?)?, preset, &data_dir)?;
        let data = read_dataset(&data_dir)?;
        write_run(&run(&data.agents, &PipelineConfig::default(), true)?, &run_dir)?;
        let m = evaluate(&read_run(&run_dir)?, &data, &EvalConfig::default())?;
        let (a, t) = (m.intersections_all, m.intersections_turned);
        println!("{preset:>9}: All P {:.2} R {:.2} | Turned P {:.2} R {:.2} | ATE {:.2} m", a.precision, a.recall, t.precision, t.recall, m.ate_mean_m);
    }
    std::fs::remove_dir_all(&root)?;
    Ok(())
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("urbangraph-eval-{}", std::process::id()));
    std::fs::create_dir_all(&d).expect("temp dir");
    d
}
