//! Three agents with noisy odometry map the same block; compares the
//! shared map against one agent alone.

use urbangraph::pipeline::{run, AgentInput, PipelineConfig};
use urbangraph::sim::{simulate, ScenarioConfig};

fn main() -> urbangraph::Result<()> {
    let sim = simulate(&ScenarioConfig::preset("convoy", 1, 3, 45.0)?)?;
    let mut cfg = PipelineConfig::default();
    cfg.frontend.odom_noise_trans = 0.02;
    cfg.frontend.odom_noise_rot = 0.002;
    let inputs = AgentInput::from_simulation(&sim);

    let multi = run(&inputs, &cfg, true)?;
    let single = run(&inputs[..1], &cfg, true)?;
    println!(
        "3 agents: {} keyframes, {} component(s), loops {:?}, first inter-agent closure at {:?} us",
        multi.keyframes, multi.components, multi.loop_stats, multi.first_inter_closure_us
    );
    for (t, a, b) in &multi.merges {
        println!("  merge at {:.1} s: {a} + {b}", *t as f64 * 1e-6);
    }
    for (agent, bytes) in &multi.bandwidth {
        println!("  agent {agent} sent {:.1} kB", *bytes as f64 / 1e3);
    }
    let last = |o: &urbangraph::pipeline::RunOutput| o.ate_series.last().map(|s| s.ate_mean).unwrap_or(f64::NAN);
    println!("final ATE: 3 agents {:.3} m, 1 agent {:.3} m", last(&multi), last(&single));
    Ok(())
}
