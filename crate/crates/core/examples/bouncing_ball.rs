//! Full bouncing-ball experiment: wake-sleep SMC and VBEM on the same data.
//!
//! cargo run --release --example bouncing_ball -- [config.json]

use pcomb::config::RunConfig;
use pcomb::hmm::experiment::run_experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    let started = std::time::Instant::now();
    let out = run_experiment(&cfg, |m| {
        if m.epoch % 10 == 0 {
            println!(
                "epoch {:4}  mean log Z {:10.2}  |g_theta| {:8.3}  |g_phi| {:8.3}  {} ms",
                m.epoch, m.mean_log_evidence, m.theta_grad_norm, m.phi_grad_norm, m.wall_ms
            );
        }
    })?;
    for (name, r) in [("wake-sleep", &out.report.wake_sleep), ("vbem", &out.report.vbem)] {
        let r = r.as_ref().expect("both methods run");
        println!(
            "{name:>10}: transition TV {:.4}, state accuracy {:.4}",
            r.transition_error, r.state_accuracy
        );
    }
    println!("total {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}
