//! VBEM on bouncing-ball displacements, scored against the generating
//! headings after resolving label switching.

use pcomb::config::RunConfig;
use pcomb::hmm::experiment::{dataset_for, evaluate, fit_vbem, truth_params};

fn main() -> pcomb::Result<()> {
    let cfg = RunConfig::default();
    let data = dataset_for(&cfg)?;
    let fit = fit_vbem(&cfg, &data)?;
    println!("{} iterations, ELBO {:.2} -> {:.2}", fit.elbo_trace.len(), fit.elbo_trace[0], fit.elbo_trace.last().unwrap());
    let truth = truth_params(&cfg, &data);
    let report = evaluate(&fit.point_estimate(), &truth, &data)?;
    println!("alignment {:?}", report.alignment);
    println!("transition TV {:.4}, state accuracy {:.4}", report.transition_error, report.state_accuracy);
    for (i, row) in report.learned_params.transition.iter().enumerate() {
        let m = report.learned_params.means[i];
        println!("  state {i}: mean ({:+.3}, {:+.3}), row {:.3?}", m[0], m[1], row);
    }
    Ok(())
}
