//! SMC over a two-state HMM built with `hmm_step`, against the exact forward
//! algorithm, with per-step diagnostics.

use std::sync::Arc;

use pcomb::dist::DistDescriptor;
use pcomb::hmm::exact::exact_hmm;
use pcomb::hmm::HmmParams;
use pcomb::inference::{smc, SmcOptions};
use pcomb::model::{hmm_step, primitive, Emission, HmmCarry};
use pcomb::params::ParameterStore;
use pcomb::rng::RngStream;
use pcomb::trace::Value;

fn main() -> pcomb::Result<()> {
    let global = primitive("fixed", |_, _| {
        Ok(HmmCarry {
            initial: vec![0.5, 0.5].into(),
            transition: vec![0.9, 0.1, 0.2, 0.8].into(),
            emission: vec![-1.0, 1.0, 0.0, 0.0].into(),
            previous: None,
        }
        .to_value())
    });
    // Two-dimensional emissions: means stored as (x0, x1, y0, y1).
    let emission: Emission = Arc::new(|m: &[f64], z: usize| DistDescriptor::normal_diag(vec![m[z], m[2 + z]], vec![0.7, 0.7]));
    let step = hmm_step(emission);

    let obs = [[-1.2, 0.1], [-0.7, -0.3], [0.9, 0.2], [1.4, -0.1], [0.8, 0.4], [-0.2, 0.0]];
    let ys: Vec<Value> = obs.iter().map(|o| Value::vector(o.to_vec())).collect();
    let exact = exact_hmm(
        &HmmParams {
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            means: vec![[-1.0, 0.0], [1.0, 0.0]],
            obs_sd: 0.7,
        },
        &obs,
    )?;

    let out = smc(&global, &step, &ys, 500, &SmcOptions::default(), &RngStream::new(2), &ParameterStore::new())?;
    for d in &out.diagnostics {
        println!("stage {}: ESS {:6.1}, Δlog Z {:8.4}, resampled {}", d.step, d.ess, d.log_evidence_increment, d.resampled);
    }
    println!("SMC log Z {:.4}, forward algorithm {:.4}", out.log_evidence(), exact.log_z);

    let last = obs.len() - 1;
    let on = out
        .population
        .particles
        .iter()
        .filter(|p| p.trace.get(&format!("right/step:{last}/z")).unwrap().value == Value::Index(1))
        .count();
    println!(
        "P(z_last = 1 | y): particles {:.3}, exact {:.3}",
        on as f64 / out.population.k() as f64,
        exact.marginals[last][1]
    );
    Ok(())
}
