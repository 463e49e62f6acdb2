//! Importance sampling with a custom proposal, then resampling, compared with
//! the exact normalizer of a conjugate Gaussian model.

use pcomb::dist::DistDescriptor;
use pcomb::estimators::log_evidence;
use pcomb::inference::{ess, importance, resample, run_population, ResampleScheme};
use pcomb::model::primitive;
use pcomb::params::ParameterStore;
use pcomb::rng::RngStream;
use pcomb::trace::Value;

fn main() -> pcomb::Result<()> {
    let y = 1.5;
    let target = primitive("target", move |_, site| {
        let x = site.sample("x", &DistDescriptor::normal(0.0, 1.0)?)?;
        site.observe("y", &DistDescriptor::normal(x.as_real().unwrap(), 0.5)?, &Value::Real(y))?;
        Ok(x)
    });
    let proposal = primitive("proposal", |_, site| site.sample("x", &DistDescriptor::normal(1.0, 0.8)?));
    let model = importance(&target, &proposal);

    // p(y) = N(y; 0, 1 + 0.25)
    let var: f64 = 1.25;
    let exact = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * y * y / var;
    let store = ParameterStore::new();
    for k in [10, 100, 1000, 10_000] {
        let pop = run_population(&model, &[], k, &RngStream::new(k as u64), &store, true)?;
        println!(
            "K = {k:>6}: log Z estimate {:.4} (exact {exact:.4}), ESS {:.1}",
            log_evidence(&pop)?,
            ess(&pop)?
        );
    }

    let pop = run_population(&model, &[], 1000, &RngStream::new(0), &store, true)?;
    let after = resample(&pop, &mut RngStream::new(1), ResampleScheme::Systematic)?;
    let mean = |p: &pcomb::inference::Population| {
        p.particles.iter().map(|s| s.output.as_real().unwrap()).sum::<f64>() / p.k() as f64
    };
    println!("resampled: ESS {:.0}, mean x {:.3} (posterior mean {:.3})", ess(&after)?, mean(&after), y / var);
    Ok(())
}
