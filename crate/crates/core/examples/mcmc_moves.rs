//! Transition-kernel moves: a Metropolis-Hastings chain that keeps weights,
//! and a reweighting move that keeps proper weighting.

use pcomb::dist::DistDescriptor;
use pcomb::inference::{move_mh, move_reweight, TransitionKernel};
use pcomb::model::primitive;
use pcomb::params::ParameterStore;
use pcomb::rng::RngStream;
use pcomb::trace::{Trace, Value};

fn main() -> pcomb::Result<()> {
    let target = primitive("banana", |_, site| {
        let x = site.sample("x", &DistDescriptor::normal(0.0, 2.0)?)?.as_real().unwrap();
        site.observe("y", &DistDescriptor::normal(x * x / 4.0, 0.5)?, &Value::Real(1.0))?;
        Ok(Value::Real(x))
    });
    let step = 0.8;
    let kernel = TransitionKernel::new(
        move |from: &Trace, rng: &mut RngStream| {
            let x = from.get("x").unwrap().value.as_real().unwrap();
            let next = DistDescriptor::normal(x, step)?.sample(rng)?;
            from.with_value("x", next)
        },
        move |from: &Trace, to: &Trace| {
            let x = from.get("x").unwrap().value.as_real().unwrap();
            DistDescriptor::normal(x, step)?.log_prob(&to.get("x").unwrap().value)
        },
    );

    let store = ParameterStore::new();
    let mut rng = RngStream::new(5);
    let mut s = target.simulate(&[], &mut rng, &store)?;
    let (mut accepted, mut positive) = (0, 0);
    let n = 20_000;
    for _ in 0..n {
        let (next, acc) = move_mh(&target, &kernel, &[], &s, &mut rng, &store)?;
        assert_eq!(next.log_weight.to_bits(), s.log_weight.to_bits());
        s = next;
        accepted += acc as usize;
        positive += (s.output.as_real().unwrap() > 0.0) as usize;
    }
    println!("MH: acceptance {:.3}, P(x > 0) {:.3} (symmetric target: 0.5)", accepted as f64 / n as f64, positive as f64 / n as f64);

    let start = target.simulate(&[], &mut RngStream::new(9), &store)?;
    let moved = move_reweight(&target, &kernel, &[], &start, &mut rng, &store)?;
    println!(
        "reweight: x {:.3} -> {:.3}, log w {:.4} -> {:.4}",
        start.output.as_real().unwrap(),
        moved.output.as_real().unwrap(),
        start.log_weight,
        moved.log_weight
    );
    Ok(())
}
