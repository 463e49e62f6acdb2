//! Programs, traces and replay.
//!
//! A primitive program records each random choice at an address. Running it
//! again against a recorded trace replays those choices, which is how scores
//! and importance weights are computed.

use pcomb::dist::DistDescriptor;
use pcomb::model::primitive;
use pcomb::params::ParameterStore;
use pcomb::rng::RngStream;
use pcomb::trace::Value;

fn main() -> pcomb::Result<()> {
    let coin = DistDescriptor::categorical(vec![0.3, 0.7])?;
    let model = primitive("noisy_coin", move |_, site| {
        let z = site.sample("z", &coin)?.as_index().unwrap();
        let mean = [-1.0, 1.0][z];
        site.observe("y", &DistDescriptor::normal(mean, 0.5)?, &Value::Real(0.8))?;
        Ok(Value::Index(z))
    });

    let store = ParameterStore::new();
    let sample = model.simulate(&[], &mut RngStream::new(1), &store)?;
    println!("output {:?}, log weight {:.4}", sample.output, sample.log_weight);
    println!("{}", serde_json::to_string_pretty(&sample.trace.to_json()).unwrap());

    // Flip the latent and rescore: the observation's density changes.
    let z = sample.trace.get("z").unwrap().value.as_index().unwrap();
    let flipped = sample.trace.with_value("z", Value::Index(1 - z))?;
    let rescored = model.score(&[], &flipped, &store)?;
    println!(
        "log joint {:.4} -> {:.4} after setting z = {}",
        sample.trace.log_joint(),
        rescored.trace.log_joint(),
        1 - z
    );
    Ok(())
}
