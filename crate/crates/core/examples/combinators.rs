//! Model combinators and the addresses they give each random choice.

use pcomb::dist::DistDescriptor;
use pcomb::model::{compose, map_combinator, mixture, partial, primitive, reduce_combinator};
use pcomb::params::ParameterStore;
use pcomb::rng::RngStream;
use pcomb::trace::Value;

fn main() -> pcomb::Result<()> {
    let store = ParameterStore::new();
    let mut rng = RngStream::new(3);
    let show = |title: &str, s: &pcomb::trace::WeightedSample| {
        println!("{title}: output {:?}, log weight {:.4}", s.output, s.log_weight);
        for r in s.trace.iter() {
            println!("    {:<24} {:?} {:?}", r.address.as_str(), r.role, r.value);
        }
    };

    let prior = primitive("prior", |_, site| site.sample("x", &DistDescriptor::normal(0.0, 1.0)?));
    let likelihood = primitive("likelihood", |inputs, site| {
        let x = inputs[0].as_real().unwrap();
        site.observe("y", &DistDescriptor::normal(x, 0.5)?, &Value::Real(1.2))?;
        Ok(inputs[0].clone())
    })
    .with_arity(1);
    show("compose", &compose(&prior, &likelihood).simulate(&[], &mut rng, &store)?);

    let point = primitive("point", |inputs, site| {
        let y = inputs[0].as_real().unwrap();
        site.observe("y", &DistDescriptor::normal(0.0, 1.0)?, &Value::Real(y))?;
        Ok(Value::Real(y))
    })
    .with_arity(1);
    let ys = vec![Value::Real(0.1), Value::Real(-0.4), Value::Real(0.9)];
    show("map", &map_combinator(&point, ys.clone()).simulate(&[], &mut rng, &store)?);

    let walk = primitive("walk", |inputs, site| {
        let prev = inputs[0].as_real().unwrap();
        let x = site.sample("x", &DistDescriptor::normal(prev, 1.0)?)?;
        site.observe("y", &DistDescriptor::normal(x.as_real().unwrap(), 0.3)?, &inputs[1])?;
        Ok(x)
    })
    .with_arity(2);
    show("reduce", &reduce_combinator(&walk, Value::Real(0.0), ys).simulate(&[], &mut rng, &store)?);

    let weights = primitive("weights", |_, _| Ok(Value::vector(vec![0.25, 0.75])));
    let narrow = primitive("narrow", |_, site| site.sample("x", &DistDescriptor::normal(-2.0, 0.1)?));
    let wide = primitive("wide", |_, site| site.sample("x", &DistDescriptor::normal(2.0, 1.0)?));
    show("mixture", &mixture(&weights, vec![narrow, wide]).simulate(&[], &mut rng, &store)?);

    show("partial", &partial(&likelihood, Value::Real(1.0)).simulate(&[], &mut rng, &store)?);
    Ok(())
}
