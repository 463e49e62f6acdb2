//! Wake-sleep on a one-dimensional latent-variable model: θ learns the prior
//! mean by maximizing the evidence estimate, φ learns an amortized proposal
//! `q(x | y)` from the same weighted particles.

use pcomb::dist::{DistDescriptor, Family};
use pcomb::estimators::{wake_sleep_epoch, WakeSleep};
use pcomb::inference::{importance, SmcOptions};
use pcomb::model::primitive;
use pcomb::params::{AdamConfig, OptimizerState, ParamLink, ParamRole, ParameterStore};
use pcomb::rng::RngStream;
use pcomb::trace::Value;

fn main() -> pcomb::Result<()> {
    // x ~ N(θ, 1), y ~ N(x, 0.5); data drawn with θ = 2.
    let step = primitive("target", |inputs, site| {
        let x = site.sample_param("x", ParamLink::direct(Family::NormalDiag, "theta.prior", 0, 2))?;
        site.observe("y", &DistDescriptor::normal(x.as_real().unwrap(), 0.5)?, &inputs[1])?;
        Ok(inputs[0].clone())
    })
    .with_arity(2);
    let proposal = primitive("proposal", |inputs, site| {
        let y = inputs[1].as_real().unwrap();
        site.sample_param("x", ParamLink::linear(Family::NormalDiag, "phi.q", 0, 2, &[y, 1.0]))
    })
    .with_arity(2);

    let mut rng = RngStream::new(0);
    let data: Vec<Vec<Value>> = (0..50)
        .map(|_| {
            let x = DistDescriptor::normal(2.0, 1.0).unwrap().sample(&mut rng).unwrap().as_real().unwrap();
            let y = DistDescriptor::normal(x, 0.5).unwrap().sample(&mut rng).unwrap();
            vec![y]
        })
        .collect();

    let mut store = ParameterStore::new();
    store.insert("theta.prior", vec![0.0, 0.0], ParamRole::Theta);
    // Rows: mean weights [y, 1], log-scale weights [y, 1].
    store.insert("phi.q", vec![0.0; 4], ParamRole::Phi);
    let ws = WakeSleep {
        global: primitive("none", |_, _| Ok(Value::unit())),
        step: importance(&step, &proposal),
        particles: 32,
        smc: SmcOptions::default(),
        batch_size: 10,
        parallel: true,
    };
    let mut opt = OptimizerState::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
    let root = RngStream::new(1);
    for epoch in 0..200 {
        let m = wake_sleep_epoch(&data, &ws, &mut store, &mut opt, &root, epoch)?;
        if epoch % 40 == 0 || epoch == 199 {
            let theta = store.values("theta.prior")?;
            let phi = store.values("phi.q")?;
            println!(
                "epoch {epoch:3}: mean log Z {:8.3}, prior mean {:.3}, prior sd {:.3}, q mean = {:.2}·y + {:.2}",
                m.mean_log_evidence,
                theta[0],
                theta[1].exp(),
                phi[0],
                phi[1]
            );
        }
    }
    // Under the learned prior N(m, v) the exact posterior has mean
    // (v·y + 0.25·m) / (v + 0.25) and variance 0.25·v / (v + 0.25).
    let theta = store.values("theta.prior")?;
    let (m, v) = (theta[0], (2.0 * theta[1]).exp());
    println!(
        "optimal proposal under the learned prior: mean = {:.2}·y + {:.2}, sd {:.3}",
        v / (v + 0.25),
        0.25 * m / (v + 0.25),
        (0.25 * v / (v + 0.25)).sqrt()
    );
    let phi = store.values("phi.q")?;
    println!("learned proposal sd at y = 2: {:.3}", (2.0 * phi[2] + phi[3]).exp());
    Ok(())
}
