//! Inference combinators over properly weighted samples: importance
//! sampling, resampling, transition-kernel moves, and SMC built from them.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ssm, EvalContext, Model};
use crate::params::ParameterStore;
use crate::rng::RngStream;
use crate::trace::{ExtReal, Role, Trace, Value, WeightedSample};
use crate::util::{log_mean_exp, logsumexp};

/// `K` weighted samples evaluated under shared inputs and parameters.
#[derive(Clone, Debug)]
pub struct Population {
    pub particles: Vec<WeightedSample>,
    pub provenance: String,
}

impl Population {
    pub fn new(particles: Vec<WeightedSample>, provenance: impl Into<String>) -> Self {
        Population {
            particles,
            provenance: provenance.into(),
        }
    }

    pub fn k(&self) -> usize {
        self.particles.len()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }
}

/// Proposal side of importance sampling.
///
/// The proposal `g` runs first. `f` is then evaluated with `g`'s choices
/// replayed (latents of `f` that `g` does not provide are drawn from `f`
/// itself). The weight is `w_g · γ_f(x) / γ_g(x)`, where `γ_f` counts only the
/// replayed and observed sites of `f`; when `g` reports its full trace
/// density as its weight this is `γ_f(x) / q_g(x)`.
pub fn importance(f: &Model, g: &Model) -> Model {
    let (f, g) = (f.clone(), g.clone());
    let name = format!("importance({}, {})", f.name(), g.name());
    let arity = f.arity();
    let m = Model::from_fn(&name, move |inputs, ctx| {
        let proposed = g.run(inputs, ctx)?;
        let target = {
            let mut c = ctx.rescoring(&proposed.trace);
            f.run(inputs, &mut c)?
        };
        check_proposal_roles(&target.trace, &proposed.trace)?;
        let log_gamma_f: f64 = target
            .trace
            .iter()
            .filter(|r| r.role != Role::Sampled)
            .map(|r| r.log_prob)
            .sum();
        let log_gamma_g = proposed.trace.log_joint();
        let log_weight = if proposed.log_weight == f64::NEG_INFINITY
            || log_gamma_f == f64::NEG_INFINITY
            || log_gamma_g == f64::NEG_INFINITY
        {
            f64::NEG_INFINITY
        } else {
            proposed.log_weight + log_gamma_f - log_gamma_g
        };
        Ok(WeightedSample {
            output: target.output,
            trace: target.trace,
            log_weight,
            proposal: Some(proposed.trace),
        })
    });
    match arity {
        Some(n) => m.with_arity(n),
        None => m,
    }
}

fn check_proposal_roles(target: &Trace, proposal: &Trace) -> Result<()> {
    for r in proposal.iter() {
        match target.get(r.address.as_str()) {
            None => {
                return Err(Error::UnsupportedProposal(format!(
                    "proposal address {} is not a site of the target",
                    r.address
                )))
            }
            Some(t) if t.role.is_latent() != r.role.is_latent() => {
                return Err(Error::UnsupportedProposal(format!(
                    "{} is {:?} in the target but {:?} in the proposal",
                    r.address, t.role, r.role
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// `K` independent evaluations; particle `k` uses `rng.substream(k)`.
pub fn run_population(
    f: &Model,
    inputs: &[Value],
    k: usize,
    rng: &RngStream,
    params: &ParameterStore,
    parallel: bool,
) -> Result<Population> {
    if k == 0 {
        return Err(Error::Shape("population needs K >= 1".into()));
    }
    let eval = |i: usize| {
        let mut r = rng.substream(i as u64);
        f.simulate(inputs, &mut r, params)
    };
    let particles: Result<Vec<_>> = if parallel {
        (0..k).into_par_iter().map(eval).collect()
    } else {
        (0..k).map(eval).collect()
    };
    Ok(Population::new(particles?, f.name()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

/// Normalized weights `w^k / Σ_l w^l`, computed from log-weights.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(log_weights);
    if lse == f64::NEG_INFINITY {
        return Err(Error::AllWeightsZero { step: None });
    }
    Ok(log_weights.iter().map(|lw| (lw - lse).exp()).collect())
}

/// Draws `K` ancestor indices from the normalized weights.
pub fn ancestors(weights: &[f64], rng: &mut RngStream, scheme: ResampleScheme) -> Vec<usize> {
    let k = weights.len();
    let mut cdf = Vec::with_capacity(k);
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let last_positive = weights.iter().rposition(|&w| w > 0.0).unwrap_or(k - 1);
    let pick = |u: f64| -> usize {
        let u = u * acc;
        let i = cdf.partition_point(|&c| c <= u);
        i.min(last_positive)
    };
    match scheme {
        ResampleScheme::Multinomial => (0..k).map(|_| pick(rng.uniform())).collect(),
        ResampleScheme::Systematic => {
            let u0 = rng.uniform();
            (0..k).map(|i| pick((u0 + i as f64) / k as f64)).collect()
        }
    }
}

/// Resamples a population. Every output particle carries the mean weight of
/// the input, `logsumexp(log w) − log K`.
pub fn resample(p: &Population, rng: &mut RngStream, scheme: ResampleScheme) -> Result<Population> {
    Ok(resample_with_ancestors(p, rng, scheme)?.0)
}

pub fn resample_with_ancestors(
    p: &Population,
    rng: &mut RngStream,
    scheme: ResampleScheme,
) -> Result<(Population, Vec<usize>)> {
    let lw = p.log_weights();
    let w = normalized_weights(&lw)?;
    let mean = log_mean_exp(&lw);
    let idx = ancestors(&w, rng, scheme);
    let particles = idx
        .iter()
        .map(|&a| {
            let mut s = p.particles[a].clone();
            s.log_weight = mean;
            s
        })
        .collect();
    Ok((Population::new(particles, p.provenance.clone()), idx))
}

/// Effective sample size `(Σw)² / Σw²`, in `[1, K]`.
pub fn ess(p: &Population) -> Result<f64> {
    ess_of(&p.log_weights())
}

pub fn ess_of(log_weights: &[f64]) -> Result<f64> {
    let w = normalized_weights(log_weights)?;
    Ok(1.0 / w.iter().map(|x| x * x).sum::<f64>())
}

type ProposeFn = dyn Fn(&Trace, &mut RngStream) -> Result<Trace> + Send + Sync;
type KernelDensityFn = dyn Fn(&Trace, &Trace) -> Result<f64> + Send + Sync;

/// A transition kernel on traces: a sampler and its log-density
/// `log q(to | from)`.
#[derive(Clone)]
pub struct TransitionKernel {
    propose: Arc<ProposeFn>,
    log_density: Arc<KernelDensityFn>,
}

impl TransitionKernel {
    pub fn new<P, D>(propose: P, log_density: D) -> Self
    where
        P: Fn(&Trace, &mut RngStream) -> Result<Trace> + Send + Sync + 'static,
        D: Fn(&Trace, &Trace) -> Result<f64> + Send + Sync + 'static,
    {
        TransitionKernel {
            propose: Arc::new(propose),
            log_density: Arc::new(log_density),
        }
    }

    pub fn propose(&self, from: &Trace, rng: &mut RngStream) -> Result<Trace> {
        (self.propose)(from, rng)
    }

    /// `log q(to | from)`.
    pub fn log_density(&self, from: &Trace, to: &Trace) -> Result<f64> {
        (self.log_density)(from, to)
    }
}

struct MoveProposal {
    rescored: WeightedSample,
    /// `log γ(x') + log q(x | x') − log γ(x) − log q(x' | x)`
    log_ratio: f64,
}

fn propose_move(
    f: &Model,
    kernel: &TransitionKernel,
    inputs: &[Value],
    sample: &WeightedSample,
    rng: &mut RngStream,
    params: &ParameterStore,
) -> Result<MoveProposal> {
    let x = &sample.trace;
    let x_new = kernel.propose(x, rng)?;
    let current = f.score(inputs, x, params)?;
    let rescored = f.score(inputs, &x_new, params)?;
    let gamma_x = current.trace.log_joint();
    let gamma_new = rescored.trace.log_joint();
    let q_back = kernel.log_density(&x_new, x)?;
    let q_fwd = kernel.log_density(x, &x_new)?;
    let parts = [gamma_x, gamma_new, q_back, q_fwd];
    let log_ratio = if parts.iter().any(|v| *v == f64::NEG_INFINITY) {
        f64::NEG_INFINITY
    } else {
        gamma_new + q_back - gamma_x - q_fwd
    };
    Ok(MoveProposal { rescored, log_ratio })
}

/// Moves a sample with `kernel` and reweights it:
/// `w' = w · γ(x') q(x | x') / (γ(x) q(x' | x))`.
pub fn move_reweight(
    f: &Model,
    kernel: &TransitionKernel,
    inputs: &[Value],
    sample: &WeightedSample,
    rng: &mut RngStream,
    params: &ParameterStore,
) -> Result<WeightedSample> {
    let m = propose_move(f, kernel, inputs, sample, rng, params)?;
    let log_weight = if sample.log_weight == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        sample.log_weight + m.log_ratio
    };
    Ok(WeightedSample {
        output: m.rescored.output,
        trace: m.rescored.trace,
        log_weight,
        proposal: sample.proposal.clone(),
    })
}

/// Metropolis–Hastings step targeting `γ_f`. The weight is carried through
/// unchanged; returns the new sample and whether the move was accepted.
pub fn move_mh(
    f: &Model,
    kernel: &TransitionKernel,
    inputs: &[Value],
    sample: &WeightedSample,
    rng: &mut RngStream,
    params: &ParameterStore,
) -> Result<(WeightedSample, bool)> {
    let m = propose_move(f, kernel, inputs, sample, rng, params)?;
    let u = rng.uniform();
    if m.log_ratio > f64::NEG_INFINITY && u.ln() < m.log_ratio {
        Ok((
            WeightedSample {
                output: m.rescored.output,
                trace: m.rescored.trace,
                log_weight: sample.log_weight,
                proposal: sample.proposal.clone(),
            },
            true,
        ))
    } else {
        Ok((sample.clone(), false))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoveKind {
    Reweight,
    MetropolisHastings,
}

/// `f` followed by one kernel move on its sample.
pub fn move_model(f: &Model, kernel: &TransitionKernel, kind: MoveKind) -> Model {
    let (f, kernel) = (f.clone(), kernel.clone());
    let name = format!("move({})", f.name());
    Model::from_fn(&name, move |inputs, ctx: &mut EvalContext<'_>| {
        let s = f.run(inputs, ctx)?;
        match kind {
            MoveKind::Reweight => move_reweight(&f, &kernel, inputs, &s, ctx.rng, ctx.params),
            MoveKind::MetropolisHastings => {
                Ok(move_mh(&f, &kernel, inputs, &s, ctx.rng, ctx.params)?.0)
            }
        }
    })
}

#[derive(Clone)]
pub struct SmcOptions {
    /// Resample when `ess < threshold · K`. 0 never resamples, 1 always does.
    pub resample_threshold: f64,
    pub scheme: ResampleScheme,
    pub moves_per_step: usize,
    /// Moves run at stages that are multiples of this stride and at the last
    /// stage; 1 moves after every stage.
    pub move_stride: usize,
    pub kernel: Option<TransitionKernel>,
    pub parallel: bool,
}

impl Default for SmcOptions {
    fn default() -> Self {
        SmcOptions {
            resample_threshold: 0.5,
            scheme: ResampleScheme::Multinomial,
            moves_per_step: 0,
            move_stride: 1,
            kernel: None,
            parallel: false,
        }
    }
}

/// One line of the per-step diagnostics log. Stage 0 is the global model;
/// stage `t + 1` is observation `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub ess: f64,
    pub log_evidence_increment: f64,
    pub resampled: bool,
    pub acceptance_rate: Option<f64>,
}

impl Serialize for StepDiagnostics {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("StepDiagnostics", 5)?;
        st.serialize_field("step", &self.step)?;
        st.serialize_field("ess", &self.ess)?;
        st.serialize_field("log_evidence_increment", &ExtReal(self.log_evidence_increment))?;
        st.serialize_field("resampled", &self.resampled)?;
        st.serialize_field("acceptance_rate", &self.acceptance_rate)?;
        st.end()
    }
}

#[derive(Clone, Debug)]
pub struct SmcOutput {
    pub population: Population,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SmcOutput {
    pub fn log_evidence_increments(&self) -> Vec<f64> {
        self.diagnostics
            .iter()
            .map(|d| d.log_evidence_increment)
            .collect()
    }

    /// Estimate of `log Z`: the sum of the increments.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence_increments().iter().sum()
    }
}

/// Sequential Monte Carlo over a state-space program.
///
/// Particles start from `global` (trace prefix `left`), then are extended by
/// `step(carry, ys[t])` (prefix `right/step:t`), so every particle's trace has
/// the layout of `ssm(step, global, ys)`. After each stage, optional
/// Metropolis–Hastings sweeps run against the prefix model and the
/// population is resampled when its ESS drops below `threshold · K`.
///
/// Random draws depend only on `(rng key, stage, particle)`.
pub fn smc(
    global: &Model,
    step: &Model,
    ys: &[Value],
    k: usize,
    opts: &SmcOptions,
    rng: &RngStream,
    params: &ParameterStore,
) -> Result<SmcOutput> {
    if k == 0 {
        return Err(Error::Shape("SMC needs K >= 1".into()));
    }
    let mut diagnostics = Vec::with_capacity(ys.len() + 1);
    let stage_rng = rng.substream(0);
    let init = |i: usize| -> Result<(WeightedSample, RngStream)> {
        let mut r = stage_rng.substream(i as u64);
        let s = {
            let mut ctx = EvalContext::new(&mut r, params);
            global.run(&[], &mut ctx.child("left"))?
        };
        let proposal = s.proposal.as_ref().map(|p| p.prefix("left"));
        Ok((
            WeightedSample {
                trace: s.trace.prefix("left"),
                proposal,
                ..s
            },
            r,
        ))
    };
    let started: Vec<(WeightedSample, RngStream)> = if opts.parallel {
        (0..k).into_par_iter().map(init).collect::<Result<_>>()?
    } else {
        (0..k).map(init).collect::<Result<_>>()?
    };
    let (particles, rngs): (Vec<_>, Vec<_>) = started.into_iter().unzip();
    let mut pop = Population::new(particles, format!("smc({})", global.name()));
    let mut prev_evidence = 0.0;
    finish_stage(&mut pop, rngs, 0, global, step, ys, opts, &stage_rng, params, &mut prev_evidence, &mut diagnostics)?;

    for (t, y) in ys.iter().enumerate() {
        let stage = t + 1;
        let stage_rng = rng.substream(stage as u64);
        let seg = format!("right/step:{t}");
        let local = format!("step:{t}");
        let extend = |(i, p): (usize, &WeightedSample)| -> Result<(WeightedSample, RngStream)> {
            let mut r = stage_rng.substream(i as u64);
            let s = {
                let mut ctx = EvalContext::new(&mut r, params);
                let mut right = ctx.child("right");
                step.run(&[p.output.clone(), y.clone()], &mut right.child(&local))?
            };
            // Step sites live under a fresh `right/step:t` prefix, so they cannot
            // collide with the history.
            let trace = Trace::append_disjoint(&p.trace, &s.trace.prefix_path(&seg));
            let proposal = match (&p.proposal, &s.proposal) {
                (None, None) => None,
                (a, b) => Some(Trace::append_disjoint(
                    &a.clone().unwrap_or_default(),
                    &b.as_ref().map(|b| b.prefix_path(&seg)).unwrap_or_default(),
                )),
            };
            let log_weight = if p.log_weight == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                p.log_weight + s.log_weight
            };
            Ok((
                WeightedSample {
                    output: s.output,
                    trace,
                    log_weight,
                    proposal,
                },
                r,
            ))
        };
        let extended: Vec<(WeightedSample, RngStream)> = if opts.parallel {
            pop.particles.par_iter().enumerate().map(extend).collect::<Result<_>>()?
        } else {
            pop.particles.iter().enumerate().map(extend).collect::<Result<_>>()?
        };
        let (particles, rngs): (Vec<_>, Vec<_>) = extended.into_iter().unzip();
        pop.particles = particles;
        finish_stage(&mut pop, rngs, stage, global, step, ys, opts, &stage_rng, params, &mut prev_evidence, &mut diagnostics)?;
    }
    Ok(SmcOutput {
        population: pop,
        diagnostics,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_stage(
    pop: &mut Population,
    mut rngs: Vec<RngStream>,
    stage: usize,
    global: &Model,
    step: &Model,
    ys: &[Value],
    opts: &SmcOptions,
    stage_rng: &RngStream,
    params: &ParameterStore,
    prev_evidence: &mut f64,
    diagnostics: &mut Vec<StepDiagnostics>,
) -> Result<()> {
    let lw = pop.log_weights();
    if logsumexp(&lw) == f64::NEG_INFINITY {
        return Err(Error::AllWeightsZero { step: Some(stage) });
    }
    let mut acceptance_rate = None;
    let move_now = stage == ys.len() || (opts.move_stride > 0 && stage % opts.move_stride == 0);
    if let (Some(kernel), true) = (&opts.kernel, opts.moves_per_step > 0 && move_now) {
        let target = ssm(step, global, ys[..stage].to_vec());
        let sweep = |(p, r): (&mut WeightedSample, &mut RngStream)| -> Result<usize> {
            let mut accepted = 0;
            for _ in 0..opts.moves_per_step {
                let (next, acc) = move_mh(&target, kernel, &[], p, r, params)?;
                *p = next;
                accepted += acc as usize;
            }
            Ok(accepted)
        };
        let counts: Vec<usize> = if opts.parallel {
            pop.particles.par_iter_mut().zip(rngs.par_iter_mut()).map(sweep).collect::<Result<_>>()?
        } else {
            pop.particles.iter_mut().zip(rngs.iter_mut()).map(sweep).collect::<Result<_>>()?
        };
        let total = (opts.moves_per_step * pop.k()) as f64;
        acceptance_rate = Some(counts.iter().sum::<usize>() as f64 / total);
    }
    let lw = pop.log_weights();
    let evidence = log_mean_exp(&lw);
    let increment = evidence - *prev_evidence;
    *prev_evidence = evidence;
    let ess = ess_of(&lw)?;
    // Resampling follows steps only; the initial population keeps its weights.
    let resampled = stage > 0 && ess < opts.resample_threshold * pop.k() as f64;
    if resampled {
        let mut r = stage_rng.substream(u64::MAX);
        *pop = resample(pop, &mut r, opts.scheme)?;
    }
    diagnostics.push(StepDiagnostics {
        step: stage,
        ess,
        log_evidence_increment: increment,
        resampled,
        acceptance_rate,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::DistDescriptor;
    use crate::model::{hmm, hmm_step, primitive, Emission, HmmCarry};
    use crate::params::ParameterStore;

    const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    /// A Normal whose density at its mean is `c`.
    fn factor(c: f64) -> DistDescriptor {
        DistDescriptor::normal(0.0, (-LN_SQRT_2PI - c.ln()).exp()).unwrap()
    }

    // Prior Cat[0.5, 0.5] on x, times a factor of 2.8 at x = 0 and 1.2 at x = 1,
    // so γ = (1.4, 0.6) and Z = 2.
    fn factored_target() -> Model {
        let prior = DistDescriptor::categorical(vec![0.5, 0.5]).unwrap();
        primitive("target", move |_, site| {
            let x = site.sample("x", &prior)?.as_index().unwrap();
            site.observe("f", &factor([2.8, 1.2][x]), &Value::Real(0.0))?;
            Ok(Value::Index(x))
        })
    }

    fn uniform_proposal() -> Model {
        let q = DistDescriptor::categorical(vec![0.5, 0.5]).unwrap();
        primitive("uniform", move |_, site| site.sample("x", &q))
    }

    fn flip_kernel() -> TransitionKernel {
        TransitionKernel::new(
            |from: &Trace, _: &mut RngStream| {
                let x = from.get("x").unwrap().value.as_index().unwrap();
                from.with_value("x", Value::Index(1 - x))
            },
            |_: &Trace, _: &Trace| Ok(0.0),
        )
    }

    #[test]
    fn importance_weight_is_target_over_proposal() {
        let m = importance(&factored_target(), &uniform_proposal());
        let store = ParameterStore::new();
        let mut seen = [false; 2];
        for seed in 0..20 {
            let s = m.simulate(&[], &mut RngStream::new(seed), &store).unwrap();
            let x = s.output.as_index().unwrap();
            seen[x] = true;
            let expected = [2.8, 1.2][x];
            assert!((s.log_weight.exp() - expected).abs() < 1e-12);
        }
        assert!(seen[0] && seen[1]);
        let expectation = 0.5 * 2.8 + 0.5 * 1.2;
        assert!((expectation - 2.0_f64).abs() < 1e-12);
    }

    #[test]
    fn self_proposal_reproduces_likelihood_weighting() {
        let f = factored_target();
        let m = importance(&f, &f);
        let store = ParameterStore::new();
        for seed in 0..20 {
            let a = m.simulate(&[], &mut RngStream::new(seed), &store).unwrap();
            let b = f.simulate(&[], &mut RngStream::new(seed), &store).unwrap();
            assert_eq!(a.output, b.output);
            assert!((a.log_weight - b.log_weight).abs() < 1e-12);
        }
    }

    #[test]
    fn proposal_outside_the_target_support_has_zero_weight() {
        let narrow = DistDescriptor::categorical(vec![1.0]).unwrap();
        let target = primitive("narrow", move |_, site| site.sample("x", &narrow));
        let q = DistDescriptor::categorical(vec![0.0, 1.0]).unwrap();
        let proposal = primitive("wide", move |_, site| site.sample("x", &q));
        let s = importance(&target, &proposal)
            .simulate(&[], &mut RngStream::new(0), &ParameterStore::new())
            .unwrap();
        assert_eq!(s.log_weight, f64::NEG_INFINITY);
    }

    #[test]
    fn observed_sites_cannot_be_proposed() {
        let q = DistDescriptor::normal(0.0, 1.0).unwrap();
        let proposal = primitive("bad", move |_, site| site.sample("f", &q));
        let err = importance(&factored_target(), &proposal).simulate(&[], &mut RngStream::new(0), &ParameterStore::new());
        assert!(matches!(err, Err(Error::UnsupportedProposal(_))));
    }

    #[test]
    fn populations_are_reproducible_and_indexed_by_substream() {
        let f = factored_target();
        let store = ParameterStore::new();
        let rng = RngStream::new(4);
        let one = run_population(&f, &[], 1, &rng, &store, false).unwrap();
        let direct = f.simulate(&[], &mut rng.substream(0), &store).unwrap();
        assert_eq!(one.particles[0].trace, direct.trace);
        let a = run_population(&f, &[], 64, &rng, &store, false).unwrap();
        let b = run_population(&f, &[], 64, &rng, &store, true).unwrap();
        assert_eq!(a.log_weights(), b.log_weights());
    }

    #[test]
    fn population_evidence_estimates_log_normalizer() {
        let m = importance(&factored_target(), &uniform_proposal());
        let p = run_population(&m, &[], 10_000, &RngStream::new(5), &ParameterStore::new(), false).unwrap();
        let w: Vec<f64> = p.log_weights().iter().map(|x| x.exp()).collect();
        let (mean, se) = mean_and_se(&w);
        assert!((mean - 2.0).abs() <= 4.0 * se);
        let est = log_mean_exp(&p.log_weights());
        assert!((est - 2f64.ln()).abs() <= 4.0 * se / mean);
    }

    fn weighted_population(ws: &[f64]) -> Population {
        Population::new(
            ws.iter()
                .enumerate()
                .map(|(i, w)| WeightedSample::new(Value::Index(i), Trace::new(), w.ln()))
                .collect(),
            "fixed",
        )
    }

    #[test]
    fn resampling_assigns_the_mean_weight() {
        let p = weighted_population(&[1.0, 2.0, 3.0]);
        let r = resample(&p, &mut RngStream::new(0), ResampleScheme::Multinomial).unwrap();
        for s in &r.particles {
            assert!((s.log_weight.exp() - 2.0).abs() < 1e-15);
        }
        let eq = weighted_population(&[1.0, 1.0]);
        let r = resample(&eq, &mut RngStream::new(0), ResampleScheme::Systematic).unwrap();
        assert!(r.particles.iter().all(|s| s.log_weight == 0.0));
        let dead = weighted_population(&[0.0, 0.0]);
        assert!(matches!(
            resample(&dead, &mut RngStream::new(0), ResampleScheme::Multinomial),
            Err(Error::AllWeightsZero { .. })
        ));
    }

    #[test]
    fn multinomial_ancestors_follow_the_weights() {
        let mut rng = RngStream::new(6);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n / 2 {
            hits += ancestors(&[0.25, 0.75], &mut rng, ResampleScheme::Multinomial)
                .iter()
                .filter(|&&a| a == 1)
                .count();
        }
        let p = hits as f64 / n as f64;
        let se = (0.75 * 0.25 / n as f64).sqrt();
        assert!((p - 0.75).abs() <= 4.0 * se, "{p}");
    }

    #[test]
    fn systematic_ancestors_are_balanced() {
        let idx = ancestors(&[0.25, 0.25, 0.5], &mut RngStream::new(1), ResampleScheme::Systematic);
        let twos = idx.iter().filter(|&&a| a == 2).count();
        assert!(twos == 1 || twos == 2);
    }

    #[test]
    fn effective_sample_size() {
        assert!((ess(&weighted_population(&[2.0; 5])).unwrap() - 5.0).abs() < 1e-12);
        assert!((ess(&weighted_population(&[0.0, 4.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((ess(&weighted_population(&[1.0, 3.0])).unwrap() - 1.6).abs() < 1e-12);
    }

    fn sample_of(f: &Model, seed: u64) -> WeightedSample {
        f.simulate(&[], &mut RngStream::new(seed), &ParameterStore::new()).unwrap()
    }

    #[test]
    fn symmetric_moves_reweight_by_the_density_ratio() {
        let f = factored_target();
        let store = ParameterStore::new();
        for seed in 0..10 {
            let s = sample_of(&f, seed);
            let m = move_reweight(&f, &flip_kernel(), &[], &s, &mut RngStream::new(seed), &store).unwrap();
            let ratio = m.trace.log_joint() - s.trace.log_joint();
            assert!((m.log_weight - (s.log_weight + ratio)).abs() < 1e-12);
        }
        let stay = TransitionKernel::new(|t: &Trace, _: &mut RngStream| Ok(t.clone()), |_: &Trace, _: &Trace| Ok(0.0));
        let s = sample_of(&f, 3);
        let m = move_reweight(&f, &stay, &[], &s, &mut RngStream::new(0), &store).unwrap();
        assert_eq!(m.log_weight, s.log_weight);
    }

    #[test]
    fn metropolis_moves_keep_the_weight_bitwise() {
        let f = factored_target();
        let store = ParameterStore::new();
        for seed in 0..50 {
            let mut s = sample_of(&f, seed);
            s.log_weight = 0.1 * seed as f64 - 2.345;
            let (m, _) = move_mh(&f, &flip_kernel(), &[], &s, &mut RngStream::new(seed), &store).unwrap();
            assert_eq!(m.log_weight.to_bits(), s.log_weight.to_bits());
        }
    }

    #[test]
    fn moves_into_zero_density_are_rejected() {
        let p = DistDescriptor::categorical(vec![1.0, 0.0]).unwrap();
        let f = primitive("pinned", move |_, site| site.sample("x", &p));
        let s = sample_of(&f, 0);
        for seed in 0..20 {
            let (m, accepted) = move_mh(&f, &flip_kernel(), &[], &s, &mut RngStream::new(seed), &ParameterStore::new()).unwrap();
            assert!(!accepted);
            assert_eq!(m.trace, s.trace);
        }
    }

    #[test]
    fn metropolis_chain_visits_states_in_proportion() {
        // γ = (1, 3)
        let p = DistDescriptor::categorical(vec![0.25, 0.75]).unwrap();
        let f = primitive("two", move |_, site| site.sample("x", &p));
        let store = ParameterStore::new();
        let n = 10_000;
        for start in 0..2 {
            let mut s = sample_of(&f, 0);
            s.trace = s.trace.with_value("x", Value::Index(start)).unwrap();
            s = WeightedSample { trace: f.score(&[], &s.trace, &store).unwrap().trace, ..s };
            let mut rng = RngStream::new(10 + start as u64);
            let mut visits = 0usize;
            for _ in 0..n {
                s = move_mh(&f, &flip_kernel(), &[], &s, &mut rng, &store).unwrap().0;
                visits += (s.trace.get("x").unwrap().value == Value::Index(1)) as usize;
            }
            let occ = visits as f64 / n as f64;
            // flips accepted with probability 1/3 out of state 1; lag-one
            // autocorrelation is 1 − 1/3 − 1 = −1/3, so the variance inflation is
            // (1 + ρ) / (1 − ρ) = 1/2.
            let se = (0.75 * 0.25 * 0.5 / n as f64).sqrt();
            assert!((occ - 0.75).abs() <= 4.0 * se, "start {start}: {occ}");
        }
    }

    fn two_state_global() -> Model {
        primitive("fixed", |_, _| {
            Ok(HmmCarry {
                initial: vec![0.6, 0.4].into(),
                transition: vec![0.7, 0.3, 0.2, 0.8].into(),
                emission: vec![-1.0, 1.0].into(),
                previous: None,
            }
            .to_value())
        })
    }

    fn unit_emission() -> Emission {
        Arc::new(|means: &[f64], z: usize| DistDescriptor::normal(means[z], 1.0))
    }

    fn two_state_log_z(ys: &[f64]) -> f64 {
        let init = [0.6, 0.4];
        let trans = [[0.7, 0.3], [0.2, 0.8]];
        let means = [-1.0, 1.0];
        let dens = |y: f64, m: f64| (-0.5 * (y - m) * (y - m) - LN_SQRT_2PI).exp();
        let mut total = 0.0;
        for path in 0..(1usize << ys.len()) {
            let z: Vec<usize> = (0..ys.len()).map(|t| (path >> t) & 1).collect();
            let mut p = init[z[0]] * dens(ys[0], means[z[0]]);
            for t in 1..ys.len() {
                p *= trans[z[t - 1]][z[t]] * dens(ys[t], means[z[t]]);
            }
            total += p;
        }
        total.ln()
    }

    const YS: [f64; 4] = [0.3, -1.1, 0.8, 1.7];

    fn ys() -> Vec<Value> {
        YS.iter().map(|&y| Value::Real(y)).collect()
    }

    #[test]
    fn smc_without_resampling_is_importance_sampling() {
        let store = ParameterStore::new();
        let step = hmm_step(unit_emission());
        let opts = SmcOptions { resample_threshold: 0.0, ..SmcOptions::default() };
        let out = smc(&two_state_global(), &step, &ys(), 32, &opts, &RngStream::new(2), &store).unwrap();
        assert!(out.diagnostics.iter().all(|d| !d.resampled));
        let composed = hmm(&two_state_global(), &step, ys());
        for p in &out.population.particles {
            let rescored = composed.score(&[], &p.trace, &store).unwrap();
            assert!((rescored.log_weight - p.log_weight).abs() < 1e-12);
        }
        let lme = log_mean_exp(&out.population.log_weights());
        assert!((out.log_evidence() - lme).abs() < 1e-12);
    }

    #[test]
    fn single_particle_smc_is_likelihood_weighting() {
        let store = ParameterStore::new();
        let step = hmm_step(unit_emission());
        let out = smc(&two_state_global(), &step, &ys(), 1, &SmcOptions::default(), &RngStream::new(8), &store).unwrap();
        let p = &out.population.particles[0];
        assert!((p.log_weight - p.trace.log_likelihood()).abs() < 1e-12);
        assert!((out.log_evidence() - p.log_weight).abs() < 1e-12);
    }

    #[test]
    fn smc_evidence_matches_the_path_sum() {
        let store = ParameterStore::new();
        let step = hmm_step(unit_emission());
        let exact = two_state_log_z(&YS);
        let runs = 50;
        let mut mean = 0.0;
        for seed in 0..runs {
            let out = smc(&two_state_global(), &step, &ys(), 2048, &SmcOptions::default(), &RngStream::new(seed), &store).unwrap();
            mean += out.log_evidence() / runs as f64;
        }
        assert!((mean - exact).abs() <= 0.05, "{mean} vs {exact}");
    }

    #[test]
    fn smc_is_reproducible_and_schedule_free() {
        let store = ParameterStore::new();
        let step = hmm_step(unit_emission());
        let seq = SmcOptions::default();
        let par = SmcOptions { parallel: true, ..SmcOptions::default() };
        let a = smc(&two_state_global(), &step, &ys(), 64, &seq, &RngStream::new(3), &store).unwrap();
        let b = smc(&two_state_global(), &step, &ys(), 64, &par, &RngStream::new(3), &store).unwrap();
        assert_eq!(a.log_evidence().to_bits(), b.log_evidence().to_bits());
        for (x, y) in a.population.particles.iter().zip(&b.population.particles) {
            assert_eq!(x.trace, y.trace);
        }
    }
}
