//! Models as values and the combinators that build new models from old ones.
//!
//! A [`Model`] maps inputs and an [`EvalContext`] to a [`WeightedSample`].
//! Combinators are applied before evaluation; each evaluation then produces a
//! fresh trace. Every combinator here only multiplies weights and merges
//! traces under disjoint prefixes, so it keeps proper weighting.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::dist::DistDescriptor;
use crate::error::{Error, Result};
use crate::params::{ParamLink, ParameterStore};
use crate::rng::RngStream;
use crate::trace::{
    observe_at_linked, sample_at_linked, Address, RVRecord, Trace, Value, WeightedSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Draw latents that the conditioning trace does not supply.
    Generate,
    /// Every latent must come from the conditioning trace.
    ScoreOnly,
}

pub struct EvalContext<'a> {
    pub rng: &'a mut RngStream,
    conditioning: Option<&'a Trace>,
    scope: String,
    pub params: &'a ParameterStore,
    pub mode: Mode,
}

impl<'a> EvalContext<'a> {
    pub fn new(rng: &'a mut RngStream, params: &'a ParameterStore) -> Self {
        EvalContext {
            rng,
            conditioning: None,
            scope: String::new(),
            params,
            mode: Mode::Generate,
        }
    }

    /// Replays latents from `trace`; with `Mode::ScoreOnly` every latent must
    /// be present.
    pub fn conditioned(mut self, trace: &'a Trace, mode: Mode) -> Self {
        self.conditioning = Some(trace);
        self.mode = mode;
        self
    }

    /// Context for a sub-model whose trace will be prefixed with `segment`.
    pub fn child(&mut self, segment: &str) -> EvalContext<'_> {
        EvalContext {
            rng: &mut *self.rng,
            conditioning: self.conditioning,
            scope: join_scope(&self.scope, segment),
            params: self.params,
            mode: self.mode,
        }
    }

    /// Context that replays from `trace` at the root scope, sharing this
    /// context's random stream and parameters.
    pub fn rescoring<'b>(&'b mut self, trace: &'b Trace) -> EvalContext<'b> {
        EvalContext {
            rng: &mut *self.rng,
            conditioning: Some(trace),
            scope: String::new(),
            params: self.params,
            mode: self.mode,
        }
    }

    pub(crate) fn shape(&self) -> ContextShape<'a> {
        ContextShape {
            conditioning: self.conditioning,
            scope: self.scope.clone(),
            params: self.params,
            mode: self.mode,
        }
    }

    pub(crate) fn lookup(&self, addr: &Address) -> Option<&'a RVRecord> {
        let cond = self.conditioning?;
        if self.scope.is_empty() {
            cond.get(addr.as_str())
        } else {
            cond.get(&self.scoped_name(addr))
        }
    }

    pub(crate) fn scoped_name(&self, addr: &Address) -> String {
        join_scope(&self.scope, addr.as_str())
    }
}

fn join_scope(scope: &str, segment: &str) -> String {
    if scope.is_empty() {
        segment.to_string()
    } else {
        let mut s = String::with_capacity(scope.len() + 1 + segment.len());
        s.push_str(scope);
        s.push('/');
        s.push_str(segment);
        s
    }
}

/// Everything in a context except its random stream; lets parallel workers
/// rebuild a context around their own substream.
#[derive(Clone)]
pub(crate) struct ContextShape<'a> {
    conditioning: Option<&'a Trace>,
    scope: String,
    params: &'a ParameterStore,
    mode: Mode,
}

impl<'a> ContextShape<'a> {
    pub(crate) fn with_rng<'b>(&self, rng: &'b mut RngStream, segment: Option<&str>) -> EvalContext<'b>
    where
        'a: 'b,
    {
        EvalContext {
            rng,
            conditioning: self.conditioning,
            scope: match segment {
                Some(s) => join_scope(&self.scope, s),
                None => self.scope.clone(),
            },
            params: self.params,
            mode: self.mode,
        }
    }
}

type Program = dyn Fn(&[Value], &mut EvalContext<'_>) -> Result<WeightedSample> + Send + Sync;

#[derive(Clone)]
pub struct Model {
    name: Arc<str>,
    arity: Option<usize>,
    program: Arc<Program>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .finish()
    }
}

impl Model {
    /// Wraps an arbitrary program. Prefer [`primitive`] and the combinators;
    /// a raw program is responsible for its own weighting.
    pub fn from_fn<F>(name: &str, program: F) -> Model
    where
        F: Fn(&[Value], &mut EvalContext<'_>) -> Result<WeightedSample> + Send + Sync + 'static,
    {
        Model {
            name: Arc::from(name),
            arity: None,
            program: Arc::new(program),
        }
    }

    /// Declares the number of inputs; `run` rejects other counts.
    pub fn with_arity(mut self, arity: usize) -> Model {
        self.arity = Some(arity);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> Option<usize> {
        self.arity
    }

    pub fn run(&self, inputs: &[Value], ctx: &mut EvalContext<'_>) -> Result<WeightedSample> {
        if let Some(n) = self.arity {
            if n != inputs.len() {
                return Err(Error::Arity {
                    expected: n,
                    got: inputs.len(),
                });
            }
        }
        (self.program)(inputs, ctx)
    }

    /// Evaluates under a fresh context.
    pub fn simulate(
        &self,
        inputs: &[Value],
        rng: &mut RngStream,
        params: &ParameterStore,
    ) -> Result<WeightedSample> {
        self.run(inputs, &mut EvalContext::new(rng, params))
    }

    /// Re-evaluates every site of `trace` without drawing anything; returns
    /// the rescored sample.
    pub fn score(
        &self,
        inputs: &[Value],
        trace: &Trace,
        params: &ParameterStore,
    ) -> Result<WeightedSample> {
        let mut rng = RngStream::new(0);
        let mut ctx = EvalContext::new(&mut rng, params).conditioned(trace, Mode::ScoreOnly);
        self.run(inputs, &mut ctx)
    }
}

/// Handle given to primitive model bodies for recording random choices.
pub struct Site<'c, 'a> {
    ctx: &'c mut EvalContext<'a>,
    trace: Trace,
}

impl<'c, 'a> Site<'c, 'a> {
    pub fn sample(&mut self, addr: &str, dist: &DistDescriptor) -> Result<Value> {
        let addr = Address::new(addr)?;
        sample_at_linked(&mut self.trace, &addr, dist, None, self.ctx)
    }

    /// Samples from the distribution the link resolves to under the current
    /// parameters, recording the link for gradient estimation.
    pub fn sample_param(&mut self, addr: &str, link: ParamLink) -> Result<Value> {
        let addr = Address::new(addr)?;
        let dist = self.ctx.params.dist(&link)?;
        sample_at_linked(&mut self.trace, &addr, &dist, Some(link), self.ctx)
    }

    pub fn observe(&mut self, addr: &str, dist: &DistDescriptor, value: &Value) -> Result<f64> {
        let addr = Address::new(addr)?;
        observe_at_linked(&mut self.trace, &addr, dist, value, None)
    }

    pub fn observe_param(&mut self, addr: &str, link: ParamLink, value: &Value) -> Result<f64> {
        let addr = Address::new(addr)?;
        let dist = self.ctx.params.dist(&link)?;
        observe_at_linked(&mut self.trace, &addr, &dist, value, Some(link))
    }

    pub fn params(&self) -> &ParameterStore {
        self.ctx.params
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }
}

/// Likelihood-weighted model from a body that records its choices through a
/// [`Site`]: latents come from the prior (or are replayed), and the weight is
/// the product of the observed sites' densities.
pub fn primitive<F>(name: &str, body: F) -> Model
where
    F: Fn(&[Value], &mut Site<'_, '_>) -> Result<Value> + Send + Sync + 'static,
{
    Model::from_fn(name, move |inputs, ctx| {
        let mut site = Site {
            ctx,
            trace: Trace::new(),
        };
        let output = body(inputs, &mut site)?;
        let trace = site.trace;
        let log_weight = trace.log_likelihood();
        Ok(WeightedSample::new(output, trace, log_weight))
    })
}

/// Weightless model returning its single input.
pub fn identity() -> Model {
    primitive("identity", |inputs, _| Ok(inputs[0].clone())).with_arity(1)
}

fn merge_proposals(parts: &[(&str, &WeightedSample)]) -> Result<Option<Trace>> {
    if parts.iter().all(|(_, s)| s.proposal.is_none()) {
        return Ok(None);
    }
    let mut out = Trace::new();
    for (seg, s) in parts {
        if let Some(p) = &s.proposal {
            out = Trace::merge(&out, &p.prefix(seg))?;
        }
    }
    Ok(Some(out))
}

/// Runs `f` on the inputs, then `g` on `f`'s output. Traces are merged under
/// `left` / `right`; weights multiply.
pub fn compose(f: &Model, g: &Model) -> Model {
    let (f, g) = (f.clone(), g.clone());
    let name = format!("compose({}, {})", f.name(), g.name());
    let arity = f.arity;
    let mut m = Model::from_fn(&name, move |inputs, ctx| {
        let a = f.run(inputs, &mut ctx.child("left"))?;
        let b = g.run(std::slice::from_ref(&a.output), &mut ctx.child("right"))?;
        let trace = Trace::append_disjoint(&a.trace.prefix("left"), &b.trace.prefix("right"));
        let proposal = merge_proposals(&[("left", &a), ("right", &b)])?;
        Ok(WeightedSample {
            output: b.output,
            trace,
            log_weight: a.log_weight + b.log_weight,
            proposal,
        })
    });
    m.arity = arity;
    m
}

/// Fixes the first input of `f`.
pub fn partial(f: &Model, first: Value) -> Model {
    let f = f.clone();
    let arity = f.arity.map(|n| n.saturating_sub(1));
    let name = format!("partial({})", f.name());
    let mut m = Model::from_fn(&name, move |inputs, ctx| {
        if f.arity == Some(0) {
            return Err(Error::Arity {
                expected: 0,
                got: inputs.len() + 1,
            });
        }
        let mut all = Vec::with_capacity(inputs.len() + 1);
        all.push(first.clone());
        all.extend_from_slice(inputs);
        f.run(&all, ctx)
    });
    m.arity = arity;
    m
}

fn map_impl(
    f: &Model,
    ys: &[Value],
    ctx: &mut EvalContext<'_>,
    parallel: bool,
) -> Result<WeightedSample> {
    if ys.is_empty() {
        return Err(Error::Shape("map needs at least one input".into()));
    }
    let base = ctx.rng.fork();
    let shape = ctx.shape();
    let eval = |n: usize, y: &Value| -> Result<WeightedSample> {
        let mut rng = base.substream(n as u64);
        let seg = format!("item:{n}");
        let mut c = shape.with_rng(&mut rng, Some(&seg));
        f.run(std::slice::from_ref(y), &mut c)
    };
    let results: Vec<Result<WeightedSample>> = if parallel {
        ys.par_iter().enumerate().map(|(n, y)| eval(n, y)).collect()
    } else {
        ys.iter().enumerate().map(|(n, y)| eval(n, y)).collect()
    };
    let mut trace = Trace::new();
    let mut outputs = Vec::with_capacity(ys.len());
    let mut log_weight = 0.0;
    let mut proposal: Option<Trace> = None;
    for (n, r) in results.into_iter().enumerate() {
        let s = r?;
        let seg = format!("item:{n}");
        trace = Trace::append_disjoint(&trace, &s.trace.prefix(&seg));
        if let Some(p) = &s.proposal {
            let acc = proposal.take().unwrap_or_default();
            proposal = Some(Trace::append_disjoint(&acc, &p.prefix(&seg)));
        }
        log_weight += s.log_weight;
        outputs.push(s.output);
    }
    Ok(WeightedSample {
        output: Value::list(outputs),
        trace,
        log_weight,
        proposal,
    })
}

/// Evaluates `f` independently on each element of `ys`, item `n` under the
/// prefix `item:n` with its own random substream. Output is the list of
/// results; weights multiply.
pub fn map_combinator(f: &Model, ys: Vec<Value>) -> Model {
    map_with(f, ys, false)
}

/// [`map_combinator`] evaluating items on the rayon pool. Results are
/// identical to the sequential form.
pub fn map_combinator_par(f: &Model, ys: Vec<Value>) -> Model {
    map_with(f, ys, true)
}

fn map_with(f: &Model, ys: Vec<Value>, parallel: bool) -> Model {
    let f = f.clone();
    let name = format!("map({})", f.name());
    Model::from_fn(&name, move |_inputs, ctx| map_impl(&f, &ys, ctx, parallel)).with_arity(0)
}

pub(crate) fn fold_impl(
    f: &Model,
    init: Value,
    ys: &[Value],
    ctx: &mut EvalContext<'_>,
) -> Result<WeightedSample> {
    let mut carry = init;
    let mut trace = Trace::new();
    let mut log_weight = 0.0;
    let mut proposal: Option<Trace> = None;
    for (n, y) in ys.iter().enumerate() {
        let seg = format!("step:{n}");
        let s = f.run(&[carry, y.clone()], &mut ctx.child(&seg))?;
        trace = Trace::append_disjoint(&trace, &s.trace.prefix(&seg));
        if let Some(p) = &s.proposal {
            let acc = proposal.take().unwrap_or_default();
            proposal = Some(Trace::append_disjoint(&acc, &p.prefix(&seg)));
        }
        log_weight += s.log_weight;
        carry = s.output;
    }
    Ok(WeightedSample {
        output: carry,
        trace,
        log_weight,
        proposal,
    })
}

/// Left fold of `f: (carry, y) → carry'` over `ys` starting from `init`;
/// step `n` runs under prefix `step:n`.
pub fn reduce_combinator(f: &Model, init: Value, ys: Vec<Value>) -> Model {
    let f = f.clone();
    let name = format!("reduce({})", f.name());
    Model::from_fn(&name, move |_inputs, ctx| fold_impl(&f, init.clone(), &ys, ctx)).with_arity(0)
}

/// Fold whose initial carry is the model's single input.
pub fn fold_from_input(step: &Model, ys: Vec<Value>) -> Model {
    let step = step.clone();
    let name = format!("fold({})", step.name());
    Model::from_fn(&name, move |inputs, ctx| fold_impl(&step, inputs[0].clone(), &ys, ctx))
        .with_arity(1)
}

/// State-space model: `prior` produces the initial state, then `step` is
/// folded over `ys`. Same as `compose(prior, fold_from_input(step, ys))`.
pub fn ssm(step: &Model, prior: &Model, ys: Vec<Value>) -> Model {
    compose(prior, &fold_from_input(step, ys))
}

/// Samples a component index from the probability vector produced by
/// `weights`, then runs that component under prefix `comp:k`.
pub fn mixture(weights: &Model, components: Vec<Model>) -> Model {
    let weights = weights.clone();
    let name = format!("mixture({})", weights.name());
    Model::from_fn(&name, move |inputs, ctx| {
        let w = weights.run(inputs, &mut ctx.child("weights"))?;
        let probs = w
            .output
            .as_vector()
            .ok_or_else(|| Error::InvalidValue("mixture weights must be a vector".into()))?
            .to_vec();
        if probs.len() != components.len() {
            return Err(Error::Shape(format!(
                "{} mixture weights for {} components",
                probs.len(),
                components.len()
            )));
        }
        let dist = DistDescriptor::categorical(probs)?;
        let mut own = Trace::new();
        let k = sample_at_linked(&mut own, &Address::new("index")?, &dist, None, ctx)?
            .as_index()
            .expect("categorical yields an index");
        let seg = format!("comp:{k}");
        let c = match components.get(k) {
            Some(m) => m.run(inputs, &mut ctx.child(&seg))?,
            // replayed index outside the support: zero weight
            None => {
                return Ok(WeightedSample::new(
                    Value::unit(),
                    Trace::merge(&w.trace.prefix("weights"), &own)?,
                    f64::NEG_INFINITY,
                ))
            }
        };
        let trace = Trace::merge(
            &Trace::merge(&w.trace.prefix("weights"), &own)?,
            &c.trace.prefix(&seg),
        )?;
        let proposal = merge_proposals(&[("weights", &w), (seg.as_str(), &c)])?;
        Ok(WeightedSample {
            output: c.output,
            trace,
            log_weight: w.log_weight + c.log_weight,
            proposal,
        })
    })
}

/// Fold state of a discrete-state HMM: global parameters plus the previous
/// state, once one exists.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmCarry {
    pub initial: Arc<[f64]>,
    /// Row-major `S × S`.
    pub transition: Arc<[f64]>,
    pub emission: Arc<[f64]>,
    pub previous: Option<usize>,
}

impl HmmCarry {
    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn to_value(&self) -> Value {
        let mut xs = vec![
            Value::Vector(self.initial.clone()),
            Value::Vector(self.transition.clone()),
            Value::Vector(self.emission.clone()),
        ];
        if let Some(z) = self.previous {
            xs.push(Value::Index(z));
        }
        Value::list(xs)
    }

    pub fn from_value(v: &Value) -> Result<HmmCarry> {
        let bad = || Error::InvalidValue("expected an HMM carry [initial, transition, emission, state?]".into());
        let xs = v.as_list().ok_or_else(bad)?;
        if xs.len() != 3 && xs.len() != 4 {
            return Err(bad());
        }
        let vec = |i: usize| match &xs[i] {
            Value::Vector(a) => Ok(a.clone()),
            _ => Err(bad()),
        };
        let carry = HmmCarry {
            initial: vec(0)?,
            transition: vec(1)?,
            emission: vec(2)?,
            previous: match xs.get(3) {
                Some(Value::Index(z)) => Some(*z),
                Some(_) => return Err(bad()),
                None => None,
            },
        };
        let s = carry.states();
        if s == 0 || carry.transition.len() != s * s {
            return Err(Error::Shape(format!(
                "initial has {s} states, transition has {} entries",
                carry.transition.len()
            )));
        }
        if carry.previous.is_some_and(|z| z >= s) {
            return Err(Error::Shape(format!("previous state outside 0..{s}")));
        }
        Ok(carry)
    }

    /// Distribution of the next state.
    pub fn next_state_probs(&self) -> &[f64] {
        let s = self.states();
        match self.previous {
            None => &self.initial,
            Some(z) => &self.transition[z * s..(z + 1) * s],
        }
    }
}

/// Emission family of an HMM step: `(emission parameters, state) → density`.
pub type Emission = Arc<dyn Fn(&[f64], usize) -> Result<DistDescriptor> + Send + Sync>;

/// One HMM step `(carry, y) → carry'`: samples the state at `z` from the
/// initial distribution or the previous state's transition row, then observes
/// `y` at `y`.
pub fn hmm_step(emission: Emission) -> Model {
    primitive("hmm_step", move |inputs, site| {
        let mut carry = HmmCarry::from_value(&inputs[0])?;
        let dist = DistDescriptor::categorical(carry.next_state_probs().to_vec())?;
        let z = site
            .sample("z", &dist)?
            .as_index()
            .expect("categorical yields an index");
        if z < carry.states() {
            let obs = emission(&carry.emission, z)?;
            site.observe("y", &obs, &inputs[1])?;
        }
        carry.previous = Some(z);
        Ok(carry.to_value())
    })
    .with_arity(2)
}

/// Hidden Markov model: `global` draws the parameters (its output must be an
/// [`HmmCarry`] without a previous state), then `step` is folded over the
/// observations carrying those parameters.
pub fn hmm(global: &Model, step: &Model, ys: Vec<Value>) -> Model {
    let global = global.clone();
    let name = global.name().to_string();
    let checked = Model::from_fn(&name, move |inputs, ctx| {
        let s = global.run(inputs, ctx)?;
        let carry = HmmCarry::from_value(&s.output)?;
        if carry.previous.is_some() {
            return Err(Error::InvalidValue("global model must not emit a state".into()));
        }
        Ok(s)
    });
    compose(&checked, &fold_from_input(step, ys))
}
