//! The bouncing-ball experiment end to end: data, wake-sleep SMC training of
//! an HMM written with the model combinators, the VBEM baseline, and
//! aligned evaluation of both against the generating process.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dist::{DistDescriptor, Family};
use crate::error::{Error, Result};
use crate::estimators::{wake_sleep_epoch, EpochMetrics, WakeSleep};
use crate::hmm::align::{align_states, state_accuracy, transition_error};
use crate::hmm::dataset::{generate_dataset, Dataset};
use crate::hmm::exact::{exact_hmm, marginal_decode};
use crate::hmm::vbem::{kmeans_pp, vbem_fit, VbemOptions, VbemPosterior};
use crate::hmm::{gaussian_log_density, HmmParams};
use crate::inference::{importance, SmcOptions, TransitionKernel};
use crate::model::{hmm_step, primitive, Emission, HmmCarry, Model};
use crate::params::{AdamConfig, OptimizerState, ParamLink, ParamRole, ParameterStore};
use crate::rng::RngStream;
use crate::trace::{Trace, Value};

// Substreams of the run seed; the dataset uses indices 0..n_sequences.
const TRAIN_STREAM: u64 = u64::MAX - 1;
const INIT_STREAM: u64 = u64::MAX - 2;
const VBEM_STREAM: u64 = u64::MAX - 3;

pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    generate_dataset(cfg.data.n_sequences, cfg.data.steps, &cfg.ball(), cfg.seed)
}

/// Observation sequences as model inputs, divided by `scale`.
pub fn as_values(data: &Dataset, scale: f64) -> Vec<Vec<Value>> {
    data.sequences
        .iter()
        .map(|s| {
            s.displacements
                .iter()
                .map(|d| Value::vector(vec![d[0] / scale, d[1] / scale]))
                .collect()
        })
        .collect()
}

/// Ground truth: heading velocities as emission means, and the empirical
/// initial and transition frequencies of the true heading sequences
/// (reflections included). Rows never visited fall back to uniform.
pub fn truth_params(cfg: &RunConfig, data: &Dataset) -> HmmParams {
    let s = cfg.data.n_headings;
    let mut initial = vec![0.0; s];
    let mut counts = vec![vec![0.0; s]; s];
    for seq in &data.sequences {
        if let Some(z) = seq.states.first() {
            initial[*z] += 1.0;
        }
        for w in seq.states.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
    }
    let normalize = |row: &mut Vec<f64>| {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        } else {
            row.iter_mut().for_each(|x| *x = 1.0 / s as f64);
        }
    };
    normalize(&mut initial);
    counts.iter_mut().for_each(normalize);
    HmmParams {
        initial,
        transition: counts,
        means: cfg.ball().velocities(),
        obs_sd: cfg.model.obs_sd,
    }
}

fn emission(obs_sd: f64) -> Emission {
    Arc::new(move |means: &[f64], z: usize| {
        DistDescriptor::normal_diag(means[2 * z..2 * z + 2].to_vec(), vec![obs_sd, obs_sd])
    })
}

/// Global HMM parameters under fixed priors: symmetric Dirichlet on the
/// initial distribution and each transition row, isotropic Normal on each
/// emission mean. Units are those of the model inputs.
pub fn global_prior(states: usize, alpha: f64, mean: f64, sd: f64) -> Result<Model> {
    let s = states;
    let simplex = DistDescriptor::dirichlet(vec![alpha; s])?;
    let location = DistDescriptor::normal_diag(vec![mean; 2], vec![sd; 2])?;
    Ok(primitive("hmm_global", move |_, site| {
        let initial = site.sample("initial", &simplex)?;
        let mut transition = Vec::with_capacity(s * s);
        for r in 0..s {
            let row = site.sample(&format!("row:{r}"), &simplex)?;
            transition.extend_from_slice(row.as_vector().expect("dirichlet yields a vector"));
        }
        let mut means = Vec::with_capacity(2 * s);
        for k in 0..s {
            let m = site.sample(&format!("mean:{k}"), &location)?;
            means.extend_from_slice(m.as_vector().expect("2-d normal yields a vector"));
        }
        Ok(HmmCarry {
            initial: initial.as_vector().expect("dirichlet yields a vector").into(),
            transition: transition.into(),
            emission: means.into(),
            previous: None,
        }
        .to_value())
    }))
}

/// Learned proposal over the global parameters, with the same addresses as
/// [`global_prior`]: Dirichlet concentrations and diagonal Normals, all
/// read from φ.
pub fn global_proposal(states: usize) -> Model {
    let s = states;
    primitive("hmm_global_proposal", move |_, site| {
        site.sample_param("initial", ParamLink::direct(Family::Dirichlet, "phi.initial_conc", 0, s))?;
        for r in 0..s {
            site.sample_param(
                &format!("row:{r}"),
                ParamLink::direct(Family::Dirichlet, "phi.transition_conc", r * s, s),
            )?;
        }
        for k in 0..s {
            site.sample_param(
                &format!("mean:{k}"),
                ParamLink::direct(Family::NormalDiag, "phi.means", 4 * k, 4),
            )?;
        }
        Ok(Value::unit())
    })
}

/// Per-step proposal: state logits linear in the displacement, with an
/// extra learned offset at the first step.
pub fn proposal_step(states: usize, obs_sd: f64) -> Model {
    let s = states;
    primitive("hmm_proposal", move |inputs, site| {
        let carry = HmmCarry::from_value(&inputs[0])?;
        let y = inputs[1]
            .as_vector()
            .filter(|y| y.len() == 2)
            .ok_or_else(|| Error::InvalidValue("observation must be a 2-vector".into()))?;
        // One-step predictive logits under the particle's own globals; the
        // learned terms correct them.
        let prior = match carry.previous {
            Some(p) => &carry.transition[p * s..(p + 1) * s],
            None => &carry.initial[..],
        };
        let logits: Vec<f64> = (0..s)
            .map(|k| {
                let m = [carry.emission[2 * k], carry.emission[2 * k + 1]];
                prior[k].max(1e-300).ln() + gaussian_log_density(&[y[0], y[1]], &m, obs_sd)
            })
            .collect();
        let last = logits[s - 1];
        let shift = logits[..s - 1].iter().map(|l| l - last).collect();
        let features = [y[0], y[1], 1.0];
        let mut link = ParamLink::linear(Family::Categorical, "phi.step", 0, s - 1, &features);
        if carry.previous.is_none() {
            link = link.plus(ParamLink::direct(Family::Categorical, "phi.initial", 0, s - 1));
        }
        site.sample_param("z", link.shifted(shift))?;
        Ok(Value::unit())
    })
    .with_arity(2)
}

/// Picks one step's state uniformly and moves it to a uniformly chosen
/// different state. Symmetric, so both directions have the same density.
pub fn state_flip_kernel(states: usize) -> TransitionKernel {
    let sites = |t: &Trace| -> Vec<String> {
        t.iter()
            .filter(|r| r.role.is_latent() && r.address.as_str().ends_with("/z"))
            .map(|r| r.address.to_string())
            .collect()
    };
    TransitionKernel::new(
        move |from: &Trace, rng: &mut RngStream| {
            let zs = sites(from);
            if zs.is_empty() || states < 2 {
                return Ok(from.clone());
            }
            let pick = ((rng.uniform() * zs.len() as f64) as usize).min(zs.len() - 1);
            let current = from.get(&zs[pick]).and_then(|r| r.value.as_index()).unwrap_or(0);
            let k = ((rng.uniform() * (states - 1) as f64) as usize).min(states - 2);
            let next = if k >= current { k + 1 } else { k };
            from.with_value(&zs[pick], Value::Index(next))
        },
        move |from: &Trace, _to: &Trace| {
            let n = sites(from).len();
            Ok(if n == 0 || states < 2 {
                0.0
            } else {
                -((n * (states - 1)) as f64).ln()
            })
        },
    )
}

/// Prior hyperparameters of [`global_prior`] in model units, plus the
/// emission noise.
#[derive(Clone, Copy, Debug)]
pub struct ConjugatePriors {
    pub alpha: f64,
    pub mean: f64,
    pub mean_sd: f64,
    pub obs_sd: f64,
}

struct GlobalConditional {
    initial: DistDescriptor,
    rows: Vec<DistDescriptor>,
    means: Vec<DistDescriptor>,
}

fn global_conditional(states: usize, pr: &ConjugatePriors, trace: &Trace) -> Result<GlobalConditional> {
    let s = states;
    let mut initial = vec![pr.alpha; s];
    let mut counts = vec![vec![pr.alpha; s]; s];
    let mut sums = vec![[0.0; 2]; s];
    let mut n = vec![0usize; s];
    let mut previous: Option<usize> = None;
    for t in 0.. {
        let Some(z) = trace.get(&format!("right/step:{t}/z")) else { break };
        let z = z
            .value
            .as_index()
            .filter(|&z| z < s)
            .ok_or_else(|| Error::InvalidValue(format!("state at step {t} out of range")))?;
        match previous {
            None => initial[z] += 1.0,
            Some(p) => counts[p][z] += 1.0,
        }
        if let Some(y) = trace.get(&format!("right/step:{t}/y")).and_then(|r| r.value.as_vector()) {
            sums[z][0] += y[0];
            sums[z][1] += y[1];
            n[z] += 1;
        }
        previous = Some(z);
    }
    let prior_prec = 1.0 / (pr.mean_sd * pr.mean_sd);
    let obs_prec = 1.0 / (pr.obs_sd * pr.obs_sd);
    let means = (0..s)
        .map(|k| {
            let prec = prior_prec + n[k] as f64 * obs_prec;
            let centre = |d: usize| (prior_prec * pr.mean + obs_prec * sums[k][d]) / prec;
            DistDescriptor::normal_diag(vec![centre(0), centre(1)], vec![prec.sqrt().recip(); 2])
        })
        .collect::<Result<_>>()?;
    Ok(GlobalConditional {
        initial: DistDescriptor::dirichlet(initial)?,
        rows: counts.into_iter().map(DistDescriptor::dirichlet).collect::<Result<_>>()?,
        means,
    })
}

impl GlobalConditional {
    fn sites(&self) -> impl Iterator<Item = (String, &DistDescriptor)> {
        std::iter::once(("left/initial".to_string(), &self.initial))
            .chain(self.rows.iter().enumerate().map(|(r, d)| (format!("left/row:{r}"), d)))
            .chain(self.means.iter().enumerate().map(|(k, d)| (format!("left/mean:{k}"), d)))
    }
}

/// Redraws every global parameter from its conjugate conditional given the
/// particle's state path and observations. The conditional is exact for
/// [`global_prior`] composed with [`hmm_step`], so moves are always accepted
/// up to rounding.
pub fn global_gibbs_kernel(states: usize, priors: ConjugatePriors) -> TransitionKernel {
    TransitionKernel::new(
        move |from: &Trace, rng: &mut RngStream| {
            let cond = global_conditional(states, &priors, from)?;
            let mut next = from.clone();
            for (address, dist) in cond.sites() {
                next = next.with_value(&address, dist.sample(rng)?)?;
            }
            Ok(next)
        },
        move |from: &Trace, to: &Trace| {
            let cond = global_conditional(states, &priors, from)?;
            let mut total = 0.0;
            for (address, dist) in cond.sites() {
                let rec = to
                    .get(&address)
                    .ok_or_else(|| Error::InvalidValue(format!("trace has no {address}")))?;
                total += dist.log_prob(&rec.value)?;
            }
            Ok(total)
        },
    )
}

/// Wake-sleep setup, its initial parameters, and the input scale.
///
/// Inputs are displacements divided by their RMS so that one learning rate
/// suits every entry. Priors are the VBEM priors mapped to those units. The
/// proposal over emission means starts at k-means++ seeds of the data with
/// scale `0.1`; Dirichlet log-concentrations and step weights start at 0.
pub fn build_wake_sleep(cfg: &RunConfig, data: &Dataset) -> Result<(WakeSleep, ParameterStore, f64)> {
    let s = cfg.model.states;
    if s < 2 {
        return Err(Error::Shape("wake-sleep HMM needs at least 2 states".into()));
    }
    let scale = data.displacement_rms();
    if !(scale > 0.0) {
        return Err(Error::Shape("dataset has no non-zero displacements".into()));
    }
    let points: Vec<[f64; 2]> = data
        .all_displacements()
        .map(|d| [d[0] / scale, d[1] / scale])
        .collect();
    let seeds = kmeans_pp(&points, s, &mut RngStream::new(cfg.seed).substream(INIT_STREAM));
    let mut store = ParameterStore::new();
    store.insert("phi.initial_conc", vec![0.0; s], ParamRole::Phi);
    store.insert("phi.transition_conc", vec![0.0; s * s], ParamRole::Phi);
    let init_sd = 0.1f64.ln();
    let means = seeds.iter().flat_map(|m| [m[0], m[1], init_sd, init_sd]).collect();
    store.insert("phi.means", means, ParamRole::Phi);
    store.insert("phi.step", vec![0.0; (s - 1) * 3], ParamRole::Phi);
    store.insert("phi.initial", vec![0.0; s - 1], ParamRole::Phi);
    let p = &cfg.model.priors;
    let prior = global_prior(
        s,
        p.dirichlet_alpha,
        p.mean_prior_mean / scale,
        1.0 / (p.mean_prior_precision.sqrt() * scale),
    )?;
    let conjugate = ConjugatePriors {
        alpha: p.dirichlet_alpha,
        mean: p.mean_prior_mean / scale,
        mean_sd: 1.0 / (p.mean_prior_precision.sqrt() * scale),
        obs_sd: cfg.model.obs_sd / scale,
    };
    let global = importance(&prior, &global_proposal(s));
    let step = importance(&hmm_step(emission(cfg.model.obs_sd / scale)), &proposal_step(s, cfg.model.obs_sd / scale));
    let ws = WakeSleep {
        global,
        step,
        particles: cfg.train.particles,
        smc: SmcOptions {
            resample_threshold: cfg.train.tau,
            scheme: cfg.train.resample_scheme.into(),
            moves_per_step: cfg.train.moves_per_step,
            move_stride: cfg.train.move_stride,
            kernel: (cfg.train.moves_per_step > 0).then(|| global_gibbs_kernel(s, conjugate)),
            parallel: true,
        },
        batch_size: cfg.train.batch,
        parallel: true,
    };
    Ok((ws, store, scale))
}

/// Point estimate from the learned global proposal: Dirichlet means and
/// Normal locations, the latter mapped back to displacement units.
pub fn learned_params(store: &ParameterStore, states: usize, obs_sd: f64, scale: f64) -> Result<HmmParams> {
    let dirichlet_mean = |log_alpha: &[f64]| {
        let a: Vec<f64> = log_alpha.iter().map(|x| x.exp()).collect();
        let total: f64 = a.iter().sum();
        a.iter().map(|x| x / total).collect::<Vec<_>>()
    };
    let trans = store.values("phi.transition_conc")?;
    let means = store.values("phi.means")?;
    if trans.len() != states * states || means.len() != 4 * states {
        return Err(Error::Shape("φ entries do not match the state count".into()));
    }
    Ok(HmmParams {
        initial: dirichlet_mean(store.values("phi.initial_conc")?),
        transition: trans.chunks(states).map(dirichlet_mean).collect(),
        means: means.chunks(4).map(|m| [m[0] * scale, m[1] * scale]).collect(),
        obs_sd,
    })
}

pub struct TrainOutcome {
    pub store: ParameterStore,
    /// Divisor applied to displacements before they enter the model.
    pub scale: f64,
    pub metrics: Vec<EpochMetrics>,
    pub learned: HmmParams,
}

/// Runs `cfg.train.epochs` wake-sleep epochs, reporting each to `on_epoch`.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let (ws, mut store, scale) = build_wake_sleep(cfg, data)?;
    let values = as_values(data, scale);
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.train.lr,
        ..AdamConfig::default()
    });
    let rng = RngStream::new(cfg.seed).substream(TRAIN_STREAM);
    let mut metrics = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let m = wake_sleep_epoch(&values, &ws, &mut store, &mut opt, &rng, epoch)?;
        on_epoch(&m);
        metrics.push(m);
    }
    let learned = learned_params(&store, cfg.model.states, cfg.model.obs_sd, scale)?;
    Ok(TrainOutcome {
        store,
        scale,
        metrics,
        learned,
    })
}

pub fn fit_vbem(cfg: &RunConfig, data: &Dataset) -> Result<VbemPosterior> {
    let opts = VbemOptions {
        max_iters: cfg.vbem.max_iters,
        tol: cfg.vbem.tol,
        restarts: cfg.vbem.restarts,
        seed: RngStream::new(cfg.seed).substream(VBEM_STREAM).key(),
    };
    vbem_fit(data, cfg.model.states, cfg.model.obs_sd, &cfg.model.priors, &opts)
}

/// Aligned comparison of one method's point estimate with the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub learned_params: HmmParams,
    /// `alignment[estimated state] = true state`.
    pub alignment: Vec<usize>,
    pub transition_error: f64,
    /// Exact posterior-marginal decoding at the point estimate.
    pub state_accuracy: f64,
}

pub fn evaluate(learned: &HmmParams, truth: &HmmParams, data: &Dataset) -> Result<MethodReport> {
    let perm = align_states(&learned.means, &truth.means)?;
    let decoded = data
        .sequences
        .iter()
        .map(|s| exact_hmm(learned, &s.displacements).map(|p| marginal_decode(&p)))
        .collect::<Result<Vec<_>>>()?;
    let truth_states: Vec<Vec<usize>> = data.sequences.iter().map(|s| s.states.clone()).collect();
    Ok(MethodReport {
        learned_params: learned.clone(),
        transition_error: transition_error(learned, truth, &perm)?,
        state_accuracy: state_accuracy(&decoded, &truth_states, &perm),
        alignment: perm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub truth: HmmParams,
    pub wake_sleep: Option<MethodReport>,
    pub vbem: Option<MethodReport>,
}

impl ExperimentReport {
    pub fn new(cfg: &RunConfig, truth: HmmParams) -> Self {
        ExperimentReport {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            truth,
            wake_sleep: None,
            vbem: None,
        }
    }
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub dataset: Dataset,
    pub training: TrainOutcome,
    pub vbem: VbemPosterior,
}

/// Generates the data, trains both methods and evaluates them.
pub fn run_experiment(cfg: &RunConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<ExperimentOutcome> {
    cfg.validate().map_err(|e| Error::InvalidValue(e.to_string()))?;
    if cfg.model.states != cfg.data.n_headings {
        return Err(Error::Shape("evaluation needs one model state per heading".into()));
    }
    let dataset = dataset_for(cfg)?;
    let truth = truth_params(cfg, &dataset);
    let training = train(cfg, &dataset, on_epoch)?;
    let vbem = fit_vbem(cfg, &dataset)?;
    let mut report = ExperimentReport::new(cfg, truth.clone());
    report.wake_sleep = Some(evaluate(&training.learned, &truth, &dataset)?);
    report.vbem = Some(evaluate(&vbem.point_estimate(), &truth, &dataset)?);
    Ok(ExperimentOutcome {
        report,
        dataset,
        training,
        vbem,
    })
}
