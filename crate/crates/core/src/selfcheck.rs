//! Built-in verification suites, run by the `selfcheck` command and the
//! acceptance tests. Every check compares the library against an oracle
//! computed here by plain enumeration, brute force, or finite differences.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dist::{DistDescriptor, Family};
use crate::error::Result;
use crate::estimators::{normalized_weights, phi_gradient, proposal_traces, theta_gradient};
use crate::hmm::align::hungarian;
use crate::hmm::dataset::{Dataset, Sequence};
use crate::hmm::exact::{brute_force_log_z, exact_hmm};
use crate::hmm::vbem::{vbem_fit, VbemOptions, VbemPriors};
use crate::hmm::HmmParams;
use crate::inference::{
    importance, move_mh, move_reweight, resample, run_population, smc, Population, ResampleScheme,
    SmcOptions, TransitionKernel,
};
use crate::model::{hmm_step, primitive, Emission, HmmCarry, Model};
use crate::params::{ParamLink, ParamRole, ParameterStore};
use crate::rng::RngStream;
use crate::trace::{Trace, Value, WeightedSample};

/// Outcome of one invariant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn failed(suite: &'static str, name: impl Into<String>, err: crate::Error) -> Self {
        Check::new(suite, name, false, format!("error: {err}"))
    }
}

#[derive(Clone, Debug)]
pub struct SelfcheckOptions {
    /// Replicates per Monte Carlo check.
    pub samples: usize,
    /// Random parameter points per finite-difference check.
    pub fd_points: usize,
    pub seed: u64,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            samples: 100_000,
            fd_points: 100,
            seed: 0,
        }
    }
}

pub const SUITES: [&str; 6] = [
    "proper-weighting",
    "normalizer",
    "weight-arithmetic",
    "finite-difference",
    "enumeration-oracle",
    "vbem",
];

pub fn run_suite(name: &str, opts: &SelfcheckOptions) -> Option<Vec<Check>> {
    Some(match name {
        "proper-weighting" => proper_weighting(opts),
        "normalizer" => normalizer(opts),
        "weight-arithmetic" => weight_arithmetic(),
        "finite-difference" => finite_differences(opts),
        "enumeration-oracle" => enumeration_oracles(opts),
        "vbem" => vbem_checks(opts),
        _ => return None,
    })
}

pub fn run_all(opts: &SelfcheckOptions) -> Vec<Check> {
    SUITES
        .iter()
        .flat_map(|s| run_suite(s, opts).expect("listed suite"))
        .collect()
}

// ---------------------------------------------------------------------------
// Discrete targets

const PRIOR_A: [f64; 3] = [0.3, 0.5, 0.2];
const PRIOR_B: [[f64; 2]; 3] = [[0.6, 0.4], [0.1, 0.9], [0.5, 0.5]];
const LIKELIHOOD: [[f64; 2]; 3] = [[0.2, 0.7], [0.5, 0.9], [0.3, 0.1]];

/// `a ~ Cat`, `b | a ~ Cat`, and `y = 1` observed with probability
/// `LIKELIHOOD[a][b]`; six latent configurations.
fn pair_target() -> Model {
    primitive("pair", |_, site| {
        let a = site
            .sample("a", &DistDescriptor::categorical(PRIOR_A.to_vec())?)?
            .as_index()
            .expect("index");
        let b = site
            .sample("b", &DistDescriptor::categorical(PRIOR_B[a].to_vec())?)?
            .as_index()
            .expect("index");
        let l = LIKELIHOOD[a][b];
        site.observe("y", &DistDescriptor::categorical(vec![1.0 - l, l])?, &Value::Index(1))?;
        Ok(Value::Index(2 * a + b))
    })
}

fn pair_gamma() -> Vec<f64> {
    let mut g = Vec::new();
    for a in 0..3 {
        for b in 0..2 {
            g.push(PRIOR_A[a] * PRIOR_B[a][b] * LIKELIHOOD[a][b]);
        }
    }
    g
}

fn pair_config(t: &Trace) -> usize {
    let get = |k: &str| t.get(k).and_then(|r| r.value.as_index()).expect("pair site");
    2 * get("a") + get("b")
}

fn pair_proposal() -> Model {
    primitive("uniform_pair", |_, site| {
        site.sample("a", &DistDescriptor::categorical(vec![1.0 / 3.0; 3])?)?;
        site.sample("b", &DistDescriptor::categorical(vec![0.5, 0.5])?)
    })
}

const KERNEL_A: [f64; 3] = [0.5, 0.3, 0.2];

/// Independence kernel on `a`: draws a fresh `a` from `KERNEL_A`.
fn redraw_a_kernel() -> TransitionKernel {
    TransitionKernel::new(
        |from: &Trace, rng: &mut RngStream| {
            let a = DistDescriptor::categorical(KERNEL_A.to_vec())?.sample(rng)?;
            from.with_value("a", a)
        },
        |_: &Trace, to: &Trace| {
            let a = to.get("a").and_then(|r| r.value.as_index()).expect("a");
            Ok(KERNEL_A[a].ln())
        },
    )
}

const HMM_INIT: [f64; 2] = [0.6, 0.4];
const HMM_TRANS: [f64; 4] = [0.7, 0.3, 0.2, 0.8];
const HMM_MEANS: [f64; 2] = [-1.0, 1.0];

fn fixed_hmm_global() -> Model {
    primitive("fixed_hmm", |_, _| {
        Ok(HmmCarry {
            initial: HMM_INIT.to_vec().into(),
            transition: HMM_TRANS.to_vec().into(),
            emission: HMM_MEANS.to_vec().into(),
            previous: None,
        }
        .to_value())
    })
}

fn unit_emission() -> Emission {
    Arc::new(|means: &[f64], z: usize| DistDescriptor::normal(means[z], 1.0))
}

/// Unnormalized path weights of the fixed two-state HMM, path `z` encoded as
/// `Σ z_t 2^t`.
fn hmm_path_gamma(ys: &[f64]) -> Vec<f64> {
    let dens = |y: f64, m: f64| (-0.5 * (y - m) * (y - m)).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (0..1usize << ys.len())
        .map(|code| {
            let z = |t: usize| (code >> t) & 1;
            let mut p = HMM_INIT[z(0)] * dens(ys[0], HMM_MEANS[z(0)]);
            for t in 1..ys.len() {
                p *= HMM_TRANS[2 * z(t - 1) + z(t)] * dens(ys[t], HMM_MEANS[z(t)]);
            }
            p
        })
        .collect()
}

fn hmm_path(t: &Trace, steps: usize) -> usize {
    (0..steps)
        .map(|s| {
            let z = t
                .get(&format!("right/step:{s}/z"))
                .and_then(|r| r.value.as_index())
                .expect("state site");
            z << s
        })
        .sum()
}

const SMC_YS: [f64; 3] = [0.4, -1.3, 1.1];

// ---------------------------------------------------------------------------
// Proper weighting and normalizer

/// One replicate: `(configuration, weight)` pairs whose weights are averaged
/// (a population of `K` contributes `1/K` of each particle's weight).
type Replicate = Vec<(usize, f64)>;

struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    total_sum: f64,
    total_sq: f64,
    n: usize,
}

impl Moments {
    fn collect(configs: usize, replicates: &[Replicate]) -> Moments {
        let mut m = Moments {
            sum: vec![0.0; configs],
            sum_sq: vec![0.0; configs],
            total_sum: 0.0,
            total_sq: 0.0,
            n: replicates.len(),
        };
        for r in replicates {
            let k = r.len() as f64;
            let mut est = vec![0.0; configs];
            for &(c, w) in r {
                est[c] += w / k;
            }
            let total: f64 = est.iter().sum();
            for c in 0..configs {
                m.sum[c] += est[c];
                m.sum_sq[c] += est[c] * est[c];
            }
            m.total_sum += total;
            m.total_sq += total * total;
        }
        m
    }

    fn mean_se(&self, sum: f64, sum_sq: f64) -> (f64, f64) {
        let n = self.n as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, (var / n).sqrt())
    }
}

fn within(mean: f64, target: f64, se: f64, bands: f64) -> bool {
    (mean - target).abs() <= bands * se + 1e-12 * target.abs().max(1.0)
}

struct Sampler {
    name: &'static str,
    configs: usize,
    gamma: Vec<f64>,
    draw: Box<dyn Fn(&RngStream) -> Result<Replicate> + Send + Sync>,
}

fn samplers() -> Vec<Sampler> {
    let store = Arc::new(ParameterStore::new());
    let target = pair_target();
    let is_model = importance(&target, &pair_proposal());
    let weighted = |s: &WeightedSample| (pair_config(&s.trace), s.log_weight.exp());
    let mut out: Vec<Sampler> = Vec::new();

    {
        let (m, st) = (target.clone(), store.clone());
        out.push(Sampler {
            name: "primitive",
            configs: 6,
            gamma: pair_gamma(),
            draw: Box::new(move |rng| {
                let s = m.simulate(&[], &mut rng.clone(), &st)?;
                Ok(vec![weighted(&s)])
            }),
        });
    }
    {
        let (m, st) = (is_model.clone(), store.clone());
        out.push(Sampler {
            name: "importance",
            configs: 6,
            gamma: pair_gamma(),
            draw: Box::new(move |rng| {
                let s = m.simulate(&[], &mut rng.clone(), &st)?;
                Ok(vec![weighted(&s)])
            }),
        });
    }
    for (name, scheme) in [
        ("resample (multinomial)", ResampleScheme::Multinomial),
        ("resample (systematic)", ResampleScheme::Systematic),
    ] {
        let (m, st) = (is_model.clone(), store.clone());
        out.push(Sampler {
            name,
            configs: 6,
            gamma: pair_gamma(),
            draw: Box::new(move |rng| {
                let pop = run_population(&m, &[], 4, &rng.substream(0), &st, false)?;
                let r = resample(&pop, &mut rng.substream(1), scheme)?;
                Ok(r.particles.iter().map(weighted).collect())
            }),
        });
    }
    {
        let (m, f, st) = (is_model.clone(), target.clone(), store.clone());
        let kernel = redraw_a_kernel();
        out.push(Sampler {
            name: "move_reweight",
            configs: 6,
            gamma: pair_gamma(),
            draw: Box::new(move |rng| {
                let s = m.simulate(&[], &mut rng.substream(0), &st)?;
                let moved = move_reweight(&f, &kernel, &[], &s, &mut rng.substream(1), &st)?;
                Ok(vec![weighted(&moved)])
            }),
        });
    }
    {
        let (m, f, st) = (is_model, target, store.clone());
        let kernel = redraw_a_kernel();
        out.push(Sampler {
            name: "move_mh",
            configs: 6,
            gamma: pair_gamma(),
            draw: Box::new(move |rng| {
                let s = m.simulate(&[], &mut rng.substream(0), &st)?;
                let (moved, _) = move_mh(&f, &kernel, &[], &s, &mut rng.substream(1), &st)?;
                Ok(vec![weighted(&moved)])
            }),
        });
    }
    {
        let st = store;
        let (global, step) = (fixed_hmm_global(), hmm_step(unit_emission()));
        let ys: Vec<Value> = SMC_YS.iter().map(|&y| Value::Real(y)).collect();
        out.push(Sampler {
            name: "smc",
            configs: 1 << SMC_YS.len(),
            gamma: hmm_path_gamma(&SMC_YS),
            draw: Box::new(move |rng| {
                let opts = SmcOptions {
                    resample_threshold: 0.9,
                    ..SmcOptions::default()
                };
                let out = smc(&global, &step, &ys, 4, &opts, rng, &st)?;
                Ok(out
                    .population
                    .particles
                    .iter()
                    .map(|p| (hmm_path(&p.trace, SMC_YS.len()), p.log_weight.exp()))
                    .collect())
            }),
        });
    }
    out
}

fn replicate_moments(s: &Sampler, opts: &SelfcheckOptions, stream: u64) -> Result<Moments> {
    let root = RngStream::new(opts.seed).substream(stream);
    let reps: Vec<Replicate> = (0..opts.samples)
        .into_par_iter()
        .map(|i| (s.draw)(&root.substream(i as u64)))
        .collect::<Result<_>>()?;
    Ok(Moments::collect(s.configs, &reps))
}

/// `|Ê[h W] − Σ h γ| ≤ 4 se` for every indicator `h` of a configuration.
pub fn proper_weighting(opts: &SelfcheckOptions) -> Vec<Check> {
    const SUITE: &str = "proper-weighting";
    let mut checks = Vec::new();
    for (i, s) in samplers().iter().enumerate() {
        let m = match replicate_moments(s, opts, i as u64) {
            Ok(m) => m,
            Err(e) => {
                checks.push(Check::failed(SUITE, s.name, e));
                continue;
            }
        };
        let mut worst = 0.0f64;
        let mut passed = true;
        for c in 0..s.configs {
            let (mean, se) = m.mean_se(m.sum[c], m.sum_sq[c]);
            passed &= within(mean, s.gamma[c], se, 4.0);
            if se > 0.0 {
                worst = worst.max((mean - s.gamma[c]).abs() / se);
            }
        }
        checks.push(Check::new(
            SUITE,
            format!("{}: {} indicators", s.name, s.configs),
            passed,
            format!("max |Ê[hW] − Σhγ| = {worst:.2} se over n = {}", opts.samples),
        ));
    }
    checks
}

/// `Ê[W] / Z ∈ 1 ± 4 se` for the same samplers, and SMC on a `T = 4` HMM
/// with `K = 2048`: mean of `exp(log Ẑ − log Z)` over 50 seeds within 3 se of 1.
pub fn normalizer(opts: &SelfcheckOptions) -> Vec<Check> {
    const SUITE: &str = "normalizer";
    let mut checks = Vec::new();
    for (i, s) in samplers().iter().enumerate() {
        let z: f64 = s.gamma.iter().sum();
        let check = replicate_moments(s, opts, 100 + i as u64).map(|m| {
            let (mean, se) = m.mean_se(m.total_sum, m.total_sq);
            Check::new(
                SUITE,
                format!("{}: E[W] = Z", s.name),
                within(mean / z, 1.0, se / z, 4.0),
                format!("Ê[W]/Z = {:.5} ± {:.5}", mean / z, se / z),
            )
        });
        checks.push(check.unwrap_or_else(|e| Check::failed(SUITE, s.name, e)));
    }

    let ys_raw = [0.3, -1.1, 0.8, 1.7];
    let log_z = hmm_path_gamma(&ys_raw).iter().sum::<f64>().ln();
    let ys: Vec<Value> = ys_raw.iter().map(|&y| Value::Real(y)).collect();
    let (global, step) = (fixed_hmm_global(), hmm_step(unit_emission()));
    let store = ParameterStore::new();
    let root = RngStream::new(opts.seed).substream(200);
    let ratios: Result<Vec<f64>> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let out = smc(&global, &step, &ys, 2048, &SmcOptions::default(), &root.substream(seed), &store)?;
            Ok((out.log_evidence() - log_z).exp())
        })
        .collect();
    checks.push(match ratios {
        Ok(r) => {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let se = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
            Check::new(
                SUITE,
                "smc S=2 T=4 K=2048: mean Ẑ/Z over 50 seeds",
                (mean - 1.0).abs() <= 3.0 * se,
                format!("{mean:.5} ± {se:.5}"),
            )
        }
        Err(e) => Check::failed(SUITE, "smc S=2 T=4 K=2048", e),
    });
    checks
}

// ---------------------------------------------------------------------------
// Weight arithmetic

pub fn weight_arithmetic() -> Vec<Check> {
    const SUITE: &str = "weight-arithmetic";
    let store = ParameterStore::new();
    let mut checks = Vec::new();

    let pop = Population::new(
        [1.0f64, 2.0, 3.0]
            .iter()
            .map(|w| WeightedSample::new(Value::unit(), Trace::new(), w.ln()))
            .collect(),
        "fixed",
    );
    let weights: Vec<f64> = (0..100)
        .flat_map(|seed| {
            resample(&pop, &mut RngStream::new(seed), ResampleScheme::Multinomial)
                .map(|p| p.particles.iter().map(|s| s.log_weight.exp()).collect::<Vec<_>>())
                .unwrap_or_default()
        })
        .collect();
    checks.push(Check::new(
        SUITE,
        "resample (1,2,3): every output weight is 2.0",
        weights.len() == 300 && weights.iter().all(|w| *w == 2.0),
        format!("distinct weights {:?}", distinct(&weights)),
    ));

    let target = pair_target();
    let proposal = importance(&target, &pair_proposal());
    let kernel = redraw_a_kernel();
    let mut bitwise = true;
    let mut ratio_err = 0.0f64;
    let symmetric = TransitionKernel::new(
        |from: &Trace, rng: &mut RngStream| {
            let b = from.get("b").and_then(|r| r.value.as_index()).expect("b");
            let flip = rng.uniform() < 0.5;
            from.with_value("b", Value::Index(if flip { 1 - b } else { b }))
        },
        |_: &Trace, _: &Trace| Ok(0.5f64.ln()),
    );
    for seed in 0..1000 {
        let s = match proposal.simulate(&[], &mut RngStream::new(seed), &store) {
            Ok(s) => s,
            Err(e) => return vec![Check::failed(SUITE, "simulate", e)],
        };
        let mut rng = RngStream::new(seed).substream(1);
        match move_mh(&target, &kernel, &[], &s, &mut rng, &store) {
            Ok((moved, _)) => bitwise &= moved.log_weight.to_bits() == s.log_weight.to_bits(),
            Err(_) => bitwise = false,
        }
        let mut rng = RngStream::new(seed).substream(2);
        match move_reweight(&target, &symmetric, &[], &s, &mut rng, &store) {
            Ok(moved) => {
                let g = |t: &Trace| target.score(&[], t, &store).map(|w| w.trace.log_joint());
                match (g(&s.trace), g(&moved.trace)) {
                    (Ok(before), Ok(after)) => {
                        let err = ((moved.log_weight - s.log_weight) - (after - before)).abs();
                        ratio_err = ratio_err.max(err);
                    }
                    _ => ratio_err = f64::INFINITY,
                }
            }
            Err(_) => ratio_err = f64::INFINITY,
        }
    }
    checks.push(Check::new(
        SUITE,
        "move_mh keeps the input weight bitwise (1000 moves)",
        bitwise,
        "",
    ));
    checks.push(Check::new(
        SUITE,
        "symmetric move_reweight: log w'/w = log γ(x')/γ(x)",
        ratio_err <= 1e-12,
        format!("max error {ratio_err:.2e}"),
    ));
    checks
}

fn distinct(xs: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

// ---------------------------------------------------------------------------
// Finite differences

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-6;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8)
}

fn central<F: Fn(&[f64]) -> f64>(f: F, at: &[f64]) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut hi = at.to_vec();
            let mut lo = at.to_vec();
            hi[i] += FD_STEP;
            lo[i] -= FD_STEP;
            (f(&hi) - f(&lo)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Target `z ~ Cat(θ prior)`, `y ~ Normal(θ emit[z])` observed; proposal
/// `z ~ Cat(φ)` with three states.
fn gradient_pair() -> (Model, Model) {
    let target = primitive("fd_target", |_, site| {
        let z = site
            .sample_param("z", ParamLink::direct(Family::Categorical, "theta.prior", 0, 2))?
            .as_index()
            .expect("index");
        site.observe_param(
            "y",
            ParamLink::direct(Family::NormalDiag, "theta.emit", 2 * z, 2),
            &Value::Real(0.7),
        )?;
        Ok(Value::Index(z))
    });
    let proposal = primitive("fd_proposal", |_, site| {
        site.sample_param("z", ParamLink::direct(Family::Categorical, "phi.q", 0, 2))
    });
    (target, proposal)
}

fn random_store(rng: &mut RngStream) -> ParameterStore {
    let mut u = |n: usize| (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect::<Vec<_>>();
    let mut s = ParameterStore::new();
    s.insert("theta.prior", u(2), ParamRole::Theta);
    s.insert("theta.emit", u(6), ParamRole::Theta);
    s.insert("phi.q", u(2), ParamRole::Phi);
    s
}

fn with_entry(store: &ParameterStore, name: &str, values: &[f64]) -> ParameterStore {
    let mut s = store.clone();
    s.get_mut(name).expect("entry").values = values.to_vec();
    s
}

/// Both gradient estimators against central differences of their surrogate
/// objectives with the normalized weights held fixed, and every family's
/// score against differences of its log-density.
pub fn finite_differences(opts: &SelfcheckOptions) -> Vec<Check> {
    const SUITE: &str = "finite-difference";
    let (target, proposal) = gradient_pair();
    let model = importance(&target, &proposal);
    let mut point_rng = RngStream::new(opts.seed).substream(300);
    let mut worst = [0.0f64; 2];
    let mut error = None;
    for point in 0..opts.fd_points {
        let store = random_store(&mut point_rng);
        let run = || -> Result<[f64; 2]> {
            let pop = run_population(&model, &[], 16, &point_rng.substream(point as u64), &store, false)?;
            let w = normalized_weights(&pop)?;
            let props = proposal_traces(&pop)?;
            let theta_obj = |s: &ParameterStore| -> f64 {
                pop.particles
                    .iter()
                    .zip(&w)
                    .map(|(p, wk)| wk * target.score(&[], &p.trace, s).expect("score").trace.log_joint())
                    .sum()
            };
            let phi_obj = |s: &ParameterStore| -> f64 {
                -props
                    .iter()
                    .zip(&w)
                    .map(|(q, wk)| wk * proposal.score(&[], q, s).expect("score").trace.log_joint())
                    .sum::<f64>()
            };
            let gt = theta_gradient(&pop, &store)?;
            let gp = phi_gradient(&pop, &props, &store)?;
            let mut errs = [0.0f64; 2];
            let cases: [(&str, &dyn Fn(&ParameterStore) -> f64, _, usize); 3] = [
                ("theta.prior", &theta_obj, &gt, 0),
                ("theta.emit", &theta_obj, &gt, 0),
                ("phi.q", &phi_obj, &gp, 1),
            ];
            for (name, obj, g, slot) in cases {
                let at = store.values(name)?.to_vec();
                let fd = central(|v| obj(&with_entry(&store, name, v)), &at);
                let analytic = g.get(name).map(|v| v.to_vec()).unwrap_or(vec![0.0; at.len()]);
                errs[slot] = errs[slot].max(rel_err(&analytic, &fd));
            }
            Ok(errs)
        };
        match run() {
            Ok(e) => {
                worst[0] = worst[0].max(e[0]);
                worst[1] = worst[1].max(e[1]);
            }
            Err(e) => error = Some(e),
        }
    }
    let mut checks: Vec<Check> = ["theta estimator", "phi estimator"]
        .iter()
        .enumerate()
        .map(|(i, name)| fd_check(SUITE, name, worst[i], opts.fd_points))
        .collect();
    if let Some(e) = error {
        checks.push(Check::failed(SUITE, "estimator evaluation", e));
    }

    let mut rng = RngStream::new(opts.seed).substream(301);
    for family in [Family::NormalDiag, Family::Categorical, Family::Dirichlet] {
        let mut worst = 0.0f64;
        let mut failure = None;
        for _ in 0..opts.fd_points {
            let mut u = |scale: f64| scale * (2.0 * rng.uniform() - 1.0);
            let params: Vec<f64> = match family {
                Family::NormalDiag => vec![u(2.0), u(2.0), u(1.0), u(1.0)],
                Family::Categorical => vec![u(1.5), u(1.5), u(1.5)],
                Family::Dirichlet => vec![u(1.0), u(1.0), u(1.0)],
            };
            let result = (|| -> Result<f64> {
                let d = DistDescriptor::from_unconstrained(family, &params)?;
                let v = d.sample(&mut rng)?;
                let g = d.score_grad(&v)?;
                let fd = central(
                    |p| {
                        DistDescriptor::from_unconstrained(family, p)
                            .and_then(|d| d.log_prob(&v))
                            .unwrap_or(f64::NAN)
                    },
                    &params,
                );
                Ok(rel_err(&g, &fd))
            })();
            match result {
                Ok(e) => worst = worst.max(e),
                Err(e) => failure = Some(e),
            }
        }
        let name = format!("{family:?} score_grad");
        checks.push(match failure {
            Some(e) => Check::failed(SUITE, name, e),
            None => fd_check(SUITE, &name, worst, opts.fd_points),
        });
    }
    checks
}

fn fd_check(suite: &'static str, name: &str, worst: f64, points: usize) -> Check {
    Check::new(
        suite,
        format!("{name} vs central differences"),
        worst <= FD_TOL,
        format!("max relative error {worst:.2e} over {points} points, h = {FD_STEP:e}"),
    )
}

// ---------------------------------------------------------------------------
// Enumeration oracles

fn random_hmm(states: usize, rng: &mut RngStream) -> HmmParams {
    let mut simplex = |n: usize| {
        let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let mut v: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // Exact unit sum, as the parameter validation requires.
        let head: f64 = v[..n - 1].iter().sum();
        v[n - 1] = 1.0 - head;
        v
    };
    let initial = simplex(states);
    let transition = (0..states).map(|_| simplex(states)).collect();
    let means = (0..states)
        .map(|_| [2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0])
        .collect();
    HmmParams {
        initial,
        transition,
        means,
        obs_sd: 0.3 + rng.uniform(),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn enumeration_oracles(opts: &SelfcheckOptions) -> Vec<Check> {
    const SUITE: &str = "enumeration-oracle";
    let mut rng = RngStream::new(opts.seed).substream(400);
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut failure = None;
    for states in 1..=3 {
        for steps in 0..=6 {
            for _ in 0..10 {
                let p = random_hmm(states, &mut rng);
                let obs: Vec<[f64; 2]> = (0..steps)
                    .map(|_| [2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0])
                    .collect();
                match exact_hmm(&p, &obs) {
                    Ok(post) => worst = worst.max((post.log_z - brute_force_log_z(&p, &obs)).abs()),
                    Err(e) => failure = Some(e),
                }
                instances += 1;
            }
        }
    }
    let mut checks = vec![match failure {
        Some(e) => Check::failed(SUITE, "forward algorithm", e),
        None => Check::new(
            SUITE,
            "forward log Z = brute-force path sum (S ≤ 3, T ≤ 6)",
            worst <= 1e-10,
            format!("max |Δ log Z| = {worst:.2e} over {instances} instances"),
        ),
    }];

    let perms = permutations(4);
    let mut mismatches = 0;
    let trials = 500;
    for _ in 0..trials {
        let cost: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.uniform()).collect()).collect();
        let total = |p: &[usize]| p.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>();
        let best = perms.iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        match hungarian(&cost) {
            Ok(p) if (total(&p) - best).abs() <= 1e-12 => {}
            _ => mismatches += 1,
        }
    }
    checks.push(Check::new(
        SUITE,
        "Hungarian assignment = exhaustive search (S = 4)",
        mismatches == 0,
        format!("{mismatches} of {trials} random cost matrices differ"),
    ));
    checks
}

// ---------------------------------------------------------------------------
// VBEM

fn sample_hmm(p: &HmmParams, n: usize, steps: usize, rng: &mut RngStream) -> Result<Dataset> {
    use rand_distr::{Distribution, StandardNormal};
    let draw = |probs: &[f64], rng: &mut RngStream| -> Result<usize> {
        Ok(DistDescriptor::categorical(probs.to_vec())?
            .sample(rng)?
            .as_index()
            .expect("index"))
    };
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let mut states: Vec<usize> = Vec::with_capacity(steps);
        let mut displacements = Vec::with_capacity(steps);
        for t in 0..steps {
            let z = if t == 0 {
                draw(&p.initial, rng)?
            } else {
                draw(&p.transition[states[t - 1]], rng)?
            };
            let mut y = p.means[z];
            for c in y.iter_mut() {
                let e: f64 = StandardNormal.sample(rng.rng());
                *c += p.obs_sd * e;
            }
            states.push(z);
            displacements.push(y);
        }
        sequences.push(Sequence { displacements, states });
    }
    Ok(Dataset { sequences })
}

pub fn vbem_checks(opts: &SelfcheckOptions) -> Vec<Check> {
    const SUITE: &str = "vbem";
    let priors = VbemPriors::default();
    let mut checks = Vec::new();

    let mut worst_drop = 0.0f64;
    let mut failure = None;
    for seed in 0..20u64 {
        let mut rng = RngStream::new(opts.seed).substream(500 + seed);
        let truth = random_hmm(3, &mut rng);
        let result = sample_hmm(&truth, 3, 40, &mut rng).and_then(|data| {
            let vb_opts = VbemOptions {
                max_iters: 200,
                tol: 1e-10,
                restarts: 1,
                seed,
            };
            vbem_fit(&data, 3, truth.obs_sd, &priors, &vb_opts)
        });
        match result {
            Ok(fit) => {
                for w in fit.elbo_trace.windows(2) {
                    worst_drop = worst_drop.max(w[0] - w[1]);
                }
            }
            Err(e) => failure = Some(e),
        }
    }
    checks.push(match failure {
        Some(e) => Check::failed(SUITE, "ELBO monotone", e),
        None => Check::new(
            SUITE,
            "ELBO non-decreasing on 20 seeded runs",
            worst_drop <= 1e-8,
            format!("largest decrease {worst_drop:.2e}"),
        ),
    });

    let separated = HmmParams {
        initial: vec![0.5, 0.5],
        transition: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        means: vec![[-1.0, 0.0], [1.0, 0.0]],
        obs_sd: 0.5,
    };
    let mut rng = RngStream::new(opts.seed).substream(600);
    let result = sample_hmm(&separated, 5, 100, &mut rng).and_then(|data| {
        let vb_opts = VbemOptions {
            max_iters: 500,
            tol: 1e-10,
            restarts: 2,
            seed: opts.seed,
        };
        let fit = vbem_fit(&data, 2, separated.obs_sd, &priors, &vb_opts)?;
        let point = fit.point_estimate();
        let (mut total, mut count) = (0.0, 0usize);
        for (seq, vb) in data.sequences.iter().zip(&fit.marginals) {
            let exact = exact_hmm(&point, &seq.displacements)?;
            for (a, b) in exact.marginals.iter().zip(vb) {
                for (x, y) in a.iter().zip(b) {
                    total += (x - y).abs();
                    count += 1;
                }
            }
        }
        Ok(total / count as f64)
    });
    checks.push(match result {
        Ok(d) => Check::new(
            SUITE,
            "VB marginals match exact posteriors at the point estimate",
            d <= 0.05,
            format!("mean abs. difference {d:.4}"),
        ),
        Err(e) => Check::failed(SUITE, "VB marginals", e),
    });
    checks
}
