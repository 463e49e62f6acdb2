//! Variational Bayes EM for a Gaussian HMM with known emission scale.
//!
//! The posterior factorizes as q(pi0) q(A) q(means) q(z). Dirichlet factors
//! enter the E-step through `exp(ψ(a) − ψ(Σa))`; each Normal mean factor
//! N(m, 1/λ) contributes `log N(y; m, σ²) − d / (2σ²λ)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::hmm::dataset::Dataset;
use crate::hmm::exact::{forward_backward, Posterior};
use crate::hmm::{gaussian_log_density, HmmParams};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VbemPriors {
    /// Symmetric Dirichlet concentration on pi0 and each row of A.
    pub dirichlet_alpha: f64,
    pub mean_prior_mean: f64,
    /// Precision of the Normal prior on each mean component.
    pub mean_prior_precision: f64,
}

impl Default for VbemPriors {
    fn default() -> Self {
        VbemPriors {
            dirichlet_alpha: 1.0,
            mean_prior_mean: 0.0,
            mean_prior_precision: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VbemOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ initializations; the best final ELBO wins.
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VbemPosterior {
    pub initial_conc: Vec<f64>,
    pub transition_conc: Vec<Vec<f64>>,
    pub mean_mean: Vec<[f64; 2]>,
    pub mean_precision: Vec<f64>,
    pub obs_sd: f64,
    /// Per sequence: `marginals[n][t][s]`.
    pub marginals: Vec<Vec<Vec<f64>>>,
    /// Per sequence: `pairwise[n][t][r][s]`.
    pub pairwise: Vec<Vec<Vec<Vec<f64>>>>,
    pub elbo_trace: Vec<f64>,
}

impl VbemPosterior {
    /// Posterior means of pi0, A and the emission means.
    pub fn point_estimate(&self) -> HmmParams {
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<_>>()
        };
        HmmParams {
            initial: norm(&self.initial_conc),
            transition: self.transition_conc.iter().map(|r| norm(r)).collect(),
            means: self.mean_mean.clone(),
            obs_sd: self.obs_sd,
        }
    }
}

struct Factors {
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
    mean: Vec<[f64; 2]>,
    precision: Vec<f64>,
}

fn expected_log_simplex(conc: &[f64]) -> Vec<f64> {
    let total = digamma(conc.iter().sum());
    conc.iter().map(|a| digamma(*a) - total).collect()
}

fn kl_dirichlet(q: &[f64], p: &[f64]) -> f64 {
    let qs: f64 = q.iter().sum();
    let ps: f64 = p.iter().sum();
    let dq = digamma(qs);
    ln_gamma(qs) - ln_gamma(ps)
        + q.iter()
            .zip(p)
            .map(|(a, b)| ln_gamma(*b) - ln_gamma(*a) + (a - b) * (digamma(*a) - dq))
            .sum::<f64>()
}

fn kl_normal(m: f64, lambda: f64, m0: f64, kappa0: f64) -> f64 {
    0.5 * (kappa0 / lambda + kappa0 * (m - m0).powi(2) - 1.0 + (lambda / kappa0).ln())
}

/// Fits the factorized posterior by coordinate ascent on the ELBO.
pub fn vbem_fit(
    data: &Dataset,
    states: usize,
    obs_sd: f64,
    priors: &VbemPriors,
    opts: &VbemOptions,
) -> Result<VbemPosterior> {
    if states == 0 {
        return Err(Error::Shape("VBEM needs at least one state".into()));
    }
    if !(obs_sd.is_finite() && obs_sd > 0.0)
        || !(priors.dirichlet_alpha > 0.0 && priors.mean_prior_precision > 0.0)
    {
        return Err(Error::InvalidParams("VBEM scales and concentrations must be > 0".into()));
    }
    let points: Vec<[f64; 2]> = data.all_displacements().copied().collect();
    if points.is_empty() {
        return Err(Error::Shape("VBEM needs at least one observation".into()));
    }
    let root = RngStream::new(opts.seed);
    let mut best: Option<VbemPosterior> = None;
    for r in 0..opts.restarts.max(1) {
        let seeds = kmeans_pp(&points, states, &mut root.substream(r as u64));
        let fit = fit_from(data, &seeds, obs_sd, priors, opts)?;
        let better = match &best {
            None => true,
            Some(b) => fit.elbo_trace.last() > b.elbo_trace.last(),
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// k-means++ seeding: first center uniform, the rest proportional to the
/// squared distance to the nearest chosen center.
pub fn kmeans_pp(points: &[[f64; 2]], k: usize, rng: &mut RngStream) -> Vec<[f64; 2]> {
    let d2 = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let first = ((rng.uniform() * points.len() as f64) as usize).min(points.len() - 1);
    let mut centers = vec![points[first]];
    let mut nearest: Vec<f64> = points.iter().map(|p| d2(p, &points[first])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut idx = points.len() - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            ((rng.uniform() * points.len() as f64) as usize).min(points.len() - 1)
        };
        centers.push(points[pick]);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(d2(p, &points[pick]));
        }
    }
    centers
}

fn fit_from(
    data: &Dataset,
    seeds: &[[f64; 2]],
    obs_sd: f64,
    priors: &VbemPriors,
    opts: &VbemOptions,
) -> Result<VbemPosterior> {
    let s = seeds.len();
    // Start from hard nearest-seed responsibilities.
    let hard: Vec<Posterior> = data
        .sequences
        .iter()
        .map(|seq| {
            let zs: Vec<usize> = seq
                .displacements
                .iter()
                .map(|y| {
                    (0..s)
                        .min_by(|a, b| {
                            let da = (y[0] - seeds[*a][0]).powi(2) + (y[1] - seeds[*a][1]).powi(2);
                            let db = (y[0] - seeds[*b][0]).powi(2) + (y[1] - seeds[*b][1]).powi(2);
                            da.total_cmp(&db)
                        })
                        .expect("s > 0")
                })
                .collect();
            let onehot = |z: usize| (0..s).map(|k| f64::from(u8::from(k == z))).collect::<Vec<_>>();
            Posterior {
                log_z: 0.0,
                marginals: zs.iter().map(|z| onehot(*z)).collect(),
                pairwise: zs
                    .windows(2)
                    .map(|w| (0..s).map(|r| if r == w[0] { onehot(w[1]) } else { vec![0.0; s] }).collect())
                    .collect(),
            }
        })
        .collect();
    let mut factors = m_step(data, &hard, s, obs_sd, priors);
    let mut elbo_trace = Vec::new();
    loop {
        let posts = e_step(data, &factors, obs_sd)?;
        let elbo = posts.iter().map(|p| p.log_z).sum::<f64>() - kl_total(&factors, s, priors);
        let gain = elbo_trace.last().map(|prev| elbo - prev);
        elbo_trace.push(elbo);
        let done = elbo_trace.len() >= opts.max_iters.max(1) || gain.is_some_and(|g| g < opts.tol);
        if done {
            return Ok(VbemPosterior {
                initial_conc: factors.initial,
                transition_conc: factors.transition,
                mean_mean: factors.mean,
                mean_precision: factors.precision,
                obs_sd,
                marginals: posts.iter().map(|p| p.marginals.clone()).collect(),
                pairwise: posts.into_iter().map(|p| p.pairwise).collect(),
                elbo_trace,
            });
        }
        factors = m_step(data, &posts, s, obs_sd, priors);
    }
}

fn e_step(data: &Dataset, f: &Factors, obs_sd: f64) -> Result<Vec<Posterior>> {
    let log_init = expected_log_simplex(&f.initial);
    let log_trans: Vec<Vec<f64>> = f.transition.iter().map(|r| expected_log_simplex(r)).collect();
    let var = obs_sd * obs_sd;
    let penalty: Vec<f64> = f.precision.iter().map(|l| 2.0 / (2.0 * var * l)).collect();
    data.sequences
        .par_iter()
        .map(|seq| {
            let log_emit: Vec<Vec<f64>> = seq
                .displacements
                .iter()
                .map(|y| {
                    f.mean
                        .iter()
                        .zip(&penalty)
                        .map(|(m, pen)| gaussian_log_density(y, m, obs_sd) - pen)
                        .collect()
                })
                .collect();
            forward_backward(&log_init, &log_trans, &log_emit)
        })
        .collect()
}

fn m_step(data: &Dataset, posts: &[Posterior], s: usize, obs_sd: f64, priors: &VbemPriors) -> Factors {
    let a0 = priors.dirichlet_alpha;
    let mut initial = vec![a0; s];
    let mut transition = vec![vec![a0; s]; s];
    let mut weight = vec![0.0; s];
    let mut sum = vec![[0.0; 2]; s];
    for (seq, post) in data.sequences.iter().zip(posts) {
        if let Some(first) = post.marginals.first() {
            for k in 0..s {
                initial[k] += first[k];
            }
        }
        for xi in &post.pairwise {
            for r in 0..s {
                for c in 0..s {
                    transition[r][c] += xi[r][c];
                }
            }
        }
        for (y, g) in seq.displacements.iter().zip(&post.marginals) {
            for k in 0..s {
                weight[k] += g[k];
                sum[k][0] += g[k] * y[0];
                sum[k][1] += g[k] * y[1];
            }
        }
    }
    let var = obs_sd * obs_sd;
    let (m0, k0) = (priors.mean_prior_mean, priors.mean_prior_precision);
    let precision: Vec<f64> = weight.iter().map(|w| k0 + w / var).collect();
    let mean = (0..s)
        .map(|k| {
            [
                (k0 * m0 + sum[k][0] / var) / precision[k],
                (k0 * m0 + sum[k][1] / var) / precision[k],
            ]
        })
        .collect();
    Factors {
        initial,
        transition,
        mean,
        precision,
    }
}

fn kl_total(f: &Factors, s: usize, priors: &VbemPriors) -> f64 {
    let prior_row = vec![priors.dirichlet_alpha; s];
    let mut kl = kl_dirichlet(&f.initial, &prior_row);
    for row in &f.transition {
        kl += kl_dirichlet(row, &prior_row);
    }
    for (m, l) in f.mean.iter().zip(&f.precision) {
        for c in m {
            kl += kl_normal(*c, *l, priors.mean_prior_mean, priors.mean_prior_precision);
        }
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::dataset::Sequence;

    #[test]
    fn dirichlet_kl_vanishes_at_prior() {
        assert!(kl_dirichlet(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).abs() < 1e-12);
        assert!(kl_dirichlet(&[5.0, 1.0], &[1.0, 1.0]) > 0.0);
    }

    #[test]
    fn single_state_mean_is_precision_weighted() {
        let ys = [[0.3, -0.1], [0.5, 0.1], [0.1, 0.3]];
        let data = Dataset {
            sequences: vec![Sequence {
                displacements: ys.to_vec(),
                states: vec![0; 3],
            }],
        };
        let priors = VbemPriors {
            dirichlet_alpha: 1.0,
            mean_prior_mean: 0.2,
            mean_prior_precision: 4.0,
        };
        let opts = VbemOptions {
            max_iters: 5,
            tol: 1e-9,
            restarts: 1,
            seed: 0,
        };
        let post = vbem_fit(&data, 1, 0.5, &priors, &opts).unwrap();
        let data_prec = 3.0 / 0.25;
        for c in 0..2 {
            let ybar: f64 = ys.iter().map(|y| y[c]).sum::<f64>() / 3.0;
            let want = (4.0 * 0.2 + data_prec * ybar) / (4.0 + data_prec);
            assert!((post.mean_mean[0][c] - want).abs() < 1e-12);
        }
        assert!((post.mean_precision[0] - (4.0 + data_prec)).abs() < 1e-12);
    }
}
