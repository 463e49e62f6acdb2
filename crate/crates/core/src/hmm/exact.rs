//! Log-space forward–backward for discrete-state HMMs, plus brute-force
//! path enumeration for small instances.

use crate::error::{Error, Result};
use crate::hmm::HmmParams;
use crate::util::logsumexp;

/// Exact posterior quantities for one observation sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub log_z: f64,
    /// `marginals[t][s] = P(z_t = s | y)`.
    pub marginals: Vec<Vec<f64>>,
    /// `pairwise[t][r][s] = P(z_t = r, z_{t+1} = s | y)`, `T − 1` entries.
    pub pairwise: Vec<Vec<Vec<f64>>>,
}

/// Forward–backward over arbitrary non-negative (log-space) weights.
/// Sub-normalized rows are allowed; `log_z` is then the log of the summed
/// path weights.
pub fn forward_backward(
    log_init: &[f64],
    log_trans: &[Vec<f64>],
    log_emit: &[Vec<f64>],
) -> Result<Posterior> {
    let s = log_init.len();
    let t_len = log_emit.len();
    if t_len == 0 {
        return Ok(Posterior {
            log_z: 0.0,
            marginals: Vec::new(),
            pairwise: Vec::new(),
        });
    }
    let alpha = forward_messages(log_init, log_trans, log_emit);
    let log_z = logsumexp(&alpha[t_len - 1]);
    if log_z == f64::NEG_INFINITY || !log_z.is_finite() {
        return Err(Error::NumericalUnderflow(format!(
            "forward normalizer is {log_z}"
        )));
    }
    let mut beta = vec![vec![0.0; s]; t_len];
    let mut buf = vec![0.0; s];
    for t in (0..t_len - 1).rev() {
        for r in 0..s {
            for c in 0..s {
                buf[c] = log_trans[r][c] + log_emit[t + 1][c] + beta[t + 1][c];
            }
            beta[t][r] = logsumexp(&buf);
        }
    }
    let marginals = (0..t_len)
        .map(|t| (0..s).map(|k| (alpha[t][k] + beta[t][k] - log_z).exp()).collect())
        .collect();
    let pairwise = (0..t_len.saturating_sub(1))
        .map(|t| {
            (0..s)
                .map(|r| {
                    (0..s)
                        .map(|c| {
                            (alpha[t][r] + log_trans[r][c] + log_emit[t + 1][c]
                                + beta[t + 1][c]
                                - log_z)
                                .exp()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(Posterior {
        log_z,
        marginals,
        pairwise,
    })
}

fn forward_messages(log_init: &[f64], log_trans: &[Vec<f64>], log_emit: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = log_init.len();
    let mut alpha = Vec::with_capacity(log_emit.len());
    alpha.push((0..s).map(|k| log_init[k] + log_emit[0][k]).collect::<Vec<_>>());
    let mut buf = vec![0.0; s];
    for e in &log_emit[1..] {
        let prev = alpha.last().expect("non-empty");
        let next = (0..s)
            .map(|c| {
                for r in 0..s {
                    buf[r] = prev[r] + log_trans[r][c];
                }
                logsumexp(&buf) + e[c]
            })
            .collect();
        alpha.push(next);
    }
    alpha
}

fn log_params(params: &HmmParams) -> (Vec<f64>, Vec<Vec<f64>>) {
    let li = params.initial.iter().map(|p| p.ln()).collect();
    let lt = params
        .transition
        .iter()
        .map(|r| r.iter().map(|p| p.ln()).collect())
        .collect();
    (li, lt)
}

/// Exact log-evidence and posteriors of a Gaussian HMM.
pub fn exact_hmm(params: &HmmParams, obs: &[[f64; 2]]) -> Result<Posterior> {
    params.validate()?;
    let (li, lt) = log_params(params);
    forward_backward(&li, &lt, &params.log_emissions(obs))
}

/// `log Σ_paths p(z, y)` by enumerating all `S^T` state paths.
pub fn brute_force_log_z(params: &HmmParams, obs: &[[f64; 2]]) -> f64 {
    let (li, lt) = log_params(params);
    let le = params.log_emissions(obs);
    let s = params.states();
    let t_len = obs.len();
    if t_len == 0 {
        return 0.0;
    }
    let total = s.pow(t_len as u32);
    let mut terms = Vec::with_capacity(total);
    let mut path = vec![0usize; t_len];
    for mut code in 0..total {
        for z in path.iter_mut() {
            *z = code % s;
            code /= s;
        }
        let mut lp = li[path[0]] + le[0][path[0]];
        for t in 1..t_len {
            lp += lt[path[t - 1]][path[t]] + le[t][path[t]];
        }
        terms.push(lp);
    }
    logsumexp(&terms)
}

/// Most probable state per step under the exact marginals.
pub fn marginal_decode(post: &Posterior) -> Vec<usize> {
    post.marginals
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
                .0
        })
        .collect()
}
