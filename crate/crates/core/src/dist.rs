//! Distribution families: sampling, log-densities, and score gradients with
//! respect to unconstrained parameters.
//!
//! | family        | constrained params | unconstrained vector            |
//! |---------------|--------------------|---------------------------------|
//! | `NormalDiag`  | mean, scale > 0    | `(mean, log scale)`             |
//! | `Categorical` | probs on simplex   | logits, last logit pinned to 0  |
//! | `Dirichlet`   | alpha > 0          | `log alpha`                     |

use std::sync::Arc;

use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::trace::Value;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const SIMPLEX_TOL: f64 = 1e-12;
/// Looser tolerance for simplex-valued observations (normalized gamma draws,
/// values read back from files).
const SIMPLEX_VALUE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    NormalDiag,
    Categorical,
    Dirichlet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum DistDescriptor {
    NormalDiag { mean: Arc<[f64]>, scale: Arc<[f64]> },
    Categorical { probs: Arc<[f64]> },
    Dirichlet { alpha: Arc<[f64]> },
}

impl DistDescriptor {
    pub fn normal_diag(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        let d = DistDescriptor::NormalDiag {
            mean: mean.into(),
            scale: scale.into(),
        };
        d.validate()?;
        Ok(d)
    }

    /// One-dimensional normal.
    pub fn normal(mean: f64, scale: f64) -> Result<Self> {
        Self::normal_diag(vec![mean], vec![scale])
    }

    pub fn categorical(probs: Vec<f64>) -> Result<Self> {
        let d = DistDescriptor::Categorical { probs: probs.into() };
        d.validate()?;
        Ok(d)
    }

    pub fn dirichlet(alpha: Vec<f64>) -> Result<Self> {
        let d = DistDescriptor::Dirichlet { alpha: alpha.into() };
        d.validate()?;
        Ok(d)
    }

    pub fn family(&self) -> Family {
        match self {
            DistDescriptor::NormalDiag { .. } => Family::NormalDiag,
            DistDescriptor::Categorical { .. } => Family::Categorical,
            DistDescriptor::Dirichlet { .. } => Family::Dirichlet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistDescriptor::NormalDiag { mean, scale } => {
                if mean.is_empty() || mean.len() != scale.len() {
                    return Err(Error::InvalidParams(format!(
                        "normal_diag needs equal non-empty mean/scale, got {} and {}",
                        mean.len(),
                        scale.len()
                    )));
                }
                if mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::InvalidParams("normal_diag mean not finite".into()));
                }
                if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::InvalidParams("normal_diag scale must be > 0".into()));
                }
            }
            DistDescriptor::Categorical { probs } => {
                if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::InvalidParams(
                        "categorical probabilities must be finite and >= 0".into(),
                    ));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::InvalidParams(format!(
                        "categorical probabilities sum to {total}"
                    )));
                }
            }
            DistDescriptor::Dirichlet { alpha } => {
                if alpha.len() < 2 || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                    return Err(Error::InvalidParams(
                        "dirichlet needs >= 2 concentrations, all > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<Value> {
        self.validate()?;
        Ok(match self {
            DistDescriptor::NormalDiag { mean, scale } => {
                let xs: Vec<f64> = mean
                    .iter()
                    .zip(scale.iter())
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng.rng());
                        m + s * z
                    })
                    .collect();
                if xs.len() == 1 {
                    Value::Real(xs[0])
                } else {
                    Value::vector(xs)
                }
            }
            DistDescriptor::Categorical { probs } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = None;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = Some(i);
                        break;
                    }
                }
                // Rounding can leave u above the final partial sum.
                let idx = pick.unwrap_or_else(|| {
                    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
                });
                Value::Index(idx)
            }
            DistDescriptor::Dirichlet { alpha } => {
                loop {
                    let mut xs = Vec::with_capacity(alpha.len());
                    for &a in alpha.iter() {
                        let g = Gamma::new(a, 1.0)
                            .map_err(|e| Error::InvalidParams(e.to_string()))?;
                        xs.push(g.sample(rng.rng()));
                    }
                    let total: f64 = xs.iter().sum();
                    if total > 0.0 && xs.iter().all(|&x| x > 0.0) {
                        xs.iter_mut().for_each(|x| *x /= total);
                        break Value::vector(xs);
                    }
                }
            }
        })
    }

    /// Exact log-density; `−∞` off the support.
    pub fn log_prob(&self, value: &Value) -> Result<f64> {
        self.validate()?;
        match self {
            DistDescriptor::NormalDiag { mean, scale } => {
                let xs = real_components(value, mean.len())?;
                let mut lp = 0.0;
                for ((x, m), s) in xs.iter().zip(mean.iter()).zip(scale.iter()) {
                    let z = (x - m) / s;
                    lp += -HALF_LN_2PI - s.ln() - 0.5 * z * z;
                }
                Ok(lp)
            }
            DistDescriptor::Categorical { probs } => {
                let i = index_component(value)?;
                Ok(match probs.get(i) {
                    Some(&p) => p.ln(),
                    None => f64::NEG_INFINITY,
                })
            }
            DistDescriptor::Dirichlet { alpha } => {
                let xs = real_components(value, alpha.len())?;
                let total: f64 = xs.iter().sum();
                if xs.iter().any(|&x| x <= 0.0) || (total - 1.0).abs() > SIMPLEX_VALUE_TOL {
                    return Ok(f64::NEG_INFINITY);
                }
                let a0: f64 = alpha.iter().sum();
                let mut lp = ln_gamma(a0);
                for (x, a) in xs.iter().zip(alpha.iter()) {
                    lp += (a - 1.0) * x.ln() - ln_gamma(*a);
                }
                Ok(lp)
            }
        }
    }

    /// Gradient of `log_prob(value)` with respect to [`Self::unconstrained`].
    pub fn score_grad(&self, value: &Value) -> Result<Vec<f64>> {
        let lp = self.log_prob(value)?;
        if lp == f64::NEG_INFINITY {
            return Err(Error::OffSupport(format!("{:?}", self.family())));
        }
        Ok(match self {
            DistDescriptor::NormalDiag { mean, scale } => {
                let xs = real_components(value, mean.len())?;
                let d = mean.len();
                let mut g = vec![0.0; 2 * d];
                for i in 0..d {
                    let r = xs[i] - mean[i];
                    let var = scale[i] * scale[i];
                    g[i] = r / var;
                    g[d + i] = r * r / var - 1.0;
                }
                g
            }
            DistDescriptor::Categorical { probs } => {
                let k = index_component(value)?;
                let free = probs.len() - 1;
                (0..free)
                    .map(|j| if j == k { 1.0 } else { 0.0 } - probs[j])
                    .collect()
            }
            DistDescriptor::Dirichlet { alpha } => {
                let xs = real_components(value, alpha.len())?;
                let psi0 = digamma(alpha.iter().sum());
                alpha
                    .iter()
                    .zip(&xs)
                    .map(|(a, x)| a * (psi0 - digamma(*a) + x.ln()))
                    .collect()
            }
        })
    }

    pub fn unconstrained(&self) -> Vec<f64> {
        match self {
            DistDescriptor::NormalDiag { mean, scale } => mean
                .iter()
                .copied()
                .chain(scale.iter().map(|s| s.ln()))
                .collect(),
            DistDescriptor::Categorical { probs } => {
                let last = probs[probs.len() - 1].ln();
                probs[..probs.len() - 1]
                    .iter()
                    .map(|p| p.ln() - last)
                    .collect()
            }
            DistDescriptor::Dirichlet { alpha } => alpha.iter().map(|a| a.ln()).collect(),
        }
    }

    /// Inverse of [`Self::unconstrained`]. Dimensions are implied by `u.len()`.
    pub fn from_unconstrained(family: Family, u: &[f64]) -> Result<Self> {
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite unconstrained parameter".into()));
        }
        let d = match family {
            Family::NormalDiag => {
                if u.is_empty() || u.len() % 2 != 0 {
                    return Err(Error::InvalidParams(format!(
                        "normal_diag needs an even-length vector, got {}",
                        u.len()
                    )));
                }
                let d = u.len() / 2;
                DistDescriptor::NormalDiag {
                    mean: u[..d].into(),
                    scale: u[d..].iter().map(|x| x.exp()).collect(),
                }
            }
            Family::Categorical => DistDescriptor::Categorical {
                probs: softmax_pinned(u).into(),
            },
            Family::Dirichlet => DistDescriptor::Dirichlet {
                alpha: u.iter().map(|x| x.exp()).collect(),
            },
        };
        d.validate()?;
        Ok(d)
    }

    pub fn unconstrained_len(&self) -> usize {
        match self {
            DistDescriptor::NormalDiag { mean, .. } => 2 * mean.len(),
            DistDescriptor::Categorical { probs } => probs.len() - 1,
            DistDescriptor::Dirichlet { alpha } => alpha.len(),
        }
    }
}

/// Softmax over `(logits, 0)`.
pub fn softmax_pinned(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(0.0_f64, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|l| (l - max).exp())
        .chain(std::iter::once((-max).exp()))
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

fn real_components(value: &Value, dim: usize) -> Result<Vec<f64>> {
    let xs: Vec<f64> = match value {
        Value::Real(x) => vec![*x],
        Value::Vector(v) => v.to_vec(),
        other => {
            return Err(Error::InvalidValue(format!(
                "expected a real or vector, got {other:?}"
            )))
        }
    };
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidValue("NaN".into()));
    }
    if xs.len() != dim {
        return Err(Error::InvalidValue(format!(
            "expected dimension {dim}, got {}",
            xs.len()
        )));
    }
    Ok(xs)
}

fn index_component(value: &Value) -> Result<usize> {
    match value {
        Value::Index(i) => Ok(*i),
        Value::Real(x) if x.is_nan() => Err(Error::InvalidValue("NaN".into())),
        other => Err(Error::InvalidValue(format!(
            "expected an index, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn degenerate_categorical_always_picks_its_atom() {
        let d = DistDescriptor::categorical(vec![1.0, 0.0]).unwrap();
        let mut rng = RngStream::new(1);
        for _ in 0..1000 {
            assert_eq!(d.sample(&mut rng).unwrap(), Value::Index(0));
        }
    }

    #[test]
    fn zero_scale_is_rejected() {
        assert!(matches!(
            DistDescriptor::normal(0.0, 0.0),
            Err(Error::InvalidParams(_))
        ));
        let raw = DistDescriptor::NormalDiag {
            mean: vec![0.0].into(),
            scale: vec![0.0].into(),
        };
        assert!(matches!(
            raw.sample(&mut RngStream::new(0)),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn reference_densities() {
        let n = DistDescriptor::normal(0.0, 1.0).unwrap();
        assert!(close(n.log_prob(&Value::Real(0.0)).unwrap(), -0.918_938_53, 1e-8));
        let dir = DistDescriptor::dirichlet(vec![1.0, 1.0]).unwrap();
        assert!(close(dir.log_prob(&Value::vector(vec![0.3, 0.7])).unwrap(), 0.0, 1e-12));
        let c = DistDescriptor::categorical(vec![0.2, 0.8]).unwrap();
        assert_eq!(c.log_prob(&Value::Index(2)).unwrap(), f64::NEG_INFINITY);
        let half = DistDescriptor::categorical(vec![0.5, 0.5]).unwrap();
        assert!(close(half.log_prob(&Value::Index(0)).unwrap(), -0.693_147_2, 1e-7));
    }

    #[test]
    fn nan_is_invalid() {
        let n = DistDescriptor::normal(0.0, 1.0).unwrap();
        assert!(matches!(
            n.log_prob(&Value::Real(f64::NAN)),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn textbook_scores() {
        let n = DistDescriptor::normal(0.0, 1.0).unwrap();
        let g = n.score_grad(&Value::Real(1.0)).unwrap();
        assert!(close(g[0], 1.0, 1e-15));
        let c = DistDescriptor::from_unconstrained(Family::Categorical, &[0.0]).unwrap();
        let g = c.score_grad(&Value::Index(0)).unwrap();
        assert_eq!(g.len(), 1);
        assert!(close(g[0], 0.5, 1e-15));
    }

    #[test]
    fn off_support_score_is_an_error() {
        let c = DistDescriptor::categorical(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            c.score_grad(&Value::Index(1)),
            Err(Error::OffSupport(_))
        ));
    }

    #[test]
    fn categorical_normalizes() {
        let c = DistDescriptor::categorical(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let total: f64 = (0..4)
            .map(|i| c.log_prob(&Value::Index(i)).unwrap().exp())
            .sum();
        assert!(close(total, 1.0, 1e-12));
    }

    #[test]
    fn normal_integrates_to_one() {
        // Composite Simpson over mean ± 10 sd.
        let (m, s) = (0.3, 1.7);
        let d = DistDescriptor::normal(m, s).unwrap();
        let n = 20_000;
        let (a, b) = (m - 10.0 * s, m + 10.0 * s);
        let h = (b - a) / n as f64;
        let f = |x: f64| d.log_prob(&Value::Real(x)).unwrap().exp();
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        assert!(close(acc * h / 3.0, 1.0, 1e-6));
    }

    #[test]
    fn json_form() {
        let d = DistDescriptor::categorical(vec![0.5, 0.5]).unwrap();
        let j = serde_json::to_string(&d).unwrap();
        assert_eq!(j, r#"{"name":"categorical","params":{"probs":[0.5,0.5]}}"#);
        let back: DistDescriptor = serde_json::from_str(&j).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn unconstrained_round_trip() {
        let cases = [
            DistDescriptor::normal_diag(vec![0.5, -2.0], vec![0.1, 3.0]).unwrap(),
            DistDescriptor::categorical(vec![0.1, 0.6, 0.3]).unwrap(),
            DistDescriptor::dirichlet(vec![0.5, 2.0, 7.0]).unwrap(),
        ];
        for d in cases {
            let u = d.unconstrained();
            assert_eq!(u.len(), d.unconstrained_len());
            let back = DistDescriptor::from_unconstrained(d.family(), &u).unwrap();
            let (a, b) = (flat(&d), flat(&back));
            for (x, y) in a.iter().zip(&b) {
                assert!(close(*x, *y, 1e-12), "{d:?} vs {back:?}");
            }
        }
    }

    fn flat(d: &DistDescriptor) -> Vec<f64> {
        match d {
            DistDescriptor::NormalDiag { mean, scale } => mean.iter().chain(scale.iter()).copied().collect(),
            DistDescriptor::Categorical { probs } => probs.to_vec(),
            DistDescriptor::Dirichlet { alpha } => alpha.to_vec(),
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / scale.max(1e-8)
    }

    fn central_difference(d: &DistDescriptor, v: &Value, h: f64) -> Vec<f64> {
        let u = d.unconstrained();
        (0..u.len())
            .map(|i| {
                let at = |delta: f64| {
                    let mut w = u.clone();
                    w[i] += delta;
                    DistDescriptor::from_unconstrained(d.family(), &w)
                        .unwrap()
                        .log_prob(v)
                        .unwrap()
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn scores_match_finite_differences_on_a_grid() {
        let mut checked = 0;
        for m in [-1.5, 0.0, 2.0] {
            for s in [0.3, 1.0, 2.5] {
                for x in [-2.0, 0.1, 1.7] {
                    let d = DistDescriptor::normal_diag(vec![m, -m], vec![s, 1.0 / s]).unwrap();
                    let v = Value::vector(vec![x, 0.5 * x]);
                    let g = d.score_grad(&v).unwrap();
                    assert!(rel_err(&g, &central_difference(&d, &v, 1e-5)) <= 1e-6, "{d:?} at {x}");
                    checked += 1;
                }
            }
        }
        for probs in [vec![0.5, 0.5], vec![0.1, 0.6, 0.3], vec![0.05, 0.15, 0.3, 0.5]] {
            let d = DistDescriptor::categorical(probs.clone()).unwrap();
            for k in 0..probs.len() {
                let v = Value::Index(k);
                let g = d.score_grad(&v).unwrap();
                assert!(rel_err(&g, &central_difference(&d, &v, 1e-5)) <= 1e-6);
                checked += 1;
            }
        }
        for alpha in [vec![0.5, 0.5], vec![1.0, 2.0, 3.0], vec![4.0, 0.7, 1.3, 9.0]] {
            let d = DistDescriptor::dirichlet(alpha.clone()).unwrap();
            let n = alpha.len() as f64;
            for tilt in [0.0, 0.3, 0.6] {
                let raw: Vec<f64> = (0..alpha.len()).map(|i| 1.0 + tilt * i as f64).collect();
                let total: f64 = raw.iter().sum();
                let v = Value::vector(raw.iter().map(|r| r / total).collect());
                let g = d.score_grad(&v).unwrap();
                assert!(rel_err(&g, &central_difference(&d, &v, 1e-5)) <= 1e-6, "{d:?} {n}");
                checked += 1;
            }
        }
        assert_eq!(checked, 27 + 9 + 9);
    }

    #[test]
    fn scores_have_zero_mean() {
        let cases = [
            DistDescriptor::normal_diag(vec![0.4, -1.0], vec![0.5, 2.0]).unwrap(),
            DistDescriptor::categorical(vec![0.2, 0.3, 0.5]).unwrap(),
            DistDescriptor::dirichlet(vec![1.5, 2.0, 4.0]).unwrap(),
        ];
        let n = 100_000;
        for d in cases {
            let mut rng = RngStream::new(99);
            let draws: Vec<Vec<f64>> = (0..n)
                .map(|_| d.score_grad(&d.sample(&mut rng).unwrap()).unwrap())
                .collect();
            for j in 0..d.unconstrained_len() {
                let xs: Vec<f64> = draws.iter().map(|g| g[j]).collect();
                let mean = xs.iter().sum::<f64>() / n as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                let se = (var / n as f64).sqrt();
                assert!(mean.abs() <= 4.0 * se, "{d:?} component {j}: {mean} ± {se}");
            }
        }
    }

    #[test]
    fn categorical_frequencies_match_probabilities() {
        let probs = [0.1, 0.25, 0.65];
        let d = DistDescriptor::categorical(probs.to_vec()).unwrap();
        let mut rng = RngStream::new(3);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[d.sample(&mut rng).unwrap().as_index().unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 * se);
        }
    }

}
