//! Named unconstrained parameter vectors, links from distributions back to
//! them, and an adaptive-moment optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{DistDescriptor, Family};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// Generative model parameters; updated by ascent on the evidence.
    Theta,
    /// Proposal parameters; updated by descent on the inclusive KL.
    Phi,
}

/// One additive contribution to a distribution's unconstrained vector `u`.
#[derive(Clone, Debug, PartialEq)]
pub enum LinkTerm {
    /// `u[i] += entry[offset + i]`
    Direct { entry: Arc<str>, offset: usize },
    /// `u[i] += Σ_j entry[offset + i·F + j] · features[j]` with `F = features.len()`
    Linear {
        entry: Arc<str>,
        offset: usize,
        features: Arc<[f64]>,
    },
}

impl LinkTerm {
    fn entry(&self) -> &str {
        match self {
            LinkTerm::Direct { entry, .. } | LinkTerm::Linear { entry, .. } => entry,
        }
    }

    fn span(&self, len: usize) -> (usize, usize) {
        match self {
            LinkTerm::Direct { offset, .. } => (*offset, offset + len),
            LinkTerm::Linear {
                offset, features, ..
            } => (*offset, offset + len * features.len()),
        }
    }
}

/// How a distribution's unconstrained parameters are computed from the store.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLink {
    pub family: Family,
    pub len: usize,
    pub terms: Vec<LinkTerm>,
    /// Fixed offset added to the resolved vector; carries no gradient.
    pub shift: Option<Arc<[f64]>>,
}

impl ParamLink {
    pub fn direct(family: Family, entry: &str, offset: usize, len: usize) -> Self {
        ParamLink {
            family,
            len,
            terms: vec![LinkTerm::Direct {
                entry: Arc::from(entry),
                offset,
            }],
            shift: None,
        }
    }

    pub fn linear(family: Family, entry: &str, offset: usize, len: usize, features: &[f64]) -> Self {
        ParamLink {
            family,
            len,
            terms: vec![LinkTerm::Linear {
                entry: Arc::from(entry),
                offset,
                features: Arc::from(features),
            }],
            shift: None,
        }
    }

    pub fn plus(mut self, other: ParamLink) -> Self {
        debug_assert_eq!(self.len, other.len);
        self.terms.extend(other.terms);
        self.shift = match (self.shift.take(), other.shift) {
            (Some(a), Some(b)) => Some(a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()),
            (a, b) => a.or(b),
        };
        self
    }

    pub fn shifted(mut self, shift: Vec<f64>) -> Self {
        debug_assert_eq!(shift.len(), self.len);
        self.shift = Some(shift.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    pub role: ParamRole,
}

/// Gradient buffers keyed by entry name; merged into a store in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (k, g) in &other.0 {
            let dst = self.0.entry(k.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (d, s) in dst.iter_mut().zip(g) {
                *d += scale * s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0, |acc, x| acc + x * x)
            .sqrt()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>, role: ParamRole) {
        let grad = vec![0.0; values.len()];
        self.entries
            .insert(name.to_string(), ParamEntry { values, grad, role });
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.values)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Evaluates a link to the unconstrained vector it denotes.
    pub fn resolve(&self, link: &ParamLink) -> Result<Vec<f64>> {
        let mut u = match &link.shift {
            Some(c) if c.len() == link.len => c.to_vec(),
            Some(c) => return Err(Error::Shape(format!("shift of length {} for link of length {}", c.len(), link.len))),
            None => vec![0.0; link.len],
        };
        for term in &link.terms {
            let vals = self.values(term.entry())?;
            let (lo, hi) = term.span(link.len);
            if hi > vals.len() {
                return Err(Error::Shape(format!(
                    "link into {:?} needs [{lo}, {hi}) but entry has {}",
                    term.entry(),
                    vals.len()
                )));
            }
            match term {
                LinkTerm::Direct { .. } => {
                    for (ui, v) in u.iter_mut().zip(&vals[lo..hi]) {
                        *ui += v;
                    }
                }
                LinkTerm::Linear { features, .. } => {
                    let f = features.len();
                    for (i, ui) in u.iter_mut().enumerate() {
                        let row = &vals[lo + i * f..lo + (i + 1) * f];
                        *ui += row.iter().zip(features.iter()).map(|(w, x)| w * x).sum::<f64>();
                    }
                }
            }
        }
        Ok(u)
    }

    /// Builds the linked distribution from current parameter values.
    pub fn dist(&self, link: &ParamLink) -> Result<DistDescriptor> {
        DistDescriptor::from_unconstrained(link.family, &self.resolve(link)?)
    }

    /// Adds `scale · ∂u/∂entry ᵀ score` into `grads` for every term whose
    /// entry has role `role`.
    pub fn backprop(
        &self,
        link: &ParamLink,
        score: &[f64],
        scale: f64,
        role: ParamRole,
        grads: &mut Gradients,
    ) -> Result<()> {
        for term in &link.terms {
            let entry = self.get(term.entry())?;
            if entry.role != role {
                continue;
            }
            let dst = grads
                .0
                .entry(term.entry().to_string())
                .or_insert_with(|| vec![0.0; entry.values.len()]);
            let (lo, _) = term.span(link.len);
            match term {
                LinkTerm::Direct { .. } => {
                    for (i, s) in score.iter().enumerate() {
                        dst[lo + i] += scale * s;
                    }
                }
                LinkTerm::Linear { features, .. } => {
                    let f = features.len();
                    for (i, s) in score.iter().enumerate() {
                        for (j, x) in features.iter().enumerate() {
                            dst[lo + i * f + j] += scale * s * x;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds a gradient buffer into the entries' accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in &grads.0 {
            let e = self.get_mut(name)?;
            if e.grad.len() != g.len() {
                return Err(Error::Shape(format!("gradient length for {name:?}")));
            }
            for (a, b) in e.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in self.entries.values_mut() {
            e.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self, role: ParamRole) -> f64 {
        self.entries
            .values()
            .filter(|e| e.role == role)
            .flat_map(|e| e.grad.iter())
            .fold(0.0, |acc, g| acc + g * g)
            .sqrt()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("parameter serialization is infallible")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected adaptive-moment update.
///
/// Theta entries move along their accumulated gradient; Phi entries move
/// against it, since their accumulators hold the gradient of a quantity to be
/// minimized.
pub fn adam_step(store: &mut ParameterStore, opt: &mut OptimizerState) -> Result<()> {
    for (name, e) in store.iter() {
        if e.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    opt.step += 1;
    let c = opt.config;
    let t = opt.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    for (name, e) in store.iter_mut() {
        let mom = opt.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; e.values.len()],
            v: vec![0.0; e.values.len()],
        });
        if mom.m.len() != e.values.len() {
            return Err(Error::Shape(format!("optimizer moments for {name:?}")));
        }
        let sign = match e.role {
            ParamRole::Theta => 1.0,
            ParamRole::Phi => -1.0,
        };
        for i in 0..e.values.len() {
            let g = e.grad[i];
            mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
            mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = mom.m[i] / bc1;
            let vhat = mom.v[i] / bc2;
            let delta = sign * c.lr * mhat / (vhat.sqrt() + c.eps);
            if delta != 0.0 {
                e.values[i] += delta;
            }
        }
    }
    Ok(())
}
