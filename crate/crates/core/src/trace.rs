//! Addressed stochastic traces.
//!
//! A [`Trace`] is an insertion-ordered map from [`Address`] to [`RVRecord`].
//! It is backed by persistent collections so cloning is O(1); resampling a
//! population copies pointers rather than records.

use std::borrow::Borrow;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::dist::DistDescriptor;
use crate::error::{Error, Result};
use crate::model::EvalContext;
use crate::params::ParamLink;

/// Hierarchical name of a random variable, rendered as segments joined by `/`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address(Arc<str>);

impl Address {
    /// Parses a rendered address such as `"hmm/step:3/z"`.
    pub fn new(rendered: &str) -> Result<Self> {
        if rendered.is_empty() || rendered.split('/').any(str::is_empty) {
            return Err(Error::InvalidAddress(rendered.to_string()));
        }
        Ok(Address(Arc::from(rendered)))
    }

    pub fn from_segments<S: AsRef<str>>(segments: &[S]) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidAddress("no segments".into()));
        }
        for s in segments {
            check_segment(s.as_ref())?;
        }
        let joined = segments
            .iter()
            .map(|s| s.as_ref())
            .collect::<Vec<_>>()
            .join("/");
        Ok(Address(Arc::from(joined)))
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `segment/self`.
    pub fn prefixed(&self, segment: &str) -> Result<Address> {
        check_segment(segment)?;
        Ok(Address(Arc::from(format!("{segment}/{}", self.0))))
    }
}

pub(crate) fn check_segment(segment: &str) -> Result<()> {
    if segment.is_empty() || segment.contains('/') {
        return Err(Error::InvalidAddress(format!("bad segment {segment:?}")));
    }
    Ok(())
}

impl Borrow<str> for Address {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

/// Values flowing through models. Trace records hold only the first three
/// variants; `List` exists for combinator outputs such as `map`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Index(usize),
    Real(f64),
    Vector(Arc<[f64]>),
    List(Arc<[Value]>),
}

impl Value {
    pub fn vector(xs: Vec<f64>) -> Value {
        Value::Vector(xs.into())
    }

    pub fn list(xs: Vec<Value>) -> Value {
        Value::List(xs.into())
    }

    pub fn unit() -> Value {
        Value::List(Arc::from(Vec::new()))
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_index(&self) -> Option<usize> {
        match self {
            Value::Index(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Value::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Sampled,
    Observed,
    Replayed,
}

impl Role {
    pub fn is_latent(self) -> bool {
        !matches!(self, Role::Observed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RVRecord {
    pub address: Address,
    pub dist: DistDescriptor,
    pub value: Value,
    pub log_prob: f64,
    pub role: Role,
    /// Parameter entries the distribution was built from, if any.
    pub link: Option<Arc<ParamLink>>,
}

impl Serialize for RVRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("RVRecord", 5)?;
        st.serialize_field("address", &self.address)?;
        st.serialize_field("dist", &self.dist)?;
        st.serialize_field("value", &self.value)?;
        st.serialize_field("log_prob", &ExtReal(self.log_prob))?;
        st.serialize_field("role", &self.role)?;
        st.end()
    }
}

/// Extended real for JSON: finite numbers as numbers, infinities as strings.
pub struct ExtReal(pub f64);

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_str("nan")
        }
    }
}

#[derive(Clone, Default)]
pub struct Trace {
    records: im::Vector<Arc<RVRecord>>,
    // Address lookup table, built on first use. Traces that are only
    // extended and scored (particle histories) never pay for it.
    index: OnceLock<Arc<HashMap<Address, usize>>>,
}

// Below this size a linear scan beats building a map.
const SCAN_LIMIT: usize = 8;

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    fn from_records(records: im::Vector<Arc<RVRecord>>) -> Self {
        Trace {
            records,
            index: OnceLock::new(),
        }
    }

    fn index(&self) -> &HashMap<Address, usize> {
        self.index.get_or_init(|| {
            Arc::new(
                self.records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (r.address.clone(), i))
                    .collect(),
            )
        })
    }

    fn position(&self, address: &str) -> Option<usize> {
        if self.records.len() <= SCAN_LIMIT && self.index.get().is_none() {
            self.records.iter().position(|r| r.address.as_str() == address)
        } else {
            self.index().get(address).copied()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RVRecord> {
        self.records.iter().map(|r| &**r)
    }

    pub fn get(&self, address: &str) -> Option<&RVRecord> {
        self.position(address).map(|i| &*self.records[i])
    }

    pub fn contains(&self, address: &str) -> bool {
        self.position(address).is_some()
    }

    pub fn addresses(&self) -> impl Iterator<Item = &Address> {
        self.iter().map(|r| &r.address)
    }

    /// Appends a record.
    pub fn push(&mut self, record: RVRecord) -> Result<()> {
        if self.contains(record.address.as_str()) {
            return Err(Error::DuplicateAddress(record.address.to_string()));
        }
        if let Some(index) = self.index.get_mut() {
            Arc::make_mut(index).insert(record.address.clone(), self.records.len());
        }
        self.records.push_back(Arc::new(record));
        Ok(())
    }

    /// Sum of every record's log-density; 0 for an empty trace.
    pub fn log_joint(&self) -> f64 {
        self.iter().map(|r| r.log_prob).sum()
    }

    /// Sum over observed records.
    pub fn log_likelihood(&self) -> f64 {
        self.iter()
            .filter(|r| r.role == Role::Observed)
            .map(|r| r.log_prob)
            .sum()
    }

    /// Sum over sampled and replayed records.
    pub fn log_latent(&self) -> f64 {
        self.iter()
            .filter(|r| r.role.is_latent())
            .map(|r| r.log_prob)
            .sum()
    }

    /// Concatenates `a` then `b`; fails on the first shared address.
    pub fn merge(a: &Trace, b: &Trace) -> Result<Trace> {
        for r in b.records.iter() {
            if a.contains(r.address.as_str()) {
                return Err(Error::AddressCollision(r.address.to_string()));
            }
        }
        Ok(Trace::append_disjoint(a, b))
    }

    /// Concatenation without the collision check, for callers whose address
    /// layout already guarantees disjointness.
    pub(crate) fn append_disjoint(a: &Trace, b: &Trace) -> Trace {
        let mut records = a.records.clone();
        records.extend(b.records.iter().cloned());
        Trace::from_records(records)
    }

    /// Every address gains `segment` as its new head.
    ///
    /// Panics if `segment` is empty or contains `/`.
    pub fn prefix(&self, segment: &str) -> Trace {
        check_segment(segment).expect("prefix segment must be non-empty and slash-free");
        self.rename(segment)
    }

    /// Prefixes every address with a multi-segment path such as
    /// `"right/step:3"`; equivalent to nested [`Trace::prefix`] calls.
    pub fn prefix_path(&self, path: &str) -> Trace {
        for seg in path.split('/') {
            check_segment(seg).expect("prefix path segments must be non-empty");
        }
        self.rename(path)
    }

    fn rename(&self, path: &str) -> Trace {
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut rec = (**r).clone();
                let mut name = String::with_capacity(path.len() + 1 + r.address.0.len());
                name.push_str(path);
                name.push('/');
                name.push_str(&r.address.0);
                rec.address = Address(Arc::from(name));
                Arc::new(rec)
            })
            .collect();
        Trace::from_records(records)
    }

    /// Copy with the value at `address` replaced. The record's log-density is
    /// left stale; rescore the trace before using it.
    pub fn with_value(&self, address: &str, value: Value) -> Result<Trace> {
        let i = self
            .position(address)
            .ok_or_else(|| Error::InvalidAddress(format!("{address:?} is not in the trace")))?;
        let mut rec = (*self.records[i]).clone();
        rec.value = value;
        let mut out = self.clone();
        out.records.set(i, Arc::new(rec));
        Ok(out)
    }

    /// Same records with values and log-densities, restricted to one role.
    pub fn filter_role(&self, keep: impl Fn(Role) -> bool) -> Trace {
        Trace::from_records(self.records.iter().filter(|r| keep(r.role)).cloned().collect())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("trace serialization is infallible")
    }
}

impl fmt::Debug for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}

impl PartialEq for Trace {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.iter().zip(other.iter()).all(|(a, b)| a == b)
    }
}

impl Serialize for Trace {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

/// A value, the trace that produced it, and its log importance weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample {
    pub output: Value,
    pub trace: Trace,
    pub log_weight: f64,
    /// Trace of the proposal that generated `trace`, when produced by
    /// `importance`. Gradient estimators for proposal parameters read it.
    pub proposal: Option<Trace>,
}

impl WeightedSample {
    pub fn new(output: Value, trace: Trace, log_weight: f64) -> Self {
        debug_assert!(log_weight != f64::INFINITY, "log-weight must not be +inf");
        Self {
            output,
            trace,
            log_weight,
            proposal: None,
        }
    }
}

/// Records a latent draw at `addr`, replaying it when the context's
/// conditioning trace already holds the address.
pub fn sample_at(
    trace: &mut Trace,
    addr: &Address,
    dist: &DistDescriptor,
    ctx: &mut EvalContext<'_>,
) -> Result<Value> {
    sample_at_linked(trace, addr, dist, None, ctx)
}

pub fn sample_at_linked(
    trace: &mut Trace,
    addr: &Address,
    dist: &DistDescriptor,
    link: Option<ParamLink>,
    ctx: &mut EvalContext<'_>,
) -> Result<Value> {
    if trace.contains(addr.as_str()) {
        return Err(Error::DuplicateAddress(addr.to_string()));
    }
    let (value, role) = match ctx.lookup(addr) {
        Some(rec) => (rec.value.clone(), Role::Replayed),
        None => {
            if ctx.mode == crate::model::Mode::ScoreOnly {
                return Err(Error::MissingLatent(ctx.scoped_name(addr)));
            }
            (dist.sample(ctx.rng)?, Role::Sampled)
        }
    };
    let log_prob = dist.log_prob(&value)?;
    trace.push(RVRecord {
        address: addr.clone(),
        dist: dist.clone(),
        value: value.clone(),
        log_prob,
        role,
        link: link.map(Arc::new),
    })?;
    Ok(value)
}

/// Records an observed value and returns its log-density.
pub fn observe_at(
    trace: &mut Trace,
    addr: &Address,
    dist: &DistDescriptor,
    value: &Value,
) -> Result<f64> {
    observe_at_linked(trace, addr, dist, value, None)
}

pub fn observe_at_linked(
    trace: &mut Trace,
    addr: &Address,
    dist: &DistDescriptor,
    value: &Value,
    link: Option<ParamLink>,
) -> Result<f64> {
    if trace.contains(addr.as_str()) {
        return Err(Error::DuplicateAddress(addr.to_string()));
    }
    let log_prob = dist.log_prob(value)?;
    trace.push(RVRecord {
        address: addr.clone(),
        dist: dist.clone(),
        value: value.clone(),
        log_prob,
        role: Role::Observed,
        link: link.map(Arc::new),
    })?;
    Ok(log_prob)
}
