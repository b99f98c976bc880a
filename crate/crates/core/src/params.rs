//! Parameter vectors, bundles of task parameters around a central vector, and
//! the centrality radius that couples them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Above this length Gram entries are accumulated with compensated summation.
pub const COMPENSATED_DOT_THRESHOLD: usize = 100_000;

/// A dense, finite, fixed-length parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("parameter vector must have at least one entry"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(ParamVector(entries))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "parameter vector must have at least one entry");
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for the `len`/`is_empty` pairing clippy expects.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Builds a vector from already-validated entries (crate-internal fast path).
    pub(crate) fn from_raw(entries: Vec<f64>) -> Self {
        debug_assert!(!entries.is_empty());
        ParamVector(entries)
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        ParamVector::new(value)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(value: ParamVector) -> Self {
        value.0
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() > COMPENSATED_DOT_THRESHOLD {
        return compensated_dot(a, b);
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Neumaier summation of the elementwise products.
fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let term = x * y;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Task parameters `θ_1..θ_N` together with the central vector `θ_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBundle", into = "RawBundle")]
pub struct ParamBundle {
    tasks: Vec<ParamVector>,
    central: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct RawBundle {
    tasks: Vec<ParamVector>,
    central: ParamVector,
}

impl TryFrom<RawBundle> for ParamBundle {
    type Error = Error;

    fn try_from(raw: RawBundle) -> Result<Self> {
        ParamBundle::new(raw.tasks, raw.central)
    }
}

impl From<ParamBundle> for RawBundle {
    fn from(b: ParamBundle) -> Self {
        RawBundle {
            tasks: b.tasks,
            central: b.central,
        }
    }
}

impl ParamBundle {
    pub fn new(tasks: Vec<ParamVector>, central: ParamVector) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::invalid("a bundle needs at least one task vector"));
        }
        for t in &tasks {
            if t.len() != central.len() {
                return Err(Error::DimensionMismatch {
                    context: "task vector vs central vector",
                    expected: central.len(),
                    found: t.len(),
                });
            }
        }
        Ok(ParamBundle { tasks, central })
    }

    /// Convenience constructor from plain slices.
    pub fn from_slices(tasks: &[&[f64]], central: &[f64]) -> Result<Self> {
        let tasks = tasks
            .iter()
            .map(|t| ParamVector::new(t.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        ParamBundle::new(tasks, ParamVector::new(central.to_vec())?)
    }

    /// Every task vector and the central vector set to `init`.
    pub fn replicated(init: &ParamVector, tasks: usize) -> Result<Self> {
        ParamBundle::new(vec![init.clone(); tasks], init.clone())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.central.len()
    }

    pub fn tasks(&self) -> &[ParamVector] {
        &self.tasks
    }

    pub fn task(&self, i: usize) -> &ParamVector {
        &self.tasks[i]
    }

    pub fn central(&self) -> &ParamVector {
        &self.central
    }

    pub fn into_parts(self) -> (Vec<ParamVector>, ParamVector) {
        (self.tasks, self.central)
    }

    /// Vector at Gram index `k`: 0 is the central vector, `k ≥ 1` is task `k − 1`.
    pub fn gram_vector(&self, k: usize) -> &ParamVector {
        if k == 0 {
            &self.central
        } else {
            &self.tasks[k - 1]
        }
    }

    /// `max_i ‖θ_i − θ_g‖`.
    pub fn max_deviation(&self) -> f64 {
        self.tasks
            .iter()
            .map(|t| t.distance(&self.central))
            .fold(0.0, f64::max)
    }

    /// `Σ_i ‖θ_i − θ̄_i‖² + ‖θ_g − θ̄_g‖²`, the projection objective against `reference`.
    pub fn squared_distance(&self, reference: &ParamBundle) -> Result<f64> {
        check_same_shape(self, reference)?;
        let mut total = 0.0;
        for k in 0..=self.num_tasks() {
            let d = self.gram_vector(k).distance(reference.gram_vector(k));
            total += d * d;
        }
        Ok(total)
    }
}

pub(crate) fn check_same_shape(a: &ParamBundle, b: &ParamBundle) -> Result<()> {
    if a.num_tasks() != b.num_tasks() {
        return Err(Error::DimensionMismatch {
            context: "number of tasks",
            expected: a.num_tasks(),
            found: b.num_tasks(),
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "parameter dimension",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// Centrality radius ε. `Infinite` disables the constraint (agnostic training).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Centrality {
    Finite(f64),
    Infinite,
}

impl Centrality {
    pub fn finite(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!(
                "centrality radius must be finite and nonnegative, got {epsilon}"
            )));
        }
        Ok(Centrality::Finite(epsilon))
    }

    pub const CONSENSUS: Centrality = Centrality::Finite(0.0);

    pub fn is_consensus(&self) -> bool {
        matches!(self, Centrality::Finite(e) if *e == 0.0)
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Centrality::Infinite)
    }

    pub fn as_finite(&self) -> Option<f64> {
        match self {
            Centrality::Finite(e) => Some(*e),
            Centrality::Infinite => None,
        }
    }

    /// Value as `f64`, with `Infinite` mapped to `f64::INFINITY`.
    pub fn value(&self) -> f64 {
        self.as_finite().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Centrality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Centrality::Finite(e) => write!(f, "{e}"),
            Centrality::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Centrality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Ok(Centrality::Infinite),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::invalid(format!("cannot parse centrality radius {s:?}")))?;
                if v == f64::INFINITY {
                    Ok(Centrality::Infinite)
                } else {
                    Centrality::finite(v)
                }
            }
        }
    }
}

impl Serialize for Centrality {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Centrality::Finite(e) => serializer.serialize_f64(*e),
            Centrality::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Centrality {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let parsed = match Repr::deserialize(deserializer)? {
            Repr::Num(v) if v == f64::INFINITY => Ok(Centrality::Infinite),
            Repr::Num(v) => Centrality::finite(v),
            Repr::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// `max_i ‖θ_i − θ_g‖ − ε`; negative when strictly feasible, `-inf` for ε = ∞.
    pub worst_violation: f64,
}

pub fn feasibility(bundle: &ParamBundle, centrality: Centrality) -> Feasibility {
    match centrality {
        Centrality::Infinite => Feasibility {
            feasible: true,
            worst_violation: f64::NEG_INFINITY,
        },
        Centrality::Finite(eps) => {
            let worst = bundle.max_deviation() - eps;
            Feasibility {
                feasible: worst <= 0.0,
                worst_violation: worst,
            }
        }
    }
}

/// Symmetric `(N+1)×(N+1)` table of inner products among the central vector
/// (index 0) and the task vectors (indices `1..=N`).
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let order = rows.len();
        if order < 2 {
            return Err(Error::invalid("a Gram matrix covers the central vector and at least one task"));
        }
        let mut entries = Vec::with_capacity(order * order);
        for row in rows {
            if row.len() != order {
                return Err(Error::DimensionMismatch {
                    context: "Gram matrix row",
                    expected: order,
                    found: row.len(),
                });
            }
            entries.extend(row);
        }
        Ok(GramMatrix { order, entries })
    }

    /// `N + 1`.
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_tasks(&self) -> usize {
        self.order - 1
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.order..(i + 1) * self.order]
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.order).map(|i| self.get(i, i)).fold(0.0, f64::max)
    }
}

pub fn pairwise_gram(bundle: &ParamBundle) -> GramMatrix {
    let order = bundle.num_tasks() + 1;
    let mut entries = vec![0.0; order * order];
    for i in 0..order {
        for j in i..order {
            let v = bundle.gram_vector(i).dot(bundle.gram_vector(j));
            entries[i * order + j] = v;
            entries[j * order + i] = v;
        }
    }
    GramMatrix { order, entries }
}
