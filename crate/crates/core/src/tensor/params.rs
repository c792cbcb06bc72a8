use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which level of the bi-level program owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    /// Backbone (feature extractor).
    Theta,
    /// Prediction head, including the modulation step.
    Phi,
    /// Domain prompt encoder.
    Omega,
}

impl Partition {
    pub const MODEL: [Partition; 2] = [Partition::Theta, Partition::Phi];
    pub const ALL: [Partition; 3] = [Partition::Theta, Partition::Phi, Partition::Omega];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Theta => "theta",
            Partition::Phi => "phi",
            Partition::Omega => "omega",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    partition: Partition,
    tensor: Tensor<T>,
}

/// Named parameter tensors, each tagged with one [`Partition`].
///
/// Names are unique across partitions, so partitions are disjoint by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, partition: Partition, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Entry { partition, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn partition_of(&self, name: &str) -> Option<Partition> {
        self.entries.get(name).map(|e| e.partition)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(name, partition, tensor)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Partition, &Tensor<T>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.partition, &e.tensor))
    }

    /// Total scalar count over the selected partitions.
    pub fn numel(&self, partitions: &[Partition]) -> usize {
        self.iter()
            .filter(|(_, p, _)| partitions.contains(p))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Subset holding only the selected partitions.
    pub fn select(&self, partitions: &[Partition]) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| partitions.contains(&e.partition))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    /// Union of two disjoint sets.
    pub fn merged(&self, other: &ParamSet<T>) -> Result<ParamSet<T>> {
        let mut out = self.clone();
        for (k, e) in &other.entries {
            out.insert(k.clone(), e.partition, e.tensor.clone())?;
        }
        Ok(out)
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape<T>) -> ParamVars<'t, T> {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), tape.param(k, e.partition, e.tensor.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            partition: e.partition,
                            tensor: e.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// `self + alpha * direction` for every parameter present in `direction`.
    pub fn offset(&self, direction: &Gradients<T>, alpha: f64) -> Result<ParamSet<T>> {
        let mut out = self.clone();
        out.add_scaled(direction, alpha)?;
        Ok(out)
    }

    /// In-place `self += alpha * direction`.
    pub fn add_scaled(&mut self, direction: &Gradients<T>, alpha: f64) -> Result<()> {
        for (name, _, g) in direction.iter() {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
            e.tensor.add_scaled(g, alpha)?;
        }
        Ok(())
    }

    /// Flat primal values in name order (selected partitions only).
    pub fn flatten(&self, partitions: &[Partition]) -> Vec<f64> {
        self.iter()
            .filter(|(_, p, _)| partitions.contains(p))
            .flat_map(|(_, _, t)| t.to_f64_vec())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.all_finite())
    }
}

/// Gradient tensors keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Gradients {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn insert(&mut self, name: impl Into<String>, partition: Partition, tensor: Tensor<T>) {
        self.entries.insert(name.into(), Entry { partition, tensor });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Partition, &Tensor<T>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.partition, &e.tensor))
    }

    pub fn select(&self, partitions: &[Partition]) -> Gradients<T> {
        Gradients {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| partitions.contains(&e.partition))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Gradients<T> {
        let a = T::from_f64(alpha);
        Gradients {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            partition: e.partition,
                            tensor: e.tensor.map(|v| v * a),
                        },
                    )
                })
                .collect(),
        }
    }

    /// `self + alpha * other`; both must hold the same names.
    pub fn add_scaled(&self, other: &Gradients<T>, alpha: f64) -> Result<Gradients<T>> {
        let mut out = self.clone();
        if self.entries.len() != other.entries.len() {
            return Err(Error::contract("gradient sets hold different parameters"));
        }
        for (k, e) in out.entries.iter_mut() {
            let o = other
                .get(k)
                .ok_or_else(|| Error::contract(format!("missing gradient for {k}")))?;
            e.tensor.add_scaled(o, alpha)?;
        }
        Ok(out)
    }

    pub fn norm_l2(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.tensor.norm_l2().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Flat primal values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|e| e.tensor.to_f64_vec())
            .collect()
    }

    /// Flat tangent values in name order.
    pub fn flatten_tangents(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|e| e.tensor.tangents())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Gradients<U> {
        Gradients {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            partition: e.partition,
                            tensor: e.tensor.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Builds a gradient set from per-name tensors.
    pub fn from_fn(
        names: impl IntoIterator<Item = (String, Partition, Tensor<T>)>,
    ) -> Gradients<T> {
        Gradients {
            entries: names
                .into_iter()
                .map(|(k, p, t)| {
                    (
                        k,
                        Entry {
                            partition: p,
                            tensor: t,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Tape handles for a registered [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ParamVars<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} is not registered")))
    }
}
