//! Named, ordered parameter collections.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Whether a parameter set belongs to the model (theta) or the refiner (phi).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Model,
    Refiner,
}

/// Ordered map from parameter name to matrix.
///
/// Iteration follows insertion order, so flatten/unflatten and gradient
/// extraction are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    role: ParamRole,
    entries: Vec<(String, Matrix)>,
}

impl ParamSet {
    pub fn new(role: ParamRole) -> Self {
        ParamSet { role, entries: Vec::new() }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Param(format!("duplicate parameter name '{name}'")));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    /// Total number of scalar entries across all matrices.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Concatenates all matrices (insertion order, row-major) into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for (_, m) in &self.entries {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Rebuilds a set with the same names/shapes/role from a flat vector.
    ///
    /// Exact inverse of [`flatten`](Self::flatten): round-trips bit-for-bit.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Dim(format!(
                "unflatten: got {} scalars, need {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut out = ParamSet::new(self.role);
        let mut offset = 0;
        for (name, m) in &self.entries {
            let n = m.data().len();
            let chunk = flat[offset..offset + n].to_vec();
            offset += n;
            out.entries.push((name.clone(), Matrix::from_vec(m.rows(), m.cols(), chunk)?));
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new(self.role);
        for (name, m) in &self.entries {
            out.entries.push((name.clone(), Matrix::zeros(m.rows(), m.cols())));
        }
        out
    }

    /// Checks that `other` has identical names and shapes, in order.
    pub fn check_same_shape(&self, other: &ParamSet, context: &str) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Dim(format!(
                "{context}: {} entries vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((an, am), (bn, bm)) in self.entries.iter().zip(&other.entries) {
            if an != bn || am.shape() != bm.shape() {
                return Err(Error::Dim(format!(
                    "{context}: entry '{an}' {:?} vs '{bn}' {:?}",
                    am.shape(),
                    bm.shape()
                )));
            }
        }
        Ok(())
    }

    /// Returns `self + s * other`, entry by entry.
    pub fn add_scaled(&self, other: &ParamSet, s: f64) -> Result<ParamSet> {
        self.check_same_shape(other, "add_scaled")?;
        let mut out = ParamSet::new(self.role);
        for ((name, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            out.entries.push((name.clone(), a.add(&b.scale(s))?));
        }
        Ok(out)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.add_scaled(other, -1.0)
    }

    /// Euclidean norm over the flattened set.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        for (_, m) in &self.entries {
            for v in m.data() {
                acc += v * v;
            }
        }
        libm::sqrt(acc)
    }

    /// Inner product over the flattened sets.
    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }
}
