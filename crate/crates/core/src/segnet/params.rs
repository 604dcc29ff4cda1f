use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

/// Ordered map of named tensors holding all weights of a network. Iteration
/// order is insertion order and is stable across runs for a given config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Real> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar count over all tensors.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names, same order, same shapes.
    pub fn congruent(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn map_values(&self, f: impl Fn(&Tensor<F>) -> Tensor<F>) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), f(t)))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        debug_assert!(self.congruent(other));
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            a.add_scaled(b, scale);
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (n, t) in self.iter() {
            t.check_finite(&format!("{context}:{n}"))?;
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_count_is_zero() {
        assert_eq!(ParamSet::<f32>::new().param_count(), 0);
    }

    #[test]
    fn count_and_order() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[2, 1, 3, 3, 3]));
        p.insert("b", Tensor::zeros(&[2]));
        assert_eq!(p.param_count(), 56);
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, vec!["w", "b"]);
    }

    #[test]
    fn congruence_checks_names_and_shapes() {
        let mut a = ParamSet::<f32>::new();
        a.insert("w", Tensor::zeros(&[2]));
        let mut b = ParamSet::<f32>::new();
        b.insert("w", Tensor::zeros(&[3]));
        assert!(!a.congruent(&b));
        assert!(a.congruent(&a.clone()));
    }
}
