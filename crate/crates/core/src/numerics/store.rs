use std::collections::BTreeMap;

use super::{NumericsError, Tensor};

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// Named parameters, each with a gradient slot of the same shape.
///
/// Iteration order is the lexicographic order of names, which keeps
/// serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NumericsError> {
        if self.slots.contains_key(name) {
            return Err(NumericsError::DuplicateParameter(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(name.to_string(), Slot { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.values().all(|s| s.value.is_finite())
    }

    /// Copies a gradient set into the gradient slots.
    pub fn set_grads(&mut self, grads: &GradientSet) {
        for (name, slot) in &mut self.slots {
            match grads.get(name) {
                Some(g) => slot.grad = g.clone(),
                None => slot.grad = Tensor::zeros(slot.value.shape()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad = Tensor::zeros(slot.value.shape());
        }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        GradientSet {
            grads: store
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.grads.get_mut(name) {
            Some(t) => t.add_assign(g),
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &GradientSet) {
        for (name, g) in other.iter() {
            self.accumulate(name, g);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            g.scale_in_place(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::scalar(2.0)),
            Err(NumericsError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn gradient_slot_matches_shape() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::zeros(&[2, 5])).unwrap();
        assert_eq!(s.grad("w").unwrap().shape(), &[2, 5]);
    }

    #[test]
    fn global_norm_over_all_entries() {
        let mut g = GradientSet::default();
        g.accumulate("a", &Tensor::vector(vec![3.0]));
        g.accumulate("b", &Tensor::vector(vec![4.0]));
        assert_eq!(g.global_norm(), 5.0);
    }
}
