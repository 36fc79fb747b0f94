//! Named trainable parameters and their binding onto a tape.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owns every trainable tensor of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.requiring_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Weight drawn from N(0, 2/fan_in).
    pub fn add_he(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Copies leaf gradients into each tensor's `grad` (zeros where unreached).
    pub fn absorb_grads(&mut self, grads: &Gradients, bound: &Bound<'_>) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            t.set_grad(grads.get_or_zeros(*v))
                .expect("bound var matches tensor");
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }

    /// Overwrites values from a named list; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<(), TensorError> {
        if named.len() != self.tensors.len() {
            return Err(TensorError::InvalidShape {
                op: "load_params",
                shape: vec![named.len(), self.tensors.len()],
                reason: "parameter count differs".into(),
            });
        }
        for ((name, src), (own, dst)) in named.iter().zip(self.names.iter().zip(&mut self.tensors))
        {
            if name != own || src.shape() != dst.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_params",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Wraps externally created variables (e.g. inside a gradient check).
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_is_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.add_he("w", &[8, 4], 4, &mut ChaCha8Rng::seed_from_u64(3));
        b.add_he("w", &[8, 4], 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn load_named_checks_names() {
        let mut s = ParamStore::new();
        s.add_zeros("w", &[2]);
        let ok = vec![("w".to_string(), Tensor::full([2], 1.0))];
        s.load_named(&ok).unwrap();
        assert_eq!(s.tensors()[0].data(), &[1.0, 1.0]);
        let bad = vec![("v".to_string(), Tensor::full([2], 1.0))];
        assert!(s.load_named(&bad).is_err());
    }
}
