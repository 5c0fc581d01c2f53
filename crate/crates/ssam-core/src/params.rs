//! Named trainable tensors.
//!
//! Weights, gradients and optimizer moments all live in [`ParamMap`]s sharing
//! the same names, in a stable insertion order. The names are dotted paths
//! (`blocks.3.in_proj.weight`), which the optimizer's weight-decay exclusion
//! list and the checkpoint format key on.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SsamError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ParamMap<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamMap<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamMap<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SsamError::Param(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<F>> {
        self.get(name)
            .ok_or_else(|| SsamError::Param(format!("missing parameter '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar entries across all tensors.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Same names, zero tensors of matching shapes.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape().to_vec()))
                .expect("names already unique");
        }
        out
    }

    pub fn cast<G: Scalar>(&self) -> ParamMap<G> {
        let mut out = ParamMap::new();
        for (name, t) in self.iter() {
            out.insert(name, t.cast()).expect("names already unique");
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_all_finite())
    }
}

/// Parameters registered as leaves on a tape, resolvable by name.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Register every parameter as a tape leaf.
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, params: &ParamMap<F>) -> Self {
        let mut vars = HashMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.to_string(), tape.input(tensor.clone()));
        }
        Self { vars }
    }

    /// Like [`BoundParams::bind`], but the named parameter resolves to an
    /// externally provided variable (used to differentiate with respect to
    /// a single tensor).
    pub fn bind_with_override<F: Scalar>(
        tape: &mut Tape<F>,
        params: &ParamMap<F>,
        name: &str,
        var: Var,
    ) -> Result<Self> {
        if params.get(name).is_none() {
            return Err(SsamError::Param(format!("missing parameter '{name}'")));
        }
        let mut vars = HashMap::new();
        for (n, tensor) in params.iter() {
            let v = if n == name {
                var
            } else {
                tape.input(tensor.clone())
            };
            vars.insert(n.to_string(), v);
        }
        Ok(Self { vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SsamError::Param(format!("unbound parameter '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    /// Collect per-parameter gradients by name; parameters that did not
    /// receive any gradient get zeros of the right shape.
    pub fn collect_grads<F: Scalar>(
        &self,
        grads: &mut crate::autodiff::Grads<F>,
        params: &ParamMap<F>,
    ) -> Result<ParamMap<F>> {
        let mut out = ParamMap::new();
        for (name, tensor) in params.iter() {
            let var = self.var(name)?;
            let g = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
            if g.shape() != tensor.shape() {
                return Err(SsamError::Shape(format!(
                    "gradient shape {:?} for '{name}' with shape {:?}",
                    g.shape(),
                    tensor.shape()
                )));
            }
            out.insert(name, g)?;
        }
        Ok(out)
    }
}

/// Finite-difference check of a named-parameter loss: for every parameter
/// whose name passes `filter`, runs [`crate::autodiff::grad_check`] on the
/// loss built by `build` and returns `(name, max relative error)` pairs.
/// Evaluation happens in whatever precision `params` carries; callers wanting
/// the documented 64-bit oracle mode pass a `ParamMap<f64>`.
pub fn grad_check_params<Build>(
    params: &ParamMap<f64>,
    eps: f64,
    mut filter: impl FnMut(&str) -> bool,
    build: Build,
) -> Result<Vec<(String, f64)>>
where
    Build: Fn(&mut Tape<f64>, &BoundParams) -> Result<Var>,
{
    let mut results = Vec::new();
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        if !filter(&name) {
            continue;
        }
        let tensor = params.require(&name)?.clone();
        let err = crate::autodiff::grad_check(
            |tape, v| {
                let bound = BoundParams::bind_with_override(tape, params, &name, v)?;
                build(tape, &bound)
            },
            &tensor,
            eps,
        )?;
        results.push((name, err));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut p: ParamMap<f32> = ParamMap::new();
        p.insert("b", Tensor::zeros([2])).unwrap();
        p.insert("a", Tensor::zeros([3])).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(p.total_elements(), 5);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p: ParamMap<f32> = ParamMap::new();
        p.insert("w", Tensor::zeros([1])).unwrap();
        assert!(p.insert("w", Tensor::zeros([1])).is_err());
    }
}
