//! Named parameter collections and the Adam optimizer.
//!
//! A [`ParamVector`] is the unit of upload, download and aggregation: a flat
//! ordered list of named tensors. Two vectors are *aggregation-compatible*
//! iff names, order, and shapes match exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat, ordered collection of named parameter tensors for one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new() -> Self {
        ParamVector { entries: Vec::new() }
    }

    /// Appends a named tensor; names must be unique within the vector.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor.with_grad()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Aggregation compatibility: names, order, and shapes match exactly.
    pub fn compatible(&self, other: &ParamVector) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies values (not grads) from a compatible vector.
    pub fn load_values(&mut self, src: &ParamVector) -> Result<()> {
        if !self.compatible(src) {
            return Err(Error::contract(
                "load_values from incompatible ParamVector".to_string(),
            ));
        }
        for ((_, dst), (_, s)) in self.entries.iter_mut().zip(&src.entries) {
            dst.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// L2 norm of the elementwise difference with a compatible vector.
    pub fn l2_distance(&self, other: &ParamVector) -> Result<f64> {
        if !self.compatible(other) {
            return Err(Error::contract(
                "l2_distance on incompatible ParamVectors".to_string(),
            ));
        }
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let d = x - y;
                acc += d * d;
            }
        }
        Ok(acc.sqrt())
    }
}

/// Adam optimizer state for one [`ParamVector`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with the paper-default betas and epsilon.
    pub fn new(params: &ParamVector, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            second_moment: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One Adam update with bias correction, applied in place.
///
/// Every entry must carry a gradient; gradients are left untouched so the
/// caller decides when to zero them.
pub fn adam_step(params: &mut ParamVector, state: &mut AdamState) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::contract(format!(
            "adam state holds {} moment tensors for {} params",
            state.first_moment.len(),
            params.len()
        )));
    }
    // Validate before mutating anything so a failed call leaves params intact.
    for (idx, (name, t)) in params.iter().enumerate() {
        let grad = t
            .grad
            .as_ref()
            .ok_or_else(|| Error::contract(format!("missing grad for `{name}`")))?;
        if grad.len() != t.numel() || state.first_moment[idx].len() != t.numel() {
            return Err(Error::dimension(format!("grad/moment shape for `{name}`")));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("grad of `{name}` contains {bad}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (idx, (_, tensor)) in params.iter_mut().enumerate() {
        let grad = tensor.grad.as_ref().unwrap().clone();
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        let data = tensor.data_mut();
        for j in 0..grad.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * grad[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * grad[j] * grad[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(values: &[(&str, &[f64])]) -> ParamVector {
        let mut p = ParamVector::new();
        for (name, data) in values {
            p.push(*name, Tensor::new(vec![data.len()], data.to_vec()).unwrap())
                .unwrap();
        }
        p
    }

    fn set_grads(p: &mut ParamVector, g: f64) {
        for (_, t) in p.iter_mut() {
            t.grad = Some(vec![g; t.numel()]);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamVector::new();
        p.push("w", Tensor::zeros(vec![2])).unwrap();
        assert!(p.push("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn compatibility_checks_names_order_shapes() {
        let a = pv(&[("w", &[1.0, 2.0]), ("b", &[0.0])]);
        let b = pv(&[("w", &[9.0, 9.0]), ("b", &[9.0])]);
        let c = pv(&[("b", &[0.0]), ("w", &[1.0, 2.0])]);
        assert!(a.compatible(&b));
        assert!(!a.compatible(&c));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = pv(&[("w", &[1.5, -0.5])]);
        let mut s = AdamState::new(&p, 0.1);
        set_grads(&mut p, 0.0);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5, -0.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn one_step_closed_form() {
        // g=1: m̂=1, v̂=1 after bias correction, so the step is lr/(1+ε).
        let mut p = pv(&[("w", &[0.0])]);
        let mut s = AdamState::new(&p, 0.0002);
        set_grads(&mut p, 1.0);
        adam_step(&mut p, &mut s).unwrap();
        let moved = -p.get("w").unwrap().data()[0];
        assert!((moved - 0.0002).abs() < 1e-9);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = pv(&[("a", &[0.3, -1.0]), ("b", &[0.3, -1.0])]);
        let mut s = AdamState::new(&p, 0.05);
        for step in 0..25 {
            let g = (step as f64 * 0.7).sin();
            set_grads(&mut p, g);
            adam_step(&mut p, &mut s).unwrap();
            let a = p.get("a").unwrap().data().to_vec();
            let b = p.get("b").unwrap().data().to_vec();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let mut p = pv(&[("w", &[0.1, 0.2, 0.3])]);
            let mut s = AdamState::new(&p, 0.01);
            for i in 0..10 {
                set_grads(&mut p, 1.0 / (i + 1) as f64);
                adam_step(&mut p, &mut s).unwrap();
            }
            p.get("w").unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "adam must be bit-deterministic");
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = pv(&[("w", &[1.0])]);
        let mut s = AdamState::new(&p, 0.1);
        assert!(adam_step(&mut p, &mut s).is_err());
    }

    #[test]
    fn grads_untouched_by_step() {
        let mut p = pv(&[("w", &[1.0])]);
        let mut s = AdamState::new(&p, 0.1);
        set_grads(&mut p, 2.5);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().grad.as_deref().unwrap(), &[2.5]);
    }
}
