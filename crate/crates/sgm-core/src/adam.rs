//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Result, SgmError};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Canonical Adam constants; the defaults when a config names only the
/// learning rate.
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Optimizer state. Moment buffers are keyed by parameter name and are
/// zero-initialized to the parameter's length at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// `shapes` lists every parameter as (name, element count).
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, len) in shapes {
            first.insert(name.to_string(), vec![0.0; len]);
            second.insert(name.to_string(), vec![0.0; len]);
        }
        AdamState {
            step: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            first_moment: first,
            second_moment: second,
        }
    }
}

/// One optimizer step over named parameters. Every parameter must have a
/// same-length gradient in `grads`; gradients are left untouched for the
/// caller to reset. The step counter increments once per call.
pub fn adam_step<'a>(
    state: &mut AdamState,
    params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
    grads: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (name, tensor) in params {
        let grad = grads
            .get(&name)
            .ok_or_else(|| SgmError::contract(format!("adam_step: no gradient for '{name}'")))?;
        if grad.len() != tensor.len() {
            return Err(SgmError::dimension(
                "adam_step",
                format!(
                    "parameter '{name}' has {} values, gradient has {}",
                    tensor.len(),
                    grad.len()
                ),
            ));
        }
        let m = state
            .first_moment
            .get_mut(&name)
            .ok_or_else(|| SgmError::contract(format!("adam_step: unknown parameter '{name}'")))?;
        let v = state.second_moment.get_mut(&name).expect("moments paired");

        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (AdamState, Tensor) {
        let state = AdamState::new(0.1, [("p", 1usize)]);
        (state, Tensor::new(vec![1], vec![v]))
    }

    fn grads_of(g: f64) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("p".to_string(), vec![g])])
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes the first update ≈ lr · sign(g).
        let (mut state, mut p) = one_param(1.0);
        adam_step(&mut state, [("p".to_string(), &mut p)], &grads_of(1.0)).unwrap();
        assert!((p.values[0] - 0.9).abs() < 1e-7, "got {}", p.values[0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut state, mut p) = one_param(2.5);
        adam_step(&mut state, [("p".to_string(), &mut p)], &grads_of(0.0)).unwrap();
        assert_eq!(p.values[0].to_bits(), 2.5f64.to_bits());
    }

    #[test]
    fn second_identical_step_grows_moment_without_growing_update() {
        let (mut state, mut p) = one_param(1.0);
        adam_step(&mut state, [("p".to_string(), &mut p)], &grads_of(1.0)).unwrap();
        let v1 = state.second_moment["p"][0];
        let d1 = (1.0 - p.values[0]).abs();
        let before = p.values[0];
        adam_step(&mut state, [("p".to_string(), &mut p)], &grads_of(1.0)).unwrap();
        let v2 = state.second_moment["p"][0];
        let d2 = (before - p.values[0]).abs();
        assert!(v2 > v1, "second moment must accumulate: {v1} → {v2}");
        assert!(d2 <= d1 + 1e-12, "step must not grow: {d1} → {d2}");
    }

    #[test]
    fn missing_gradient_is_a_contract_violation() {
        let (mut state, mut p) = one_param(1.0);
        let empty = BTreeMap::new();
        let err = adam_step(&mut state, [("p".to_string(), &mut p)], &empty);
        assert!(matches!(err, Err(crate::error::SgmError::Contract(_))));
    }
}
