use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// RMSprop hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay: 0.99,
            eps: 1e-8,
        }
    }
}

/// Running mean of squared gradients, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RmsPropState {
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl RmsPropState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            steps: 0,
        }
    }

    pub fn mean_square(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One update: `v ← ρv + (1−ρ)g²`, `θ ← θ − η·g/(√v + ε)`, elementwise.
///
/// `grads[i]` belongs to `params[i]`; a missing entry is an error and leaves
/// both `params` and `state` untouched.
pub fn rmsprop_step(params: &mut [Tensor], grads: &[Tensor], state: &mut RmsPropState, opt: &RmsProp) -> Result<()> {
    if grads.len() < params.len() {
        return Err(Error::MissingGradient(grads.len()));
    }
    if grads.len() > params.len() {
        return Err(shape_err("rmsprop_step (gradient count)", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(shape_err("rmsprop_step", p.shape(), g.shape()));
        }
    }
    if state.v.is_empty() {
        *state = RmsPropState::new(params);
    }
    if state.v.len() != params.len() || state.v.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len()) {
        return Err(Error::InvalidArgument("optimizer state does not match parameters".into()));
    }

    let RmsProp { lr, decay, eps } = *opt;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.v.iter_mut()) {
        let mut data = p.data().to_vec();
        for ((theta, &gi), vi) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = decay * *vi + (1.0 - decay) * gi * gi;
            *theta -= lr * gi / (vi.sqrt() + eps);
        }
        *p = Tensor::from_parts(p.shape().to_vec(), data);
    }
    state.steps += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v).unwrap()
    }

    #[test]
    fn two_step_trajectory() {
        let opt = RmsProp {
            lr: 0.1,
            decay: 0.9,
            eps: 0.0,
        };
        let mut params = vec![s(0.0)];
        let mut state = RmsPropState::new(&params);
        rmsprop_step(&mut params, &[s(1.0)], &mut state, &opt).unwrap();
        assert!((state.mean_square(0)[0] - 0.1).abs() < 1e-15);
        assert!((params[0].data()[0] + 0.316_227_766_016_838).abs() < 1e-12);
        rmsprop_step(&mut params, &[s(1.0)], &mut state, &opt).unwrap();
        assert!((state.mean_square(0)[0] - 0.19).abs() < 1e-15);
        let expected = -0.1 / 0.1f64.sqrt() - 0.1 / 0.19f64.sqrt();
        assert!((params[0].data()[0] - expected).abs() < 1e-12);
        assert!((params[0].data()[0] + 0.545_643_499_887_4).abs() < 1e-12);
        assert_eq!(state.steps(), 2);
    }

    #[test]
    fn zero_gradient_decays_accumulator() {
        let opt = RmsProp {
            lr: 0.1,
            decay: 0.9,
            eps: 1e-8,
        };
        let mut params = vec![s(2.5)];
        let mut state = RmsPropState::new(&params);
        rmsprop_step(&mut params, &[s(1.0)], &mut state, &opt).unwrap();
        let before = params[0].data()[0];
        let v = state.mean_square(0)[0];
        rmsprop_step(&mut params, &[s(0.0)], &mut state, &opt).unwrap();
        assert_eq!(params[0].data()[0], before);
        assert!((state.mean_square(0)[0] - 0.9 * v).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![s(0.0), s(1.0)];
        let mut state = RmsPropState::new(&params);
        let err = rmsprop_step(&mut params, &[s(1.0)], &mut state, &RmsProp::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(1)));
        assert_eq!(params[0].data()[0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros(vec![2])];
        let mut state = RmsPropState::default();
        assert!(rmsprop_step(&mut params, &[Tensor::zeros(vec![3])], &mut state, &RmsProp::default()).is_err());
    }
}
