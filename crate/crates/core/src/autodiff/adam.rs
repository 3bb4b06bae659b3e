//! ADAM optimizer with bias correction and the step-decay learning-rate
//! schedule (base 1e-4, halved every 30 epochs).

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Scalar;

/// Per-parameter first/second moment estimates and the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    t: u64,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
}

impl<F: Scalar> AdamState<F> {
    /// Fresh state with zero moments, matching the given parameter shapes.
    pub fn new(params: &[ArrayD<F>]) -> Self {
        Self {
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            t: 0,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One ADAM update over all parameters.
pub fn adam_step<F: Scalar>(
    params: &mut [ArrayD<F>],
    grads: &[ArrayD<F>],
    state: &mut AdamState<F>,
    lr: F,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state mismatch");
    state.t += 1;
    let one = F::one();
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bc1 = one - b1.powi(state.t as i32);
    let bc2 = one - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + state.epsilon);
            });
    }
}

/// Step-decay schedule: `base * 0.5^(epoch / halve_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub halve_every: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-4,
            halve_every: 30,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        self.base * 0.5f64.powi((epoch as u32 / self.halve_every) as i32)
    }
}

/// Default schedule lookup.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}
