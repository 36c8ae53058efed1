//! Parameter updates: an adaptive-moment optimizer whose effective step
//! size can only shrink (the second-moment estimate is clamped to its
//! running maximum), plus the stepped exponential learning-rate decay the
//! trainer follows across epochs.

use crate::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment buffers for every parameter, indexed like the owning
/// [`ParamSet`]. `vhat` is the elementwise running maximum of the
/// bias-corrected second moment, which is what makes the update
/// non-increasing in scale for a stationary gradient distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub vhat: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(ps: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = ps.refs().map(|r| vec![0.0; ps.data(r).len()]).collect();
        OptState { step: 0, m: zeros.clone(), v: zeros.clone(), vhat: zeros }
    }
}

/// One optimizer step over every parameter. `grads` must hold one gradient
/// buffer per parameter in set order (the trainer averages per-sample
/// gradients into this layout before stepping). Non-finite gradients abort
/// with the offending parameter's name: silently folding a NaN into the
/// moment buffers would poison every later step.
pub fn amsgrad_step(ps: &mut ParamSet, grads: &[Vec<f64>], state: &mut OptState, lr: f64) {
    assert_eq!(grads.len(), ps.len(), "amsgrad_step: one gradient buffer per parameter");
    assert_eq!(state.m.len(), ps.len(), "amsgrad_step: state built for a different parameter set");
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    let refs: Vec<_> = ps.refs().collect();
    for r in refs {
        let i = r.index();
        let n = ps.data(r).len();
        assert_eq!(grads[i].len(), n, "amsgrad_step: gradient shape mismatch at {}", ps.name(r));
        if let Some(bad) = grads[i].iter().find(|g| !g.is_finite()) {
            panic!("amsgrad_step: non-finite gradient {bad} for parameter {}", ps.name(r));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let vhat = &mut state.vhat[i];
        let data = ps.data_mut(r);
        for k in 0..n {
            let g = grads[i][k];
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            if v_hat > vhat[k] {
                vhat[k] = v_hat;
            }
            data[k] -= lr * m_hat / (vhat[k].sqrt() + EPSILON);
        }
    }
}

/// Learning rate for a given epoch: 5% off every epoch and an extra halving
/// once five epochs complete, i.e. `lr0 * 0.95^e * 0.5^floor(e/5)`.
pub fn lr_schedule(epoch: usize, lr0: f64) -> f64 {
    lr0 * 0.95_f64.powi(epoch as i32) * 0.5_f64.powi((epoch / 5) as i32)
}
