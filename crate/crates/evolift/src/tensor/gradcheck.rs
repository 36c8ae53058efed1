//! Central-difference verification of tape gradients.
//!
//! The same rebuild-and-perturb scheme backs both entry points: run the
//! closure once for analytic gradients, then re-evaluate it with each input
//! entry nudged by `+/-eps` and compare slopes. Relative error uses
//! `max(1, |analytic|)` in the denominator so near-zero gradients are judged
//! on absolute error instead of blowing up.

use super::{Tape, Tensor};
use crate::params::ParamSet;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Checks `d f / d inputs` for a scalar-valued builder `f` against central
/// differences. Returns the maximum relative error over every entry of
/// every input. Inputs that `f` never uses count as zero-gradient leaves.
pub fn grad_check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Tensor]) -> Tensor,
{
    assert!(
        eps > 0.0 && eps.is_finite(),
        "grad_check: step size {eps} must be a positive finite number"
    );
    let eval = |vals: &[(Vec<f64>, Vec<usize>)]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Tensor> = vals
            .iter()
            .map(|(d, s)| tape.var(d.clone(), s))
            .collect();
        let y = f(&mut tape, &vars);
        assert_eq!(
            tape.data(y).len(),
            1,
            "grad_check: f must return a scalar, got shape {:?}",
            tape.shape(y)
        );
        tape.data(y)[0]
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| tape.var(d.clone(), s))
        .collect();
    let y = f(&mut tape, &vars);
    assert_eq!(
        tape.data(y).len(),
        1,
        "grad_check: f must return a scalar, got shape {:?}",
        tape.shape(y)
    );
    tape.backward(y);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (d, _))| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (vi, (data, _)) in inputs.iter().enumerate() {
        for e in 0..data.len() {
            let mut probe = inputs.to_vec();
            probe[vi].0[e] = data[e] + eps;
            let fp = eval(&probe);
            probe[vi].0[e] = data[e] - eps;
            let fm = eval(&probe);
            let numeric = (fp - fm) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(analytic[vi][e], numeric));
        }
    }
    max_rel
}

/// [`grad_check`] over every parameter a forward pass binds from `ps`.
/// Returns the worst relative error and the name of the parameter it
/// occurred in. `f` must bind parameters through [`Tape::param`].
pub fn grad_check_params<F>(ps: &ParamSet, f: F, eps: f64) -> (f64, String)
where
    F: Fn(&mut Tape, &ParamSet) -> Tensor,
{
    assert!(
        eps > 0.0 && eps.is_finite(),
        "grad_check: step size {eps} must be a positive finite number"
    );
    let eval = |ps: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let y = f(&mut tape, ps);
        assert_eq!(
            tape.data(y).len(),
            1,
            "grad_check: f must return a scalar, got shape {:?}",
            tape.shape(y)
        );
        tape.data(y)[0]
    };

    let mut tape = Tape::new();
    let y = f(&mut tape, ps);
    assert_eq!(
        tape.data(y).len(),
        1,
        "grad_check: f must return a scalar, got shape {:?}",
        tape.shape(y)
    );
    tape.backward(y);

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for r in ps.refs() {
        let Some(analytic) = tape.param_grad(r).map(|g| g.to_vec()) else {
            continue; // parameter not bound by this forward pass
        };
        for e in 0..analytic.len() {
            let base = ps.data(r)[e];
            let mut probe = ps.clone();
            probe.data_mut(r)[e] = base + eps;
            let fp = eval(&probe);
            probe.data_mut(r)[e] = base - eps;
            let fm = eval(&probe);
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = relative_error(analytic[e], numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", ps.name(r), e);
            }
        }
    }
    (max_rel, worst)
}
