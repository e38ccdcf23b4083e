//! Central finite-difference checks against the tape's analytic gradients.

use alloc::vec::Vec;

use super::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    /// Upper bound on checked coordinates per input; evenly strided when exceeded.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4, max_coords: 256 }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub max_abs_err: f64,
    /// max |analytic - numeric| / max(|analytic|, |numeric|, floor)
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn check_gradient(x: &Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> GradReport {
    check_gradients(core::slice::from_ref(x), |tape, vs| f(tape, vs[0]), GradCheckOptions::default())
}

/// Compares d f / d inputs[i] for every input against central differences.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    opts: GradCheckOptions,
) -> GradReport {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.item(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut report = GradReport::default();
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.wrt(v).unwrap_or(&zero);
        let stride = n.div_ceil(opts.max_coords.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + opts.step;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = orig - opts.step;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
