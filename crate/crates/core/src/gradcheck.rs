//! Central finite-difference verification of analytic gradients.
//!
//! The checker is independent of the backward pass: it only re-evaluates the
//! forward loss at perturbed parameter values and compares the quotient
//! against whatever gradients the caller accumulated into the store.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::Result;
use crate::math;
use crate::optim::ParameterStore;

/// Per-parameter-group outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_diff: f64,
    pub elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error with a floor so that round-off on near-zero gradients does
/// not register as a failure.
fn rel_err(fd: f64, analytic: f64) -> f64 {
    let denom = math::abs(fd).max(math::abs(analytic)).max(1e-2);
    math::abs(fd - analytic) / denom
}

/// Compare the gradients stored in `params` against central finite
/// differences of `loss` with the given `step`. Parameter values are
/// restored after probing.
pub fn finite_difference_report(
    params: &mut ParameterStore,
    loss: &mut dyn FnMut(&ParameterStore) -> Result<f64>,
    step: f64,
) -> Result<GradCheckReport> {
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    let mut groups = Vec::with_capacity(names.len());
    let mut overall: f64 = 0.0;
    for name in names {
        let numel = params.value(&name)?.numel();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..numel {
            params.nudge(&name, i, step)?;
            let plus = loss(params)?;
            params.nudge(&name, i, -2.0 * step)?;
            let minus = loss(params)?;
            params.nudge(&name, i, step)?;
            let fd = (plus - minus) / (2.0 * step);
            let analytic = params.grad(&name)?.data()[i];
            max_rel = max_rel.max(rel_err(fd, analytic));
            max_abs = max_abs.max(math::abs(fd - analytic));
        }
        overall = overall.max(max_rel);
        groups.push(GroupReport {
            name,
            max_rel_err: max_rel,
            max_abs_diff: max_abs,
            elements: numel,
        });
    }
    Ok(GradCheckReport {
        groups,
        max_rel_err: overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn quadratic_loss_passes() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::vector(vec![1.0, -2.0, 3.0]));

        // analytic grads via the tape
        let mut tape = Tape::new();
        let x = store.bind(&mut tape, "x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum_all(sq).unwrap();
        tape.backward(l).unwrap();
        store
            .accumulate_from(&tape, &[("x".into(), x)])
            .unwrap();

        let mut loss = |s: &ParameterStore| {
            let v = s.value("x")?;
            Ok(v.data().iter().map(|a| a * a).sum())
        };
        let report = finite_difference_report(&mut store, &mut loss, 1e-5).unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut store = ParameterStore::new();
        store.insert("x", Tensor::vector(vec![2.0]));
        // leave the stored gradient at zero; true gradient is 4.0
        let mut loss = |s: &ParameterStore| {
            let v = s.value("x")?;
            Ok(v.data()[0] * v.data()[0])
        };
        let report = finite_difference_report(&mut store, &mut loss, 1e-5).unwrap();
        assert!(!report.passes(1e-4));
    }
}
