//! Finite-difference gradient verification.
//!
//! The oracle side evaluates the function forward-only (two evaluations per
//! coordinate, central differences), so it is independent of the tape's
//! backward rules. Relative error uses `|a - b| / max(|a|, |b|, 1e-8)` so the
//! same tolerances carry across precisions and machines.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Scalar, Tape, Tensor};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst relative error over every coordinate of every input.
    pub max_rel_err: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

/// Compare the tape gradient of `build` against central finite differences.
///
/// `build` receives a fresh tape and one tracked leaf per input tensor and
/// must return a scalar loss node. The analytic gradient comes from one
/// backward pass; the numeric gradient perturbs each input coordinate by
/// `±eps` and re-runs the forward pass only.
pub fn finite_difference_check<F, B>(
    build: B,
    inputs: &[Tensor<F>],
    eps: f64,
) -> Result<FdReport>
where
    F: Scalar,
    B: Fn(&mut Tape<F>, &[NodeId]) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }

    let eval = |tensors: &[Tensor<F>]| -> Result<(Tape<F>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::Contract(format!(
                "gradient check requires a scalar output, got shape {:?}",
                v.shape()
            )));
        }
        if !v.all_finite() {
            return Err(Error::Numeric(
                "gradient check: function produced a non-finite output".into(),
            ));
        }
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;

    let scalar_of = |tensors: &[Tensor<F>]| -> Result<f64> {
        let (tape, _, loss) = eval(tensors)?;
        Ok(tape.value(loss).scalar_value().into_f64())
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .expect("tracked leaf has a gradient")
            .clone();
        for c in 0..input.numel() {
            let base = input.data()[c].into_f64();
            work[pi].data_mut()[c] = F::from_f64(base + eps);
            let plus = scalar_of(&work)?;
            work[pi].data_mut()[c] = F::from_f64(base - eps);
            let minus = scalar_of(&work)?;
            work[pi].data_mut()[c] = input.data()[c];

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[c].into_f64();
            let err = rel_error(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pi, c, a, numeric));
            }
        }
    }
    Ok(report)
}
