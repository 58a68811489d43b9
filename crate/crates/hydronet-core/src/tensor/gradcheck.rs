//! Finite-difference gradient verification.
//!
//! The reference gradient is a central difference with a caller-chosen step;
//! the tape's backward pass is compared elementwise against it. All checks
//! run in 64-bit arithmetic, where a step of 1e-6 leaves several digits of
//! headroom below the 1e-4 acceptance threshold.

use super::{Tape, TapeId, Tensor};

/// Location and magnitude of the largest analytic/numeric disagreement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstElement {
    /// Which input tensor.
    pub input: usize,
    /// Flat element index within that input.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of |a−n| / max(|a|, |n|, 1e-8)
    pub max_rel_error: f64,
    /// Total scalar elements compared.
    pub elements: usize,
    pub worst: Option<WorstElement>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare backward-pass gradients of `f` against central differences.
///
/// `f` receives a fresh tape plus one leaf per input tensor and must return
/// a scalar node. Every element of every input is perturbed by ±`eps`; the
/// relative error uses |a−n| / max(|a|, |n|, 1e-8) so that zero gradients
/// compare cleanly.
pub fn finite_diff_check<F>(inputs: &[Tensor], eps: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[TapeId]) -> TapeId,
{
    assert!(eps > 0.0, "finite_diff_check requires a positive step");

    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<TapeId> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &ids);
        tape.value(loss).item()
    };

    // One backward pass for the analytic side.
    let mut tape = Tape::new();
    let ids: Vec<TapeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids);
    tape.backward(loss).expect("gradcheck loss must be scalar");
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(id, input)| {
            tape.grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        elements: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[pi].len() {
            let original = work[pi].data()[ei];
            let up = original + eps;
            let down = original - eps;
            work[pi].data_mut()[ei] = up;
            let plus = eval(&work);
            work[pi].data_mut()[ei] = down;
            let minus = eval(&work);
            work[pi].data_mut()[ei] = original;

            // Divide by the step actually realized in f64, not the nominal
            // 2ε; near |x|≈1 the difference costs ~1e-10 of accuracy.
            let numeric = (plus - minus) / (up - down);
            let a = grad.data()[ei];
            let err = rel_error(a, numeric);
            report.elements += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(WorstElement {
                    input: pi,
                    index: ei,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}
