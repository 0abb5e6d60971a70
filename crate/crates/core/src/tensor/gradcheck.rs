use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±h neighbourhood straddles a non-smooth point.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central differences of a plain scalar function.
pub fn central_differences(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and `x` registered as a leaf, and must return a
/// scalar. Coordinates where evaluating at `x ± h` changes any branch
/// decision on the tape are counted in `skipped_kinks` instead of checked.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(TensorError::Invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |point: &Tensor| -> Result<(f64, Option<u64>)> {
        let mut tape = Tape::with_branch_tracking();
        let v = tape.constant(point.clone());
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(TensorError::NotScalar(value.shape().to_vec()));
        }
        Ok((value.item(), tape.branch_signature()))
    };

    let mut tape = Tape::with_branch_tracking();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let base_sig = tape.branch_signature();
    let analytic = tape.backward(out)?.get(xv);
    if let Some(index) = analytic.data().iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { index });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, sig_plus) = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (minus, sig_minus) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite { index: i });
        }
        if sig_plus != sig_minus || sig_plus != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
