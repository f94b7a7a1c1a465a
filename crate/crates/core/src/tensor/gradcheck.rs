use super::{Result, Tape, Tensor, TensorError, Var};

/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns the largest per-coordinate [`relative_error`].
///
/// `f` builds a scalar on the given tape from the recorded input.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::param("finite_difference_check", format!("step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let loss = f(&mut tape, input)?;
    tape.backward(loss)?;
    let analytic = tape.grad(input).expect("input requires grad").to_vec();

    let shape = x.shape().to_vec();
    let mut failure = None;
    let numeric = central_difference(
        |v| {
            let mut t = Tape::new();
            let input = t.constant(Tensor::new(&shape, v.to_vec()).expect("same shape"));
            match f(&mut t, input) {
                Ok(out) => t.value(out).values()[0],
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        x.values(),
        step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
