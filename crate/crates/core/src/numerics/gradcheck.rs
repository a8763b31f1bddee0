use super::{NumericsError, Tape, Tensor, Var};

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)` where
/// `numeric_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let eval = |x: Tensor| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: value.shape().to_vec(),
            });
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let out = f(&mut tape, x)?;
    tape.backward(out)?;
    let analytic = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_default();

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
