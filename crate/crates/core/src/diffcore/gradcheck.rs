use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences at `point`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over all
/// coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
    )
}

/// Multi-input form of [`grad_check`]: every tensor in `points` is treated
/// as a differentiable input.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("grad_check step must be positive, got {step}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::invalid("grad_check function must return a scalar"));
        }
        if !v.item().is_finite() {
            return Err(Error::NonFinite(format!("function value {}", v.item())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite(format!("function value {}", tape.value(out).item())));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = points.to_vec();
    for (which, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for i in 0..points[which].len() {
            let orig = points[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
