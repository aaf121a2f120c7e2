use super::tape::{Tape, Var, VjpFault};
use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Compares reverse-mode gradients of a scalar program against central
/// finite differences. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(point), step, None)
}

/// Multi-input variant of [`grad_check`]; every input is perturbed.
pub fn grad_check_many<F>(f: F, points: &[Tensor], step: f64, fault: Option<VjpFault>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_fault(fault);
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return contract("grad_check", "function must be scalar-valued");
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    // Recording tapes so programs that differentiate internally (gradient
    // penalties) evaluate the same way as in the analytic pass.
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..points[which].numel() {
            let orig = points[which].data()[i];
            work[which].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
