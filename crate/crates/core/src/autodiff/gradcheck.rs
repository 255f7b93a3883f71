use super::params::ParamSet;
use super::tape::{Bound, Tape, Var};
use crate::error::Result;

/// Largest relative disagreement between tape gradients and central differences,
/// `|a - n| / (|a| + |n| + 1e-12)`, over every scalar parameter.
pub fn gradient_check<F>(params: &mut ParamSet, forward: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(p, false);
        let loss = forward(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    params.zero_grads();
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let loss = forward(&mut tape, &bound)?;
    tape.backward(loss, params)?;

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for j in 0..params.value(id).len() {
            let analytic = params.grad(id).values()[j];
            let orig = params.value(id).values()[j];
            params.value_mut(id).values_mut()[j] = orig + step;
            let up = eval(params)?;
            params.value_mut(id).values_mut()[j] = orig - step;
            let down = eval(params)?;
            params.value_mut(id).values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    params.zero_grads();
    Ok(worst)
}
