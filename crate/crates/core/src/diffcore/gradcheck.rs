use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Magnitude below which gradient entries are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-2;

/// Compares analytic gradients of a scalar function against central finite
/// differences with step `h`. Returns the worst relative error over every
/// input entry, where the denominator is `max(|analytic|, |numeric|, GRADCHECK_FLOOR)`.
pub fn max_gradient_error<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
