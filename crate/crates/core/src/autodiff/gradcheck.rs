//! Central-difference gradient verification in 64-bit precision.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over elements of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// for the gradient of scalar `f` at `x`.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the error is the max over all
/// elements of all inputs.
pub fn grad_check_many<G>(f: G, xs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("grad_check", "step must be positive"));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; xs[slot].len()]);
        for i in 0..xs[slot].len() {
            let orig = xs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[slot].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    if tape.value(v).len() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function output must be scalar, got {:?}", tape.shape(v)),
        ));
    }
    Ok(tape.scalar(v))
}
