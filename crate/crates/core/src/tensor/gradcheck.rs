use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a scalar from its input on the given tape. Returns the
/// maximum over coordinates of `|autodiff − fd| / (|fd| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(x);
        Ok(f(&tape, v)?.item())
    };

    let tape = Tape::new();
    let xv = tape.param(x);
    let loss = f(&tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(xv);

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
