//! Finite-difference checking of tape gradients.

use crate::error::TensorError;
use crate::real::{lit, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    /// Input index and element index of the worst entry.
    pub worst: (usize, usize),
}

/// Compare analytic gradients of a scalar function of `inputs` with central
/// differences of step `eps`.
///
/// `f` receives a fresh tape and leaf handles for the inputs and must return
/// the scalar loss.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], eps: f64, f: F) -> Result<GradCheck, TensorError>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new().without_grad();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().to_f64_lossy())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + lit(eps);
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - lit(eps);
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[j].to_f64_lossy());
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
