//! Central finite-difference checks for tape operations.

use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Analytic and numerical gradients of a scalar function of one tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖numeric‖₂, ‖analytic‖₂, 1e-12)`.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-12)
    }
}

/// Differentiates `f(x)` (which must return a one-element node) at `x` both
/// through the tape and by central differences with step `h`.
pub fn check<F>(x: &Tensor<f64>, h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv);
    assert_eq!(tape.value(out).len(), 1, "gradient check needs a scalar output");
    let grads = tape.grad(out);
    let analytic = grads.get(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor<f64>| {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v);
        tape.value(out).data()[0]
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe);
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe);
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    GradCheck { analytic, numeric }
}
