//! Central finite-difference gradient verification.

use super::tape::{Tape, Var};
use super::{Scalar, Tensor};

/// Compares the analytic gradient of `f` at `x` against central differences.
/// Returns the relative error between the two gradient vectors,
/// `||analytic - central|| / max(1e-8, ||analytic|| + ||central||)`, so a
/// noisy difference on a near-zero coordinate is judged at the scale of the
/// whole gradient rather than of that coordinate.
pub fn grad_check<F: Scalar>(
    f: impl Fn(&Tape<F>, Var) -> Var,
    x: &Tensor<F>,
    eps: F,
) -> f64 {
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = f(&tape, xv);
    let grads = tape.backward(loss);
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let mut diff_sq = 0.0f64;
    let mut a_sq = 0.0f64;
    let mut c_sq = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data_mut()[i] + eps;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data_mut()[i] - eps;
        let fp = eval(&f, plus).to_f64();
        let fm = eval(&f, minus).to_f64();
        let central = (fp - fm) / (2.0 * eps.to_f64());
        let a = analytic.data()[i].to_f64();
        diff_sq += (a - central) * (a - central);
        a_sq += a * a;
        c_sq += central * central;
    }
    diff_sq.sqrt() / (1e-8f64).max(a_sq.sqrt() + c_sq.sqrt())
}

fn eval<F: Scalar>(f: &impl Fn(&Tape<F>, Var) -> Var, x: Tensor<F>) -> F {
    let tape = Tape::new();
    let xv = tape.input(x);
    let out = f(&tape, xv);
    tape.value(out).item()
}
