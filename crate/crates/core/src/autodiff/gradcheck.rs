//! Central finite differences as an oracle for [`backward`](super::backward).

use super::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Denominator floor for relative errors. Below it a 64-bit central
/// difference at `h = 1e-5` carries round-off near `1e-10`, so such
/// coordinates are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index across all checked tensors, in the order they were given.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 }
    }

    fn observe(&mut self, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        if rel > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = rel;
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.checked += 1;
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate of `x`.
///
/// `x` is perturbed in place and restored before returning.
pub fn finite_difference_grad<T: Scalar>(mut f: impl FnMut() -> Result<T>, x: &Tensor<T>, h: f64) -> Result<Vec<T>> {
    assert!(h > 0.0, "finite difference step must be positive");
    let step = T::lit(h);
    let two_h = T::lit(2.0 * h);
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.update(|d| d[i] = orig + step);
        let plus = f();
        x.update(|d| d[i] = orig - step);
        let minus = f();
        x.update(|d| d[i] = orig);
        out.push((plus? - minus?) / two_h);
    }
    Ok(out)
}

/// Compares [`backward`](super::backward) against central differences for
/// every entry of every tensor in `wrt`.
///
/// `loss` must rebuild the graph from the current tensor values on each call.
pub fn check_gradients<T: Scalar>(
    mut loss: impl FnMut() -> Result<Tensor<T>>,
    wrt: &[Tensor<T>],
    h: f64,
) -> Result<GradCheckReport> {
    wrt.iter().for_each(Tensor::zero_grad);
    let l = loss()?;
    super::backward(&l)?;
    drop(l);
    let analytic: Vec<Vec<T>> = wrt.iter().map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])).collect();
    let mut report = GradCheckReport::empty();
    let mut offset = 0;
    for (t, a) in wrt.iter().zip(&analytic) {
        let numeric = {
            let _g = super::no_grad();
            finite_difference_grad(|| loss().map(|l| l.item()), t, h)?
        };
        for (i, (&an, &nu)) in a.iter().zip(&numeric).enumerate() {
            report.observe(offset + i, an.as_f64(), nu.as_f64());
        }
        offset += t.numel();
    }
    Ok(report)
}
