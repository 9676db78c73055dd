//! Central finite differences, used only as a test oracle.

use super::Tensor;

pub(crate) const STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `at`, one coordinate at a time.
pub(crate) fn central_diff(f: impl Fn(&Tensor) -> f64, at: &Tensor) -> Tensor {
    let mut data = at.data().to_vec();
    let mut grad = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + STEP;
        let up = f(&Tensor::new(at.shape().to_vec(), data.clone()).unwrap());
        data[i] = orig - STEP;
        let down = f(&Tensor::new(at.shape().to_vec(), data.clone()).unwrap());
        data[i] = orig;
        grad.push((up - down) / (2.0 * STEP));
    }
    Tensor::new(at.shape().to_vec(), grad).unwrap()
}

/// Largest `|a - b| / max(|a|, |b|, 1e-6)` over all entries.
pub(crate) fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
