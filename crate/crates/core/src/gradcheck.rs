//! Central finite differences for validating analytic gradients. These live
//! apart from the tape so checks stay independent of the implementation path
//! they verify.

use ndarray::ArrayD;

/// Central-difference gradient of `f` w.r.t. every entry of every parameter
/// array.
pub fn finite_diff(
    f: &dyn Fn(&[ArrayD<f64>]) -> f64,
    params: &[ArrayD<f64>],
    step: f64,
) -> Vec<ArrayD<f64>> {
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = ArrayD::<f64>::zeros(params[pi].shape().to_vec());
        for idx in 0..params[pi].len() {
            let orig = work[pi].as_slice().unwrap()[idx];
            work[pi].as_slice_mut().unwrap()[idx] = orig + step;
            let fp = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig - step;
            let fm = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Worst elementwise relative error between two gradient arrays. The
/// denominator floor keeps near-zero entries from dominating.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_rel_error_many(a: &[ArrayD<f64>], b: &[ArrayD<f64>]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| max_rel_error(x, y, 1e-4))
        .fold(0.0, f64::max)
}

/// Relative L2 distance between flattened gradient collections; used for the
/// second-order check where per-element comparison is too noisy.
pub fn rel_l2_error(a: &[ArrayD<f64>], b: &[ArrayD<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        for (&u, &v) in x.iter().zip(y.iter()) {
            num += (u - v) * (u - v);
            den += v * v;
        }
    }
    (num / den.max(1e-30)).sqrt()
}
