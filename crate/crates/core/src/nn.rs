//! Layers and small composite functions built from tape ops.

use crate::tape::*;
use ndarray::{Array1, Array2, ArrayD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Nonlinearity choice for the small nets used here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

pub fn activate(x: &Var, act: Activation) -> Var {
    match act {
        Activation::Relu => relu(x),
        Activation::Tanh => tanh(x),
    }
}

/// Fan-in scaled Gaussian init.
pub fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)).into_dyn()
}

pub fn zeros1(n: usize) -> ArrayD<f64> {
    Array1::<f64>::zeros(n).into_dyn()
}

/// x (B, I) @ w^T (I, O) + b.
pub fn linear(x: &Var, w: &Var, b: &Var) -> Var {
    let out = matmul(x, &transpose2(w));
    let brow = reshape(b, &[1, b.array().len()]);
    add(&out, &broadcast_rows(&brow, out.shape()[0]))
}

/// 3x3-style convolution via im2col. `w` is (OC, C*KH*KW), `b` is (OC).
pub fn conv2d(x: &Var, w: &Var, b: &Var, geom: ConvGeom) -> Var {
    let s = x.shape();
    let (bsz, h, wd) = (s[0], s[2], s[3]);
    let (oh, ow) = geom.out_hw(h, wd);
    let oc = w.shape()[0];
    let cols = im2col(x, geom); // (B*OH*OW, C*KH*KW)
    let y = linear(&cols, w, b); // (B*OH*OW, OC)
    let y = reshape(&y, &[bsz, oh, ow, oc]);
    permute(&y, &[0, 3, 1, 2])
}

/// Instance normalization over the spatial plane, no affine terms.
pub fn instance_norm(x: &Var, eps: f64) -> Var {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mu = spatial_mean(x);
    let xc = sub(x, &spatial_broadcast(&mu, h, w));
    let var = spatial_mean(&mul(&xc, &xc));
    let inv = powf(&add_scalar(&var, eps), -0.5);
    mul(&xc, &spatial_broadcast(&inv, h, w))
}

/// Row-wise L2 normalization with a small epsilon against zero rows.
pub fn normalize_rows(x: &Var, eps: f64) -> Var {
    let ss = sum_rows(&mul(x, x));
    if ss.array().iter().any(|&v| v < eps) {
        log::warn!("normalize_rows: near-zero row norm, epsilon keeps it finite");
    }
    let inv = powf(&add_scalar(&ss, eps), -0.5);
    mul(x, &broadcast_cols(&inv, x.shape()[1]))
}

/// Row-wise log-sum-exp, (m, n) -> (m, 1). The max shift is a detached
/// constant; the gradient is unaffected by it.
pub fn logsumexp_rows(x: &Var) -> Var {
    let m: Vec<f64> = x
        .array()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .rows()
        .into_iter()
        .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mv = Var::constant(Array2::from_shape_vec((m.len(), 1), m).unwrap().into_dyn());
    let shifted = sub(x, &broadcast_cols(&mv, x.shape()[1]));
    add(&ln(&sum_rows(&exp(&shifted))), &mv)
}

/// Mean negative log-softmax of the target column per row.
pub fn cross_entropy_mean(logits: &Var, labels: &[usize]) -> Var {
    let lse = logsumexp_rows(logits);
    let picked = gather_cols(logits, labels);
    mean_all(&sub(&lse, &picked))
}

/// Summed negative log-softmax of the target column per row.
pub fn cross_entropy_sum(logits: &Var, labels: &[usize]) -> Var {
    let lse = logsumexp_rows(logits);
    let picked = gather_cols(logits, labels);
    sum_all(&sub(&lse, &picked))
}
