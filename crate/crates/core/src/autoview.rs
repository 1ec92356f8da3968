//! Learnable view generation. Each branch owns a small localisation network
//! that predicts a diagonal affine transform (axis scaling plus translation,
//! no skew) per image; the transform is turned into a sampling grid and the
//! image is warped with differentiable bilinear interpolation. A stochastic
//! photometric chain (color jitter, gaussian blur, horizontal flip) runs
//! before the learnable warp and stays outside the gradient path.

use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Backbone;
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::tape::{
    add, add_scalar, bilinear_sample, clamp, matmul, mul, neg, slice_cols, tanh,
};
use crate::tape::Var;

// ---------------------------------------------------------------------------
// stochastic pre-augmentation
// ---------------------------------------------------------------------------

/// Photometric augmentation strengths. All draws are per image and per call.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Brightness jitter: multiply by a factor in [1-b, 1+b].
    pub brightness: f64,
    /// Contrast jitter: blend toward the image mean by a factor in [1-c, 1+c].
    pub contrast: f64,
    /// Saturation jitter: blend toward per-pixel gray by a factor in [1-s, 1+s].
    pub saturation: f64,
    /// Probability of applying gaussian blur.
    pub blur_prob: f64,
    /// Blur sigma drawn uniformly from this range.
    pub blur_sigma: (f64, f64),
    /// Probability of mirroring about the vertical axis.
    pub flip_prob: f64,
    /// When true both branches see the same augmented batch; by default each
    /// branch draws its own augmentation for stronger view diversity.
    pub shared_across_branches: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.5,
            shared_across_branches: false,
        }
    }
}

impl AugmentConfig {
    /// No-op chain: every strength zero, every probability zero.
    pub fn disabled() -> Self {
        AugmentConfig {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.0,
            shared_across_branches: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("blur_prob", self.blur_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {s}")));
            }
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.1 >= self.blur_sigma.0) {
            return Err(Error::Config(format!(
                "blur_sigma range must satisfy 0 < lo <= hi, got {:?}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

/// Separable gaussian blur of a single BCHW batch with zero padding. The
/// kernel is normalized so total mass is preserved away from the borders.
pub fn gaussian_blur(images: &Array4<f64>, sigma: f64) -> Array4<f64> {
    assert!(sigma > 0.0, "gaussian_blur: sigma must be positive");
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (b, c, h, w) = images.dim();
    let mut horiz = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sx = x as isize + ki as isize - radius;
                        if sx >= 0 && (sx as usize) < w {
                            acc += kv * images[[bi, ci, y, sx as usize]];
                        }
                    }
                    horiz[[bi, ci, y, x]] = acc;
                }
            }
        }
    }
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let sy = y as isize + ki as isize - radius;
                        if sy >= 0 && (sy as usize) < h {
                            acc += kv * horiz[[bi, ci, sy as usize, x]];
                        }
                    }
                    out[[bi, ci, y, x]] = acc;
                }
            }
        }
    }
    out
}

/// Apply the photometric chain to a BCHW batch in [0, 1]. Each image draws
/// its own jitter factors; the output is clipped back to [0, 1]. This path is
/// intentionally non-differentiable: it runs before the learnable warp.
pub fn pre_augment(
    images: &Array4<f64>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Array4<f64> {
    let (b, c, h, w) = images.dim();
    let mut out = images.clone();
    for bi in 0..b {
        if cfg.brightness > 0.0 {
            let f = 1.0 + rng.gen_range(-cfg.brightness..=cfg.brightness);
            out.index_axis_mut(ndarray::Axis(0), bi).mapv_inplace(|v| v * f);
        }
        if cfg.contrast > 0.0 {
            let f = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
            let m = out.index_axis(ndarray::Axis(0), bi).mean().unwrap_or(0.0);
            out.index_axis_mut(ndarray::Axis(0), bi)
                .mapv_inplace(|v| (v - m) * f + m);
        }
        if cfg.saturation > 0.0 && c > 1 {
            let f = 1.0 + rng.gen_range(-cfg.saturation..=cfg.saturation);
            for y in 0..h {
                for x in 0..w {
                    let mut g = 0.0;
                    for ci in 0..c {
                        g += out[[bi, ci, y, x]];
                    }
                    g /= c as f64;
                    for ci in 0..c {
                        let v = out[[bi, ci, y, x]];
                        out[[bi, ci, y, x]] = g + (v - g) * f;
                    }
                }
            }
        }
        if cfg.blur_prob > 0.0 && rng.gen_bool(cfg.blur_prob) {
            let (lo, hi) = cfg.blur_sigma;
            let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let single = out
                .index_axis(ndarray::Axis(0), bi)
                .to_owned()
                .insert_axis(ndarray::Axis(0));
            let blurred = gaussian_blur(&single, sigma);
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&blurred.index_axis(ndarray::Axis(0), 0));
        }
        if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w / 2 {
                        let xm = w - 1 - x;
                        let (a, bv) = (out[[bi, ci, y, x]], out[[bi, ci, y, xm]]);
                        out[[bi, ci, y, x]] = bv;
                        out[[bi, ci, y, xm]] = a;
                    }
                }
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

// ---------------------------------------------------------------------------
// localisation network and affine parameters
// ---------------------------------------------------------------------------

/// Bounds for the predicted axis scales. Translations are then bounded per
/// axis to [-(1-scale), +(1-scale)], which keeps the sampled window inside
/// the normalized image square.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewBounds {
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for ViewBounds {
    fn default() -> Self {
        ViewBounds { scale_min: 0.3, scale_max: 1.0 }
    }
}

impl ViewBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_max <= 1.0 && self.scale_min < self.scale_max) {
            return Err(Error::Config(format!(
                "view bounds must satisfy 0 < scale_min < scale_max <= 1, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

/// Diagonal affine parameters for a batch: per-image x/y scale and x/y
/// translation in normalized coordinates. Each field has shape (B, 1).
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub scale_x: Var,
    pub scale_y: Var,
    pub trans_x: Var,
    pub trans_y: Var,
}

impl AffineParams {
    pub fn identity(batch: usize) -> AffineParams {
        let ones = Var::constant(Array2::<f64>::ones((batch, 1)).into_dyn());
        let zeros = Var::constant(Array2::<f64>::zeros((batch, 1)).into_dyn());
        AffineParams {
            scale_x: ones.clone(),
            scale_y: ones,
            trans_x: zeros.clone(),
            trans_y: zeros,
        }
    }

    /// Dense (B, 4) view of the parameters: [scale_x, scale_y, trans_x, trans_y].
    pub fn to_array(&self) -> Array2<f64> {
        let b = self.scale_x.shape()[0];
        let mut out = Array2::<f64>::zeros((b, 4));
        for (col, v) in [&self.scale_x, &self.scale_y, &self.trans_x, &self.trans_y]
            .iter()
            .enumerate()
        {
            for bi in 0..b {
                out[[bi, col]] = v.array()[[bi, 0].as_ref()];
            }
        }
        out
    }
}

/// Localisation network: a feature trunk followed by a linear head emitting a
/// raw 4-vector per image. With the head zero-initialized the raw vector is
/// zero and the bounded activations land exactly on the identity transform
/// (1, 1, 0, 0).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalisationNet {
    pub trunk: Backbone,
    pub bounds: ViewBounds,
}

impl LocalisationNet {
    /// Small trunk for fast experiments: two 3x3 conv blocks.
    pub fn desk(in_channels: usize) -> LocalisationNet {
        LocalisationNet {
            trunk: Backbone::Conv {
                in_channels,
                channels: vec![8, 16],
                activation: Activation::Relu,
                use_norm: true,
            },
            bounds: ViewBounds::default(),
        }
    }

    /// Full-size trunk: four 3x3 conv blocks with 64 channels each.
    pub fn full(in_channels: usize) -> LocalisationNet {
        LocalisationNet {
            trunk: Backbone::Conv {
                in_channels,
                channels: vec![64, 64, 64, 64],
                activation: Activation::Relu,
                use_norm: true,
            },
            bounds: ViewBounds::default(),
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.trunk.param_shapes();
        let f = self.trunk.feature_dim();
        shapes.push(vec![4, f]);
        shapes.push(vec![4]);
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().len()
    }

    /// Trunk weights random, head weights and bias zero so training starts
    /// from un-warped views.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<ArrayD<f64>> {
        let mut params = self.trunk.init(rng);
        let f = self.trunk.feature_dim();
        params.push(ArrayD::zeros(vec![4, f]));
        params.push(ArrayD::zeros(vec![4]));
        params
    }

    /// Predict clamped affine parameters for a BCHW batch. The raw head
    /// output r maps to scale = clamp(1 + r, scale_min, scale_max) and
    /// translation = tanh(r) * (1 - scale).
    pub fn localise(&self, gamma: &[Var], images: &Var) -> AffineParams {
        let nt = self.trunk.num_params();
        assert_eq!(gamma.len(), nt + 2, "localise: parameter count");
        let feats = self.trunk.forward(&gamma[..nt], images);
        let raw = nn::linear(&feats, &gamma[nt], &gamma[nt + 1]);
        let (lo, hi) = (self.bounds.scale_min, self.bounds.scale_max);
        let scale_x = clamp(&add_scalar(&slice_cols(&raw, 0, 1), 1.0), lo, hi);
        let scale_y = clamp(&add_scalar(&slice_cols(&raw, 1, 2), 1.0), lo, hi);
        let head_x = mul(
            &tanh(&slice_cols(&raw, 2, 3)),
            &add_scalar(&neg(&scale_x), 1.0),
        );
        let head_y = mul(
            &tanh(&slice_cols(&raw, 3, 4)),
            &add_scalar(&neg(&scale_y), 1.0),
        );
        AffineParams { scale_x, scale_y, trans_x: head_x, trans_y: head_y }
    }
}

// ---------------------------------------------------------------------------
// grid construction and warping
// ---------------------------------------------------------------------------

/// Normalized source coordinates for every output pixel; `gx`/`gy` have shape
/// (B, out_h * out_w).
#[derive(Clone, Debug)]
pub struct SampleGrid {
    pub gx: Var,
    pub gy: Var,
    pub out_h: usize,
    pub out_w: usize,
}

fn lattice_row(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if n == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Map the regular target lattice through the diagonal affine transform:
/// source = scale * target + translation, per axis. Linear in the parameters,
/// so gradients flow through plain matrix products.
pub fn affine_grid(params: &AffineParams, out_h: usize, out_w: usize) -> SampleGrid {
    let n = out_h * out_w;
    let us = lattice_row(out_w);
    let vs = lattice_row(out_h);
    let mut u_row = Array2::<f64>::zeros((1, n));
    let mut v_row = Array2::<f64>::zeros((1, n));
    for oy in 0..out_h {
        for ox in 0..out_w {
            u_row[[0, oy * out_w + ox]] = us[ox];
            v_row[[0, oy * out_w + ox]] = vs[oy];
        }
    }
    let u_row = Var::constant(u_row.into_dyn());
    let v_row = Var::constant(v_row.into_dyn());
    let ones = Var::constant(Array2::<f64>::ones((1, n)).into_dyn());
    let gx = add(&matmul(&params.scale_x, &u_row), &matmul(&params.trans_x, &ones));
    let gy = add(&matmul(&params.scale_y, &v_row), &matmul(&params.trans_y, &ones));
    SampleGrid { gx, gy, out_h, out_w }
}

/// Warp a BCHW batch with a sampling grid.
pub fn warp(images: &Var, grid: &SampleGrid) -> Var {
    bilinear_sample(images, &grid.gx, &grid.gy, grid.out_h, grid.out_w)
}

/// Augment and warp a batch through one localisation network. Returns the
/// view batch plus the affine parameters that produced it (for inspection).
pub fn make_view(
    net: &LocalisationNet,
    gamma: &[Var],
    images: &Array4<f64>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Var, AffineParams) {
    let (_, _, h, w) = images.dim();
    let aug = Var::constant(pre_augment(images, cfg, rng).into_dyn());
    let params = net.localise(gamma, &aug);
    let grid = affine_grid(&params, h, w);
    (warp(&aug, &grid), params)
}

/// Produce the two learnable views of a batch. Each branch depends only on
/// its own parameter set; augmentation is drawn independently per branch
/// unless `cfg.shared_across_branches` is set.
pub fn make_views(
    net: &LocalisationNet,
    gamma1: &[Var],
    gamma2: &[Var],
    images: &Array4<f64>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> ((Var, AffineParams), (Var, AffineParams)) {
    if cfg.shared_across_branches {
        let (_, _, h, w) = images.dim();
        let aug = Var::constant(pre_augment(images, cfg, rng).into_dyn());
        let p1 = net.localise(gamma1, &aug);
        let p2 = net.localise(gamma2, &aug);
        let v1 = warp(&aug, &affine_grid(&p1, h, w));
        let v2 = warp(&aug, &affine_grid(&p2, h, w));
        ((v1, p1), (v2, p2))
    } else {
        let view1 = make_view(net, gamma1, images, cfg, rng);
        let view2 = make_view(net, gamma2, images, cfg, rng);
        (view1, view2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tape::{mean_all, mul as vmul, sum_all};
    use crate::tape::{grad, Var};
    use ndarray::{Array1, Array4};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        let mut x = Array4::<f64>::zeros((b, c, h, w));
        x.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        x
    }

    #[test]
    fn flip_is_an_involution() {
        let mut r = rng(1);
        let imgs = random_batch(&mut r, 3, 3, 7, 8);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::disabled()
        };
        let once = pre_augment(&imgs, &cfg, &mut r);
        assert!(once != imgs);
        let twice = pre_augment(&once, &cfg, &mut r);
        assert_eq!(twice, imgs);
    }

    #[test]
    fn disabled_chain_is_identity() {
        let mut r = rng(2);
        let imgs = random_batch(&mut r, 2, 3, 6, 6);
        let out = pre_augment(&imgs, &AugmentConfig::disabled(), &mut r);
        assert_eq!(out, imgs);
    }

    #[test]
    fn blur_spreads_mass_and_preserves_sum() {
        let mut delta = Array4::<f64>::zeros((1, 1, 21, 21));
        delta[[0, 0, 10, 10]] = 1.0;
        let blurred = gaussian_blur(&delta, 2.0);
        let total: f64 = blurred.sum();
        assert!((total - 1.0).abs() < 1e-4, "mass not preserved: {total}");
        assert!(blurred[[0, 0, 10, 10]] < 0.1, "mass did not spread");
        assert!(blurred[[0, 0, 10, 12]] > 0.0);
    }

    #[test]
    fn augmented_output_stays_in_unit_range() {
        let mut r = rng(3);
        let imgs = random_batch(&mut r, 4, 3, 8, 8);
        let cfg = AugmentConfig {
            brightness: 0.9,
            contrast: 0.9,
            saturation: 0.9,
            blur_prob: 1.0,
            blur_sigma: (0.5, 1.5),
            flip_prob: 0.5,
            shared_across_branches: false,
        };
        for _ in 0..5 {
            let out = pre_augment(&imgs, &cfg, &mut r);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = AugmentConfig::default();
        cfg.blur_prob = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.blur_sigma = (0.0, 1.0);
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(ViewBounds { scale_min: 0.0, scale_max: 1.0 }.validate().is_err());
        assert!(ViewBounds::default().validate().is_ok());
    }

    #[test]
    fn zero_initialized_head_predicts_identity() {
        let mut r = rng(4);
        let net = LocalisationNet::desk(3);
        let gamma = crate::encoder::params_to_vars(&net.init(&mut r));
        let imgs = Var::constant(random_batch(&mut r, 3, 3, 8, 8).into_dyn());
        let p = net.localise(&gamma, &imgs);
        let dense = p.to_array();
        for bi in 0..3 {
            assert_eq!(dense[[bi, 0]], 1.0);
            assert_eq!(dense[[bi, 1]], 1.0);
            assert_eq!(dense[[bi, 2]], 0.0);
            assert_eq!(dense[[bi, 3]], 0.0);
        }
    }

    #[test]
    fn predicted_params_respect_bounds() {
        let mut r = rng(5);
        let net = LocalisationNet::desk(3);
        let mut raw = net.init(&mut r);
        // Large random head weights to push the raw outputs well past the
        // clamping range.
        let n = raw.len();
        raw[n - 2].mapv_inplace(|_| r.gen_range(-20.0..20.0));
        raw[n - 1].mapv_inplace(|_| r.gen_range(-20.0..20.0));
        let gamma = crate::encoder::params_to_vars(&raw);
        let imgs = Var::constant(random_batch(&mut r, 6, 3, 8, 8).into_dyn());
        let dense = net.localise(&gamma, &imgs).to_array();
        for bi in 0..6 {
            for axis in 0..2 {
                let s = dense[[bi, axis]];
                let t = dense[[bi, axis + 2]];
                assert!((0.3..=1.0).contains(&s), "scale out of bounds: {s}");
                assert!(t.abs() <= 1.0 - s + 1e-12, "translation out of bounds");
            }
        }
    }

    #[test]
    fn localise_gradient_matches_finite_differences() {
        let mut r = rng(6);
        let net = LocalisationNet {
            trunk: Backbone::Mlp {
                in_dim: 2 * 4 * 4,
                dims: vec![6, 5],
                activation: Activation::Tanh,
            },
            bounds: ViewBounds::default(),
        };
        let mut raw = net.init(&mut r);
        // Bias the raw outputs into the interior of the clamp/tanh ranges so
        // finite differences never straddle a kink.
        let n = raw.len();
        raw[n - 2].mapv_inplace(|_| r.gen_range(-0.05..0.05));
        raw[n - 1] = Array1::from_vec(vec![-0.4, -0.35, 0.2, -0.25]).into_dyn();
        let imgs = random_batch(&mut r, 3, 2, 4, 4);
        let weights = Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0));
        let loss_of = |p: &[ArrayD<f64>]| -> f64 {
            let gamma = crate::encoder::params_to_vars(p);
            let iv = Var::constant(imgs.clone().into_dyn());
            let ap = net.localise(&gamma, &iv);
            let dense = ap.to_array();
            let mut acc = 0.0;
            for bi in 0..3 {
                for col in 0..4 {
                    acc += weights[[bi, col]] * dense[[bi, col]];
                }
            }
            acc
        };
        let gamma = crate::encoder::params_to_vars(&raw);
        let iv = Var::constant(imgs.clone().into_dyn());
        let ap = net.localise(&gamma, &iv);
        let wx = |v: &Var, col: usize| -> Var {
            let col_w = Array2::from_shape_fn((3, 1), |(bi, _)| weights[[bi, col]]);
            sum_all(&vmul(v, &Var::constant(col_w.into_dyn())))
        };
        let loss = add(
            &add(&wx(&ap.scale_x, 0), &wx(&ap.scale_y, 1)),
            &add(&wx(&ap.trans_x, 2), &wx(&ap.trans_y, 3)),
        );
        let analytic: Vec<ArrayD<f64>> = grad(&loss, &gamma, false)
            .iter()
            .map(|g| g.array().clone())
            .collect();
        let numeric = gradcheck::finite_diff(&loss_of, &raw, 1e-4);
        let err = gradcheck::max_rel_error_many(&analytic, &numeric);
        assert!(err < 1e-3, "localise gradcheck failed: {err}");
    }

    #[test]
    fn identity_params_give_identity_lattice() {
        let p = AffineParams::identity(2);
        let g = affine_grid(&p, 3, 5);
        let gx = g.gx.array();
        let gy = g.gy.array();
        for bi in 0..2 {
            for oy in 0..3 {
                for ox in 0..5 {
                    let i = oy * 5 + ox;
                    assert_eq!(gx[[bi, i].as_ref()], -1.0 + 2.0 * ox as f64 / 4.0);
                    assert_eq!(gy[[bi, i].as_ref()], -1.0 + 2.0 * oy as f64 / 2.0);
                }
            }
        }
    }

    #[test]
    fn half_scale_spans_central_half() {
        let half = Var::constant(Array2::from_elem((1, 1), 0.5).into_dyn());
        let zero = Var::constant(Array2::zeros((1, 1)).into_dyn());
        let p = AffineParams {
            scale_x: half.clone(),
            scale_y: half,
            trans_x: zero.clone(),
            trans_y: zero,
        };
        let g = affine_grid(&p, 4, 4);
        let gx = g.gx.array();
        for i in 0..16 {
            let v = gx[[0, i].as_ref()];
            assert!((-0.5..=0.5).contains(&v));
        }
        assert_eq!(gx[[0, 0].as_ref()], -0.5);
        assert_eq!(gx[[0, 3].as_ref()], 0.5);
    }

    #[test]
    fn translation_shifts_the_grid() {
        let one = Var::constant(Array2::ones((1, 1)).into_dyn());
        let zero = Var::constant(Array2::zeros((1, 1)).into_dyn());
        let half = Var::constant(Array2::from_elem((1, 1), 0.5).into_dyn());
        let p = AffineParams {
            scale_x: one.clone(),
            scale_y: one,
            trans_x: half,
            trans_y: zero.clone(),
        };
        let g = affine_grid(&p, 2, 3);
        let gx = g.gx.array();
        assert_eq!(gx[[0, 0].as_ref()], -0.5);
        assert_eq!(gx[[0, 1].as_ref()], 0.5);
        assert_eq!(gx[[0, 2].as_ref()], 1.5);
    }

    #[test]
    fn identity_grid_reproduces_the_input() {
        let mut r = rng(7);
        let imgs = random_batch(&mut r, 2, 3, 8, 8);
        let iv = Var::constant(imgs.clone().into_dyn());
        let g = affine_grid(&AffineParams::identity(2), 8, 8);
        let out = warp(&iv, &g);
        let diff = (out.array() - &imgs.clone().into_dyn())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "identity warp error {diff}");
    }

    #[test]
    fn sampling_at_pixel_centers_reads_exact_pixels() {
        let mut r = rng(8);
        let imgs = random_batch(&mut r, 1, 1, 5, 5);
        let iv = Var::constant(imgs.clone().into_dyn());
        // Grid hitting integer pixel (2, 3): normalized (3/2 - 1, 2/2 - 1).
        let gx = Var::constant(Array2::from_elem((1, 1), 0.5).into_dyn());
        let gy = Var::constant(Array2::from_elem((1, 1), 0.0).into_dyn());
        let out = bilinear_sample(&iv, &gx, &gy, 1, 1);
        assert!((out.array()[[0, 0, 0, 0].as_ref()] - imgs[[0, 0, 2, 3]]).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_linear_in_the_image() {
        let mut r = rng(9);
        let a = random_batch(&mut r, 1, 2, 6, 6);
        let b = random_batch(&mut r, 1, 2, 6, 6);
        let mix = &a * 0.3 + &b * 1.7;
        let gx = Array2::from_shape_fn((1, 9), |_| r.gen_range(-1.2..1.2));
        let gy = Array2::from_shape_fn((1, 9), |_| r.gen_range(-1.2..1.2));
        let gxv = Var::constant(gx.into_dyn());
        let gyv = Var::constant(gy.into_dyn());
        let sample = |img: &Array4<f64>| {
            bilinear_sample(&Var::constant(img.clone().into_dyn()), &gxv, &gyv, 3, 3)
                .array()
                .clone()
        };
        let lhs = sample(&mix);
        let rhs = sample(&a) * 0.3 + sample(&b) * 1.7;
        let diff = (&lhs - &rhs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "linearity violated: {diff}");
    }

    #[test]
    fn grid_gradient_matches_finite_differences() {
        let mut r = rng(10);
        let imgs = random_batch(&mut r, 1, 1, 8, 8);
        // Offsets of 0.31 of a pixel keep every probe away from knots.
        let gx0 = Array2::from_shape_fn((1, 4), |_| {
            let px = r.gen_range(1..6) as f64 + 0.31;
            px / 3.5 - 1.0
        });
        let gy0 = Array2::from_shape_fn((1, 4), |_| {
            let py = r.gen_range(1..6) as f64 + 0.31;
            py / 3.5 - 1.0
        });
        let loss_of = |p: &[ArrayD<f64>]| -> f64 {
            let iv = Var::constant(imgs.clone().into_dyn());
            let out = bilinear_sample(
                &iv,
                &Var::constant(p[0].clone()),
                &Var::constant(p[1].clone()),
                2,
                2,
            );
            out.array().iter().map(|v| v * v).sum()
        };
        let gxv = Var::param(gx0.clone().into_dyn());
        let gyv = Var::param(gy0.clone().into_dyn());
        let iv = Var::constant(imgs.clone().into_dyn());
        let out = bilinear_sample(&iv, &gxv, &gyv, 2, 2);
        let loss = sum_all(&vmul(&out, &out));
        let analytic: Vec<ArrayD<f64>> = grad(&loss, &[gxv, gyv], false)
            .iter()
            .map(|g| g.array().clone())
            .collect();
        let numeric =
            gradcheck::finite_diff(&loss_of, &[gx0.into_dyn(), gy0.into_dyn()], 1e-3);
        let err = gradcheck::max_rel_error_many(&analytic, &numeric);
        assert!(err < 1e-3, "grid gradcheck failed: {err}");
    }

    #[test]
    fn identity_modules_with_augment_disabled_return_the_input() {
        let mut r = rng(11);
        let net = LocalisationNet::desk(3);
        let g1 = crate::encoder::params_to_vars(&net.init(&mut r));
        let g2 = crate::encoder::params_to_vars(&net.init(&mut r));
        let imgs = random_batch(&mut r, 3, 3, 8, 8);
        let ((v1, _), (v2, _)) =
            make_views(&net, &g1, &g2, &imgs, &AugmentConfig::disabled(), &mut r);
        let dyn_imgs = imgs.into_dyn();
        for v in [&v1, &v2] {
            let diff = (v.array() - &dyn_imgs)
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(diff < 1e-6, "identity view error {diff}");
        }
    }

    #[test]
    fn views_preserve_batch_shape() {
        let mut r = rng(12);
        let net = LocalisationNet::desk(3);
        let g1 = crate::encoder::params_to_vars(&net.init(&mut r));
        let g2 = crate::encoder::params_to_vars(&net.init(&mut r));
        let imgs = random_batch(&mut r, 5, 3, 8, 8);
        let ((v1, _), (v2, _)) =
            make_views(&net, &g1, &g2, &imgs, &AugmentConfig::default(), &mut r);
        assert_eq!(v1.shape(), &[5, 3, 8, 8]);
        assert_eq!(v2.shape(), &[5, 3, 8, 8]);
    }

    #[test]
    fn each_view_depends_only_on_its_own_parameters() {
        let mut r = rng(13);
        let net = LocalisationNet::desk(3);
        let mut raw1 = net.init(&mut r);
        let mut raw2 = net.init(&mut r);
        let n = raw1.len();
        for raw in [&mut raw1, &mut raw2] {
            raw[n - 2].mapv_inplace(|_| r.gen_range(-0.3..0.3));
            raw[n - 1].mapv_inplace(|_| r.gen_range(-0.3..0.3));
        }
        let g1 = crate::encoder::params_to_vars(&raw1);
        let g2 = crate::encoder::params_to_vars(&raw2);
        let imgs = random_batch(&mut r, 2, 3, 8, 8);
        let ((v1, _), _) =
            make_views(&net, &g1, &g2, &imgs, &AugmentConfig::disabled(), &mut r);
        let loss = sum_all(&vmul(&v1, &v1));
        let g_wrt_2 = grad(&loss, &g2, false);
        for g in &g_wrt_2 {
            assert!(g.array().iter().all(|&v| v == 0.0));
        }
        let g_wrt_1 = grad(&loss, &g1, false);
        let total: f64 = g_wrt_1.iter().map(|g| g.array().iter().map(|v| v.abs()).sum::<f64>()).sum();
        assert!(total > 0.0, "view carries no gradient to its own parameters");
    }

    #[test]
    fn end_to_end_view_gradient_matches_finite_differences() {
        let mut r = rng(14);
        let net = LocalisationNet {
            trunk: Backbone::Conv {
                in_channels: 1,
                channels: vec![2, 3],
                activation: Activation::Tanh,
                use_norm: false,
            },
            bounds: ViewBounds::default(),
        };
        let mut raw = net.init(&mut r);
        let n = raw.len();
        raw[n - 2].mapv_inplace(|_| r.gen_range(-0.2..0.2));
        raw[n - 1] = Array1::from_vec(vec![-0.3, -0.25, 0.15, -0.2]).into_dyn();
        let imgs = random_batch(&mut r, 2, 1, 8, 8);
        let loss_of = |p: &[ArrayD<f64>]| -> f64 {
            let gamma = crate::encoder::params_to_vars(p);
            let iv = Var::constant(imgs.clone().into_dyn());
            let ap = net.localise(&gamma, &iv);
            let grid = affine_grid(&ap, 8, 8);
            let out = warp(&iv, &grid);
            out.array().iter().map(|v| v * v).sum::<f64>() / out.array().len() as f64
        };
        let gamma = crate::encoder::params_to_vars(&raw);
        let iv = Var::constant(imgs.clone().into_dyn());
        let ap = net.localise(&gamma, &iv);
        let out = warp(&iv, &affine_grid(&ap, 8, 8));
        let loss = mean_all(&vmul(&out, &out));
        let analytic: Vec<ArrayD<f64>> = grad(&loss, &gamma, false)
            .iter()
            .map(|g| g.array().clone())
            .collect();
        let numeric = gradcheck::finite_diff(&loss_of, &raw, 1e-4);
        let err = gradcheck::rel_l2_error(&analytic, &numeric);
        assert!(err < 1e-2, "end-to-end view gradcheck failed: {err}");
    }
}
