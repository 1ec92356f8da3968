//! Main encoder, projection head, and the momentum copy.
//!
//! The desk-scale backbone is a stack of conv blocks
//! (conv 3x3 -> instance norm -> nonlinearity -> 2x2 average pool) followed by
//! global average pooling. A plain MLP backbone is also provided for the tiny
//! pipelines used in gradient tests.

use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::tape::*;
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub conv_channels: Vec<usize>,
    /// Embedding width after global pooling; must equal the last conv width.
    pub feature_dim: usize,
    /// Contrastive projection head output width.
    pub proj_dim: usize,
    pub image_size: usize,
    #[serde(default = "default_act")]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub use_norm: bool,
}

fn default_act() -> Activation {
    Activation::Relu
}
fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            conv_channels: vec![8, 16, 32, 64],
            feature_dim: 64,
            proj_dim: 32,
            image_size: 32,
            activation: Activation::Relu,
            use_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config("encoder: feature_dim/proj_dim must be > 0".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(Error::Config("encoder: conv_channels empty".into()));
        }
        if *self.conv_channels.last().unwrap() != self.feature_dim {
            return Err(Error::Config(
                "encoder: feature_dim must equal the last conv width".into(),
            ));
        }
        if self.image_size % (1 << self.conv_channels.len()) != 0 {
            return Err(Error::Config(format!(
                "encoder: image_size {} not divisible by 2^{} (one pool per block)",
                self.image_size,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }
}

/// Feature backbone architectures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Backbone {
    Conv {
        in_channels: usize,
        channels: Vec<usize>,
        activation: Activation,
        use_norm: bool,
    },
    /// Flattens the image and applies a linear chain; for tiny test pipelines.
    Mlp {
        in_dim: usize,
        dims: Vec<usize>,
        activation: Activation,
    },
}

impl Backbone {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        match self {
            Backbone::Conv { in_channels, channels, .. } => {
                let mut ic = *in_channels;
                for &oc in channels {
                    out.push(vec![oc, ic * 9]);
                    out.push(vec![oc]);
                    ic = oc;
                }
            }
            Backbone::Mlp { in_dim, dims, .. } => {
                let mut i = *in_dim;
                for &o in dims {
                    out.push(vec![o, i]);
                    out.push(vec![o]);
                    i = o;
                }
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().len()
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Conv { channels, .. } => *channels.last().unwrap(),
            Backbone::Mlp { dims, .. } => *dims.last().unwrap(),
        }
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<ArrayD<f64>> {
        let mut out = Vec::new();
        for shape in self.param_shapes() {
            match shape.len() {
                2 => out.push(nn::init_weight(rng, shape[0], shape[1], shape[1])),
                1 => out.push(nn::zeros1(shape[0])),
                _ => unreachable!(),
            }
        }
        out
    }

    /// `x` is a BCHW batch Var.
    pub fn forward(&self, params: &[Var], x: &Var) -> Var {
        match self {
            Backbone::Conv { channels, activation, use_norm, .. } => {
                let geom = ConvGeom { kh: 3, kw: 3, stride: 1, pad: 1 };
                let mut h = x.clone();
                for (i, _) in channels.iter().enumerate() {
                    let w = &params[2 * i];
                    let b = &params[2 * i + 1];
                    h = nn::conv2d(&h, w, b, geom);
                    if *use_norm {
                        h = nn::instance_norm(&h, 1e-5);
                    }
                    h = nn::activate(&h, *activation);
                    h = avgpool2(&h);
                }
                spatial_mean(&h)
            }
            Backbone::Mlp { in_dim, dims, activation } => {
                let bsz = x.shape()[0];
                let mut h = reshape(x, &[bsz, *in_dim]);
                for (i, _) in dims.iter().enumerate() {
                    h = nn::linear(&h, &params[2 * i], &params[2 * i + 1]);
                    if i + 1 < dims.len() {
                        h = nn::activate(&h, *activation);
                    }
                }
                h
            }
        }
    }
}

/// Backbone plus 2-layer MLP projection head. `theta` concatenates backbone
/// parameters and head parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderModel {
    pub backbone: Backbone,
    pub proj_dim: usize,
    pub head_activation: Activation,
}

impl EncoderModel {
    pub fn from_config(cfg: &EncoderConfig) -> Result<EncoderModel> {
        cfg.validate()?;
        Ok(EncoderModel {
            backbone: Backbone::Conv {
                in_channels: 3,
                channels: cfg.conv_channels.clone(),
                activation: cfg.activation,
                use_norm: cfg.use_norm,
            },
            proj_dim: cfg.proj_dim,
            head_activation: cfg.activation,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    fn n_backbone(&self) -> usize {
        self.backbone.num_params()
    }

    pub fn num_params(&self) -> usize {
        self.n_backbone() + 4
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<ArrayD<f64>> {
        let mut params = self.backbone.init(rng);
        let f = self.feature_dim();
        params.push(nn::init_weight(rng, f, f, f));
        params.push(nn::zeros1(f));
        params.push(nn::init_weight(rng, self.proj_dim, f, f));
        params.push(nn::zeros1(self.proj_dim));
        params
    }

    /// Backbone features, (B, feature_dim). Deterministic in the parameters.
    pub fn encode(&self, params: &[Var], images: &Var) -> Var {
        self.backbone.forward(&params[..self.n_backbone()], images)
    }

    /// L2-normalized contrastive embeddings, (B, proj_dim).
    pub fn project(&self, params: &[Var], features: &Var) -> Var {
        let nb = self.n_backbone();
        let h = nn::linear(features, &params[nb], &params[nb + 1]);
        let h = nn::activate(&h, self.head_activation);
        let z = nn::linear(&h, &params[nb + 2], &params[nb + 3]);
        nn::normalize_rows(&z, 1e-12)
    }
}

/// Main parameters and their momentum copy.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub theta: Vec<ArrayD<f64>>,
    pub omega: Vec<ArrayD<f64>>,
}

/// Random init; the momentum copy starts as an exact copy of theta.
pub fn init_encoders(model: &EncoderModel, rng: &mut ChaCha8Rng) -> EncoderState {
    let theta = model.init(rng);
    let omega = theta.clone();
    EncoderState { theta, omega }
}

/// omega' = epsilon * omega + (1 - epsilon) * theta. Plain arithmetic; the
/// momentum copy never joins a gradient tape.
pub fn momentum_update(state: &mut EncoderState, epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("momentum epsilon {epsilon} outside [0, 1]")));
    }
    for (o, t) in state.omega.iter_mut().zip(state.theta.iter()) {
        o.zip_mut_with(t, |ov, &tv| *ov = epsilon * *ov + (1.0 - epsilon) * tv);
    }
    Ok(())
}

pub fn params_to_vars(params: &[ArrayD<f64>]) -> Vec<Var> {
    params.iter().map(|p| Var::param(p.clone())).collect()
}

pub fn params_to_consts(params: &[ArrayD<f64>]) -> Vec<Var> {
    params.iter().map(|p| Var::constant(p.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn tiny_model() -> EncoderModel {
        EncoderModel {
            backbone: Backbone::Conv {
                in_channels: 3,
                channels: vec![4, 6],
                activation: Activation::Tanh,
                use_norm: false,
            },
            proj_dim: 5,
            head_activation: Activation::Tanh,
        }
    }

    fn batch(rng: &mut ChaCha8Rng, b: usize, sz: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, 3, sz, sz), |_| rng.gen::<f64>())
    }

    #[test]
    fn init_copies_theta_to_omega() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = init_encoders(&model, &mut rng);
        for (t, o) in st.theta.iter().zip(st.omega.iter()) {
            assert_eq!(t, o);
        }
    }

    #[test]
    fn init_deterministic() {
        let model = tiny_model();
        let a = init_encoders(&model, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_encoders(&model, &mut ChaCha8Rng::seed_from_u64(9));
        for (x, y) in a.theta.iter().zip(b.theta.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = init_encoders(&model, &mut rng);
        let mut imgs = batch(&mut rng, 3, 8);
        // duplicate row 0 into row 2
        let r0 = imgs.slice(ndarray::s![0, .., .., ..]).to_owned();
        imgs.slice_mut(ndarray::s![2, .., .., ..]).assign(&r0);
        let vars = params_to_consts(&st.theta);
        let f = model.encode(&vars, &Var::constant(imgs.into_dyn()));
        assert_eq!(f.shape(), &[3, 6]);
        let a = f.array();
        for j in 0..6 {
            assert_abs_diff_eq!(a[[0, j]], a[[2, j]], epsilon = 0.0);
        }
    }

    #[test]
    fn project_unit_norm_and_width() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = init_encoders(&model, &mut rng);
        let vars = params_to_consts(&st.theta);
        let imgs = Var::constant(batch(&mut rng, 4, 8).into_dyn());
        let f = model.encode(&vars, &imgs);
        let z = model.project(&vars, &f);
        assert_eq!(z.shape(), &[4, 5]);
        for row in z.array().view().into_dimensionality::<ndarray::Ix2>().unwrap().rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn momentum_update_arithmetic() {
        let mut st = EncoderState {
            theta: vec![ndarray::arr1(&[1.0, 0.0]).into_dyn()],
            omega: vec![ndarray::arr1(&[0.0, 1.0]).into_dyn()],
        };
        momentum_update(&mut st, 0.999).unwrap();
        assert_abs_diff_eq!(st.omega[0][[0]], 0.001, epsilon = 1e-15);
        assert_abs_diff_eq!(st.omega[0][[1]], 0.999, epsilon = 1e-15);
        // epsilon = 0 copies theta exactly
        momentum_update(&mut st, 0.0).unwrap();
        assert_eq!(st.omega[0], st.theta[0]);
        assert!(momentum_update(&mut st, 1.5).is_err());
    }

    #[test]
    fn omega_converges_geometrically_with_frozen_theta() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = init_encoders(&model, &mut rng);
        for o in st.omega.iter_mut() {
            o.mapv_inplace(|v| v + 1.0);
        }
        let eps = 0.9;
        let d0: f64 = st
            .omega
            .iter()
            .zip(st.theta.iter())
            .map(|(o, t)| (o - t).mapv(|v| v * v).sum())
            .sum::<f64>()
            .sqrt();
        for _ in 0..100 {
            momentum_update(&mut st, eps).unwrap();
        }
        let d: f64 = st
            .omega
            .iter()
            .zip(st.theta.iter())
            .map(|(o, t)| (o - t).mapv(|v| v * v).sum())
            .sum::<f64>()
            .sqrt();
        assert_abs_diff_eq!(d, d0 * eps.powi(100), epsilon = 1e-6);
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st = init_encoders(&model, &mut rng);
        let imgs = batch(&mut rng, 2, 8).into_dyn();
        let loss = |params: &[ArrayD<f64>]| {
            let vars = params_to_consts(params);
            let f = model.encode(&vars, &Var::constant(imgs.clone()));
            sum_all(&f).scalar()
        };
        let fd = gradcheck::finite_diff(&loss, &st.theta, 1e-3);
        let vars = params_to_vars(&st.theta);
        let f = model.encode(&vars, &Var::constant(imgs.clone()));
        let g = grad(&sum_all(&f), &vars, false);
        let err = gradcheck::max_rel_error_many(
            &g.iter().map(|v| v.array().clone()).collect::<Vec<_>>(),
            &fd,
        );
        assert!(err < 1e-3, "encode gradcheck rel err {err}");
    }

    #[test]
    fn project_gradient_matches_finite_differences() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let st = init_encoders(&model, &mut rng);
        let feats = ndarray::Array2::from_shape_fn((3, 6), |_| rng.gen::<f64>()).into_dyn();
        let loss = |params: &[ArrayD<f64>]| {
            let vars: Vec<Var> = params.iter().map(|p| Var::param(p.clone())).collect();
            let z = model.project(&vars, &Var::constant(feats.clone()));
            sum_all(&mul(&z, &z)).scalar()
        };
        let fd = gradcheck::finite_diff(&loss, &st.theta, 1e-3);
        let vars = params_to_vars(&st.theta);
        let z = model.project(&vars, &Var::constant(feats.clone()));
        let g = grad(&sum_all(&mul(&z, &z)), &vars, false);
        let err = gradcheck::max_rel_error_many(
            &g.iter().map(|v| v.array().clone()).collect::<Vec<_>>(),
            &fd,
        );
        assert!(err < 1e-3, "project gradcheck rel err {err}");
    }
}
