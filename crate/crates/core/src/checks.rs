//! Self-contained finite-difference verification suites. These are the same
//! oracles the test suite pins down, packaged so the CLI can re-run them on
//! any build (`gradcheck` subcommand).

use ndarray::{Array1, Array2, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoview::{affine_grid, warp, AugmentConfig, LocalisationNet, ViewBounds};
use crate::contrast::{ContrastConfig, NegativeQueue};
use crate::datasets::Episode;
use crate::encoder::{params_to_vars, Backbone, EncoderModel, EncoderState};
use crate::error::Result;
use crate::gradcheck;
use crate::nn::Activation;
use crate::protohead::SimilarityMetric;
use crate::tape::{bilinear_sample, grad, mean_all, mul, sum_all, Var};
use crate::trainer::{train_step, Pipeline, TrainConfig, TrainState};

/// Outcome of one verification: worst observed error against its tolerance.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

fn random_images(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn((b, c, h, w), |_| rng.gen_range(0.0..1.0))
}

/// Analytic vs. central-difference gradients of the bilinear sampler with
/// respect to both the grid coordinates and the image, probed away from
/// integer (knot) coordinates.
pub fn bilinear_sampler_check(seed: u64, n_images: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_images {
        let img = random_images(&mut rng, 1, 1, 8, 8);
        // Fractional offsets in [0.2, 0.8] keep probes off the knots even
        // after the finite-difference step.
        let coord = |rng: &mut ChaCha8Rng| {
            let p = rng.gen_range(1..6) as f64 + rng.gen_range(0.2..0.8);
            p / 3.5 - 1.0
        };
        let gx0 = Array2::from_shape_fn((1, 4), |_| coord(&mut rng)).into_dyn();
        let gy0 = Array2::from_shape_fn((1, 4), |_| coord(&mut rng)).into_dyn();
        let img0 = img.clone().into_dyn();
        let loss_of = |p: &[ArrayD<f64>]| -> f64 {
            let out = bilinear_sample(
                &Var::constant(p[2].clone()),
                &Var::constant(p[0].clone()),
                &Var::constant(p[1].clone()),
                2,
                2,
            );
            out.array().iter().map(|v| v * v).sum()
        };
        let gxv = Var::param(gx0.clone());
        let gyv = Var::param(gy0.clone());
        let iv = Var::param(img0.clone());
        let out = bilinear_sample(&iv, &gxv, &gyv, 2, 2);
        let loss = sum_all(&mul(&out, &out));
        let analytic: Vec<ArrayD<f64>> = grad(&loss, &[gxv, gyv, iv], false)
            .iter()
            .map(|g| g.array().clone())
            .collect();
        let numeric = gradcheck::finite_diff(&loss_of, &[gx0, gy0, img0], 1e-3);
        worst = worst.max(gradcheck::max_rel_error_many(&analytic, &numeric));
    }
    CheckResult { name: "bilinear_sampler", error: worst, tolerance: 1e-3 }
}

/// Identity affine parameters must reproduce the input exactly (up to
/// floating-point roundoff).
pub fn affine_identity_check(seed: u64, n_images: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_images {
        let img = random_images(&mut rng, 2, 3, 8, 8);
        let iv = Var::constant(img.clone().into_dyn());
        let grid = affine_grid(&crate::autoview::AffineParams::identity(2), 8, 8);
        let out = warp(&iv, &grid);
        let diff = (out.array() - &img.into_dyn())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(diff);
    }
    CheckResult { name: "affine_identity", error: worst, tolerance: 1e-6 }
}

/// Gradient of a view's energy with respect to the localisation-network
/// parameters, through grid construction and sampling.
pub fn view_pipeline_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = LocalisationNet {
        trunk: Backbone::Conv {
            in_channels: 1,
            channels: vec![2, 3],
            activation: Activation::Tanh,
            use_norm: false,
        },
        bounds: ViewBounds::default(),
    };
    let mut raw = net.init(&mut rng);
    let n = raw.len();
    raw[n - 2].mapv_inplace(|_| rng.gen_range(-0.2..0.2));
    raw[n - 1] = Array1::from_vec(vec![-0.3, -0.25, 0.15, -0.2]).into_dyn();
    let imgs = random_images(&mut rng, 2, 1, 8, 8);
    let loss_of = |p: &[ArrayD<f64>]| -> f64 {
        let gamma = params_to_vars(p);
        let iv = Var::constant(imgs.clone().into_dyn());
        let ap = net.localise(&gamma, &iv);
        let out = warp(&iv, &affine_grid(&ap, 8, 8));
        out.array().iter().map(|v| v * v).sum::<f64>() / out.array().len() as f64
    };
    let gamma = params_to_vars(&raw);
    let iv = Var::constant(imgs.clone().into_dyn());
    let ap = net.localise(&gamma, &iv);
    let out = warp(&iv, &affine_grid(&ap, 8, 8));
    let loss = mean_all(&mul(&out, &out));
    let analytic: Vec<ArrayD<f64>> = grad(&loss, &gamma, false)
        .iter()
        .map(|g| g.array().clone())
        .collect();
    let numeric = gradcheck::finite_diff(&loss_of, &raw, 1e-4);
    CheckResult {
        name: "view_pipeline",
        error: gradcheck::rel_l2_error(&analytic, &numeric),
        tolerance: 1e-2,
    }
}

/// Miniature two-stage setup: MLP encoder with 8-dim features, MLP
/// localisation trunks, plain-SGD inner step, pre-filled queue, one 2-way
/// episode of 4x4 single-channel images.
pub struct TinyTwoStage {
    pub pipeline: Pipeline,
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub episodes: Vec<Episode>,
    pub lr: f64,
}

pub fn tiny_two_stage(seed: u64) -> TinyTwoStage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (4usize, 4usize, 1usize);
    let in_dim = h * w * c;
    let pipeline = Pipeline {
        encoder: EncoderModel {
            backbone: Backbone::Mlp {
                in_dim,
                dims: vec![8, 8],
                activation: Activation::Tanh,
            },
            proj_dim: 4,
            head_activation: Activation::Tanh,
        },
        locnet: LocalisationNet {
            trunk: Backbone::Mlp { in_dim, dims: vec![6], activation: Activation::Tanh },
            bounds: ViewBounds::default(),
        },
        similarity: SimilarityMetric::default(),
        contrast: ContrastConfig {
            queue_capacity: 16,
            ..ContrastConfig::default()
        },
        augment: AugmentConfig::disabled(),
    };
    let cfg = TrainConfig {
        beta: 1.0,
        initial_lr: 0.05,
        lr_milestones: vec![],
        eta: 1.0,
        epsilon: 0.99,
        momentum: 0.0,
        weight_decay: 0.0,
        differentiate_momentum: false,
        epochs: 1,
        iterations_per_epoch: 1,
        tasks_per_batch: 1,
        n_way: 2,
        k_shot: 1,
        m_query_train: 1,
        m_query_test: 1,
        seed,
        grad_clip: 1e12,
    };

    let theta = pipeline.encoder.init(&mut rng);
    // Localisation nets biased into the interior of the clamp/tanh ranges so
    // every probe stays away from activation kinks.
    let mut make_gamma = |rng: &mut ChaCha8Rng| {
        let mut g = pipeline.locnet.init(rng);
        let n = g.len();
        g[n - 2].mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        g[n - 1] = Array1::from_vec(vec![-0.35, -0.3, 0.1, -0.2]).into_dyn();
        g
    };
    let gamma1 = make_gamma(&mut rng);
    let gamma2 = make_gamma(&mut rng);

    let mut queue = NegativeQueue::new(pipeline.contrast.queue_capacity, pipeline.encoder.proj_dim);
    let mut keys = Array2::<f64>::zeros((8, pipeline.encoder.proj_dim));
    for mut row in keys.rows_mut() {
        let mut v: Vec<f64> = (0..row.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        for (slot, x) in row.iter_mut().zip(&v) {
            *slot = *x;
        }
    }
    queue.enqueue(&keys).unwrap();

    let omega = theta.clone();
    let theta_momentum = theta.iter().map(|p| ArrayD::zeros(p.shape().to_vec())).collect();
    let state = TrainState {
        encoder: EncoderState { theta, omega },
        gamma1,
        gamma2,
        queue,
        theta_momentum,
        iteration: 0,
        epoch: 0,
    };

    let img = |rng: &mut ChaCha8Rng| Array4::from_shape_fn((2, h, w, c), |_| rng.gen_range(0.0..1.0));
    let episodes = vec![Episode {
        support_images: img(&mut rng),
        support_labels: vec![0, 1],
        query_images: img(&mut rng),
        query_labels: vec![0, 1],
        class_map: vec![0, 1],
        support_indices: vec![0, 1],
        query_indices: vec![2, 3],
    }];

    TinyTwoStage { pipeline, cfg, state, episodes, lr: 0.05 }
}

/// Relative L2 error between the analytic view-module gradient of the
/// stage-two meta loss and central finite differences through the whole
/// two-stage step.
pub fn second_order_error(seed: u64, fd_step: f64) -> Result<f64> {
    let setup = tiny_two_stage(seed);

    // Analytic gradient, recovered from the eta = 1 update: the step applies
    // gamma -= eta * grad with clipping disabled.
    let mut st = setup.state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_step(&setup.pipeline, &setup.cfg, &mut st, &setup.episodes, setup.lr, &mut rng)?;
    let mut analytic: Vec<ArrayD<f64>> = Vec::new();
    for (before, after) in setup.state.gamma1.iter().zip(&st.gamma1) {
        analytic.push(before - after);
    }
    for (before, after) in setup.state.gamma2.iter().zip(&st.gamma2) {
        analytic.push(before - after);
    }

    let n1 = setup.state.gamma1.len();
    let mut params: Vec<ArrayD<f64>> = setup.state.gamma1.clone();
    params.extend(setup.state.gamma2.iter().cloned());
    let objective = |p: &[ArrayD<f64>]| -> f64 {
        let mut st = setup.state.clone();
        st.gamma1 = p[..n1].to_vec();
        st.gamma2 = p[n1..].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = train_step(&setup.pipeline, &setup.cfg, &mut st, &setup.episodes, setup.lr, &mut rng)
            .expect("two-stage step");
        m.meta_loss_after.expect("stage two ran")
    };
    let numeric = gradcheck::finite_diff(&objective, &params, fd_step);
    Ok(gradcheck::rel_l2_error(&analytic, &numeric))
}

/// Second-order check packaged as a pass/fail result (single seed).
pub fn second_order_check(seed: u64) -> Result<CheckResult> {
    Ok(CheckResult {
        name: "second_order_view_gradient",
        error: second_order_error(seed, 1e-4)?,
        tolerance: 0.05,
    })
}

/// Every finite-difference suite at CLI-friendly sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        bilinear_sampler_check(seed, 20),
        affine_identity_check(seed.wrapping_add(1), 10),
        view_pipeline_check(seed.wrapping_add(2)),
        second_order_check(seed.wrapping_add(3))?,
    ])
}
