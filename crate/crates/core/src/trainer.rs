//! Two-stage bilevel training loop. Stage one updates the main and momentum
//! encoders from the combined meta + contrastive loss while retaining the
//! computation graph; stage two re-evaluates the meta loss at the updated
//! encoder on the same episode and descends the view-module parameters
//! through the encoder update.

use std::path::Path;

use ndarray::{Array4, ArrayD, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoview::{make_views, AugmentConfig, LocalisationNet};
use crate::contrast::{contrastive_loss, ContrastConfig, NegativeQueue};
use crate::datasets::{sample_episode, to_bchw, Dataset, Episode};
use crate::encoder::{
    init_encoders, momentum_update, params_to_consts, params_to_vars, EncoderModel, EncoderState,
};
use crate::error::{Error, Result};
use crate::protohead::{compute_prototypes, meta_loss, SimilarityMetric};
use crate::tape::{add, grad, scale, sub, Var};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Learning-rate milestone: from `epoch` onward the encoder lr becomes `lr`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub epoch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the contrastive term in the stage-one loss.
    pub beta: f64,
    /// Encoder learning rate before the first milestone.
    pub initial_lr: f64,
    /// Piecewise-constant lr schedule over epochs.
    pub lr_milestones: Vec<Milestone>,
    /// View-module learning rate.
    pub eta: f64,
    /// Momentum-encoder coefficient.
    pub epsilon: f64,
    /// Nesterov momentum for the encoder optimizer. Zero gives plain SGD.
    pub momentum: f64,
    /// L2 weight decay for the encoder optimizer.
    pub weight_decay: f64,
    /// When set, the stage-two gradient flows through the full
    /// momentum/weight-decay transform (with the momentum buffer held
    /// constant) instead of the plain `theta - lr * grad` surrogate.
    pub differentiate_momentum: bool,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Tasks per minibatch; losses are averaged over tasks before updating.
    pub tasks_per_batch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query_train: usize,
    pub m_query_test: usize,
    pub seed: u64,
    /// Global-norm gradient clip, a safety rail; logged when triggered.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 2.0,
            initial_lr: 0.1,
            lr_milestones: vec![
                Milestone { epoch: 20, lr: 0.01 },
                Milestone { epoch: 40, lr: 0.001 },
            ],
            eta: 1e-5,
            epsilon: 0.999,
            momentum: 0.9,
            weight_decay: 5e-4,
            differentiate_momentum: false,
            epochs: 60,
            iterations_per_epoch: 100,
            tasks_per_batch: 4,
            n_way: 5,
            k_shot: 1,
            m_query_train: 4,
            m_query_test: 16,
            seed: 0,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must be in [0, 1], got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.initial_lr <= 0.0 || self.lr_milestones.iter().any(|m| m.lr <= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.tasks_per_batch == 0 {
            return Err(Error::Config("tasks_per_batch must be >= 1".into()));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.m_query_train == 0 || self.m_query_test == 0 {
            return Err(Error::Config(
                "episode shape requires n_way >= 2 and positive shot/query counts".into(),
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder lr for an epoch: the initial rate until the first milestone, then
/// each milestone's rate from its epoch (inclusive) onward.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.initial_lr;
    let mut best = None::<usize>;
    for m in &cfg.lr_milestones {
        if epoch >= m.epoch && best.map_or(true, |b| m.epoch >= b) {
            best = Some(m.epoch);
            lr = m.lr;
        }
    }
    lr
}

// ---------------------------------------------------------------------------
// state
// ---------------------------------------------------------------------------

/// Everything the loop mutates; checkpointing this struct plus the config
/// fully determines the rest of the run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub encoder: EncoderState,
    pub gamma1: Vec<ArrayD<f64>>,
    pub gamma2: Vec<ArrayD<f64>>,
    pub queue: NegativeQueue,
    pub theta_momentum: Vec<ArrayD<f64>>,
    pub iteration: u64,
    pub epoch: usize,
}

/// Model architectures and loss settings, fixed for a run.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub encoder: EncoderModel,
    pub locnet: LocalisationNet,
    pub similarity: SimilarityMetric,
    pub contrast: ContrastConfig,
    pub augment: AugmentConfig,
}

impl TrainState {
    /// Fresh state from the run seed: random encoders, identity-initialized
    /// view modules, empty queue, zero optimizer buffers.
    pub fn init(pipeline: &Pipeline, cfg: &TrainConfig) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
        let encoder = init_encoders(&pipeline.encoder, &mut rng);
        let gamma1 = pipeline.locnet.init(&mut rng);
        let gamma2 = pipeline.locnet.init(&mut rng);
        let queue = NegativeQueue::new(pipeline.contrast.queue_capacity, pipeline.encoder.proj_dim);
        let theta_momentum = encoder
            .theta
            .iter()
            .map(|p| ArrayD::zeros(p.shape().to_vec()))
            .collect();
        TrainState {
            encoder,
            gamma1,
            gamma2,
            queue,
            theta_momentum,
            iteration: 0,
            epoch: 0,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless per-iteration RNG so a resumed run draws the same episodes and
/// augmentations as an uninterrupted one.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(iteration.wrapping_add(1))))
}

// ---------------------------------------------------------------------------
// one optimization step
// ---------------------------------------------------------------------------

/// Scalars logged for each iteration.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub iteration: u64,
    pub epoch: usize,
    pub meta_loss: f64,
    pub con_loss: f64,
    pub total_loss: f64,
    pub gamma_grad_norm: f64,
    pub lr: f64,
    pub queue_fill: usize,
    /// Meta loss re-evaluated at the updated encoder (stage two); absent when
    /// the contrastive path is off.
    pub meta_loss_after: Option<f64>,
}

fn sum_vars(mut vs: Vec<Var>) -> Var {
    let mut acc = vs.pop().expect("sum_vars: empty");
    for v in vs {
        acc = add(&acc, &v);
    }
    acc
}

fn global_norm(grads: &[Var]) -> f64 {
    grads
        .iter()
        .map(|g| g.array().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Support and query images of one episode as a single BCHW batch.
fn episode_images_bchw(ep: &Episode) -> Array4<f64> {
    let s = to_bchw(&ep.support_images);
    let q = to_bchw(&ep.query_images);
    ndarray::concatenate(ndarray::Axis(0), &[s.view(), q.view()]).expect("episode image shapes")
}

fn meta_loss_for_episode(
    model: &EncoderModel,
    theta: &[Var],
    ep: &Episode,
    sim: &SimilarityMetric,
) -> Result<Var> {
    let sup = Var::constant(to_bchw(&ep.support_images).into_dyn());
    let qry = Var::constant(to_bchw(&ep.query_images).into_dyn());
    let sup_feats = model.encode(theta, &sup);
    let protos = compute_prototypes(&sup_feats, &ep.support_labels)?;
    let qry_feats = model.encode(theta, &qry);
    meta_loss(&qry_feats, &ep.query_labels, &protos, sim)
}

/// Run one full two-stage iteration over a minibatch of episodes. Losses are
/// averaged over episodes. `rng` drives the augmentation draws only; the
/// episodes are sampled by the caller from the same per-iteration stream.
pub fn train_step(
    pipeline: &Pipeline,
    cfg: &TrainConfig,
    state: &mut TrainState,
    episodes: &[Episode],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    if episodes.is_empty() {
        return Err(Error::Data("train_step: no episodes".into()));
    }
    let n_tasks = episodes.len() as f64;
    let use_contrast = cfg.beta > 0.0;

    let theta_vars = params_to_vars(&state.encoder.theta);
    let g1_vars = params_to_vars(&state.gamma1);
    let g2_vars = params_to_vars(&state.gamma2);
    let omega_consts = params_to_consts(&state.encoder.omega);

    // Stage one: combined loss over the minibatch against the current queue.
    let mut meta_terms = Vec::new();
    let mut con_terms = Vec::new();
    let mut pending_keys = Vec::new();
    for ep in episodes {
        meta_terms.push(meta_loss_for_episode(
            &pipeline.encoder,
            &theta_vars,
            ep,
            &pipeline.similarity,
        )?);
        if use_contrast {
            let all = episode_images_bchw(ep);
            let ((v1, _), (v2, _)) = make_views(
                &pipeline.locnet,
                &g1_vars,
                &g2_vars,
                &all,
                &pipeline.augment,
                rng,
            );
            let q_feats = pipeline.encoder.encode(&theta_vars, &v1);
            let q_emb = pipeline.encoder.project(&theta_vars, &q_feats);
            let k_feats = pipeline.encoder.encode(&omega_consts, &v2);
            let k_emb = pipeline.encoder.project(&omega_consts, &k_feats);
            con_terms.push(contrastive_loss(&q_emb, &k_emb, &state.queue, &pipeline.contrast)?);
            pending_keys.push(
                k_emb
                    .array()
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("projection shape")
                    .to_owned(),
            );
        }
    }
    let meta_mean = scale(&sum_vars(meta_terms), 1.0 / n_tasks);
    let (con_value, total) = if use_contrast {
        let con_mean = scale(&sum_vars(con_terms), 1.0 / n_tasks);
        let total = add(&meta_mean, &scale(&con_mean, cfg.beta));
        (con_mean.scalar(), total)
    } else {
        (0.0, meta_mean.clone())
    };
    let meta_value = meta_mean.scalar();
    let total_value = total.scalar();
    if !total_value.is_finite() {
        return Err(Error::Numerics(format!(
            "non-finite loss at iteration {}: meta={meta_value} con={con_value}",
            state.iteration
        )));
    }

    // Stage-one backward over theta; the graph is retained so the gradients
    // themselves stay differentiable w.r.t. the view modules.
    let theta_grads = grad(&total, &theta_vars, use_contrast);
    let gnorm = global_norm(&theta_grads);
    if !gnorm.is_finite() {
        return Err(Error::Numerics(format!(
            "non-finite encoder gradient at iteration {}",
            state.iteration
        )));
    }
    let clip = if gnorm > cfg.grad_clip {
        log::warn!(
            "iteration {}: clipping encoder gradient norm {gnorm:.3} to {}",
            state.iteration,
            cfg.grad_clip
        );
        cfg.grad_clip / gnorm
    } else {
        1.0
    };

    // Actual parameter update (Nesterov momentum + weight decay, outside the
    // tape) and, when the contrastive path is live, a differentiable stand-in
    // whose value is pinned to the actual update.
    let mut theta_next_vars = Vec::with_capacity(theta_vars.len());
    for i in 0..theta_vars.len() {
        let g_clipped = theta_grads[i].array() * clip;
        let prev_buf = state.theta_momentum[i].clone();
        let mut step_dir = &g_clipped + &(&state.encoder.theta[i] * cfg.weight_decay);
        if cfg.momentum > 0.0 {
            state.theta_momentum[i] =
                &(&state.theta_momentum[i] * cfg.momentum) + &step_dir;
            step_dir = &step_dir + &(&state.theta_momentum[i] * cfg.momentum);
        }
        let new_theta = &state.encoder.theta[i] - &(&step_dir * lr);
        if use_contrast {
            let gv = scale(&theta_grads[i], clip);
            let surrogate_step = if cfg.differentiate_momentum && cfg.momentum > 0.0 {
                // Same transform as above with the pre-update momentum buffer
                // held constant: linear in the gradient, so second-order
                // information survives.
                let with_wd = add(&gv, &scale(&theta_vars[i], cfg.weight_decay));
                let buf_new =
                    add(&scale(&Var::constant(prev_buf.into_dyn()), cfg.momentum), &with_wd);
                add(&with_wd, &scale(&buf_new, cfg.momentum))
            } else {
                gv
            };
            let tilde = sub(&theta_vars[i], &scale(&surrogate_step, lr));
            let pinned = add(
                &Var::constant(new_theta.clone().into_dyn()),
                &sub(&tilde, &tilde.detach()),
            );
            theta_next_vars.push(pinned);
        }
        state.encoder.theta[i] = new_theta;
    }
    momentum_update(&mut state.encoder, cfg.epsilon)?;

    // Keys produced this step become negatives from the next step onward.
    for keys in &pending_keys {
        state.queue.enqueue(keys)?;
    }

    // Stage two: meta loss at the updated encoder, descended over the view
    // modules through the stage-one update.
    let mut gamma_grad_norm = 0.0;
    let mut meta_after = None;
    if use_contrast {
        let mut meta2_terms = Vec::new();
        for ep in episodes {
            meta2_terms.push(meta_loss_for_episode(
                &pipeline.encoder,
                &theta_next_vars,
                ep,
                &pipeline.similarity,
            )?);
        }
        let meta2 = scale(&sum_vars(meta2_terms), 1.0 / n_tasks);
        meta_after = Some(meta2.scalar());
        let wrt: Vec<Var> = g1_vars.iter().chain(g2_vars.iter()).cloned().collect();
        let gamma_grads = grad(&meta2, &wrt, false);
        gamma_grad_norm = global_norm(&gamma_grads);
        if !gamma_grad_norm.is_finite() {
            return Err(Error::Numerics(format!(
                "non-finite view-module gradient at iteration {}",
                state.iteration
            )));
        }
        let gclip = if gamma_grad_norm > cfg.grad_clip {
            log::warn!(
                "iteration {}: clipping view-module gradient norm {gamma_grad_norm:.3} to {}",
                state.iteration,
                cfg.grad_clip
            );
            cfg.grad_clip / gamma_grad_norm
        } else {
            1.0
        };
        let n1 = state.gamma1.len();
        for (i, g) in gamma_grads.iter().enumerate() {
            let delta = g.array() * (cfg.eta * gclip);
            if i < n1 {
                state.gamma1[i] = &state.gamma1[i] - &delta;
            } else {
                state.gamma2[i - n1] = &state.gamma2[i - n1] - &delta;
            }
        }
    }

    Ok(StepMetrics {
        iteration: state.iteration,
        epoch: state.epoch,
        meta_loss: meta_value,
        con_loss: con_value,
        total_loss: total_value,
        gamma_grad_norm,
        lr,
        queue_fill: state.queue.fill(),
        meta_loss_after: meta_after,
    })
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// Train from a fresh state. `on_epoch` runs after every completed epoch with
/// the state and all metrics so far (checkpointing, logging).
pub fn train<F>(
    pipeline: &Pipeline,
    cfg: &TrainConfig,
    dataset: &Dataset,
    on_epoch: F,
) -> Result<(TrainState, Vec<StepMetrics>)>
where
    F: FnMut(&TrainState, &[StepMetrics]) -> Result<()>,
{
    cfg.validate()?;
    pipeline.contrast.validate()?;
    pipeline.augment.validate()?;
    pipeline.similarity.validate()?;
    let state = TrainState::init(pipeline, cfg);
    resume(pipeline, cfg, dataset, state, on_epoch)
}

/// Continue training from an existing state until `cfg.epochs`. Episode and
/// augmentation draws depend only on (seed, iteration), so resuming from a
/// checkpoint replays the exact remaining schedule.
pub fn resume<F>(
    pipeline: &Pipeline,
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut state: TrainState,
    mut on_epoch: F,
) -> Result<(TrainState, Vec<StepMetrics>)>
where
    F: FnMut(&TrainState, &[StepMetrics]) -> Result<()>,
{
    let mut metrics = Vec::new();
    while state.epoch < cfg.epochs {
        let lr = lr_schedule(state.epoch, cfg);
        for _ in 0..cfg.iterations_per_epoch {
            let mut it_rng = iteration_rng(cfg.seed, state.iteration);
            let mut episodes = Vec::with_capacity(cfg.tasks_per_batch);
            for _ in 0..cfg.tasks_per_batch {
                episodes.push(sample_episode(
                    dataset,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.m_query_train,
                    &mut it_rng,
                )?);
            }
            let m = train_step(pipeline, cfg, &mut state, &episodes, lr, &mut it_rng)?;
            metrics.push(m);
            state.iteration += 1;
        }
        state.epoch += 1;
        on_epoch(&state, &metrics)?;
    }
    Ok((state, metrics))
}

/// Append-only CSV metric log.
pub struct MetricWriter {
    w: csv::Writer<std::fs::File>,
}

impl MetricWriter {
    pub fn create(path: &Path) -> Result<MetricWriter> {
        let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
        w.write_record([
            "iteration",
            "epoch",
            "meta_loss",
            "con_loss",
            "total_loss",
            "gamma_grad_norm",
            "lr",
            "queue_fill",
        ])?;
        w.flush()?;
        Ok(MetricWriter { w })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        self.w.write_record([
            m.iteration.to_string(),
            m.epoch.to_string(),
            m.meta_loss.to_string(),
            m.con_loss.to_string(),
            m.total_loss.to_string(),
            m.gamma_grad_norm.to_string(),
            m.lr.to_string(),
            m.queue_fill.to_string(),
        ])?;
        self.w.flush()?;
        Ok(())
    }
}
