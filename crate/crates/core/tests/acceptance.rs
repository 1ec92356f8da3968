//! End-to-end acceptance suite: one test per release gate, each printing a
//! single pass/fail line (visible with `--nocapture`). All tolerances are
//! pinned here, independent of the unit tests.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protoview::checks;
use protoview::config::{DatasetConfig, RunConfig};
use protoview::contrast::{contrastive_loss, fifo_reference, ContrastConfig, NegativeQueue};
use protoview::datasets::{generate_synthetic, sample_episode, to_bchw, SyntheticSpec};
use protoview::encoder::{momentum_update, params_to_vars, EncoderModel, EncoderState};
use protoview::eval::{
    beta_sweep, desk_train_config, embed_dataset, evaluate, silhouette_score, sweep_table,
};
use protoview::protohead::{compute_prototypes, meta_loss, SimilarityMetric};
use protoview::tape::{add, grad, scale, Var};
use protoview::trainer::{self, iteration_rng, train_step, TrainState};

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("[{n}/9] {name}: {} ({detail})", if pass { "pass" } else { "FAIL" });
    assert!(pass, "[{n}/9] {name} failed: {detail}");
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.gen::<f64>() - 0.5);
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    m
}

// ---------------------------------------------------------------------------
// 1. bilinear sampler gradients vs. central finite differences
// ---------------------------------------------------------------------------

#[test]
fn acceptance_1_bilinear_sampler_gradcheck() {
    let t0 = Instant::now();
    let r = checks::bilinear_sampler_check(7, 20);
    let elapsed = t0.elapsed();
    report(
        1,
        "bilinear sampler gradcheck",
        r.passed() && elapsed.as_secs() < 10,
        &format!("max rel error {:.3e} <= {:.0e}, {:?}", r.error, r.tolerance, elapsed),
    );
}

// ---------------------------------------------------------------------------
// 2. identity affine parameters reproduce the input
// ---------------------------------------------------------------------------

#[test]
fn acceptance_2_affine_identity() {
    let r = checks::affine_identity_check(11, 20);
    report(
        2,
        "affine identity reconstruction",
        r.passed(),
        &format!("max abs error {:.3e} <= {:.0e}", r.error, r.tolerance),
    );
}

// ---------------------------------------------------------------------------
// 3. loss oracles: literal term-by-term formula evaluations
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (n_way, k_shot, m_query, dim) = (5usize, 2usize, 3usize, 6usize);
    let mut worst_meta = 0.0f64;
    for _ in 0..50 {
        // random episode-level features
        let sup = Array2::from_shape_fn((n_way * k_shot, dim), |_| rng.gen::<f64>() - 0.5);
        let qry = Array2::from_shape_fn((n_way * m_query, dim), |_| rng.gen::<f64>() - 0.5);
        let sup_labels: Vec<usize> = (0..n_way).flat_map(|c| vec![c; k_shot]).collect();
        let qry_labels: Vec<usize> = (0..m_query).flat_map(|_| 0..n_way).collect();

        let protos =
            compute_prototypes(&Var::constant(sup.clone().into_dyn()), &sup_labels).unwrap();
        let sim = SimilarityMetric::default();
        let got = meta_loss(&Var::constant(qry.clone().into_dyn()), &qry_labels, &protos, &sim)
            .unwrap()
            .scalar();

        // literal evaluation: prototypes as class means, similarity as the
        // negative squared euclidean distance, mean negative log softmax
        let mut h = Array2::<f64>::zeros((n_way, dim));
        for c in 0..n_way {
            let mut acc = Array1::<f64>::zeros(dim);
            let mut cnt = 0.0;
            for (i, &l) in sup_labels.iter().enumerate() {
                if l == c {
                    acc = &acc + &sup.row(i);
                    cnt += 1.0;
                }
            }
            h.row_mut(c).assign(&(&acc / cnt));
        }
        let mut literal = 0.0;
        for (i, &y) in qry_labels.iter().enumerate() {
            let sims: Vec<f64> = (0..n_way)
                .map(|c| {
                    -qry.row(i)
                        .iter()
                        .zip(h.row(c).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            let denom: f64 = sims.iter().map(|s| s.exp()).sum();
            literal += -(sims[y].exp() / denom).ln();
        }
        literal /= qry_labels.len() as f64;
        worst_meta = worst_meta.max((got - literal).abs());
    }

    let mut worst_con = 0.0f64;
    let cfg = ContrastConfig::default();
    for _ in 0..50 {
        let b = 4;
        let q = unit_rows(&mut rng, b, 8);
        let k = unit_rows(&mut rng, b, 8);
        let mut queue = NegativeQueue::new(16, 8);
        queue.enqueue(&unit_rows(&mut rng, 8, 8)).unwrap();
        let got = contrastive_loss(
            &Var::constant(q.clone().into_dyn()),
            &Var::constant(k.clone().into_dyn()),
            &queue,
            &cfg,
        )
        .unwrap()
        .scalar();

        // literal: sum over the batch of -log( e^{q.k/tau} / sum of
        // exponentiated logits ), positive first, then the 8 queue negatives
        let negs = queue.snapshot();
        let mut literal = 0.0;
        for i in 0..b {
            let pos = q.row(i).dot(&k.row(i)) / cfg.temperature;
            let mut denom = if cfg.include_positive_in_denominator { pos.exp() } else { 0.0 };
            for j in 0..negs.nrows() {
                denom += (q.row(i).dot(&negs.row(j)) / cfg.temperature).exp();
            }
            literal += -(pos.exp() / denom).ln();
        }
        worst_con = worst_con.max((got - literal).abs());
    }

    report(
        3,
        "loss formula oracles",
        worst_meta <= 1e-6 && worst_con <= 1e-6,
        &format!("classification loss err {worst_meta:.3e}, contrastive loss err {worst_con:.3e} <= 1e-6"),
    );
}

// ---------------------------------------------------------------------------
// 4. momentum-encoder mixing and queue FIFO invariants
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_momentum_and_queue_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);

    // momentum rule is exact elementwise arithmetic
    let theta: Vec<ArrayD<f64>> =
        vec![ArrayD::from_shape_fn(vec![3, 4], |_| rng.gen::<f64>() - 0.5)];
    let omega: Vec<ArrayD<f64>> =
        vec![ArrayD::from_shape_fn(vec![3, 4], |_| rng.gen::<f64>() - 0.5)];
    let eps = 0.9;
    let mut st = EncoderState { theta: theta.clone(), omega: omega.clone() };
    momentum_update(&mut st, eps).unwrap();
    let mut exact = true;
    for ((o2, o), t) in st.omega.iter().zip(&omega).zip(&theta) {
        for ((&a, &b), &c) in o2.iter().zip(o.iter()).zip(t.iter()) {
            exact &= a == eps * b + (1.0 - eps) * c;
        }
    }

    // queue equals a reference FIFO list model over random enqueue sequences
    let mut fifo_ok = true;
    for _ in 0..1000 {
        let cap = rng.gen_range(1..=8);
        let dim = rng.gen_range(1..=4);
        let mut queue = NegativeQueue::new(cap, dim);
        let n_batches = rng.gen_range(0..=5);
        let mut batches = Vec::new();
        for _ in 0..n_batches {
            let b = rng.gen_range(0..=cap);
            batches.push(unit_rows(&mut rng, b, dim));
        }
        for b in &batches {
            queue.enqueue(b).unwrap();
        }
        let reference = fifo_reference(cap, &batches);
        let snap = queue.snapshot();
        fifo_ok &= snap.nrows() == reference.len();
        for (i, row) in reference.iter().enumerate() {
            fifo_ok &= snap.row(i).iter().zip(row.iter()).all(|(a, b)| a == b);
        }
    }

    // with frozen theta the momentum encoder converges geometrically
    let mut st = EncoderState { theta: theta.clone(), omega };
    for _ in 0..100 {
        momentum_update(&mut st, 0.85).unwrap();
    }
    let drift = st
        .omega
        .iter()
        .zip(&theta)
        .flat_map(|(o, t)| o.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);

    report(
        4,
        "momentum/queue invariants",
        exact && fifo_ok && drift <= 1e-6,
        &format!("mixing exact: {exact}, FIFO model: {fifo_ok}, 100-step drift {drift:.3e} <= 1e-6"),
    );
}

// ---------------------------------------------------------------------------
// 5. second-order view-module gradients vs. finite differences
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_second_order_gradients() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let err = checks::second_order_error(seed, 1e-4).unwrap();
        worst = worst.max(err);
    }
    let elapsed = t0.elapsed();
    report(
        5,
        "second-order gradient check",
        worst <= 0.05 && elapsed.as_secs() < 60,
        &format!("worst rel L2 error {worst:.4} <= 0.05 over 10 seeds, {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// 6. with the contrastive weight at zero, training reduces to a plain
//    prototypical network loop
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_baseline_reduction() {
    let spec = SyntheticSpec {
        num_coarse_classes: 6,
        subcats_per_class: 1,
        samples_per_subcat: 10,
        image_size: 16,
        noise_std: 0.02,
        seed: 66,
        hue_by_subcat: false,
    };
    let dataset = generate_synthetic(&spec).unwrap();
    let mut cfg = desk_train_config();
    cfg.seed = 13;
    cfg.beta = 0.0;
    cfg.tasks_per_batch = 2;
    cfg.epochs = 1;
    cfg.iterations_per_epoch = 10;
    let mut run = RunConfig::default();
    run.encoder.image_size = 16;
    run.encoder.conv_channels = vec![4, 8];
    run.encoder.feature_dim = 8;
    run.encoder.proj_dim = 4;
    run.dataset = DatasetConfig::Synthetic { spec };
    run.train = cfg.clone();
    let pipeline = run.pipeline().unwrap();

    // full trainer with the contrastive path switched off
    let mut state = TrainState::init(&pipeline, &cfg);
    let mut trace = Vec::new();
    for t in 0..10u64 {
        let mut it_rng = iteration_rng(cfg.seed, t);
        let eps: Vec<_> = (0..cfg.tasks_per_batch)
            .map(|_| {
                sample_episode(&dataset, cfg.n_way, cfg.k_shot, cfg.m_query_train, &mut it_rng)
                    .unwrap()
            })
            .collect();
        let m =
            train_step(&pipeline, &cfg, &mut state, &eps, cfg.initial_lr, &mut it_rng).unwrap();
        state.iteration += 1;
        trace.push(m.meta_loss);
    }

    // independent prototypical-network loop: sample, embed, prototype,
    // cross-entropy, then a Nesterov momentum + weight decay step
    let init = TrainState::init(&pipeline, &cfg);
    let model: &EncoderModel = &pipeline.encoder;
    let mut theta = init.encoder.theta.clone();
    let mut buf: Vec<ArrayD<f64>> =
        theta.iter().map(|p| ArrayD::zeros(p.shape().to_vec())).collect();
    let mut baseline = Vec::new();
    for t in 0..10u64 {
        let mut it_rng = iteration_rng(cfg.seed, t);
        let theta_vars = params_to_vars(&theta);
        let mut terms = Vec::new();
        for _ in 0..cfg.tasks_per_batch {
            let ep =
                sample_episode(&dataset, cfg.n_way, cfg.k_shot, cfg.m_query_train, &mut it_rng)
                    .unwrap();
            let sup = Var::constant(to_bchw(&ep.support_images).into_dyn());
            let qry = Var::constant(to_bchw(&ep.query_images).into_dyn());
            let protos =
                compute_prototypes(&model.encode(&theta_vars, &sup), &ep.support_labels).unwrap();
            terms.push(
                meta_loss(
                    &model.encode(&theta_vars, &qry),
                    &ep.query_labels,
                    &protos,
                    &pipeline.similarity,
                )
                .unwrap(),
            );
        }
        let mut acc = terms.pop().unwrap();
        for v in terms {
            acc = add(&acc, &v);
        }
        let loss = scale(&acc, 1.0 / cfg.tasks_per_batch as f64);
        baseline.push(loss.scalar());
        let grads = grad(&loss, &theta_vars, false);
        let gnorm =
            grads.iter().map(|g| g.array().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if gnorm > cfg.grad_clip { cfg.grad_clip / gnorm } else { 1.0 };
        for i in 0..theta.len() {
            let g_clipped = grads[i].array() * clip;
            let mut step_dir = &g_clipped + &(&theta[i] * cfg.weight_decay);
            if cfg.momentum > 0.0 {
                buf[i] = &(&buf[i] * cfg.momentum) + &step_dir;
                step_dir = &step_dir + &(&buf[i] * cfg.momentum);
            }
            theta[i] = &theta[i] - &(&step_dir * cfg.initial_lr);
        }
    }

    let worst = trace
        .iter()
        .zip(&baseline)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    report(
        6,
        "zero-weight contrastive path reduces to the plain baseline",
        worst <= 1e-6,
        &format!("max loss trace difference {worst:.3e} <= 1e-6 over 10 iterations"),
    );
}

// ---------------------------------------------------------------------------
// 7. desk-scale training: held-out accuracy and an untrained baseline
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_desk_scale_learning() {
    let mut cfg = RunConfig::default();
    cfg.train = desk_train_config();
    cfg.train.seed = 1;
    let pipeline = cfg.pipeline().unwrap();
    let (train_set, test_set) = cfg.datasets().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta0 = pipeline.encoder.init(&mut rng);
    let untrained = evaluate(
        &pipeline.encoder,
        &theta0,
        &test_set,
        5,
        1,
        16,
        600,
        &cfg.similarity,
        7,
    )
    .unwrap();

    let t0 = Instant::now();
    let (state, _) = trainer::train(&pipeline, &cfg.train, &train_set, |_, _| Ok(())).unwrap();
    let train_time = t0.elapsed();
    let trained = evaluate(
        &pipeline.encoder,
        &state.encoder.theta,
        &test_set,
        5,
        1,
        16,
        600,
        &cfg.similarity,
        cfg.eval.seed,
    )
    .unwrap();

    let untrained_ok = (untrained.mean_accuracy - 20.0).abs() <= 3.0;
    let trained_ok = trained.mean_accuracy >= 90.0;
    let time_ok = train_time.as_secs() <= 600;
    report(
        7,
        "desk-scale learning",
        untrained_ok && trained_ok && time_ok,
        &format!(
            "untrained {:.2}% (within 20+-3), trained {:.2}% +- {:.2} (>= 90), training {:?} (<= 600s)",
            untrained.mean_accuracy, trained.mean_accuracy, trained.ci95, train_time
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. direction of effect on the merged-class probe: the contrastive path
//    must improve fine-grained structure over the plain baseline
// ---------------------------------------------------------------------------

fn probe_config(seed: u64, beta: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset = DatasetConfig::Synthetic {
        spec: SyntheticSpec {
            num_coarse_classes: 7,
            subcats_per_class: 3,
            samples_per_subcat: 20,
            image_size: 32,
            noise_std: 0.03,
            seed: 88,
            hue_by_subcat: true,
        },
    };
    cfg.holdout_classes = 2;
    cfg.train = desk_train_config();
    cfg.train.seed = seed;
    cfg.train.beta = beta;
    cfg
}

#[test]
fn acceptance_8_fine_grained_direction_of_effect() {
    let seeds = [3u64, 4, 5];
    let mut sil = [0.0f64; 2];
    let mut acc = [0.0f64; 2];
    for &seed in &seeds {
        for (slot, beta) in [(0usize, 0.0f64), (1usize, 2.0f64)] {
            let cfg = probe_config(seed, beta);
            let pipeline = cfg.pipeline().unwrap();
            let (train_set, test_set) = cfg.datasets().unwrap();
            let (state, _) =
                trainer::train(&pipeline, &cfg.train, &train_set, |_, _| Ok(())).unwrap();
            // regroup the held-out images by their fine sub-category ids
            let fine = test_set.by_fine_labels().unwrap();
            let feats = embed_dataset(&pipeline.encoder, &state.encoder.theta, &fine).unwrap();
            sil[slot] += silhouette_score(feats.view(), &fine.labels) / seeds.len() as f64;
            let r = evaluate(
                &pipeline.encoder,
                &state.encoder.theta,
                &fine,
                5,
                1,
                10,
                300,
                &cfg.similarity,
                cfg.eval.seed,
            )
            .unwrap();
            acc[slot] += r.mean_accuracy / seeds.len() as f64;
        }
    }
    let sil_ok = sil[1] > sil[0];
    let acc_ok = acc[1] - acc[0] >= 2.0;
    report(
        8,
        "fine-grained direction of effect",
        sil_ok && acc_ok,
        &format!(
            "silhouette {:.4} (contrastive) > {:.4} (baseline): {sil_ok}; fine accuracy {:.2}% vs {:.2}% (gap {:.2} >= 2): {acc_ok}",
            sil[1], sil[0], acc[1], acc[0], acc[1] - acc[0]
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. the loss-weight sweep harness runs end to end
// ---------------------------------------------------------------------------

#[test]
fn acceptance_9_beta_sweep_harness() {
    let mut cfg = probe_config(9, 2.0);
    // sweep only needs to demonstrate the harness; keep each run short
    cfg.train.epochs = 2;
    cfg.eval.n_episodes = 200;
    let betas = [0.5, 1.0, 2.0, 5.0];
    let rows = beta_sweep(&cfg, &betas).unwrap();
    let table = sweep_table(&rows);
    print!("{table}");
    let ok = rows.len() == betas.len()
        && rows.iter().zip(&betas).all(|((b, r), want)| b == want && r.n_episodes == 200)
        && rows.iter().all(|(_, r)| r.mean_accuracy >= 0.0 && r.mean_accuracy <= 100.0);
    report(9, "loss-weight sweep harness", ok, &format!("{} rows emitted", rows.len()));
}
