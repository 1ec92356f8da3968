use std::time::Instant;
use protoview::config::{DatasetConfig, RunConfig};
use protoview::eval::{desk_train_config, evaluate};

fn envf(k: &str, d: f64) -> f64 { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }
fn envu(k: &str, d: usize) -> usize { std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d) }

fn main() {
    let beta = envf("BETA", 2.0);
    let epochs = envu("EPOCHS", 5);
    let lr = envf("LR", 0.05);
    let mut cfg = RunConfig::default();
    cfg.train = desk_train_config();
    cfg.train.seed = 1;
    cfg.train.beta = beta;
    cfg.train.epochs = epochs;
    cfg.train.initial_lr = lr;
    cfg.train.lr_milestones = vec![protoview::trainer::Milestone { epoch: epochs.saturating_sub(epochs / 4).max(1), lr: lr / 5.0 }];
    if let Ok(ch) = std::env::var("CHANNELS") {
        let channels: Vec<usize> = ch.split(',').map(|s| s.parse().unwrap()).collect();
        cfg.encoder.feature_dim = *channels.last().unwrap();
        cfg.encoder.conv_channels = channels;
    }
    if let DatasetConfig::Synthetic { spec } = &mut cfg.dataset {
        spec.noise_std = envf("NOISE", spec.noise_std);
        spec.samples_per_subcat = envu("SAMPLES", spec.samples_per_subcat);
    }
    cfg.train.m_query_train = envu("MQ", cfg.train.m_query_train);
    cfg.train.n_way = envu("NWAY", cfg.train.n_way);
    cfg.train.tasks_per_batch = envu("TASKS", cfg.train.tasks_per_batch);
    let p = cfg.pipeline().unwrap();
    let (train_set, test_set) = cfg.datasets().unwrap();
    let t0 = Instant::now();
    let (state, _metrics) = protoview::trainer::train(&p, &cfg.train, &train_set, |st, ms| {
        let last = ms.last().unwrap();
        println!("epoch {} done @ {:.0?}: meta {:.3} con {:.3}", st.epoch, t0.elapsed(), last.meta_loss, last.con_loss);
        Ok(())
    }).unwrap();
    let train_time = t0.elapsed();
    let r = evaluate(&p.encoder, &state.encoder.theta, &test_set, 5, 1, 16, 600,
                     &cfg.similarity, cfg.eval.seed).unwrap();
    let rt = evaluate(&p.encoder, &state.encoder.theta, &train_set, 5, 1, 16, 600,
                     &cfg.similarity, cfg.eval.seed).unwrap();
    println!("beta={beta} epochs={epochs} lr={lr}: train {:.0?}; holdout acc = {:.2} +- {:.2}; train-split acc = {:.2}", train_time, r.mean_accuracy, r.ci95, rt.mean_accuracy);
}
