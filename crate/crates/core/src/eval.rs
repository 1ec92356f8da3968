//! Meta-test evaluation: episodic accuracy with confidence intervals,
//! embedding export for cluster analysis, silhouette scoring, and the
//! β-sweep harness.

use std::path::Path;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::datasets::{sample_episode, to_bchw, Dataset};
use crate::encoder::{params_to_consts, EncoderModel};
use crate::error::{Error, Result};
use crate::protohead::{classify, compute_prototypes, SimilarityMetric};
use crate::tape::Var;
use crate::trainer::{self, iteration_rng, Pipeline, TrainConfig, TrainState};

/// Aggregate meta-test result over many episodes.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Mean episode accuracy, percent.
    pub mean_accuracy: f64,
    /// 1.96 * std / sqrt(n), percent; zero for a single episode.
    pub ci95: f64,
    pub n_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(
        per_episode: Vec<f64>,
        n_way: usize,
        k_shot: usize,
        m_query: usize,
    ) -> EvalReport {
        let n = per_episode.len();
        let mean = per_episode.iter().sum::<f64>() / n.max(1) as f64;
        let ci95 = if n > 1 {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        EvalReport { mean_accuracy: mean, ci95, n_episodes: n, n_way, k_shot, m_query, per_episode }
    }
}

/// Episodic accuracy of a frozen encoder. Each episode derives its own RNG
/// from (seed, index), so the result is deterministic and order-independent;
/// episodes are scored in parallel.
pub fn evaluate(
    model: &EncoderModel,
    theta: &[ArrayD<f64>],
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    n_episodes: usize,
    sim: &SimilarityMetric,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Config("evaluate: n_episodes must be positive".into()));
    }
    let per_episode: Result<Vec<f64>> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = iteration_rng(seed, i);
            let ep = sample_episode(dataset, n_way, k_shot, m_query, &mut rng)?;
            let params = params_to_consts(theta);
            let sup = Var::constant(to_bchw(&ep.support_images).into_dyn());
            let qry = Var::constant(to_bchw(&ep.query_images).into_dyn());
            let protos = compute_prototypes(&model.encode(&params, &sup), &ep.support_labels)?;
            let (preds, _) = classify(&model.encode(&params, &qry), &protos, sim);
            let correct = preds
                .iter()
                .zip(&ep.query_labels)
                .filter(|(p, l)| p == l)
                .count();
            Ok(100.0 * correct as f64 / ep.query_labels.len() as f64)
        })
        .collect();
    Ok(EvalReport::from_accuracies(per_episode?, n_way, k_shot, m_query))
}

/// One-row summary CSV for a report.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    w.write_record(["mean_accuracy", "ci95", "n_episodes", "n_way", "k_shot", "m_query"])?;
    w.write_record([
        report.mean_accuracy.to_string(),
        report.ci95.to_string(),
        report.n_episodes.to_string(),
        report.n_way.to_string(),
        report.k_shot.to_string(),
        report.m_query.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Backbone features of every image in the dataset, row per image.
pub fn embed_dataset(
    model: &EncoderModel,
    theta: &[ArrayD<f64>],
    dataset: &Dataset,
) -> Result<Array2<f64>> {
    let params = params_to_consts(theta);
    let n = dataset.len();
    let mut out = Array2::<f64>::zeros((n, model.feature_dim()));
    let batch = 64;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let chunk = dataset
            .images
            .slice(ndarray::s![start..end, .., .., ..])
            .to_owned();
        let x = Var::constant(to_bchw(&chunk).into_dyn());
        let feats = model.encode(&params, &x);
        let fa = feats.array().view().into_dimensionality::<Ix2>().unwrap();
        out.slice_mut(ndarray::s![start..end, ..]).assign(&fa);
        start = end;
    }
    Ok(out)
}

/// Write features + coarse label + fine label as CSV, one row per image.
pub fn export_embeddings(
    model: &EncoderModel,
    theta: &[ArrayD<f64>],
    dataset: &Dataset,
    path: &Path,
) -> Result<()> {
    let feats = embed_dataset(model, theta, dataset)?;
    let d = feats.ncols();
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("fine_label".into());
    w.write_record(&header)?;
    for (i, row) in feats.axis_iter(Axis(0)).enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(dataset.labels[i].to_string());
        let fine = dataset
            .fine_labels
            .as_ref()
            .map_or(dataset.labels[i], |f| f[i]);
        rec.push(fine.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean silhouette coefficient over all points, Euclidean distance.
/// Singleton-cluster points score zero by convention.
pub fn silhouette_score(features: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let n = features.nrows();
    assert_eq!(n, labels.len(), "silhouette: row/label count");
    assert!(n > 1, "silhouette: need at least two points");
    let k = labels.iter().max().unwrap() + 1;
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = features
                .row(i)
                .iter()
                .zip(features.row(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let counts: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let ci = labels[i];
        if counts[ci] <= 1 {
            continue; // s(i) = 0
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[[i, j]];
            }
        }
        let a = sums[ci] / (counts[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Train and meta-test once per β with everything else shared (including the
/// seed). Returns (β, report) rows in input order.
pub fn beta_sweep(base: &RunConfig, betas: &[f64]) -> Result<Vec<(f64, EvalReport)>> {
    let (train_set, test_set) = base.datasets()?;
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let mut cfg = base.clone();
        cfg.train.beta = beta;
        cfg.validate()?;
        let pipeline = cfg.pipeline()?;
        let (state, _) = trainer::train(&pipeline, &cfg.train, &train_set, |_, _| Ok(()))?;
        let report = run_eval(&cfg, &pipeline, &state, &test_set)?;
        log::info!(
            "beta {beta}: {:.2}% +/- {:.2}",
            report.mean_accuracy,
            report.ci95
        );
        rows.push((beta, report));
    }
    Ok(rows)
}

/// Evaluate a trained state under a run config's eval settings.
pub fn run_eval(
    cfg: &RunConfig,
    pipeline: &Pipeline,
    state: &TrainState,
    test_set: &Dataset,
) -> Result<EvalReport> {
    evaluate(
        &pipeline.encoder,
        &state.encoder.theta,
        test_set,
        cfg.eval.n_way,
        cfg.eval.k_shot,
        cfg.eval.m_query,
        cfg.eval.n_episodes,
        &pipeline.similarity,
        cfg.eval.seed,
    )
}

/// Render a β-sweep as an aligned text table.
pub fn sweep_table(rows: &[(f64, EvalReport)]) -> String {
    let mut out = String::from("beta    mean_acc   ci95     episodes\n");
    for (beta, r) in rows {
        out.push_str(&format!(
            "{beta:<7} {:<10.2} {:<8.2} {}\n",
            r.mean_accuracy, r.ci95, r.n_episodes
        ));
    }
    out
}

/// Default desk-scale training configuration used by tests and docs: small
/// encoder, short schedule, single task per batch.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        beta: 2.0,
        initial_lr: 0.05,
        lr_milestones: vec![trainer::Milestone { epoch: 3, lr: 0.01 }],
        eta: 1e-5,
        epsilon: 0.99,
        momentum: 0.9,
        weight_decay: 5e-4,
        differentiate_momentum: false,
        epochs: 5,
        iterations_per_epoch: 200,
        tasks_per_batch: 1,
        n_way: 5,
        k_shot: 1,
        m_query_train: 4,
        m_query_test: 16,
        seed: 0,
        grad_clip: 10.0,
    }
}
