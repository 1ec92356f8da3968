//! Command-line front end: training, evaluation, the beta sweep, embedding
//! export, view dumps, and the finite-difference gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protoview::autoview::make_views;
use protoview::checkpoint;
use protoview::config::RunConfig;
use protoview::datasets::to_bchw;
use protoview::encoder::params_to_vars;
use protoview::eval::{
    beta_sweep, export_embeddings, run_eval, sweep_table, write_report_csv,
};
use protoview::trainer::{self, MetricWriter, TrainState};
use protoview::{Error, Result};

#[derive(Parser)]
#[command(name = "protoview", version, about = "Few-shot prototypical networks with learnable contrastive views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus per-epoch checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the output directory from the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out classes.
    Eval {
        /// Optional when the checkpoint embeds its configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the evaluation seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train and evaluate once per beta value and print a comparison table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated beta values.
        #[arg(long, default_value = "0.5,1.0,2.0,5.0", value_delimiter = ',')]
        betas: Vec<f64>,
    },
    /// Write one CSV row of features per image (plus coarse and fine labels).
    ExportEmbeddings {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; defaults to embeddings.csv in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write (original, view1, view2) image triplets for inspection.
    DumpViews {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of images to dump.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the finite-difference gradient checks; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { config, seed, resume, output } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(dir) = output {
                cfg.output_dir = dir;
            }
            cmd_train(&cfg, resume.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { config, checkpoint, seed, episodes } => {
            let (state, embedded) = checkpoint::load(&checkpoint)?;
            let mut cfg = config_from(config.as_deref(), embedded)?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            if let Some(n) = episodes {
                cfg.eval.n_episodes = n;
            }
            let pipeline = cfg.pipeline()?;
            let (_, test_set) = cfg.datasets()?;
            let report = run_eval(&cfg, &pipeline, &state, &test_set)?;
            println!(
                "{}-way {}-shot, {} episodes: {:.2}% +/- {:.2}",
                cfg.eval.n_way,
                cfg.eval.k_shot,
                report.n_episodes,
                report.mean_accuracy,
                report.ci95
            );
            std::fs::create_dir_all(&cfg.output_dir)?;
            let out = cfg.output_dir.join("eval_report.csv");
            write_report_csv(&report, &out)?;
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, seed, betas } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if betas.is_empty() {
                return Err(Error::Config("sweep: no beta values given".into()));
            }
            let rows = beta_sweep(&cfg, &betas)?;
            print!("{}", sweep_table(&rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportEmbeddings { config, checkpoint, out } => {
            let (state, embedded) = checkpoint::load(&checkpoint)?;
            let cfg = config_from(config.as_deref(), embedded)?;
            let pipeline = cfg.pipeline()?;
            let (_, test_set) = cfg.datasets()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("embeddings.csv"));
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            export_embeddings(&pipeline.encoder, &state.encoder.theta, &test_set, &out)?;
            println!("embeddings written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpViews { config, checkpoint, n, seed } => {
            let (state, embedded) = checkpoint::load(&checkpoint)?;
            let cfg = config_from(config.as_deref(), embedded)?;
            cmd_dump_views(&cfg, &state, n, seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => {
            let results = protoview::checks::run_all(seed)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{}: {} (error {:.3e}, tolerance {:.1e})",
                    r.name,
                    if r.passed() { "pass" } else { "FAIL" },
                    r.error,
                    r.tolerance
                );
                ok &= r.passed();
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

/// Resolve the run configuration for checkpoint-based commands: an explicit
/// `--config` wins, otherwise the copy embedded in the checkpoint is used.
fn config_from(
    explicit: Option<&Path>,
    embedded: Option<serde_json::Value>,
) -> Result<RunConfig> {
    if let Some(path) = explicit {
        return RunConfig::load(path);
    }
    let value = embedded.ok_or_else(|| {
        Error::Config("checkpoint has no embedded config; pass --config".into())
    })?;
    let cfg: RunConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cfg: &RunConfig, resume_from: Option<&Path>) -> Result<()> {
    let pipeline = cfg.pipeline()?;
    let (train_set, _) = cfg.datasets()?;
    std::fs::create_dir_all(cfg.output_dir.join("checkpoints"))?;
    let mut metrics = MetricWriter::create(&cfg.output_dir.join("metrics.csv"))?;
    let cfg_json = serde_json::to_value(cfg)?;
    let on_epoch = |state: &TrainState, step_metrics: &[trainer::StepMetrics]| {
        for m in step_metrics {
            metrics.append(m)?;
        }
        let last = step_metrics.last();
        log::info!(
            "epoch {} finished{}",
            state.epoch,
            last.map(|m| format!(
                ": meta {:.4}, contrast {:.4}, lr {}",
                m.meta_loss, m.con_loss, m.lr
            ))
            .unwrap_or_default()
        );
        let path = cfg
            .output_dir
            .join("checkpoints")
            .join(format!("epoch_{}.json", state.epoch));
        checkpoint::save(state, Some(&cfg_json), &path)
    };
    let (state, _) = match resume_from {
        None => trainer::train(&pipeline, &cfg.train, &train_set, on_epoch)?,
        Some(path) => {
            let (state, _) = checkpoint::load(path)?;
            trainer::resume(&pipeline, &cfg.train, &train_set, state, on_epoch)?
        }
    };
    let last = cfg
        .output_dir
        .join("checkpoints")
        .join(format!("epoch_{}.json", state.epoch));
    println!("training finished; last checkpoint: {}", last.display());
    Ok(())
}

fn cmd_dump_views(cfg: &RunConfig, state: &TrainState, n: usize, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("dump-views: n must be positive".into()));
    }
    let pipeline = cfg.pipeline()?;
    let (train_set, _) = cfg.datasets()?;
    if train_set.len() == 0 {
        return Err(Error::Data("dump-views: empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // sample n images via an episode-free draw: first n of a shuffled index set
    let picks: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        idx.shuffle(&mut rng);
        idx.into_iter().take(n.min(train_set.len())).collect()
    };
    let (h, w, c) = (
        train_set.images.shape()[1],
        train_set.images.shape()[2],
        train_set.images.shape()[3],
    );
    let mut batch = Array4::<f64>::zeros((picks.len(), h, w, c));
    for (row, &i) in picks.iter().enumerate() {
        batch
            .index_axis_mut(ndarray::Axis(0), row)
            .assign(&train_set.images.index_axis(ndarray::Axis(0), i));
    }
    let bchw = to_bchw(&batch);
    let g1 = params_to_vars(&state.gamma1);
    let g2 = params_to_vars(&state.gamma2);
    let ((v1, _), (v2, _)) =
        make_views(&pipeline.locnet, &g1, &g2, &bchw, &pipeline.augment, &mut rng);
    let dir = cfg.output_dir.join("views");
    std::fs::create_dir_all(&dir)?;
    let v1a = v1.array();
    let v2a = v2.array();
    for (row, _) in picks.iter().enumerate() {
        write_png(&dir.join(format!("{row}_orig.png")), &bchw, row)?;
        write_png_dyn(&dir.join(format!("{row}_v1.png")), &v1a, row)?;
        write_png_dyn(&dir.join(format!("{row}_v2.png")), &v2a, row)?;
    }
    println!("{} view triplets written to {}", picks.len(), dir.display());
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one image of a BCHW f64 batch as PNG.
fn write_png(path: &Path, bchw: &Array4<f64>, index: usize) -> Result<()> {
    let (_, c, h, w) = bchw.dim();
    save_chw(path, c, h, w, |ch, y, x| bchw[[index, ch, y, x]])
}

fn write_png_dyn(path: &Path, bchw: &ndarray::ArrayD<f64>, index: usize) -> Result<()> {
    let s = bchw.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    save_chw(path, c, h, w, |ch, y, x| bchw[[index, ch, y, x]])
}

fn save_chw(
    path: &Path,
    c: usize,
    h: usize,
    w: usize,
    pix: impl Fn(usize, usize, usize) -> f64,
) -> Result<()> {
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if c >= 3 {
                [to_u8(pix(0, y, x)), to_u8(pix(1, y, x)), to_u8(pix(2, y, x))]
            } else {
                let g = to_u8(pix(0, y, x));
                [g, g, g]
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}
