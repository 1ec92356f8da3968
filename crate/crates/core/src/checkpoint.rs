//! Checkpoint archive: every array the training loop mutates, plus counters
//! and (optionally) the run configuration, in one JSON file. Loading a
//! checkpoint and resuming reproduces an uninterrupted run.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::contrast::NegativeQueue;
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::trainer::TrainState;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ArrayJson {
    fn from_array(a: &ArrayD<f64>) -> ArrayJson {
        ArrayJson {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    fn into_array(self) -> Result<ArrayD<f64>> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "array with shape {:?} carries {} values",
                self.shape,
                self.data.len()
            )));
        }
        ArrayD::from_shape_vec(self.shape.clone(), self.data)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn arrays_json(ps: &[ArrayD<f64>]) -> Vec<ArrayJson> {
    ps.iter().map(ArrayJson::from_array).collect()
}

fn arrays_back(ps: Vec<ArrayJson>) -> Result<Vec<ArrayD<f64>>> {
    ps.into_iter().map(ArrayJson::into_array).collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointJson {
    version: u32,
    iteration: u64,
    epoch: usize,
    theta: Vec<ArrayJson>,
    omega: Vec<ArrayJson>,
    gamma1: Vec<ArrayJson>,
    gamma2: Vec<ArrayJson>,
    theta_momentum: Vec<ArrayJson>,
    queue_buffer: ArrayJson,
    queue_head: usize,
    queue_fill: usize,
    #[serde(default)]
    config: Option<serde_json::Value>,
}

/// Write the full training state (and, when given, the run configuration) to
/// `path` as JSON.
pub fn save(state: &TrainState, config: Option<&serde_json::Value>, path: &Path) -> Result<()> {
    let (buffer, head, fill) = state.queue.state();
    let doc = CheckpointJson {
        version: FORMAT_VERSION,
        iteration: state.iteration,
        epoch: state.epoch,
        theta: arrays_json(&state.encoder.theta),
        omega: arrays_json(&state.encoder.omega),
        gamma1: arrays_json(&state.gamma1),
        gamma2: arrays_json(&state.gamma2),
        theta_momentum: arrays_json(&state.theta_momentum),
        queue_buffer: ArrayJson::from_array(&buffer.into_dyn()),
        queue_head: head,
        queue_fill: fill,
        config: config.cloned(),
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, serde_json::to_vec(&doc)?)?;
    Ok(())
}

/// Restore a training state saved by [`save`]; also returns the embedded run
/// configuration when one was stored.
pub fn load(path: &Path) -> Result<(TrainState, Option<serde_json::Value>)> {
    let bytes = fs::read(path)?;
    let doc: CheckpointJson = serde_json::from_slice(&bytes)?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
            doc.version
        )));
    }
    let buffer = doc
        .queue_buffer
        .into_array()?
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if doc.queue_fill > buffer.nrows() || doc.queue_head >= buffer.nrows().max(1) {
        return Err(Error::Checkpoint("queue counters exceed buffer size".into()));
    }
    let queue: NegativeQueue =
        NegativeQueue::from_state(buffer as Array2<f64>, doc.queue_head, doc.queue_fill);
    let theta = arrays_back(doc.theta)?;
    let omega = arrays_back(doc.omega)?;
    if theta.len() != omega.len() {
        return Err(Error::Checkpoint("theta/omega length mismatch".into()));
    }
    let theta_momentum = arrays_back(doc.theta_momentum)?;
    if theta_momentum.len() != theta.len() {
        return Err(Error::Checkpoint("optimizer state length mismatch".into()));
    }
    Ok((
        TrainState {
            encoder: EncoderState { theta, omega },
            gamma1: arrays_back(doc.gamma1)?,
            gamma2: arrays_back(doc.gamma2)?,
            queue,
            theta_momentum,
            iteration: doc.iteration,
            epoch: doc.epoch,
        },
        doc.config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoview::{AugmentConfig, LocalisationNet};
    use crate::contrast::ContrastConfig;
    use crate::encoder::{Backbone, EncoderModel};
    use crate::nn::Activation;
    use crate::protohead::SimilarityMetric;
    use crate::trainer::{Pipeline, TrainConfig};

    fn pipeline() -> Pipeline {
        Pipeline {
            encoder: EncoderModel {
                backbone: Backbone::Conv {
                    in_channels: 3,
                    channels: vec![4, 8],
                    activation: Activation::Relu,
                    use_norm: true,
                },
                proj_dim: 4,
                head_activation: Activation::Relu,
            },
            locnet: LocalisationNet::desk(3),
            similarity: SimilarityMetric::default(),
            contrast: ContrastConfig { queue_capacity: 16, ..ContrastConfig::default() },
            augment: AugmentConfig::disabled(),
        }
    }

    #[test]
    fn round_trips_every_field() {
        let p = pipeline();
        let cfg = TrainConfig { seed: 42, ..TrainConfig::default() };
        let mut state = TrainState::init(&p, &cfg);
        state.iteration = 17;
        state.epoch = 3;
        state
            .queue
            .enqueue(&{
                let mut k = ndarray::Array2::<f64>::zeros((2, 4));
                k[[0, 0]] = 1.0;
                k[[1, 1]] = 1.0;
                k
            })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let meta = serde_json::json!({"note": "test"});
        save(&state, Some(&meta), &path).unwrap();
        let (loaded, cfg_back) = load(&path).unwrap();
        assert_eq!(loaded.iteration, 17);
        assert_eq!(loaded.epoch, 3);
        assert_eq!(cfg_back, Some(meta));
        assert_eq!(loaded.encoder.theta, state.encoder.theta);
        assert_eq!(loaded.encoder.omega, state.encoder.omega);
        assert_eq!(loaded.gamma1, state.gamma1);
        assert_eq!(loaded.gamma2, state.gamma2);
        assert_eq!(loaded.theta_momentum, state.theta_momentum);
        assert_eq!(loaded.queue.fill(), state.queue.fill());
        assert_eq!(loaded.queue.snapshot(), state.queue.snapshot());
    }

    #[test]
    fn rejects_corrupt_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let doc = serde_json::json!({
            "version": 1, "iteration": 0, "epoch": 0,
            "theta": [{"shape": [2, 2], "data": [1.0]}],
            "omega": [], "gamma1": [], "gamma2": [], "theta_momentum": [],
            "queue_buffer": {"shape": [1, 1], "data": [0.0]},
            "queue_head": 0, "queue_fill": 0
        });
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        assert!(load(&path).is_err());
    }
}
