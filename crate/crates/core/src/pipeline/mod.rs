//! End-to-end training and detection on top of the building blocks.

mod detect;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use detect::{detect_scans, detect_volume, detection_records};
pub use train::{train, EpochStats, TrainState};

use crate::config::{PreprocessConfig, RunConfig};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, restore_params, save_checkpoint, Checkpoint};
use crate::nn::net::{FpHead, NetConfig, ProposalNet};
use crate::nn::sgd::{Sgd, SgdConfig};
use crate::nn::Tensor;
use crate::phantom::{read_truth, GroundTruthEmbolus};
use crate::volume::{normalize_hu_window, read_volume, resample_isotropic, Interpolation, Volume};

/// Deterministic RNG for one named stream under the run seed.
pub fn stream_rng(seed: u64, stream: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::from_seed(d.into())
}

/// A preprocessed scan: isotropic, intensities in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Scan {
    pub id: String,
    pub volume: Volume,
    pub emboli: Vec<GroundTruthEmbolus>,
}

pub fn preprocess(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let iso = resample_isotropic(vol, cfg.spacing_mm, Interpolation::Trilinear)?;
    Ok(normalize_hu_window(&iso, cfg.hu_min, cfg.hu_max))
}

/// Load every volume named in the dataset's ground-truth list, in order.
pub fn load_dataset(dir: &Path, cfg: &PreprocessConfig) -> Result<Vec<Scan>> {
    read_truth(dir)?
        .into_iter()
        .map(|t| {
            let vol = read_volume(&dir.join(format!("{}.json", t.scan_id)))?;
            Ok(Scan {
                id: t.scan_id,
                volume: preprocess(&vol, cfg)?,
                emboli: t.emboli,
            })
        })
        .collect()
}

/// Proposal network plus false-positive classifier, f32 throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: ProposalNet<f32>,
    pub fp: FpHead<f32>,
}

/// Flattened classifier input size for a network and alignment geometry.
pub fn fp_inputs(net: &NetConfig, roi: usize) -> usize {
    3 * net.feature_channels() * roi * roi
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, "init", 0);
        let net = ProposalNet::new(&cfg.net, &mut rng);
        let fp = FpHead::new(
            fp_inputs(&cfg.net, cfg.align.roi_size),
            cfg.net.fp_hidden,
            &mut rng,
        );
        Self { net, fp }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            net: self.net.zeros_like(),
            fp: self.fp.zeros_like(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut v = self.net.named_params();
        v.extend(self.fp.named_params());
        v
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Separate optimisers so the classifier is untouched (no decay, no
/// momentum) while only the proposal network trains.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub net: Sgd<f32>,
    pub fp: Sgd<f32>,
}

impl Optimizers {
    pub fn new(model: &Model, cfg: SgdConfig) -> Self {
        Self {
            net: Sgd::new(cfg, &model.net.params()),
            fp: Sgd::new(cfg, &model.fp.params()),
        }
    }

    pub fn velocities(&self) -> Vec<&Tensor<f32>> {
        self.net.velocity.iter().chain(&self.fp.velocity).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedState {
    train: Option<TrainState>,
}

/// Write a model (and optionally optimiser state plus training progress).
pub fn save_model(
    dir: &Path,
    cfg: &RunConfig,
    model: &Model,
    opt: Option<(&Optimizers, &TrainState)>,
) -> Result<()> {
    let velocity = opt.map(|(o, _)| o.velocities());
    let state = SavedState {
        train: opt.map(|(_, s)| s.clone()),
    };
    save_checkpoint(
        dir,
        &cfg.to_json(),
        &model.named_params(),
        velocity.as_deref(),
        serde_json::to_value(state).expect("state serialises"),
    )
}

/// A model restored from disk with the config it was trained under.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: Model,
    pub optimizers: Option<Optimizers>,
    pub train_state: Option<TrainState>,
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let ckpt: Checkpoint = load_checkpoint(dir)?;
    let config: RunConfig =
        serde_json::from_value(ckpt.meta.config.clone()).map_err(|e| Error::Format {
            path: dir.join("meta.json"),
            line: 0,
            msg: format!("stored config: {e}"),
        })?;
    let mut model = Model::new(&config);
    let targets = {
        let net_names: Vec<String> = model
            .net
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let fp_names: Vec<String> = model
            .fp
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut t: Vec<(String, &mut Tensor<f32>)> =
            net_names.into_iter().zip(model.net.params_mut()).collect();
        t.extend(fp_names.into_iter().zip(model.fp.params_mut()));
        t
    };
    restore_params(&ckpt.meta.layers, &ckpt.params, targets)?;
    let state: SavedState =
        serde_json::from_value(ckpt.meta.state.clone()).unwrap_or(SavedState { train: None });
    let optimizers = ckpt.velocity.map(|v| {
        let mut o = Optimizers::new(&model, config.train.sgd());
        let n = o.net.velocity.len();
        for (dst, src) in o
            .net
            .velocity
            .iter_mut()
            .chain(o.fp.velocity.iter_mut())
            .zip(v)
        {
            *dst = src;
        }
        debug_assert_eq!(o.net.velocity.len(), n);
        o
    });
    Ok(LoadedModel {
        config,
        model,
        optimizers,
        train_state: state.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.net.widths = [2, 2, 4, 4, 4, 4];
        c.net.head_hidden = 4;
        c.net.fp_hidden = 4;
        c.train.crop_side = 32;
        c.phantom.dims = [48; 3];
        c.phantom.n_vessels = 3;
        c.phantom.n_emboli = 2;
        c.detect.tile_side = 48;
        c
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = tiny_config();
        let model = Model::new(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let opt = Optimizers::new(&model, cfg.train.sgd());
        let st = TrainState::default();
        save_model(dir.path(), &cfg, &model, Some((&opt, &st))).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.config, cfg);
        assert_eq!(back.optimizers.unwrap(), opt);
        assert_eq!(back.train_state.unwrap(), st);
    }

    #[test]
    fn streams_differ() {
        use rand::Rng;
        let a: u64 = stream_rng(1, "x", 0).random();
        let b: u64 = stream_rng(1, "x", 1).random();
        let c: u64 = stream_rng(1, "x", 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
