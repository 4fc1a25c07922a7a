//! The training loop: seeded shuffling, gradient accumulation over
//! mini-batches, Adam with the one-drop schedule, a CSV loss log, and
//! checkpoints that bundle parameters with the full run configuration.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::fusion::{init_params, FusionConfig, Variant};
use crate::geometry::{make_hypotheses, HypothesisSet};
use crate::losses::{final_loss, range_mask, LossConfig};
use crate::optim::{Adam, OptimizerConfig};
use crate::pipeline::{build_sample_volumes, forward_on_tape, SampleVolumes};
use crate::store::{ParamLeaves, ParamStore};
use crate::synthdata::LoadedScene;
use crate::tape::Tape;
use crate::tensor::{Dtype, Scalar};

/// Raster precision a run computes in. The container format keeps each
/// tensor's own dtype, so checkpoints load under either setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = CueError;

    fn from_str(s: &str) -> Result<Precision> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CueError::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Everything one run needs, serializable as a single JSON document and
/// embedded into every checkpoint it writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// (height, width)
    pub resolution: (usize, usize),
    pub d_min: f64,
    pub d_max: f64,
    pub m: usize,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl RunConfig {
    /// Defaults sized so a full train plus eval finishes in minutes on one
    /// core.
    pub fn desk_default() -> RunConfig {
        let epochs = 30;
        RunConfig {
            resolution: (64, 96),
            d_min: 2.0,
            d_max: 30.0,
            m: 16,
            fusion: FusionConfig::desk_default(16, Variant::Full),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::desk_default(epochs),
            epochs,
            batch_size: 4,
            seed: 7,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h == 0 || w == 0 {
            return Err(CueError::Config(format!("resolution {h}x{w}")));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(CueError::Config(format!(
                "depth range [{}, {}] must be positive and increasing",
                self.d_min, self.d_max
            )));
        }
        if self.m < 2 {
            return Err(CueError::Config(format!("m must be >= 2, got {}", self.m)));
        }
        if self.fusion.m != self.m {
            return Err(CueError::Config(format!(
                "fusion config expects m {}, run sets {}",
                self.fusion.m, self.m
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CueError::Config(format!(
                "epochs {} and batch_size {} must be positive",
                self.epochs, self.batch_size
            )));
        }
        self.fusion.validate()?;
        self.loss.validate()?;
        self.optimizer.validate(self.epochs)?;
        Ok(())
    }

    pub fn hypotheses(&self) -> Result<HypothesisSet> {
        make_hypotheses(self.d_min, self.d_max, self.m)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub const CHECKPOINT_PARAMS: &str = "params.dft1c";
pub const CHECKPOINT_CONFIG: &str = "config.json";
pub const LOSS_LOG: &str = "loss_log.csv";

/// Writes `params.dft1c` and `config.json` under `dir`, creating it.
pub fn save_checkpoint<E: Scalar>(
    dir: impl AsRef<Path>,
    store: &ParamStore<E>,
    cfg: &RunConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CueError::io(dir, e))?;
    store.save(dir.join(CHECKPOINT_PARAMS))?;
    std::fs::write(dir.join(CHECKPOINT_CONFIG), cfg.to_json()?)
        .map_err(|e| CueError::io(dir.join(CHECKPOINT_CONFIG), e))?;
    Ok(())
}

/// Loads a checkpoint directory back into memory, validating the config.
pub fn load_checkpoint<E: Scalar>(dir: impl AsRef<Path>) -> Result<(ParamStore<E>, RunConfig)> {
    let dir = dir.as_ref();
    let store = ParamStore::<E>::load(dir.join(CHECKPOINT_PARAMS))?;
    let text = std::fs::read_to_string(dir.join(CHECKPOINT_CONFIG))
        .map_err(|e| CueError::io(dir.join(CHECKPOINT_CONFIG), e))?;
    let cfg = RunConfig::from_json(&text)?;
    Ok((store, cfg))
}

/// One logged optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Mean optimized loss over the batch.
    pub loss: f64,
    pub si: f64,
    pub vnl: f64,
    /// Mean diagnostic loss of the monocular input over the batch.
    pub mono: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,step,lr,loss,si,vnl,mono";

pub fn format_step_record(r: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.step, r.lr, r.loss, r.si, r.vnl, r.mono
    )
}

/// Result of a full training run.
#[derive(Debug)]
pub struct TrainOutcome<E: Scalar> {
    pub store: ParamStore<E>,
    pub log: Vec<StepRecord>,
}

fn shuffle_seed(base: u64, epoch: u64) -> u64 {
    base ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch.wrapping_add(1)))
}

/// Per-sample seed for the loss's triplet sampling; stable across epochs so
/// a given sample always contributes the same virtual-normal probes.
fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add(index as u64)
}

/// Runs the configured number of epochs over `scenes` and returns the
/// trained parameters plus the per-step loss log. `on_step`, when given,
/// sees every record as it is produced (the CLI streams them to the CSV).
/// A non-finite loss aborts with the offending scene id in the error.
pub fn train_loop<E: Scalar>(
    scenes: &[LoadedScene],
    cfg: &RunConfig,
    mut on_step: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(CueError::Data("training set is empty".into()));
    }
    let hyp = cfg.hypotheses()?;
    for s in scenes {
        let shape = s.sample.images[1].shape();
        if (shape[0], shape[1]) != cfg.resolution {
            return Err(CueError::Shape(format!(
                "scene {} is {}x{}, config wants {}x{}",
                s.id, shape[0], shape[1], cfg.resolution.0, cfg.resolution.1
            )));
        }
    }

    // Volumes depend only on the rendered sample, so build each scene's
    // once up front instead of once per epoch.
    let volumes: Vec<SampleVolumes> = scenes
        .iter()
        .map(|s| build_sample_volumes(&s.sample, &hyp))
        .collect::<Result<_>>()?;

    let mut store = init_params::<E>(&cfg.fusion, cfg.seed)?;
    let mut adam = Adam::<E>::new(cfg.optimizer);
    let mut log = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);

        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grads();
            let (mut loss_sum, mut si_sum, mut vnl_sum, mut mono_sum) = (0.0, 0.0, 0.0, 0.0);
            for &idx in batch {
                let scene = &scenes[idx];
                let sample = &scene.sample;
                let mut tape = Tape::new();
                let mut leaves = ParamLeaves::new();
                let pred = forward_on_tape(
                    &mut tape,
                    &mut leaves,
                    &store,
                    sample,
                    &volumes[idx],
                    &cfg.fusion,
                    &hyp,
                )?;
                let gt = sample.gt_depth.cast::<E>();
                let mono = sample.mono_depth.cast::<E>();
                let mask = range_mask(&gt, cfg.loss.valid_range.0, cfg.loss.valid_range.1);
                let terms = final_loss(
                    &mut tape,
                    &mono,
                    pred,
                    &gt,
                    &sample.intrinsics,
                    &mask,
                    &cfg.loss,
                    sample_seed(cfg.seed, idx),
                )?;
                let loss = tape.value(terms.final_term).item()?.to_f64();
                if !loss.is_finite() {
                    return Err(CueError::Numeric(format!(
                        "non-finite loss {loss} on scene {} (epoch {epoch}, step {step})",
                        scene.id
                    )));
                }
                loss_sum += loss;
                si_sum += tape.value(terms.si).item()?.to_f64();
                if let Some(v) = terms.vnl {
                    vnl_sum += tape.value(v).item()?.to_f64();
                }
                mono_sum += tape.value(terms.mono_term).item()?.to_f64();
                let grads = tape.backward(terms.final_term)?;
                leaves.accumulate(&grads, &mut store)?;
            }
            // Mean-reduce the accumulated batch gradient.
            let inv = 1.0 / batch.len() as f64;
            for (_, p) in store.iter_mut() {
                for g in p.grad.data_mut() {
                    *g = E::from_f64(g.to_f64() * inv);
                }
            }
            adam.step(&mut store, lr)?;
            let n = batch.len() as f64;
            let rec = StepRecord {
                epoch,
                step,
                lr,
                loss: loss_sum / n,
                si: si_sum / n,
                vnl: vnl_sum / n,
                mono: mono_sum / n,
            };
            if let Some(cb) = on_step.as_mut() {
                cb(&rec);
            }
            log.push(rec);
        }
    }
    Ok(TrainOutcome { store, log })
}

/// Writes the whole loss log as CSV.
pub fn write_loss_log(path: impl AsRef<Path>, log: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| CueError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    (|| -> std::io::Result<()> {
        writeln!(w, "{LOSS_LOG_HEADER}")?;
        for r in log {
            writeln!(w, "{}", format_step_record(r))?;
        }
        w.flush()
    })()
    .map_err(|e| CueError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, DatasetParams};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::desk_default();
        cfg.resolution = (16, 24);
        cfg.m = 8;
        cfg.fusion = FusionConfig {
            m: 8,
            downsample_factor: 4,
            variant: Variant::Full,
            use_image_context: true,
            image_channels: 1,
        };
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.optimizer = OptimizerConfig::desk_default(2);
        cfg.optimizer.lr_drop_epoch = 1;
        cfg.loss.vnl_samples = 40;
        cfg
    }

    fn tiny_scenes(n: usize) -> Vec<LoadedScene> {
        let p = DatasetParams {
            scenes: n,
            base_seed: 21,
            resolution: (16, 24),
            d_min: 2.0,
            d_max: 30.0,
            sigma_s: 0.06,
            sigma_n: 0.04,
        };
        (0..n)
            .map(|i| {
                let (_, sample) = generate_scene(&p, i).unwrap();
                LoadedScene {
                    id: format!("scene_{i:04}"),
                    sample,
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut cfg = tiny_config();
        cfg.epochs = 1;
        cfg.optimizer.lr = 0.0;
        cfg.optimizer.lr_after_drop = 0.0;
        cfg.optimizer.lr_drop_epoch = 0;
        let scenes = tiny_scenes(3);
        let before = init_params::<f64>(&cfg.fusion, cfg.seed).unwrap();
        let out = train_loop::<f64>(&scenes, &cfg, None).unwrap();
        for name in before.names() {
            assert_eq!(
                before.value(name).unwrap().data(),
                out.store.value(name).unwrap().data(),
                "parameter {name} moved at lr 0"
            );
        }
        assert!(!out.log.is_empty());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = tiny_config();
        let scenes = tiny_scenes(3);
        let a = train_loop::<f64>(&scenes, &cfg, None).unwrap();
        let b = train_loop::<f64>(&scenes, &cfg, None).unwrap();
        for name in a.store.names() {
            assert_eq!(
                a.store.value(name).unwrap().data(),
                b.store.value(name).unwrap().data()
            );
        }
        let la: Vec<String> = a.log.iter().map(format_step_record).collect();
        let lb: Vec<String> = b.log.iter().map(format_step_record).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn loss_trends_down_over_the_run() {
        let mut cfg = tiny_config();
        cfg.epochs = 6;
        cfg.optimizer = OptimizerConfig::desk_default(6);
        let scenes = tiny_scenes(3);
        let out = train_loop::<f64>(&scenes, &cfg, None).unwrap();
        let k = out.log.len() / 3;
        let head: f64 = out.log[..k].iter().map(|r| r.loss).sum::<f64>() / k as f64;
        let tail: f64 =
            out.log[out.log.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64;
        assert!(
            tail < head,
            "mean loss rose from {head:.4} to {tail:.4} over training"
        );
    }

    #[test]
    fn checkpoints_round_trip_params_and_config() {
        let cfg = tiny_config();
        let store = init_params::<f32>(&cfg.fusion, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store, &cfg).unwrap();
        let (back, cfg2) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        for name in store.names() {
            assert_eq!(
                store.value(name).unwrap().data(),
                back.value(name).unwrap().data()
            );
        }
    }

    #[test]
    fn paper_scale_schedule_round_trips_through_json() {
        let mut cfg = RunConfig::desk_default();
        cfg.epochs = 80;
        cfg.optimizer.lr = 1e-4;
        cfg.optimizer.lr_after_drop = 1e-5;
        cfg.optimizer.lr_drop_epoch = 65;
        let text = cfg.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.optimizer.lr_for_epoch(64), 1e-4);
        assert_eq!(back.optimizer.lr_for_epoch(65), 1e-5);
    }

    #[test]
    fn nan_poisoned_scene_aborts_with_its_id() {
        let cfg = tiny_config();
        let mut scenes = tiny_scenes(2);
        // A NaN pixel in the target image rides through the cost volume and
        // the network into the loss; NaN ground truth would merely fall out
        // of the valid-range mask.
        for v in scenes[1].sample.images[1].data_mut() {
            *v = f32::NAN;
        }
        let err = train_loop::<f64>(&scenes, &cfg, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("scene_0001") || msg.contains("NaN") || msg.contains("non-finite"),
            "unhelpful abort message: {msg}");
    }

    #[test]
    fn loss_log_csv_has_header_and_one_row_per_step() {
        let cfg = tiny_config();
        let scenes = tiny_scenes(3);
        let out = train_loop::<f64>(&scenes, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(LOSS_LOG);
        write_loss_log(&path, &out.log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOSS_LOG_HEADER);
        assert_eq!(lines.len(), out.log.len() + 1);
    }

    #[test]
    fn config_validation_rejects_inconsistent_m() {
        let mut cfg = tiny_config();
        cfg.m = 12;
        assert!(cfg.validate().is_err());
    }
}
