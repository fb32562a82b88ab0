//! Training loop and evaluation driver.
//!
//! Every branch has three Adam instances: decoder + bottleneck, the
//! crossmodal filter projection, and the crossmodal amplifier. A single
//! backward pass of the summed loss feeds all six; the graph's detach
//! points decide which loss reaches which part.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::checkpoint::{load_checkpoint, save_checkpoint, OptimizerState};
use crate::datasets::{ensure_all_normal, MultimodalSample};
use crate::error::{Result, TrdError};
use crate::metrics::{evaluate_all, MetricsReport, PixelEval, PixelItem};
use crate::model::{Modality, Routing, TrdModel};
use crate::networks::FeaturePyramid;
use crate::nn::ParamGroup;
use crate::objectives::LossBreakdown;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::scoring::{calibrate, SampleScore, ScoreConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Keep the output-consistency loss from reaching the decoder through
    /// the amplifier fusion.
    pub block_output_to_decoder: bool,
    /// Teacher features are computed once and kept when they fit in this
    /// many MiB; otherwise they are recomputed for every batch.
    pub feature_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 0.005,
            seed: 0,
            block_output_to_decoder: true,
            feature_cache_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrdError::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrdError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_fingerprint: String,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Per-epoch losses without timings.
    pub fn losses(&self) -> Vec<LossBreakdown> {
        self.epochs.iter().map(|e| e.losses).collect()
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("log serializes");
        std::fs::write(path, text).map_err(|e| TrdError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrdError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TrdError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Where a run keeps its log next to the checkpoint.
pub fn log_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.json")
}

fn optimizer_name(branch: Modality, group: ParamGroup) -> String {
    format!("{}.{}", branch.tag(), group.name())
}

struct Slot<T> {
    name: String,
    adam: Adam<T>,
}

pub struct Trainer<T> {
    model: TrdModel<T>,
    cfg: TrainConfig,
    optimizers: Vec<Slot<T>>,
    epoch: usize,
    log: TrainLog,
}

/// Sum per-sample gradients in sample order, then scale by `1 / n`.
fn mean_gradients<T: Scalar>(per_sample: Vec<Vec<Option<Tensor<T>>>>) -> Vec<Option<Tensor<T>>> {
    let n = per_sample.len();
    let mut iter = per_sample.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for g in iter {
        for (a, b) in acc.iter_mut().zip(g) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }
    let scale = T::from_f64_lossy(1.0 / n as f64);
    for t in acc.iter_mut().flatten() {
        for v in t.data_mut() {
            *v = *v * scale;
        }
    }
    acc
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: TrdModel<T>, cfg: TrainConfig, config_fingerprint: String) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        let mut optimizers = Vec::new();
        for m in Modality::BOTH {
            for g in ParamGroup::ALL {
                let ids = model.params().group_ids(m.index(), g);
                if ids.is_empty() {
                    continue;
                }
                optimizers.push(Slot {
                    name: optimizer_name(m, g),
                    adam: Adam::new(adam, ids, model.params()),
                });
            }
        }
        let log = TrainLog {
            seed: cfg.seed,
            config_fingerprint,
            epochs: Vec::new(),
        };
        Ok(Trainer {
            model,
            cfg,
            optimizers,
            epoch: 0,
            log,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::save`]: parameters,
    /// optimizer moments, epoch counter and (if present) the log file.
    pub fn resume(path: &Path, cfg: TrainConfig, config_fingerprint: String) -> Result<Self> {
        let loaded = load_checkpoint::<T>(path, None)?;
        let epoch = loaded.manifest.epoch;
        let mut t = Trainer::new(loaded.model.clone(), cfg, config_fingerprint)?;
        for slot in &mut t.optimizers {
            loaded.restore_optimizer(&slot.name, &mut slot.adam)?;
        }
        t.epoch = epoch;
        t.model.calibration = loaded.model.calibration;
        let log_path = log_path_for(path);
        if log_path.exists() {
            let mut log = TrainLog::read(&log_path)?;
            log.epochs.truncate(epoch);
            log.config_fingerprint = t.log.config_fingerprint.clone();
            t.log = log;
        }
        Ok(t)
    }

    pub fn model(&self) -> &TrdModel<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TrdModel<T> {
        &mut self.model
    }

    pub fn into_model(self) -> TrdModel<T> {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// `(optimizer name, parameter names)` for every optimizer.
    pub fn optimizer_groups(&self) -> Vec<(String, Vec<String>)> {
        self.optimizers
            .iter()
            .map(|s| {
                let names = s.adam.params.iter().map(|&id| self.model.params().entry(id).name.clone()).collect();
                (s.name.clone(), names)
            })
            .collect()
    }

    fn routing(&self) -> Routing {
        Routing {
            block_output_to_decoder: self.cfg.block_output_to_decoder,
        }
    }

    /// Loss and parameter gradients of one sample.
    pub fn sample_gradients(&self, encoded: &[FeaturePyramid<T>; 2]) -> Result<(LossBreakdown, Vec<Option<Tensor<T>>>)> {
        let mut tape = Tape::new(self.model.params());
        let vars = self.model.forward_on_tape(&mut tape, encoded, self.routing())?;
        let (loss, terms) = self.model.losses_on_tape(&mut tape, &vars)?;
        let breakdown = TrdModel::loss_breakdown(&tape, &terms);
        let grads = tape.backward(loss).into_param_grads();
        Ok((breakdown, grads))
    }

    /// One optimizer step on a batch of encoded samples; returns the
    /// per-sample losses.
    pub fn step(&mut self, batch: &[&[FeaturePyramid<T>; 2]]) -> Result<Vec<LossBreakdown>> {
        let results: Vec<(LossBreakdown, Vec<Option<Tensor<T>>>)> = batch
            .par_iter()
            .map(|enc| self.sample_gradients(enc))
            .collect::<Result<_>>()?;
        let (losses, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        if let Some((k, bad)) = losses.iter().enumerate().find(|(_, l)| !l.all_finite()) {
            return Err(TrdError::TrainingAborted(format!(
                "non-finite loss at epoch {} (batch position {k}): {bad:?}",
                self.epoch + 1
            )));
        }
        let grads = mean_gradients(grads);
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(TrdError::TrainingAborted(format!(
                "non-finite gradient at epoch {}",
                self.epoch + 1
            )));
        }
        for slot in &mut self.optimizers {
            slot.adam.step(self.model.params_mut(), &grads);
        }
        Ok(losses)
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut h = Sha256::new();
        h.update(self.cfg.seed.to_le_bytes());
        h.update(b"epoch");
        h.update((self.epoch as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn encode_all(&self, samples: &[MultimodalSample<T>]) -> Result<Vec<[FeaturePyramid<T>; 2]>> {
        samples.par_iter().map(|s| self.model.encode_sample(s)).collect()
    }

    fn fits_in_cache(&self, n: usize) -> bool {
        let p = self.model.profile();
        let per: usize = (0..3).map(|i| p.level_shape(i).iter().product::<usize>()).sum();
        let bytes = 2 * n * per * std::mem::size_of::<T>();
        bytes <= self.cfg.feature_cache_mb << 20
    }

    /// Run one epoch over `train`; `cache` holds precomputed teacher features.
    fn run_epoch(
        &mut self,
        train: &[MultimodalSample<T>],
        cache: Option<&[[FeaturePyramid<T>; 2]]>,
    ) -> Result<EpochLog> {
        let start = Instant::now();
        let order = self.epoch_order(train.len());
        let mut all = Vec::with_capacity(train.len());
        for chunk in order.chunks(self.cfg.batch_size) {
            let live;
            let batch: Vec<&[FeaturePyramid<T>; 2]> = match cache {
                Some(c) => chunk.iter().map(|&i| &c[i]).collect(),
                None => {
                    live = chunk
                        .par_iter()
                        .map(|&i| self.model.encode_sample(&train[i]))
                        .collect::<Result<Vec<_>>>()?;
                    live.iter().collect()
                }
            };
            all.extend(self.step(&batch)?);
        }
        self.epoch += 1;
        let entry = EpochLog {
            epoch: self.epoch,
            losses: LossBreakdown::mean(&all),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.log.epochs.push(entry.clone());
        Ok(entry)
    }

    /// Train up to the configured epoch count, then calibrate on
    /// `validation`. `progress` sees every finished epoch.
    pub fn fit(
        &mut self,
        train: &[MultimodalSample<T>],
        validation: &[MultimodalSample<T>],
        score: &ScoreConfig,
        mut progress: impl FnMut(&EpochLog),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(TrdError::Data("training set is empty".into()));
        }
        ensure_all_normal(train, "training set")?;
        ensure_all_normal(validation, "validation set")?;
        let cache = if self.epoch < self.cfg.epochs && self.fits_in_cache(train.len()) {
            Some(self.encode_all(train)?)
        } else {
            None
        };
        while self.epoch < self.cfg.epochs {
            let e = self.run_epoch(train, cache.as_deref())?;
            progress(&e);
        }
        self.model.calibration = Some(calibrate(&self.model, validation, score)?);
        Ok(())
    }

    /// Write the checkpoint and the log next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let states: Vec<OptimizerState<'_, T>> = self
            .optimizers
            .iter()
            .map(|s| OptimizerState {
                name: s.name.clone(),
                adam: &s.adam,
            })
            .collect();
        save_checkpoint(path, &self.model, self.epoch, &states)?;
        self.log.write(&log_path_for(path))
    }
}

/// Scores, maps and metrics for a test split.
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<SampleScore>,
}

pub fn evaluate<T: Scalar>(
    model: &TrdModel<T>,
    test: &[MultimodalSample<T>],
    score: &ScoreConfig,
    pro_fpr_limit: f64,
) -> Result<Evaluation> {
    if score.fusion.needs_calibration() && model.calibration.is_none() {
        return Err(TrdError::Evaluation(
            "checkpoint has no calibration statistics; finish training or calibrate on validation normals first".into(),
        ));
    }
    let first = test
        .first()
        .ok_or_else(|| TrdError::Evaluation("test set is empty".into()))?;
    let scores = model.score_samples(test, score)?;
    let labels: Vec<bool> = test.iter().map(|s| s.label.is_anomalous()).collect();
    let items = test
        .iter()
        .zip(&scores)
        .map(|(s, sc)| {
            let m = s.mask_or_empty();
            PixelItem::new(sc.fused.height, sc.fused.width, sc.fused.data.clone(), m.data)
        })
        .collect::<Result<Vec<_>>>()?;
    let image_scores: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let mut report = evaluate_all(
        &first.identity.category,
        &image_scores,
        &labels,
        &PixelEval::new(items),
        pro_fpr_limit,
    )
    .map_err(|e| TrdError::Evaluation(e.to_string()))?;
    report.config_fingerprint = Some(model.config().fingerprint());
    Ok(Evaluation { report, scores })
}
