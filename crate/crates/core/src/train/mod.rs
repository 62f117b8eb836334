//! SGD training of the multi-source mask network.

mod objective;

pub use objective::{network_grad_check, task_losses, BatchTargets};

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioError;
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::dataset::{DatasetError, Manifest, SampleRecord, Split, TrackAudio};
use crate::features::{AudioParams, PreparedSample};
use crate::loss::{EnergyStats, LossError, LossKind, Strategy, WeightState, DWA_TEMPERATURE};
use crate::net::{
    save_checkpoint, CheckpointMeta, NetError, Network, NetworkConfig, OptimizerState, RngState,
};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite loss in epoch {epoch}, batch {batch} (records {records:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        records: Vec<String>,
    },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_kind: LossKind,
    pub strategy: Strategy,
    pub seed: u64,
    /// Save a numbered checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub mask_ceiling: f64,
    /// Every mask starts near this value before training.
    pub initial_mask: f64,
    /// Also drop silent-source train chunks that survived preprocessing.
    pub filter_silent: bool,
    pub filters: Vec<usize>,
    pub dropout_rate: f64,
    pub dwa_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.01,
            loss_kind: LossKind::Indirect,
            strategy: Strategy::EbwP1,
            seed: 0,
            checkpoint_every: 0,
            mask_ceiling: 10.0,
            initial_mask: 1.0,
            filter_silent: true,
            filters: NetworkConfig::TOY_FILTERS.to_vec(),
            dropout_rate: 0.1,
            dwa_temperature: DWA_TEMPERATURE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.dwa_temperature > 0.0) {
            return bad("dwa_temperature must be positive");
        }
        Ok(())
    }

    pub fn network(&self, out_channels: usize) -> NetworkConfig {
        NetworkConfig {
            filters: self.filters.clone(),
            in_channels: 1,
            out_channels,
            dropout_rate: self.dropout_rate,
            mask_ceiling: self.mask_ceiling,
            initial_mask: self.initial_mask,
            seed: self.seed,
        }
    }
}

/// Prepared train and validation chunks of a manifest.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub source_names: Vec<String>,
    pub audio: AudioParams,
    pub train: Vec<(SampleRecord, PreparedSample)>,
    pub valid: Vec<(SampleRecord, PreparedSample)>,
}

impl TrainingData {
    pub fn from_manifest(manifest: &Manifest, filter_silent: bool) -> Result<Self> {
        let mut wanted: Vec<&SampleRecord> = manifest
            .records
            .iter()
            .filter(|r| match r.split {
                Split::Train => !(filter_silent && r.any_silent()),
                Split::Valid => true,
                Split::Test => false,
            })
            .collect();
        wanted.sort_by(|a, b| (&a.track_id, a.chunk_index).cmp(&(&b.track_id, b.chunk_index)));
        let mut data = Self {
            source_names: manifest.source_names.clone(),
            audio: manifest.audio_params(),
            train: Vec::new(),
            valid: Vec::new(),
        };
        let mut current: Option<(String, TrackAudio)> = None;
        for r in wanted {
            if current.as_ref().map(|(id, _)| id != &r.track_id).unwrap_or(true) {
                let entry = manifest.track(&r.track_id)?;
                let audio = TrackAudio::load(entry, manifest.sample_rate, manifest.hop)?;
                current = Some((r.track_id.clone(), audio));
            }
            let audio = &current.as_ref().expect("loaded above").1;
            let len = manifest.chunk_length;
            let stems: Vec<_> = audio.stems.iter().map(|s| s.slice(r.offset, len)).collect();
            let sample = PreparedSample::from_audio(
                &audio.mixture.slice(r.offset, len),
                &stems,
                manifest.window_size,
                manifest.hop,
            )?;
            let slot = if r.split == Split::Train {
                &mut data.train
            } else {
                &mut data.valid
            };
            slot.push((r.clone(), sample));
        }
        Ok(data)
    }

    pub fn k(&self) -> usize {
        self.source_names.len()
    }

    /// Per-source energy statistics of the train split.
    pub fn energy_stats(&self) -> Result<EnergyStats> {
        if self.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let n = self.train.len() as f64;
        let per_source_energy = (0..self.k())
            .map(|i| self.train.iter().map(|(_, s)| s.energies[i]).sum::<f64>() / n)
            .collect();
        Ok(EnergyStats {
            source_names: self.source_names.clone(),
            per_source_energy,
            sample_count: self.train.len(),
        })
    }
}

fn assemble(samples: &[&PreparedSample]) -> (Tensor<f32>, BatchTargets<f32>) {
    let s0 = samples[0];
    let shape = vec![samples.len(), 1, s0.rows, s0.cols];
    let stack = |f: &dyn Fn(&PreparedSample) -> &[f32]| {
        let data = samples.iter().flat_map(|s| f(s).iter().copied()).collect();
        Tensor::new(shape.clone(), data)
    };
    let input = stack(&|s| &s.input);
    let targets = BatchTargets {
        mixture: stack(&|s| &s.mixture),
        sources: (0..s0.k()).map(|i| stack(&|s| &s.sources[i])).collect(),
        masks: (0..s0.k()).map(|i| stack(&|s| &s.masks[i])).collect(),
    };
    (input, targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Unweighted per-task averages over the epoch's samples.
    pub train_losses: Vec<f64>,
    pub weighted_total: f64,
    pub valid_losses: Option<Vec<f64>>,
    /// Weights applied during the epoch, averaged over its samples.
    pub weights: Vec<f64>,
    pub steps: usize,
    pub sample_iterations: usize,
    pub forward_calls: u64,
    /// Excluded from the log so that logs of identical runs are identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl EpochReport {
    pub fn mean_train_loss(&self) -> f64 {
        self.train_losses.iter().sum::<f64>() / self.train_losses.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub reports: Vec<EpochReport>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

pub struct Trainer {
    pub net: Network<f32>,
    pub config: TrainConfig,
    pub state: WeightState,
    pub data: TrainingData,
    epoch: usize,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh network from `config`, weights initialized from the train energies.
    pub fn new(config: TrainConfig, data: TrainingData) -> Result<Self> {
        let net = Network::new(config.network(data.k()))?;
        Self::with_network(net, config, data)
    }

    pub fn with_network(net: Network<f32>, config: TrainConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        if net.config().out_channels != data.k() {
            return Err(TrainError::Config(format!(
                "network has {} outputs for {} sources",
                net.config().out_channels,
                data.k()
            )));
        }
        let energies = if config.strategy.needs_energies() {
            Some(data.energy_stats()?.per_source_energy)
        } else {
            None
        };
        let state = WeightState::new(config.strategy, data.k(), energies)?
            .with_temperature(config.dwa_temperature);
        let dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Ok(Self {
            net,
            config,
            state,
            data,
            epoch: 0,
            dropout_rng,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Shuffled train order for `epoch`, derived from (seed, epoch) only.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let started = Instant::now();
        let epoch = self.epoch + 1;
        let k = self.data.k();
        let calls_before = self.net.forward_calls();
        let order = self.epoch_order(epoch);
        let mut loss_sums = vec![0.0; k];
        let mut weight_sums = vec![0.0; k];
        let mut total_sum = 0.0;
        let mut steps = 0;
        for (batch, idx) in order.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<&PreparedSample> = idx.iter().map(|&i| &self.data.train[i].1).collect();
            let n = samples.len() as f64;
            let batch_energies: Vec<f64> = (0..k)
                .map(|s| samples.iter().map(|p| p.energies[s]).sum::<f64>() / n)
                .collect();
            self.state.begin_batch(&batch_energies)?;
            let weights = self.state.weights().to_vec();

            let (input, targets) = assemble(&samples);
            let mut tape = Tape::new();
            let x = tape.constant(input);
            let pass = self.net.forward(&mut tape, x, Some(&mut self.dropout_rng), true)?;
            let losses = task_losses(&mut tape, pass.output, &targets, self.config.loss_kind)?;
            let terms: Vec<(Var, f32)> = losses
                .iter()
                .zip(&weights)
                .map(|(&l, &w)| (l, w as f32))
                .collect();
            let total = tape.weighted_sum(&terms)?;
            let values: Vec<f64> = losses.iter().map(|&l| tape.value(l).item() as f64).collect();
            let total_value = tape.value(total).item() as f64;
            if !total_value.is_finite() || values.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    records: idx
                        .iter()
                        .map(|&i| {
                            let r = &self.data.train[i].0;
                            format!("{}#{}", r.track_id, r.chunk_index)
                        })
                        .collect(),
                });
            }
            let mut grads = tape.backward(total)?;
            self.net.accumulate_grads(&mut grads, &pass);
            self.net.sgd_step(self.config.learning_rate)?;
            steps += 1;

            for s in 0..k {
                loss_sums[s] += values[s] * n;
                weight_sums[s] += weights[s] * n;
            }
            total_sum += total_value * n;
        }
        let forward_calls = self.net.forward_calls() - calls_before;
        let count = order.len() as f64;
        let train_losses: Vec<f64> = loss_sums.iter().map(|v| v / count).collect();
        let valid_losses = if self.data.valid.is_empty() {
            None
        } else {
            Some(self.validate()?)
        };
        self.state.end_epoch(&train_losses)?;
        self.epoch = epoch;
        Ok(EpochReport {
            epoch,
            train_losses,
            weighted_total: total_sum / count,
            valid_losses,
            weights: weight_sums.iter().map(|v| v / count).collect(),
            steps,
            sample_iterations: order.len(),
            forward_calls,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Eval-mode unweighted per-task averages over the validation split.
    pub fn validate(&self) -> Result<Vec<f64>> {
        if self.data.valid.is_empty() {
            return Err(TrainError::EmptySplit("valid"));
        }
        let samples: Vec<&PreparedSample> = self.data.valid.iter().map(|(_, s)| s).collect();
        evaluate_losses(&self.net, &samples, self.config.batch_size, self.config.loss_kind)
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            network: self.net.config().clone(),
            optimizer: OptimizerState {
                kind: "sgd".into(),
                learning_rate: self.config.learning_rate,
            },
            source_names: self.data.source_names.clone(),
            audio: self.data.audio,
            training: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.net,
            &self.meta(),
            self.epoch as u64,
            &RngState::capture(&self.dropout_rng),
        )?;
        Ok(())
    }

    /// Run all configured epochs, writing `train_log.jsonl`, periodic
    /// checkpoints, `best.munet`, and `last.munet` into `out_dir`.
    pub fn fit(&mut self, out_dir: &Path) -> Result<FitOutcome> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        fs::create_dir_all(out_dir).map_err(io(out_dir))?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log = BufWriter::new(File::create(&log_path).map_err(io(&log_path))?);
        let best_checkpoint = out_dir.join("best.munet");
        let mut best = f64::INFINITY;
        let mut reports = Vec::new();
        for _ in 0..self.config.epochs {
            let report = self.train_epoch()?;
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(log, "{line}").map_err(io(&log_path))?;
            log.flush().map_err(io(&log_path))?;
            log::info!(
                "epoch {} loss {:.5} weights {:?} ({:.1}s)",
                report.epoch,
                report.weighted_total,
                report.weights,
                report.wall_time_secs
            );
            if self.config.checkpoint_every > 0 && report.epoch % self.config.checkpoint_every == 0 {
                self.save(&out_dir.join(format!("epoch_{:04}.munet", report.epoch)))?;
            }
            let score = match &report.valid_losses {
                Some(v) => v.iter().sum::<f64>() / v.len() as f64,
                None => report.mean_train_loss(),
            };
            if score < best {
                best = score;
                self.save(&best_checkpoint)?;
            }
            reports.push(report);
        }
        let last_checkpoint = out_dir.join("last.munet");
        self.save(&last_checkpoint)?;
        Ok(FitOutcome {
            reports,
            best_checkpoint,
            last_checkpoint,
            log_path,
        })
    }
}

/// Unweighted per-task loss averages of `net` in eval mode.
pub fn evaluate_losses(
    net: &Network<f32>,
    samples: &[&PreparedSample],
    batch_size: usize,
    kind: LossKind,
) -> Result<Vec<f64>> {
    let k = net.config().out_channels;
    let mut sums = vec![0.0; k];
    for chunk in samples.chunks(batch_size.max(1)) {
        let (input, targets) = assemble(chunk);
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let pass = net.forward(&mut tape, x, None, false)?;
        let losses = task_losses(&mut tape, pass.output, &targets, kind)?;
        for (s, l) in losses.iter().enumerate() {
            sums[s] += tape.value(*l).item() as f64 * chunk.len() as f64;
        }
    }
    Ok(sums.iter().map(|v| v / samples.len() as f64).collect())
}

/// Per-source loss table keyed by name.
pub fn named_losses(names: &[String], losses: &[f64]) -> BTreeMap<String, f64> {
    names.iter().cloned().zip(losses.iter().copied()).collect()
}
