//! Train / predict / evaluate facade over a recurrent network with CTC loss.
//!
//! Training and evaluation consume observations together with labels;
//! prediction takes observations only and never touches labels.

pub mod weights;

use std::fs;
use std::io::ErrorKind;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Dataset, LabeledObservations, Observations};
use crate::decode::{DecodeConfig, DecodeResult};
use crate::error::{Error, LoadError, Result};
use crate::lattice::{ctc_gradient, ctc_loss_batch, LabelSequence, PosteriorMatrix};
use crate::metrics::{Metric, MetricsReport};
use crate::net::{self, clip_global_norm, init_params, NetworkSpec, OptimizerKind, OptimizerState, ParameterSet};

pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const HYPERPARAMS_FILE: &str = "hyperparams.json";
pub const WEIGHTS_FILE: &str = "weights.ctcw";

/// Contents of `hyperparams.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub greedy: bool,
    pub beam_width: usize,
    pub top_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcModel {
    spec: NetworkSpec,
    params: ParameterSet,
    optimizer: OptimizerState,
    decode: DecodeConfig,
    seed: u64,
    clip_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.train_loss).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions<'a> {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub validation: Option<&'a Dataset>,
    /// When set, weights are written to `weights.epochN.ctcw` after each epoch.
    pub checkpoint_dir: Option<&'a Path>,
}

impl Default for FitOptions<'_> {
    fn default() -> Self {
        FitOptions {
            epochs: 1,
            batch_size: 16,
            shuffle_seed: 0,
            validation: None,
            checkpoint_dir: None,
        }
    }
}

impl CtcModel {
    /// Initializes parameters from `seed` and attaches the optimizer.
    /// The loss is always CTC.
    pub fn compile(
        spec: NetworkSpec,
        optimizer: OptimizerKind,
        learning_rate: f64,
        decode: DecodeConfig,
        seed: u64,
    ) -> Result<Self> {
        decode.validate()?;
        let params = init_params(&spec, seed)?;
        let optimizer = OptimizerState::new(optimizer, learning_rate, &params)?;
        Ok(CtcModel {
            spec,
            params,
            optimizer,
            decode,
            seed,
            clip_norm: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn decode_config(&self) -> &DecodeConfig {
        &self.decode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            optimizer: self.optimizer.kind,
            learning_rate: self.optimizer.learning_rate,
            greedy: self.decode.greedy,
            beam_width: self.decode.beam_width,
            top_paths: self.decode.top_paths,
            seed: self.seed,
        }
    }

    /// Global gradient-norm clipping applied before each optimizer step.
    pub fn set_clip_norm(&mut self, clip_norm: Option<f64>) -> Result<()> {
        if let Some(g) = clip_norm {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::domain(format!("clip norm must be positive, got {g}")));
            }
        }
        self.clip_norm = clip_norm;
        Ok(())
    }

    /// Replaces the parameters after checking them against the spec.
    /// Optimizer moments are reset.
    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        params.audit(&self.spec)?;
        self.optimizer = OptimizerState::new(self.optimizer.kind, self.optimizer.learning_rate, &params)?;
        self.params = params;
        Ok(())
    }

    fn check_observations<O: Observations + ?Sized>(&self, data: &O) -> Result<()> {
        if data.feature_dim() != self.spec.feature_dim {
            return Err(Error::Shape(format!(
                "data has {} features per frame, the model expects {}",
                data.feature_dim(),
                self.spec.feature_dim
            )));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &LabelSequence) -> Result<()> {
        if let Some(&l) = labels.as_slice().iter().find(|&&l| l >= self.spec.num_labels) {
            return Err(Error::Shape(format!(
                "label {l} is outside the model's {} labels",
                self.spec.num_labels
            )));
        }
        Ok(())
    }

    fn posteriors_at<O: Observations + ?Sized>(&self, data: &O, i: usize) -> Result<PosteriorMatrix> {
        let features = data.features(i);
        net::forward(&self.spec, &self.params, &features, data.input_len(i)).map(|(p, _)| p)
    }

    /// Forward posteriors for every sequence, padded rows included.
    fn all_posteriors<O: Observations + ?Sized>(&self, data: &O) -> Result<Vec<PosteriorMatrix>> {
        self.check_observations(data)?;
        collect_indexed(data.len(), |i| self.posteriors_at(data, i))
    }

    /// One optimizer step on the mean CTC loss of `batch`; returns the
    /// pre-step mean loss. On error nothing is modified.
    pub fn train_on_batch<B: LabeledObservations + ?Sized>(&mut self, batch: &B) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        self.check_observations(batch)?;
        let (spec, params) = (&self.spec, &self.params);
        let per_sequence = collect_indexed(batch.len(), |i| {
            let labels = batch.labels(i);
            self.check_labels(&labels)?;
            let input_len = batch.input_len(i);
            let features = batch.features(i);
            let (_, cache) = net::forward(spec, params, &features, input_len)?;
            let (loss, grad_logits) = ctc_gradient(&cache.logits, &labels, input_len, labels.len())?;
            let grads = net::backward(spec, params, &cache, &grad_logits)?;
            Ok((loss, grads))
        })?;

        let n = per_sequence.len() as f64;
        let mut total_loss = 0.0;
        let mut grads = self.params.zeros_like();
        for (loss, g) in &per_sequence {
            total_loss += loss;
            grads.add_assign(g);
        }
        grads.scale(1.0 / n);
        if let Some(max_norm) = self.clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        self.optimizer.apply(&mut self.params, &grads)?;
        Ok(total_loss / n)
    }

    /// Epoch loop over freshly shuffled batches.
    pub fn fit(&mut self, train: &Dataset, options: &FitOptions<'_>) -> Result<TrainHistory> {
        if train.sequences.is_empty() {
            return Err(Error::domain("cannot fit on an empty dataset"));
        }
        if options.batch_size == 0 {
            return Err(Error::domain("batch size must be at least 1"));
        }
        self.check_observations(train)?;
        if let Some(dir) = options.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(options.shuffle_seed);
        let mut history = TrainHistory::default();
        for epoch in 1..=options.epochs {
            let start = Instant::now();
            let batches = make_batches(train, options.batch_size, shuffle_rng.next_u64())?;
            let mut weighted = 0.0;
            for (b, batch) in batches.iter().enumerate() {
                let loss = self.train_on_batch(batch).map_err(|e| Error::AtBatch {
                    epoch,
                    batch: b,
                    source: Box::new(e),
                })?;
                weighted += loss * batch.len() as f64;
            }
            let val_loss = match options.validation {
                Some(val) => Some(mean(&self.get_loss(val)?)),
                None => None,
            };
            if let Some(dir) = options.checkpoint_dir {
                weights::write_weights(dir.join(format!("weights.epoch{epoch}.ctcw")), &self.params)?;
            }
            history.epochs.push(EpochRecord {
                epoch,
                train_loss: weighted / train.sequences.len() as f64,
                val_loss,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        Ok(history)
    }

    /// Decodes every sequence with the model's decode settings.
    pub fn predict<O: Observations + ?Sized>(&self, data: &O) -> Result<Vec<DecodeResult>> {
        self.predict_with(data, &self.decode)
    }

    /// Decodes every sequence with explicit decode settings.
    pub fn predict_with<O: Observations + ?Sized>(
        &self,
        data: &O,
        decode: &DecodeConfig,
    ) -> Result<Vec<DecodeResult>> {
        decode.validate()?;
        self.check_observations(data)?;
        collect_indexed(data.len(), |i| {
            let probs = self.posteriors_at(data, i)?;
            decode.decode(&probs, data.input_len(i))
        })
    }

    /// Per-sequence negative log-likelihoods, in order.
    pub fn get_loss<D: LabeledObservations + ?Sized>(&self, data: &D) -> Result<Vec<f64>> {
        let posteriors = self.all_posteriors(data)?;
        let (labels, input_lengths) = self.labels_and_lengths(data)?;
        let label_lengths: Vec<usize> = labels.iter().map(LabelSequence::len).collect();
        ctc_loss_batch(&posteriors, &labels, &input_lengths, &label_lengths)
    }

    /// Posteriors trimmed to each sequence's true length; the blank is the
    /// last column.
    pub fn get_probas<O: Observations + ?Sized>(&self, data: &O) -> Result<Vec<PosteriorMatrix>> {
        self.check_observations(data)?;
        collect_indexed(data.len(), |i| {
            Ok(self.posteriors_at(data, i)?.truncated(data.input_len(i)))
        })
    }

    /// Computes the requested metrics; decoding uses the model's settings.
    pub fn evaluate<D: LabeledObservations + ?Sized>(&self, data: &D, metrics: &[Metric]) -> Result<MetricsReport> {
        if metrics.is_empty() {
            return Err(Error::domain("no metrics requested"));
        }
        let posteriors = self.all_posteriors(data)?;
        let (labels, input_lengths) = self.labels_and_lengths(data)?;
        evaluate_posteriors(&posteriors, &labels, &input_lengths, metrics, &self.decode)
    }

    fn labels_and_lengths<D: LabeledObservations + ?Sized>(
        &self,
        data: &D,
    ) -> Result<(Vec<LabelSequence>, Vec<usize>)> {
        let mut labels = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            let l = data.labels(i);
            self.check_labels(&l).map_err(|e| e.at_sequence(i))?;
            labels.push(l);
        }
        let input_lengths = (0..data.len()).map(|i| data.input_len(i)).collect();
        Ok((labels, input_lengths))
    }

    /// Writes `architecture.json`, `hyperparams.json` and `weights.ctcw`.
    pub fn save_model(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_json(&dir.join(ARCHITECTURE_FILE), &self.spec)?;
        write_json(&dir.join(HYPERPARAMS_FILE), &self.hyperparams())?;
        weights::write_weights(dir.join(WEIGHTS_FILE), &self.params)
    }

    /// Restores a saved model. Weights come from `weights` when given,
    /// otherwise from `dir/weights.ctcw`; if that file does not exist the
    /// parameters are re-initialized from the stored seed.
    pub fn load_model(dir: impl AsRef<Path>, weights: Option<&Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: NetworkSpec = read_json(&dir.join(ARCHITECTURE_FILE))?;
        let hp: Hyperparams = read_json(&dir.join(HYPERPARAMS_FILE))?;
        let decode = DecodeConfig {
            greedy: hp.greedy,
            beam_width: hp.beam_width,
            top_paths: hp.top_paths,
        };
        let malformed = |path: &Path, e: Error| LoadError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        spec.validate()
            .map_err(|e| malformed(&dir.join(ARCHITECTURE_FILE), e))?;
        let mut model = CtcModel::compile(spec, hp.optimizer, hp.learning_rate, decode, hp.seed)
            .map_err(|e| malformed(&dir.join(HYPERPARAMS_FILE), e))?;

        let default_path = dir.join(WEIGHTS_FILE);
        let weights_path = match weights {
            Some(p) => Some(p.to_path_buf()),
            None if default_path.exists() => Some(default_path),
            None => None,
        };
        if let Some(path) = weights_path {
            let params = weights::read_weights(&path)?;
            params.audit(&model.spec).map_err(|e| LoadError::ShapeAudit {
                path: path.clone(),
                message: e.to_string(),
            })?;
            model.set_params(params)?;
        }
        Ok(model)
    }
}

/// Loss and decode-based metrics from precomputed posteriors.
pub fn evaluate_posteriors(
    posteriors: &[PosteriorMatrix],
    labels: &[LabelSequence],
    input_lengths: &[usize],
    metrics: &[Metric],
    decode: &DecodeConfig,
) -> Result<MetricsReport> {
    if metrics.is_empty() {
        return Err(Error::domain("no metrics requested"));
    }
    if labels.len() != posteriors.len() || input_lengths.len() != posteriors.len() {
        return Err(Error::domain("posteriors, labels and input lengths differ in count"));
    }
    let losses = if metrics.contains(&Metric::Loss) {
        let label_lengths: Vec<usize> = labels.iter().map(LabelSequence::len).collect();
        Some(ctc_loss_batch(posteriors, labels, input_lengths, &label_lengths)?)
    } else {
        None
    };
    let preds = if metrics.contains(&Metric::Ler) || metrics.contains(&Metric::Ser) {
        decode.validate()?;
        collect_indexed(posteriors.len(), |i| {
            Ok(decode.decode(&posteriors[i], input_lengths[i])?.best_labels().clone())
        })?
    } else {
        Vec::new()
    };
    MetricsReport::compute(metrics, losses.as_deref(), &preds, labels)
}

/// Runs `f` over `0..n` in parallel, keeping order; the first failing index
/// is attached to its error.
fn collect_indexed<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = (0..n).into_par_iter().map(&f).collect();
    results
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| e.at_sequence(i)))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| {
        if source.kind() == ErrorKind::NotFound {
            Error::Load(LoadError::MissingFile {
                path: path.to_path_buf(),
            })
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Load(LoadError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    })
}
