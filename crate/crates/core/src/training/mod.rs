//! Weighted cross-entropy training with minimum-validation-loss snapshots,
//! negative sampling and evaluation.

mod data;
mod metrics;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{
    graph_from_events, negative_sample, popularity_scores, prepare, split_by_user, Experiment,
    NegativeSampler,
};
pub use metrics::{auc, Confusion, MetricsReport, SplitMetrics, MERGED};

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::ingest::HOUR;
use crate::layers::{LayerKind, ModelConfig};
use crate::model::{check_params, Encoder};
use crate::numerics::{AdamConfig, ParamStore, Tape, Var, PROB_CLIP};
use crate::scorer::{init_model, predict_prob, score_on_tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub window_secs: i64,
    pub layers: Vec<LayerKind>,
    pub val_fraction: f64,
    pub negative_ratio: usize,
    /// Share of the event log (by time) whose clicks become samples; the
    /// graph is built from the earlier part only.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            epochs: 300,
            lr: 0.001,
            batch: 128,
            dim: model.dim,
            heads: model.heads,
            time_dim: model.time_dim,
            window_secs: 6 * HOUR,
            layers: model.layers,
            val_fraction: 0.2,
            negative_ratio: 4,
            holdout_fraction: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the reduced epoch count used for desk-scale runs.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            time_dim: self.time_dim,
            window_secs: self.window_secs,
            layers: self.layers.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.negative_ratio == 0 {
            return Err(Error::Config("negative ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// A (user, ad) pair with its label and loss weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub user: String,
    pub ad: String,
    /// Platform of the click the sample was drawn for.
    pub platform: String,
    pub label: u8,
    pub weight: f64,
}

/// `N / (2·N_y)` per sample.
pub fn class_weights(labels: &[u8]) -> Result<Vec<f64>> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input(
            "class weights need both classes present".into(),
        ));
    }
    let (wp, wn) = (n / (2.0 * pos as f64), n / (2.0 * neg as f64));
    Ok(labels
        .iter()
        .map(|&y| if y == 1 { wp } else { wn })
        .collect())
}

/// Sets each sample's weight from `class_weights` of its split.
pub fn apply_class_weights(samples: &mut [LabeledSample]) -> Result<()> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    for (s, w) in samples.iter_mut().zip(class_weights(&labels)?) {
        s.weight = w;
    }
    Ok(())
}

/// `−Σ w [y ln p + (1−y) ln(1−p)]` on already-clipped probabilities.
pub fn weighted_ce(probs: &[f64], labels: &[u8], weights: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.len() != weights.len() {
        return Err(Error::shape(
            "weighted_ce",
            format!(
                "{} probabilities, {} labels, {} weights",
                probs.len(),
                labels.len(),
                weights.len()
            ),
        ));
    }
    let mut loss = 0.0;
    for ((&p, &y), &w) in probs.iter().zip(labels).zip(weights) {
        let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        let y = y as f64;
        loss -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub params: ParamStore,
    /// Epoch the parameters were saved after (1-based); `None` for the
    /// initialisation.
    pub epoch: Option<usize>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub snapshot: Snapshot,
    pub trace: Vec<EpochRecord>,
}

/// `epoch,train_loss,val_loss` rows.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

/// A sample resolved against an [`Encoder`].
#[derive(Clone, Copy, Debug)]
struct Resolved {
    user: usize,
    ad: usize,
    label: f64,
    weight: f64,
}

fn resolve(enc: &Encoder<'_>, samples: &[LabeledSample]) -> Result<Vec<Resolved>> {
    samples
        .iter()
        .map(|s| {
            let user = enc.user_index(&s.user).ok_or_else(|| {
                Error::Input(format!("sample references unknown user {}", s.user))
            })?;
            let ad = enc
                .ad_index(&s.ad)
                .ok_or_else(|| Error::Input(format!("sample references unknown ad {}", s.ad)))?;
            Ok(Resolved {
                user,
                ad,
                label: s.label as f64,
                weight: s.weight,
            })
        })
        .collect()
}

/// Distinct values in first-appearance order, and each input's position.
fn compact(values: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashMap::new();
    let mut unique = Vec::new();
    let pos = values
        .map(|v| {
            *seen.entry(v).or_insert_with(|| {
                unique.push(v);
                unique.len() - 1
            })
        })
        .collect();
    (unique, pos)
}

/// Summed weighted loss of a batch, recorded on `tape`.
fn batch_loss(
    tape: &mut Tape,
    params: &ParamStore,
    enc: &Encoder<'_>,
    batch: &[Resolved],
) -> Result<Var> {
    let (users, upos) = compact(batch.iter().map(|s| s.user));
    let (ads, apos) = compact(batch.iter().map(|s| s.ad));
    let encoded = enc.forward(tape, params, &users, &ads)?;
    let pairs: Vec<(usize, usize)> = upos.into_iter().zip(apos).collect();
    let logits = score_on_tape(
        tape,
        params,
        encoded.states,
        &encoded.user_offsets,
        encoded.ads,
        &pairs,
    )?;
    let labels: Arc<[f64]> = batch.iter().map(|s| s.label).collect();
    let weights: Arc<[f64]> = batch.iter().map(|s| s.weight).collect();
    tape.weighted_bce(logits, labels, weights)
}

/// Raw scores of resolved samples from one embedding pass.
fn scores_of(params: &ParamStore, enc: &Encoder<'_>, samples: &[Resolved]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let (users, upos) = compact(samples.iter().map(|s| s.user));
    let (ads, apos) = compact(samples.iter().map(|s| s.ad));
    let mut tape = Tape::new();
    let encoded = enc.forward(&mut tape, params, &users, &ads)?;
    let pairs: Vec<(usize, usize)> = upos.into_iter().zip(apos).collect();
    let s = score_on_tape(
        &mut tape,
        params,
        encoded.states,
        &encoded.user_offsets,
        encoded.ads,
        &pairs,
    )?;
    Ok(tape.value(s).values().to_vec())
}

/// Raw scores of `samples` under `params`.
pub fn predict_scores(
    params: &ParamStore,
    enc: &Encoder<'_>,
    samples: &[LabeledSample],
) -> Result<Vec<f64>> {
    scores_of(params, enc, &resolve(enc, samples)?)
}

fn mean_loss(params: &ParamStore, enc: &Encoder<'_>, samples: &[Resolved]) -> Result<f64> {
    let scores = scores_of(params, enc, samples)?;
    let probs: Vec<f64> = scores.iter().map(|&s| predict_prob(s)).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label as u8).collect();
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    Ok(weighted_ce(&probs, &labels, &weights)? / samples.len() as f64)
}

/// Trains from a fresh initialisation. Losses in the trace are per-sample
/// means of the weighted cross-entropy.
pub fn train(
    graph: &HeteroGraph,
    train_set: &[LabeledSample],
    validation: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    let model = cfg.model_config();
    let enc = Encoder::new(graph, &model)?;
    let train_samples = resolve(&enc, train_set)?;
    let val_samples = resolve(&enc, validation)?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Input(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let mut params = init_model(&model, cfg.seed)?;
    let mut snapshot = Snapshot {
        params: params.clone(),
        epoch: None,
        val_loss: None,
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let adam = AdamConfig::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<Resolved> = chunk.iter().map(|&i| train_samples[i]).collect();
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &params, &enc, &batch)
                .map_err(|e| Error::Runtime(format!("epoch {epoch}, batch {b}: {e}")))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {b}: loss is {value}"
                )));
            }
            let grads = tape.backward(loss)?;
            params
                .adam_step(&grads, cfg.lr, adam)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            total += value;
        }
        let train_loss = total / train_samples.len() as f64;
        let val_loss = mean_loss(&params, &enc, &val_samples)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: validation loss is {val_loss}"
            )));
        }
        log::info!("epoch {epoch}: train loss {train_loss:.6}, validation loss {val_loss:.6}");
        if snapshot.val_loss.is_none_or(|best| val_loss < best) {
            snapshot = Snapshot {
                params: params.clone(),
                epoch: Some(epoch),
                val_loss: Some(val_loss),
            };
        }
        trace.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
    }
    Ok(TrainRun { snapshot, trace })
}

/// Thresholded metrics and AUC per platform and merged.
pub fn evaluate(
    params: &ParamStore,
    graph: &HeteroGraph,
    model: &ModelConfig,
    samples: &[LabeledSample],
    threshold: f64,
) -> Result<MetricsReport> {
    check_params(model, params)?;
    let enc = Encoder::new(graph, model)?;
    let probs: Vec<f64> = predict_scores(params, &enc, samples)?
        .into_iter()
        .map(predict_prob)
        .collect();
    report_from_probs(&probs, samples, threshold)
}

/// Metrics of arbitrary per-sample probabilities (or any scores in
/// `[0, 1]`).
pub fn report_from_probs(
    probs: &[f64],
    samples: &[LabeledSample],
    threshold: f64,
) -> Result<MetricsReport> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let platforms: Vec<String> = samples.iter().map(|s| s.platform.clone()).collect();
    MetricsReport::from_predictions(probs, &labels, &platforms, threshold)
}

/// Trained parameters with the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub config: TrainConfig,
    pub snapshot: Snapshot,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let model: Self = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        model.config.validate()?;
        check_params(&model.config.model_config(), &model.snapshot.params)?;
        Ok(model)
    }
}
