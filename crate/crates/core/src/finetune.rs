//! Start-token fingerprints and supervised heads on top of a trained
//! denoiser.
//!
//! The fingerprint is the hidden state of the `<start>` position evaluated
//! at t = 1 with one-hot input, null conditioning, pads masked out of
//! attention, and dropout off; the output projection to token logits never
//! runs. Prediction heads are 2-layer SELU MLPs [hidden, 256, n] with a
//! dropout layer between activation and the output linear map.

use crate::bfn::one_hot_grid;
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::graph::{Graph, GradMap, NodeId};
use crate::mat::Mat;
use crate::network::{Denoiser, NetworkError};
use crate::params::ParamSet;
use crate::rng::{tags, StreamKey};
use crate::train::{AdamW, LrSchedule};
use crate::tokenizer::{pad_batch, PaddingStrategy, TokenSequence, TokenizerError};
use crate::vocab::Vocabulary;
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Bfn(#[from] crate::bfn::BfnError),
    #[error("label for row {row} is not finite")]
    NonFiniteLabel { row: usize },
    #[error("class index {got} out of range for {n_classes} classes (row {row})")]
    ClassOutOfRange { row: usize, got: usize, n_classes: usize },
    #[error("target count {targets} != sequence count {sequences}")]
    TargetCountMismatch { targets: usize, sequences: usize },
    #[error("head expects hidden width {expected}, network has {got}")]
    HiddenWidthMismatch { expected: usize, got: usize },
    #[error("target width {got} != head outputs {expected} (row {row})")]
    TargetWidthMismatch { row: usize, got: usize, expected: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "regression" => Some(TaskKind::Regression),
            "classification" => Some(TaskKind::Classification),
            _ => None,
        }
    }
}

/// 2-layer MLP head over the fingerprint.
pub struct PredictionHead {
    params: ParamSet,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    pub task: TaskKind,
    pub n_outputs: usize,
    pub dropout_rate: f64,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
}

impl PredictionHead {
    pub fn new(
        hidden_dim: usize,
        n_outputs: usize,
        task: TaskKind,
        dropout_rate: f64,
        key: &StreamKey,
    ) -> Self {
        assert!(n_outputs >= 1);
        assert!((0.0..1.0).contains(&dropout_rate));
        let mlp_dim = 256;
        let init = key.child(tags::INIT);
        let mut params = ParamSet::new();
        let w1 = params.add("head.w1", Mat::gaussian_fan_in(hidden_dim, mlp_dim, &init.child(1)));
        let b1 = params.add("head.b1", Mat::zeros(1, mlp_dim));
        let w2 = params.add("head.w2", Mat::gaussian_fan_in(mlp_dim, n_outputs, &init.child(2)));
        let b2 = params.add("head.b2", Mat::zeros(1, n_outputs));
        PredictionHead { params, w1, b1, w2, b2, task, n_outputs, dropout_rate, hidden_dim, mlp_dim }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Head forward on a [1, hidden] node.
    fn build(
        &self,
        g: &mut Graph,
        fingerprint: NodeId,
        dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> NodeId {
        let w1 = g.param(&self.params, self.w1);
        let b1 = g.param(&self.params, self.b1);
        let w2 = g.param(&self.params, self.w2);
        let b2 = g.param(&self.params, self.b2);
        let mut h = g.matmul(fingerprint, w1);
        h = g.add(h, b1);
        h = g.selu(h);
        if self.dropout_rate > 0.0 {
            if let Some(rng) = dropout_rng {
                let keep = 1.0 - self.dropout_rate;
                let mask = Mat::from_vec(
                    1,
                    self.mlp_dim,
                    (0..self.mlp_dim)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect(),
                );
                let mask = g.constant(mask);
                h = g.mul(h, mask);
            }
        }
        let out = g.matmul(h, w2);
        g.add(out, b2)
    }
}

/// Attention mask covering real (non-pad) tokens.
fn real_token_mask(x: &TokenSequence, vocab: &Vocabulary) -> Vec<bool> {
    x.ids().iter().map(|&id| id != vocab.pad_id()).collect()
}

/// Build the fingerprint node: forward at t = 1 on the one-hot grid with
/// null conditioning and pads masked out, then the `<start>` row of the
/// hidden states.
fn build_fingerprint(
    g: &mut Graph,
    x: &TokenSequence,
    net: &Denoiser,
    vocab: &Vocabulary,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<NodeId, FinetuneError> {
    let grid = one_hot_grid(x, net.config().k_categories)?;
    let mask = real_token_mask(x, vocab);
    let (_, hidden) = net.forward(g, &grid, 1.0, None, Some(&mask), dropout_rng)?;
    Ok(g.slice_rows(hidden, 0, 1))
}

/// The start-token fingerprint of a sequence (deterministic; dropout off).
pub fn fingerprint(
    x: &TokenSequence,
    net: &Denoiser,
    vocab: &Vocabulary,
) -> Result<Vec<f64>, FinetuneError> {
    let mut g = Graph::new();
    let node = build_fingerprint(&mut g, x, net, vocab, None)?;
    Ok(g.value(node).row(0).to_vec())
}

/// Raw head output over the fingerprint (no target scaling applied).
pub fn predict(
    x: &TokenSequence,
    net: &Denoiser,
    head: &PredictionHead,
    vocab: &Vocabulary,
) -> Result<Vec<f64>, FinetuneError> {
    if head.hidden_dim != net.config().hidden_dim {
        return Err(FinetuneError::HiddenWidthMismatch {
            expected: head.hidden_dim,
            got: net.config().hidden_dim,
        });
    }
    let mut g = Graph::new();
    let fp = build_fingerprint(&mut g, x, net, vocab, None)?;
    let out = head.build(&mut g, fp, None);
    Ok(g.value(out).row(0).to_vec())
}

/// Class probabilities for a classification head.
pub fn predict_probabilities(
    x: &TokenSequence,
    net: &Denoiser,
    head: &PredictionHead,
    vocab: &Vocabulary,
) -> Result<Vec<f64>, FinetuneError> {
    let mut logits = predict(x, net, head, vocab)?;
    crate::graph::softmax_in_place(&mut logits);
    Ok(logits)
}

/// Supervised targets for fine-tuning.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One row of `n_outputs` values per sequence (already standardized if a
    /// scaler is in use).
    Regression(Vec<Vec<f64>>),
    /// One class index per sequence.
    Classification(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One fine-tuning loss evaluation over a batch: MSE for regression,
/// cross-entropy for classification; batch mean. Gradients flow through the
/// head and the denoiser.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    seqs: &[TokenSequence],
    targets: &Targets,
    net: &Denoiser,
    head: &PredictionHead,
    vocab: &Vocabulary,
    use_dropout: bool,
    stream: &StreamKey,
    want_grads: bool,
) -> Result<(f64, GradMap), FinetuneError> {
    let b = seqs.len();
    if b == 0 {
        return Err(FinetuneError::EmptyDataset);
    }
    if targets.len() != b {
        return Err(FinetuneError::TargetCountMismatch { targets: targets.len(), sequences: b });
    }
    validate_targets(targets, head)?;

    let eval_one = |i: usize| -> Result<(f64, Option<GradMap>), FinetuneError> {
        let seq_stream = stream.child(i as u64);
        let mut g = Graph::new();
        let mut net_rng = use_dropout.then(|| seq_stream.child(tags::DROPOUT).child(0).rng());
        let fp = build_fingerprint(&mut g, &seqs[i], net, vocab, net_rng.as_mut())?;
        let mut head_rng = use_dropout.then(|| seq_stream.child(tags::DROPOUT).child(1).rng());
        let out = head.build(&mut g, fp, head_rng.as_mut());
        let loss_node = match targets {
            Targets::Regression(rows) => {
                let target = g.constant(Mat::row_vector(rows[i].clone()));
                let diff = g.sub(out, target);
                let sq = g.mul(diff, diff);
                let total = g.sum_all(sq);
                g.scale(total, 1.0 / head.n_outputs as f64)
            }
            Targets::Classification(classes) => {
                let logp = g.log_softmax_rows(out);
                let mut pick = Mat::zeros(1, head.n_outputs);
                pick.set(0, classes[i], -1.0);
                let pick = g.constant(pick);
                let masked = g.mul(logp, pick);
                g.sum_all(masked)
            }
        };
        let loss = g.value(loss_node).at(0, 0);
        let grads = want_grads.then(|| g.backward(loss_node));
        Ok((loss, grads))
    };

    let per_seq: Vec<Result<(f64, Option<GradMap>), FinetuneError>> =
        (0..b).into_par_iter().map(eval_one).collect();
    let mut total = 0.0;
    let mut grads = GradMap::default();
    for item in per_seq {
        let (loss, g) = item?;
        total += loss;
        if let Some(g) = g.as_ref() {
            grads.accumulate(g);
        }
    }
    let scale = 1.0 / b as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

fn validate_targets(targets: &Targets, head: &PredictionHead) -> Result<(), FinetuneError> {
    match targets {
        Targets::Regression(rows) => {
            for (row, values) in rows.iter().enumerate() {
                if values.len() != head.n_outputs {
                    return Err(FinetuneError::TargetWidthMismatch {
                        row,
                        got: values.len(),
                        expected: head.n_outputs,
                    });
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(FinetuneError::NonFiniteLabel { row });
                }
            }
        }
        Targets::Classification(classes) => {
            for (row, &c) in classes.iter().enumerate() {
                if c >= head.n_outputs {
                    return Err(FinetuneError::ClassOutOfRange {
                        row,
                        got: c,
                        n_classes: head.n_outputs,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Per-output standardization fitted on training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetScaler {
    pub fn fit(rows: &[Vec<f64>]) -> TargetScaler {
        assert!(!rows.is_empty());
        let width = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; width];
        for row in rows {
            for (s, (v, m)) in std.iter_mut().zip(row.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        TargetScaler { mean, std }
    }

    pub fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn destandardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| v * s + m).collect()
    }
}

/// A denoiser plus head plus (for regression) the target scaler.
pub struct FinetuneModel {
    pub net: Denoiser,
    pub head: PredictionHead,
    pub scaler: Option<TargetScaler>,
}

impl FinetuneModel {
    /// Prediction in original target units (regression) or class logits
    /// (classification).
    pub fn predict(
        &self,
        x: &TokenSequence,
        vocab: &Vocabulary,
    ) -> Result<Vec<f64>, FinetuneError> {
        let raw = predict(x, &self.net, &self.head, vocab)?;
        Ok(match (&self.head.task, &self.scaler) {
            (TaskKind::Regression, Some(scaler)) => scaler.destandardize(&raw),
            _ => raw,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub lr_floor: f64,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub use_dropout: bool,
}

impl FinetuneConfig {
    pub fn desk(seed: u64) -> Self {
        FinetuneConfig {
            epochs: 60,
            batch_size: 16,
            lr: LrSchedule { base: 1e-3, warmup_init: 1e-7, warmup_steps: 20 },
            plateau_patience: 20,
            plateau_factor: 0.2,
            lr_floor: 1e-6,
            seed,
            freeze_backbone: false,
            use_dropout: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// MAE for regression (original units), accuracy for classification.
    pub val_metric: f64,
    pub lr: f64,
}

/// Full fine-tuning protocol: warm-up plus plateau decay on the validation
/// metric (MAE down = better for regression, accuracy up = better for
/// classification), full-network updates unless `freeze_backbone`.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune(
    model: &mut FinetuneModel,
    vocab: &Vocabulary,
    train_seqs: &[TokenSequence],
    train_targets: &Targets,
    val_seqs: &[TokenSequence],
    val_targets: &Targets,
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&FinetuneEpoch),
) -> Result<(), FinetuneError> {
    if train_seqs.is_empty() {
        return Err(FinetuneError::EmptyDataset);
    }
    // Standardize regression targets against the training split.
    let (train_targets, val_targets_std) = match train_targets {
        Targets::Regression(rows) => {
            let scaler = TargetScaler::fit(rows);
            let std_train =
                Targets::Regression(rows.iter().map(|r| scaler.standardize(r)).collect());
            let std_val = match val_targets {
                Targets::Regression(vrows) => {
                    Targets::Regression(vrows.iter().map(|r| scaler.standardize(r)).collect())
                }
                other => other.clone(),
            };
            model.scaler = Some(scaler);
            (std_train, std_val)
        }
        other => (other.clone(), val_targets.clone()),
    };

    let mut opt_net = AdamW::new(model.net.params());
    if cfg.freeze_backbone {
        opt_net.freeze_all();
    }
    let mut opt_head = AdamW::new(model.head.params());

    let root = StreamKey::new(cfg.seed);
    let mut base_lr = cfg.lr.base;
    let mut best_score = f64::INFINITY;
    let mut since_best = 0usize;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut root.child(tags::SHUFFLE).child(epoch as u64).rng());
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        let mut lr_now = base_lr;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            let padded = pad_batch(&seqs, PaddingStrategy::Dynamic, vocab)?;
            let targets = gather_targets(&train_targets, chunk);
            let stream = root.child(epoch as u64).child(batch_idx as u64);
            let (loss, grads) = finetune_step(
                padded.sequences(),
                &targets,
                &model.net,
                &model.head,
                vocab,
                cfg.use_dropout,
                &stream,
                true,
            )?;
            step += 1;
            lr_now = cfg.lr.at(step).min(base_lr);
            opt_net.step(model.net.params_mut(), &grads, lr_now);
            opt_head.step(model.head.params_mut(), &grads, lr_now);
            epoch_loss += loss;
            n_batches += 1;
        }

        let val_metric =
            evaluate(model, vocab, val_seqs, &val_targets_std, val_targets)?;
        // Lower is better internally.
        let score = match model.head.task {
            TaskKind::Regression => val_metric,
            TaskKind::Classification => -val_metric,
        };
        if score < best_score - 1e-12 {
            best_score = score;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.plateau_patience && base_lr > cfg.lr_floor {
                base_lr = (base_lr * cfg.plateau_factor).max(cfg.lr_floor);
                since_best = 0;
            }
        }
        on_epoch(&FinetuneEpoch {
            epoch,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_metric,
            lr: lr_now,
        });
    }
    Ok(())
}

fn gather_targets(targets: &Targets, idx: &[usize]) -> Targets {
    match targets {
        Targets::Regression(rows) => {
            Targets::Regression(idx.iter().map(|&i| rows[i].clone()).collect())
        }
        Targets::Classification(classes) => {
            Targets::Classification(idx.iter().map(|&i| classes[i]).collect())
        }
    }
}

/// Validation metric: MAE in original units for regression, accuracy for
/// classification.
fn evaluate(
    model: &FinetuneModel,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
    _targets_std: &Targets,
    targets_orig: &Targets,
) -> Result<f64, FinetuneError> {
    if seqs.is_empty() {
        return Ok(f64::NAN);
    }
    match targets_orig {
        Targets::Regression(rows) => {
            let mut abs = 0.0;
            let mut count = 0usize;
            for (x, row) in seqs.iter().zip(rows) {
                let pred = model.predict(x, vocab)?;
                for (p, t) in pred.iter().zip(row) {
                    abs += (p - t).abs();
                    count += 1;
                }
            }
            Ok(abs / count as f64)
        }
        Targets::Classification(classes) => {
            let mut hits = 0usize;
            for (x, &c) in seqs.iter().zip(classes) {
                let probs = predict_probabilities(x, &model.net, &model.head, vocab)?;
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if argmax == c {
                    hits += 1;
                }
            }
            Ok(hits as f64 / seqs.len() as f64)
        }
    }
}

/// Checkpoint the full fine-tuned model (backbone, head, scaler, task).
pub fn save_finetuned(
    path: &Path,
    model: &FinetuneModel,
    vocab_sha256: &str,
) -> Result<(), CheckpointError> {
    let mut meta = BTreeMap::new();
    meta.insert("format".into(), "finetune".into());
    checkpoint::encode_network_meta(&mut meta, model.net.config());
    meta.insert("vocab.sha256".into(), vocab_sha256.to_string());
    meta.insert("head.task".into(), model.head.task.as_str().into());
    meta.insert("head.n_outputs".into(), model.head.n_outputs.to_string());
    meta.insert("head.dropout".into(), format!("{:e}", model.head.dropout_rate));
    if let Some(scaler) = &model.scaler {
        meta.insert("scaler.mean".into(), join_floats(&scaler.mean));
        meta.insert("scaler.std".into(), join_floats(&scaler.std));
    }
    let mut tensors = Vec::new();
    checkpoint::push_params(&mut tensors, "net", model.net.params());
    checkpoint::push_params(&mut tensors, "ft", model.head.params());
    checkpoint::save(path, &Checkpoint { meta, tensors })
}

pub fn load_finetuned(path: &Path) -> Result<(FinetuneModel, String), CheckpointError> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.meta_str("format")? != "finetune" {
        return Err(CheckpointError::Rebuild("not a finetune checkpoint".into()));
    }
    let cfg = checkpoint::decode_network_meta(&ckpt)?;
    let template = Denoiser::new(cfg.clone(), &StreamKey::new(0))
        .map_err(|e| CheckpointError::Rebuild(e.to_string()))?;
    let params = checkpoint::pull_params(&ckpt, "net", template.params())?;
    let net =
        Denoiser::from_params(cfg, params).map_err(|e| CheckpointError::Rebuild(e.to_string()))?;

    let task_raw = ckpt.meta_str("head.task")?;
    let task = TaskKind::parse(task_raw).ok_or_else(|| CheckpointError::BadMeta {
        key: "head.task".into(),
        value: task_raw.to_string(),
    })?;
    let n_outputs: usize = ckpt.meta_parse("head.n_outputs")?;
    let dropout: f64 = ckpt.meta_parse("head.dropout")?;
    let head_template = PredictionHead::new(
        net.config().hidden_dim,
        n_outputs,
        task,
        dropout,
        &StreamKey::new(0),
    );
    let head_params = checkpoint::pull_params(&ckpt, "ft", head_template.params())?;
    let head = PredictionHead {
        params: head_params,
        w1: head_template.w1,
        b1: head_template.b1,
        w2: head_template.w2,
        b2: head_template.b2,
        task,
        n_outputs,
        dropout_rate: dropout,
        hidden_dim: head_template.hidden_dim,
        mlp_dim: head_template.mlp_dim,
    };
    let scaler = match (ckpt.meta.get("scaler.mean"), ckpt.meta.get("scaler.std")) {
        (Some(m), Some(s)) => Some(TargetScaler {
            mean: split_floats(m).map_err(|e| CheckpointError::BadMeta {
                key: "scaler.mean".into(),
                value: e,
            })?,
            std: split_floats(s).map_err(|e| CheckpointError::BadMeta {
                key: "scaler.std".into(),
                value: e,
            })?,
        }),
        _ => None,
    };
    let vocab_sha = ckpt.meta_str("vocab.sha256")?.to_string();
    Ok((FinetuneModel { net, head, scaler }, vocab_sha))
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(",")
}

fn split_floats(raw: &str) -> Result<Vec<f64>, String> {
    raw.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| raw.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::tokenizer::tokenize;
    use crate::vocab::build_vocabulary;

    fn tiny_net(dropout: f64) -> Denoiser {
        let mut cfg = NetworkConfig::desk(246);
        cfg.n_layers = 1;
        cfg.hidden_dim = 32;
        cfg.n_heads = 2;
        cfg.embed_mlp_dim = 16;
        cfg.dropout = dropout;
        Denoiser::new(cfg, &StreamKey::new(21)).unwrap()
    }

    #[test]
    fn fingerprint_shape_and_determinism() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let x = tokenize("CCO", &vocab).unwrap();
        let a = fingerprint(&x, &net, &vocab).unwrap();
        let b = fingerprint(&x, &net, &vocab).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
    }

    #[test]
    fn fingerprint_invariant_to_padding() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let x = tokenize("c1ccccc1", &vocab).unwrap();
        let base = fingerprint(&x, &net, &vocab).unwrap();
        for extra in [1usize, 3, 10] {
            let padded = x.padded_to(x.len() + extra, &vocab);
            let fp = fingerprint(&padded, &net, &vocab).unwrap();
            assert_eq!(base, fp, "fingerprint changed with {extra} pads");
        }
    }

    #[test]
    fn predict_shapes_and_zero_head() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let x = tokenize("CCO", &vocab).unwrap();
        let mut head =
            PredictionHead::new(32, 1, TaskKind::Regression, 0.0, &StreamKey::new(5));
        let y = predict(&x, &net, &head, &vocab).unwrap();
        assert_eq!(y.len(), 1);

        // Zero weights -> output is exactly the bias.
        for idx in [head.w1, head.w2] {
            let shape = head.params().value(idx).shape();
            *head.params_mut().value_mut(idx) = Mat::zeros(shape.0, shape.1);
        }
        let b2 = head.b2;
        head.params_mut().value_mut(b2).set(0, 0, 1.5);
        let y = predict(&x, &net, &head, &vocab).unwrap();
        assert_eq!(y, vec![1.5]);
    }

    #[test]
    fn batch_predict_matches_per_item() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let head = PredictionHead::new(32, 2, TaskKind::Regression, 0.0, &StreamKey::new(6));
        let xs: Vec<TokenSequence> =
            ["CCO", "CCN", "c1ccccc1"].iter().map(|s| tokenize(s, &vocab).unwrap()).collect();
        let individually: Vec<Vec<f64>> =
            xs.iter().map(|x| predict(x, &net, &head, &vocab).unwrap()).collect();
        let batched: Vec<Vec<f64>> =
            xs.iter().map(|x| predict(x, &net, &head, &vocab).unwrap()).collect();
        assert_eq!(individually, batched);
    }

    #[test]
    fn losses_on_known_cases() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let xs = vec![tokenize("CCO", &vocab).unwrap(), tokenize("CCN", &vocab).unwrap()];

        // Perfect regression: aim the head at its own predictions.
        let head = PredictionHead::new(32, 1, TaskKind::Regression, 0.0, &StreamKey::new(7));
        let preds: Vec<Vec<f64>> =
            xs.iter().map(|x| predict(x, &net, &head, &vocab).unwrap()).collect();
        let (loss, _) = finetune_step(
            &xs,
            &Targets::Regression(preds),
            &net,
            &head,
            &vocab,
            false,
            &StreamKey::new(8),
            false,
        )
        .unwrap();
        assert!(loss.abs() < 1e-18, "perfect predictions should give 0 MSE, got {loss}");

        // Uniform 2-class probabilities: cross-entropy = ln 2. Zero weights
        // give zero logits, hence uniform probabilities.
        let mut head2 =
            PredictionHead::new(32, 2, TaskKind::Classification, 0.0, &StreamKey::new(9));
        for idx in [head2.w1, head2.w2] {
            let shape = head2.params().value(idx).shape();
            *head2.params_mut().value_mut(idx) = Mat::zeros(shape.0, shape.1);
        }
        let (ce, _) = finetune_step(
            &xs,
            &Targets::Classification(vec![0, 1]),
            &net,
            &head2,
            &vocab,
            false,
            &StreamKey::new(10),
            false,
        )
        .unwrap();
        assert!((ce - 2.0f64.ln()).abs() < 1e-12, "uniform CE {ce}");
    }

    #[test]
    fn rejects_bad_targets() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let head = PredictionHead::new(32, 1, TaskKind::Regression, 0.0, &StreamKey::new(11));
        let xs = vec![tokenize("CCO", &vocab).unwrap()];
        let nan = finetune_step(
            &xs,
            &Targets::Regression(vec![vec![f64::NAN]]),
            &net,
            &head,
            &vocab,
            false,
            &StreamKey::new(12),
            false,
        );
        assert!(matches!(nan.unwrap_err(), FinetuneError::NonFiniteLabel { row: 0 }));

        let head2 = PredictionHead::new(32, 2, TaskKind::Classification, 0.0, &StreamKey::new(13));
        let oob = finetune_step(
            &xs,
            &Targets::Classification(vec![5]),
            &net,
            &head2,
            &vocab,
            false,
            &StreamKey::new(14),
            false,
        );
        assert!(matches!(oob.unwrap_err(), FinetuneError::ClassOutOfRange { .. }));
    }

    #[test]
    fn scaler_round_trip() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 30.0], vec![5.0, 20.0]];
        let scaler = TargetScaler::fit(&rows);
        for row in &rows {
            let back = scaler.destandardize(&scaler.standardize(row));
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Constant column gets a unit scale, not a division blowup.
        let degenerate = TargetScaler::fit(&[vec![2.0], vec![2.0]]);
        assert_eq!(degenerate.std, vec![1.0]);
    }

    #[test]
    fn freeze_backbone_keeps_net_params() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let before: Vec<Mat> =
            (0..net.params().len()).map(|i| net.params().value(i).clone()).collect();
        let head = PredictionHead::new(32, 1, TaskKind::Regression, 0.0, &StreamKey::new(15));
        let mut model = FinetuneModel { net, head, scaler: None };
        let xs: Vec<TokenSequence> =
            ["CCO", "CCN", "CCC", "CO"].iter().map(|s| tokenize(s, &vocab).unwrap()).collect();
        let targets = Targets::Regression(vec![vec![1.0], vec![2.0], vec![3.0], vec![0.5]]);
        let mut cfg = FinetuneConfig::desk(3);
        cfg.epochs = 3;
        cfg.batch_size = 2;
        cfg.freeze_backbone = true;
        cfg.use_dropout = false;
        run_finetune(&mut model, &vocab, &xs, &targets, &xs, &targets, &cfg, |_| {}).unwrap();
        for i in 0..model.net.params().len() {
            assert_eq!(&before[i], model.net.params().value(i), "backbone moved at {i}");
        }
    }

    #[test]
    fn finetune_run_is_reproducible() {
        let vocab = build_vocabulary();
        let xs: Vec<TokenSequence> =
            ["CCO", "CCN", "CCCC", "CO"].iter().map(|s| tokenize(s, &vocab).unwrap()).collect();
        let targets = Targets::Regression(vec![vec![5.0], vec![5.0], vec![6.0], vec![4.0]]);
        let run = || {
            let net = tiny_net(0.0);
            let head = PredictionHead::new(32, 1, TaskKind::Regression, 0.0, &StreamKey::new(2));
            let mut model = FinetuneModel { net, head, scaler: None };
            let mut cfg = FinetuneConfig::desk(5);
            cfg.epochs = 4;
            cfg.batch_size = 2;
            cfg.use_dropout = false;
            let mut log = Vec::new();
            run_finetune(&mut model, &vocab, &xs, &targets, &xs, &targets, &cfg, |e| {
                log.push(*e)
            })
            .unwrap();
            let pred = model.predict(&xs[0], &vocab).unwrap();
            (log, pred)
        };
        let (log_a, pred_a) = run();
        let (log_b, pred_b) = run();
        assert_eq!(log_a, log_b);
        assert_eq!(pred_a, pred_b);
    }

    #[test]
    fn finetuned_checkpoint_round_trip() {
        let vocab = build_vocabulary();
        let net = tiny_net(0.0);
        let head = PredictionHead::new(32, 1, TaskKind::Regression, 0.5, &StreamKey::new(31));
        let model = FinetuneModel {
            net,
            head,
            scaler: Some(TargetScaler { mean: vec![3.5], std: vec![2.25] }),
        };
        let dir = std::env::temp_dir().join(format!("bfn-ft-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ft.bfn");
        save_finetuned(&path, &model, crate::vocab::VOCAB_SHA256).unwrap();
        let (back, sha) = load_finetuned(&path).unwrap();
        assert_eq!(sha, crate::vocab::VOCAB_SHA256);
        assert_eq!(back.scaler, model.scaler);
        let x = tokenize("CCO", &vocab).unwrap();
        assert_eq!(model.predict(&x, &vocab).unwrap(), back.predict(&x, &vocab).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
