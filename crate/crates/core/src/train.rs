//! Optimization: decoupled-weight-decay adaptive moments with linear
//! warm-up, and the generative training loop.

use crate::bfn::{generative_loss_and_grads_with, BfnError, ClampMask, TimeSampling};
use crate::graph::GradMap;
use crate::mat::Mat;
use crate::network::Denoiser;
use crate::params::ParamSet;
use crate::rng::{tags, StreamKey};
use crate::schedule::ScheduleParams;
use crate::tokenizer::{pad_batch, PaddingStrategy, TokenSequence, TokenizerError};
use crate::vocab::Vocabulary;
use rand::seq::SliceRandom;

/// AdamW with the published defaults: betas (0.9, 0.999), eps 1e-8,
/// weight decay 0.01 applied decoupled from the adaptive step. Parameters
/// without a gradient in a step are skipped entirely.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step_counts: Vec<u64>,
    trainable: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let m = (0..params.len())
            .map(|i| {
                let (r, c) = params.value(i).shape();
                Mat::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step_counts: vec![0; params.len()],
            trainable: vec![true; params.len()],
            m,
            v,
        }
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    pub fn set_trainable(&mut self, index: usize, trainable: bool) {
        self.trainable[index] = trainable;
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) {
        for i in 0..params.len() {
            if !self.trainable[i] {
                continue;
            }
            let Some(g) = grads.get(params, i) else { continue };
            let g = g.clone();
            self.step_counts[i] += 1;
            let t = self.step_counts[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            for j in 0..p.len() {
                let gj = g.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let pj = p.data()[j];
                p.data_mut()[j] =
                    pj - lr * self.weight_decay * pj - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Export moment tensors for checkpointing, in parameter order.
    pub fn state_tensors(&self, params: &ParamSet) -> Vec<(String, Mat)> {
        let mut out = Vec::with_capacity(2 * params.len() + 1);
        for i in 0..params.len() {
            out.push((format!("optim.m.{}", params.name(i)), self.m[i].clone()));
            out.push((format!("optim.v.{}", params.name(i)), self.v[i].clone()));
        }
        let counts = Mat::from_vec(
            1,
            self.step_counts.len().max(1),
            if self.step_counts.is_empty() {
                vec![0.0]
            } else {
                self.step_counts.iter().map(|&s| s as f64).collect()
            },
        );
        out.push(("optim.step_counts".to_string(), counts));
        out
    }

    /// Restore moments saved by `state_tensors`.
    pub fn load_state(
        &mut self,
        params: &ParamSet,
        lookup: &dyn Fn(&str) -> Option<Mat>,
    ) -> Result<(), String> {
        for i in 0..params.len() {
            let name = params.name(i);
            let m = lookup(&format!("optim.m.{name}")).ok_or_else(|| format!("missing optim.m.{name}"))?;
            let v = lookup(&format!("optim.v.{name}")).ok_or_else(|| format!("missing optim.v.{name}"))?;
            if m.shape() != params.value(i).shape() || v.shape() != params.value(i).shape() {
                return Err(format!("optimizer moment shape mismatch for {name}"));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        if let Some(counts) = lookup("optim.step_counts") {
            if counts.len() == self.step_counts.len() {
                for (slot, &c) in self.step_counts.iter_mut().zip(counts.data()) {
                    *slot = c as u64;
                }
            }
        }
        Ok(())
    }
}

/// Linear warm-up to a constant base rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_init: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule { base, warmup_init: base, warmup_steps: 0 }
    }

    /// Learning rate for 1-based step `step`.
    pub fn at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.base
        } else {
            self.warmup_init + (self.base - self.warmup_init) * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub p_uncond: f64,
    pub padding: PaddingStrategy,
    pub seed: u64,
    pub use_dropout: bool,
    /// Global-norm gradient clip; the alpha-weighted loss spikes by a factor
    /// of ~alpha(1)/alpha(0) across drawn times, and clipping keeps
    /// desk-scale learning rates stable against those spikes.
    pub grad_clip: Option<f64>,
    pub time_sampling: TimeSampling,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStep {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug)]
pub enum TrainError {
    Bfn(BfnError),
    Tokenizer(TokenizerError),
    EmptyDataset,
    LabelCountMismatch { labels: usize, sequences: usize },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Bfn(e) => write!(f, "{e}"),
            TrainError::Tokenizer(e) => write!(f, "{e}"),
            TrainError::EmptyDataset => write!(f, "empty dataset"),
            TrainError::LabelCountMismatch { labels, sequences } => {
                write!(f, "{labels} label rows for {sequences} sequences")
            }
        }
    }
}

impl std::error::Error for TrainError {}

impl From<BfnError> for TrainError {
    fn from(e: BfnError) -> Self {
        TrainError::Bfn(e)
    }
}

impl From<TokenizerError> for TrainError {
    fn from(e: TokenizerError) -> Self {
        TrainError::Tokenizer(e)
    }
}

/// Generative training data: encoded sequences with optional per-sequence
/// conditioning labels and context clamp masks (masks are defined at the
/// sequence's own length and padded to the batch width internally).
pub struct GenerativeData {
    pub sequences: Vec<TokenSequence>,
    pub labels: Option<Vec<Vec<f64>>>,
    pub context_masks: Option<Vec<ClampMask>>,
}

/// Train the denoiser, invoking `on_step` after every optimizer update.
/// Epoch shuffling and every stochastic draw derive from (seed, epoch,
/// batch, sequence), so a run resumed from `start_epoch` with the same seed
/// reproduces an uninterrupted run exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_generative(
    net: &mut Denoiser,
    optimizer: &mut AdamW,
    data: &GenerativeData,
    schedule: &ScheduleParams,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    start_epoch: usize,
    start_step: u64,
    mut on_step: impl FnMut(&TrainStep),
) -> Result<u64, TrainError> {
    let n = data.sequences.len();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(labels) = &data.labels {
        if labels.len() != n {
            return Err(TrainError::LabelCountMismatch { labels: labels.len(), sequences: n });
        }
    }
    let root = StreamKey::new(cfg.seed);
    let mut step = start_step;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut root.child(tags::SHUFFLE).child(epoch as u64).rng());
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<TokenSequence> =
                chunk.iter().map(|&i| data.sequences[i].clone()).collect();
            let batch = pad_batch(&seqs, cfg.padding, vocab)?;
            let labels: Option<Vec<Vec<f64>>> = data
                .labels
                .as_ref()
                .map(|ls| chunk.iter().map(|&i| ls[i].clone()).collect());
            let masks: Option<Vec<ClampMask>> = data
                .context_masks
                .as_ref()
                .map(|ms| {
                    chunk
                        .iter()
                        .map(|&i| pad_mask_to(&ms[i], batch.width(), vocab))
                        .collect::<Result<Vec<_>, _>>()
                })
                .transpose()?;
            let stream = root.child(epoch as u64).child(batch_idx as u64);
            let (loss, mut grads) = generative_loss_and_grads_with(
                &batch,
                net,
                schedule,
                cfg.p_uncond,
                labels.as_deref(),
                masks.as_deref(),
                cfg.use_dropout,
                &stream,
                cfg.time_sampling,
            )?;
            if let Some(clip) = cfg.grad_clip {
                grads.clip_global_norm(clip);
            }
            step += 1;
            let lr = cfg.lr.at(step);
            optimizer.step(net.params_mut(), &grads, lr);
            on_step(&TrainStep { step, epoch, lr, loss });
        }
    }
    Ok(step)
}

/// Extend a clamp mask with unclamped pad positions up to `width`.
pub fn pad_mask_to(
    mask: &ClampMask,
    width: usize,
    vocab: &Vocabulary,
) -> Result<ClampMask, BfnError> {
    let mut fixed = mask.fixed().to_vec();
    let mut ids = mask.reference().ids().to_vec();
    while fixed.len() < width {
        fixed.push(false);
        ids.push(vocab.pad_id());
    }
    ClampMask::new(fixed, TokenSequence::from_raw(ids), vocab.len())
}
