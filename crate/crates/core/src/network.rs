//! The denoising transformer: maps per-position categorical parameters, a
//! scalar time, and an optional conditioning vector to per-position logits.
//!
//! Architecture notes:
//! * input rows are probability vectors (one-hot rows are the special case
//!   used for fingerprints), linearly projected to the hidden width;
//! * conditioning c = time embedding + label embedding modulates every block
//!   through per-block scale/shift/gate maps (gates start at zero, so blocks
//!   begin as identities);
//! * bidirectional multi-head self-attention with a rotary position encoding
//!   carrying a per-pair exponential decay, attention logits divided by the
//!   temperature sqrt(2 * d_head);
//! * feed-forward blocks use SELU with one dropout layer inside;
//! * the final block applies conditioned scale/shift before the output
//!   projection; those pre-projection features are the hidden states the
//!   fingerprint reads.

use crate::graph::{Graph, NodeId};
use crate::mat::Mat;
use crate::params::ParamSet;
use crate::rng::{tags, StreamKey};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Rotary angle base shared with common rotary implementations.
const ROTARY_BASE: f64 = 10000.0;
/// Decay exponent denominator from the length-extrapolatable encoding.
const DECAY_SCALE_BASE: f64 = 512.0;
/// Additive pre-softmax penalty for masked attention keys. Large enough
/// that exp underflows to exactly 0.0 after max-shifting.
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("input grid is {got_rows}x{got_cols}, expected D x {expected_k}")]
    InputShape { got_rows: usize, got_cols: usize, expected_k: usize },
    #[error("conditioning vector has width {got}, model expects {expected}")]
    LabelWidth { got: usize, expected: usize },
    #[error("attention mask has length {got}, expected {expected}")]
    MaskLength { got: usize, expected: usize },
    #[error("invalid network config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub k_categories: usize,
    /// Conditioning input width; 0 means an unconditional model.
    pub label_dim: usize,
    /// Feed-forward inner width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
    /// Middle width of the time/label embedding MLPs.
    pub embed_mlp_dim: usize,
}

impl NetworkConfig {
    /// Desk-scale default: ~1.3M parameters.
    pub fn desk(k_categories: usize) -> Self {
        NetworkConfig {
            n_layers: 4,
            n_heads: 4,
            hidden_dim: 128,
            dropout: 0.01,
            k_categories,
            label_dim: 0,
            ffn_mult: 4,
            embed_mlp_dim: 256,
        }
    }

    /// The full-size configuration (12 layers, 8 heads, hidden 512).
    pub fn paper_scale(k_categories: usize) -> Self {
        NetworkConfig {
            n_layers: 12,
            n_heads: 8,
            hidden_dim: 512,
            dropout: 0.01,
            k_categories,
            label_dim: 0,
            ffn_mult: 4,
            embed_mlp_dim: 256,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Attention temperature tau = sqrt(2 * d_head).
    pub fn attention_temperature(&self) -> f64 {
        (2.0 * self.head_dim() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.hidden_dim % self.n_heads != 0 {
            return Err(NetworkError::BadConfig(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(NetworkError::BadConfig("head_dim must be even for the rotary encoding".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetworkError::BadConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.k_categories < 2 || self.n_layers == 0 || self.ffn_mult == 0 || self.embed_mlp_dim == 0 {
            return Err(NetworkError::BadConfig("degenerate dimension".into()));
        }
        Ok(())
    }
}

struct LayerIdx {
    modulation_w: usize,
    modulation_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
}

struct ParamIdx {
    input_w: usize,
    input_b: usize,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    label: Option<(usize, usize, usize, usize)>,
    layers: Vec<LayerIdx>,
    final_mod_w: usize,
    final_mod_b: usize,
    output_w: usize,
    output_b: usize,
}

pub struct Denoiser {
    config: NetworkConfig,
    params: ParamSet,
    idx: ParamIdx,
}

/// Anything that can stand in for the denoiser during loss evaluation and
/// sampling. Test stubs implement this to pin sampler behavior.
pub trait DenoiserModel {
    fn k_categories(&self) -> usize;

    /// Append the forward pass to `graph`, returning per-position logits
    /// [D, K]. `cond = None` is the null conditioning; `key_mask[d] = false`
    /// removes position d as an attention key; `dropout_rng = None` disables
    /// dropout.
    fn build_logits(
        &self,
        graph: &mut Graph,
        input: &Mat,
        t: f64,
        cond: Option<&[f64]>,
        key_mask: Option<&[bool]>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, NetworkError>;

    /// Plain evaluation without gradients.
    fn logits(
        &self,
        input: &Mat,
        t: f64,
        cond: Option<&[f64]>,
        key_mask: Option<&[bool]>,
    ) -> Result<Mat, NetworkError> {
        let mut g = Graph::new();
        let id = self.build_logits(&mut g, input, t, cond, key_mask, None)?;
        Ok(g.value(id).clone())
    }
}

impl Denoiser {
    /// Fresh network with fan-in Gaussian weights, zero biases, and zeroed
    /// modulation gates.
    pub fn new(config: NetworkConfig, key: &StreamKey) -> Result<Self, NetworkError> {
        config.validate()?;
        let init = key.child(tags::INIT);
        let mut params = ParamSet::new();
        let mut stream = 0u64;
        let mut next = |rows: usize, cols: usize| {
            stream += 1;
            Mat::gaussian_fan_in(rows, cols, &init.child(stream))
        };
        let (h, k) = (config.hidden_dim, config.k_categories);
        let e = config.embed_mlp_dim;
        let f = config.ffn_mult * h;

        let input_w = params.add("input.w", next(k, h));
        let input_b = params.add("input.b", Mat::zeros(1, h));
        let time_w1 = params.add("time.w1", next(1, e));
        let time_b1 = params.add("time.b1", Mat::zeros(1, e));
        let time_w2 = params.add("time.w2", next(e, h));
        let time_b2 = params.add("time.b2", Mat::zeros(1, h));
        let label = if config.label_dim > 0 {
            let w1 = params.add("label.w1", next(config.label_dim, e));
            let b1 = params.add("label.b1", Mat::zeros(1, e));
            let w2 = params.add("label.w2", next(e, h));
            let b2 = params.add("label.b2", Mat::zeros(1, h));
            Some((w1, b1, w2, b2))
        } else {
            None
        };

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut mod_w = next(h, 6 * h);
            // Gate columns ([2h, 3h) and [5h, 6h)) start with zero weights
            // and unit bias: residual blocks begin as identities through the
            // zero-initialized branch output maps below, while gradients
            // still reach the attention and FFN weights from the first step.
            // Gating everything to zero instead starves the attention path
            // (the model's only source of positional information) for the
            // whole of a short training run.
            let mut mod_b = Mat::zeros(1, 6 * h);
            for r in 0..h {
                for c in 0..h {
                    mod_w.set(r, 2 * h + c, 0.0);
                    mod_w.set(r, 5 * h + c, 0.0);
                }
            }
            for c in 0..h {
                mod_b.set(0, 2 * h + c, 1.0);
                mod_b.set(0, 5 * h + c, 1.0);
            }
            let name = |part: &str| format!("layer{l}.{part}");
            layers.push(LayerIdx {
                modulation_w: params.add(&name("mod.w"), mod_w),
                modulation_b: params.add(&name("mod.b"), mod_b),
                wq: params.add(&name("attn.wq"), next(h, h)),
                bq: params.add(&name("attn.bq"), Mat::zeros(1, h)),
                wk: params.add(&name("attn.wk"), next(h, h)),
                bk: params.add(&name("attn.bk"), Mat::zeros(1, h)),
                wv: params.add(&name("attn.wv"), next(h, h)),
                bv: params.add(&name("attn.bv"), Mat::zeros(1, h)),
                wo: params.add(&name("attn.wo"), Mat::zeros(h, h)),
                bo: params.add(&name("attn.bo"), Mat::zeros(1, h)),
                ffn_w1: params.add(&name("ffn.w1"), next(h, f)),
                ffn_b1: params.add(&name("ffn.b1"), Mat::zeros(1, f)),
                ffn_w2: params.add(&name("ffn.w2"), Mat::zeros(f, h)),
                ffn_b2: params.add(&name("ffn.b2"), Mat::zeros(1, h)),
            });
        }

        let final_mod_w = params.add("final.mod.w", next(h, 2 * h));
        let final_mod_b = params.add("final.mod.b", Mat::zeros(1, 2 * h));
        let output_w = params.add("output.w", next(h, k));
        let output_b = params.add("output.b", Mat::zeros(1, k));

        let idx = ParamIdx {
            input_w,
            input_b,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            label,
            layers,
            final_mod_w,
            final_mod_b,
            output_w,
            output_b,
        };
        Ok(Denoiser { config, params, idx })
    }

    /// Rebuild a denoiser around externally provided parameters (checkpoint
    /// loading). Parameter names and shapes must match `Denoiser::new`.
    pub fn from_params(config: NetworkConfig, params: ParamSet) -> Result<Self, NetworkError> {
        let template = Denoiser::new(config.clone(), &StreamKey::new(0))?;
        if template.params.len() != params.len() {
            return Err(NetworkError::BadConfig(format!(
                "parameter count mismatch: expected {}, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            if template.params.name(i) != params.name(i)
                || template.params.value(i).shape() != params.value(i).shape()
            {
                return Err(NetworkError::BadConfig(format!(
                    "parameter {} mismatch",
                    params.name(i)
                )));
            }
        }
        Ok(Denoiser { config, params, idx: template.idx })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Time embedding: 2-layer MLP [1, E, H] with SELU between layers.
    pub fn time_embed(&self, t: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let id = self.build_time_embed(&mut g, t);
        g.value(id).row(0).to_vec()
    }

    /// Label embedding: 2-layer MLP [label_dim, E, H]; null conditioning is
    /// exactly the zero vector.
    pub fn condition_embed(&self, labels: Option<&[f64]>) -> Result<Vec<f64>, NetworkError> {
        match labels {
            None => Ok(vec![0.0; self.config.hidden_dim]),
            Some(values) => {
                let mut g = Graph::new();
                let id = self.build_condition_embed(&mut g, Some(values))?;
                Ok(g.value(id).row(0).to_vec())
            }
        }
    }

    fn build_time_embed(&self, g: &mut Graph, t: f64) -> NodeId {
        let tin = g.constant(Mat::from_vec(1, 1, vec![t]));
        let w1 = g.param(&self.params, self.idx.time_w1);
        let b1 = g.param(&self.params, self.idx.time_b1);
        let w2 = g.param(&self.params, self.idx.time_w2);
        let b2 = g.param(&self.params, self.idx.time_b2);
        let h1 = g.matmul(tin, w1);
        let h1 = g.add(h1, b1);
        let act = g.selu(h1);
        let h2 = g.matmul(act, w2);
        g.add(h2, b2)
    }

    fn build_condition_embed(&self, g: &mut Graph, labels: Option<&[f64]>) -> Result<NodeId, NetworkError> {
        match labels {
            None => Ok(g.constant(Mat::zeros(1, self.config.hidden_dim))),
            Some(values) => {
                let Some((w1i, b1i, w2i, b2i)) = self.idx.label else {
                    return Err(NetworkError::LabelWidth { got: values.len(), expected: 0 });
                };
                if values.len() != self.config.label_dim {
                    return Err(NetworkError::LabelWidth {
                        got: values.len(),
                        expected: self.config.label_dim,
                    });
                }
                let lin = g.constant(Mat::row_vector(values.to_vec()));
                let w1 = g.param(&self.params, w1i);
                let b1 = g.param(&self.params, b1i);
                let w2 = g.param(&self.params, w2i);
                let b2 = g.param(&self.params, b2i);
                let h1 = g.matmul(lin, w1);
                let h1 = g.add(h1, b1);
                let act = g.selu(h1);
                let h2 = g.matmul(act, w2);
                Ok(g.add(h2, b2))
            }
        }
    }

    /// Full forward pass. Returns (logits [D, K], hidden states [D, H]).
    pub fn forward(
        &self,
        g: &mut Graph,
        input: &Mat,
        t: f64,
        cond: Option<&[f64]>,
        key_mask: Option<&[bool]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, NodeId), NetworkError> {
        let (d, kc) = input.shape();
        if kc != self.config.k_categories || d == 0 {
            return Err(NetworkError::InputShape {
                got_rows: d,
                got_cols: kc,
                expected_k: self.config.k_categories,
            });
        }
        if let Some(mask) = key_mask {
            if mask.len() != d {
                return Err(NetworkError::MaskLength { got: mask.len(), expected: d });
            }
            if !mask.iter().any(|&m| m) {
                return Err(NetworkError::BadConfig("attention mask excludes every key".into()));
            }
        }
        let h = self.config.hidden_dim;

        let x_in = g.constant(input.clone());
        let in_w = g.param(&self.params, self.idx.input_w);
        let in_b = g.param(&self.params, self.idx.input_b);
        let mut x = g.matmul(x_in, in_w);
        x = g.add_row(x, in_b);

        let t_emb = self.build_time_embed(g, t);
        let c_emb = self.build_condition_embed(g, cond)?;
        let cvec = g.add(t_emb, c_emb);

        let ones = g.constant(Mat::filled(1, h, 1.0));
        let mask_add = key_mask.map(|mask| {
            let mut m = Mat::zeros(d, d);
            for r in 0..d {
                for c in 0..d {
                    if !mask[c] {
                        m.set(r, c, MASKED_SCORE);
                    }
                }
            }
            g.constant(m)
        });

        for layer in &self.idx.layers {
            let mod_w = g.param(&self.params, layer.modulation_w);
            let mod_b = g.param(&self.params, layer.modulation_b);
            let modulation = g.matmul(cvec, mod_w);
            let modulation = g.add(modulation, mod_b);
            let gamma1 = g.slice_cols(modulation, 0, h);
            let beta1 = g.slice_cols(modulation, h, h);
            let gate1 = g.slice_cols(modulation, 2 * h, h);
            let gamma2 = g.slice_cols(modulation, 3 * h, h);
            let beta2 = g.slice_cols(modulation, 4 * h, h);
            let gate2 = g.slice_cols(modulation, 5 * h, h);

            let ln1 = g.layer_norm_rows(x);
            let scale1 = g.add(gamma1, ones);
            let mod1 = g.mul_row(ln1, scale1);
            let mod1 = g.add_row(mod1, beta1);
            let attn = self.attention(g, mod1, layer, d, mask_add);
            let gated_attn = g.mul_row(attn, gate1);
            x = g.add(x, gated_attn);

            let ln2 = g.layer_norm_rows(x);
            let scale2 = g.add(gamma2, ones);
            let mod2 = g.mul_row(ln2, scale2);
            let mod2 = g.add_row(mod2, beta2);
            let w1 = g.param(&self.params, layer.ffn_w1);
            let b1 = g.param(&self.params, layer.ffn_b1);
            let w2 = g.param(&self.params, layer.ffn_w2);
            let b2 = g.param(&self.params, layer.ffn_b2);
            let mut ff = g.matmul(mod2, w1);
            ff = g.add_row(ff, b1);
            ff = g.selu(ff);
            if self.config.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let keep = 1.0 - self.config.dropout;
                    let (fr, fc) = g.value(ff).shape();
                    let mask = Mat::from_vec(
                        fr,
                        fc,
                        (0..fr * fc)
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect(),
                    );
                    let mask = g.constant(mask);
                    ff = g.mul(ff, mask);
                }
            }
            let mut ff2 = g.matmul(ff, w2);
            ff2 = g.add_row(ff2, b2);
            let gated_ff = g.mul_row(ff2, gate2);
            x = g.add(x, gated_ff);
        }

        let fin_w = g.param(&self.params, self.idx.final_mod_w);
        let fin_b = g.param(&self.params, self.idx.final_mod_b);
        let fin_mod = g.matmul(cvec, fin_w);
        let fin_mod = g.add(fin_mod, fin_b);
        let gamma_f = g.slice_cols(fin_mod, 0, h);
        let beta_f = g.slice_cols(fin_mod, h, h);
        let ln_f = g.layer_norm_rows(x);
        let scale_f = g.add(gamma_f, ones);
        let hidden = g.mul_row(ln_f, scale_f);
        let hidden = g.add_row(hidden, beta_f);

        let out_w = g.param(&self.params, self.idx.output_w);
        let out_b = g.param(&self.params, self.idx.output_b);
        let logits = g.matmul(hidden, out_w);
        let logits = g.add_row(logits, out_b);
        Ok((logits, hidden))
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: NodeId,
        layer: &LayerIdx,
        d: usize,
        mask_add: Option<NodeId>,
    ) -> NodeId {
        let dh = self.config.head_dim();
        let inv_tau = 1.0 / self.config.attention_temperature();

        let wq = g.param(&self.params, layer.wq);
        let bq = g.param(&self.params, layer.bq);
        let wk = g.param(&self.params, layer.wk);
        let bk = g.param(&self.params, layer.bk);
        let wv = g.param(&self.params, layer.wv);
        let bv = g.param(&self.params, layer.bv);
        let wo = g.param(&self.params, layer.wo);
        let bo = g.param(&self.params, layer.bo);

        let qf = g.matmul(x, wq);
        let qf = g.add_row(qf, bq);
        let kf = g.matmul(x, wk);
        let kf = g.add_row(kf, bk);
        let vf = g.matmul(x, wv);
        let vf = g.add_row(vf, bv);

        let (cos, sin, scale_q, scale_k) = rotary_tables(d, dh);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for hh in 0..self.config.n_heads {
            let q = g.slice_cols(qf, hh * dh, dh);
            let k = g.slice_cols(kf, hh * dh, dh);
            let v = g.slice_cols(vf, hh * dh, dh);
            let q = g.rotary(q, cos.clone(), sin.clone(), scale_q.clone());
            let k = g.rotary(k, cos.clone(), sin.clone(), scale_k.clone());
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let mut scores = g.scale(scores, inv_tau);
            if let Some(m) = mask_add {
                scores = g.add(scores, m);
            }
            let probs = g.softmax_rows(scores);
            heads.push(g.matmul(probs, v));
        }
        let joined = g.concat_cols(&heads);
        let out = g.matmul(joined, wo);
        g.add_row(out, bo)
    }
}

impl DenoiserModel for Denoiser {
    fn k_categories(&self) -> usize {
        self.config.k_categories
    }

    fn build_logits(
        &self,
        graph: &mut Graph,
        input: &Mat,
        t: f64,
        cond: Option<&[f64]>,
        key_mask: Option<&[bool]>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId, NetworkError> {
        let (logits, _) = self.forward(graph, input, t, cond, key_mask, dropout_rng)?;
        Ok(logits)
    }
}

/// Rotation and decay tables for `d` positions and head width `dh`.
///
/// Pair p of a query at position m is rotated by angle m * theta_p with
/// theta_p = base^(-2p/dh) and scaled by zeta_p^(m/S); keys use the
/// reciprocal scale. A score between positions (m, n) therefore picks up
/// zeta_p^((m - n)/S): it depends only on the offset m - n, decaying for
/// queries attending backwards. The tables depend on the position index
/// alone (no grid-width centering), so appending masked pad positions
/// leaves real rows bit-identical.
pub(crate) fn rotary_tables(d: usize, dh: usize) -> (Mat, Mat, Mat, Mat) {
    let pairs = dh / 2;
    let mut cos = Mat::zeros(d, pairs);
    let mut sin = Mat::zeros(d, pairs);
    let mut scale_q = Mat::zeros(d, pairs);
    let mut scale_k = Mat::zeros(d, pairs);
    for m in 0..d {
        for p in 0..pairs {
            let theta = ROTARY_BASE.powf(-2.0 * p as f64 / dh as f64);
            let angle = m as f64 * theta;
            cos.set(m, p, angle.cos());
            sin.set(m, p, angle.sin());
            let zeta = (2.0 * p as f64 + 0.4 * dh as f64) / (1.4 * dh as f64);
            let power = m as f64 / DECAY_SCALE_BASE;
            scale_q.set(m, p, zeta.powf(power));
            scale_k.set(m, p, zeta.powf(-power));
        }
    }
    (cos, sin, scale_q, scale_k)
}

/// Bare rotary-with-decay score between a query at position m and a key at
/// position n, for tests of the encoding's relative/decay behavior.
pub fn positional_score(q: &[f64], k: &[f64], m: usize, n: usize, d: usize) -> f64 {
    assert_eq!(q.len(), k.len());
    assert!(q.len() % 2 == 0);
    let dh = q.len();
    let (cos, sin, scale_q, scale_k) = rotary_tables(d, dh);
    let rot = |x: &[f64], pos: usize, scale: &Mat| -> Vec<f64> {
        let mut out = vec![0.0; dh];
        for p in 0..dh / 2 {
            let (c, s, sc) = (cos.at(pos, p), sin.at(pos, p), scale.at(pos, p));
            out[2 * p] = (x[2 * p] * c - x[2 * p + 1] * s) * sc;
            out[2 * p + 1] = (x[2 * p] * s + x[2 * p + 1] * c) * sc;
        }
        out
    };
    let qr = rot(q, m, &scale_q);
    let kr = rot(k, n, &scale_k);
    qr.iter().zip(&kr).map(|(a, b)| a * b).sum()
}
