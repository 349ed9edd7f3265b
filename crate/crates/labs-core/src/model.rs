//! The four model variants: a BiLSTM encoder over word/formula embeddings
//! (Basic), optionally with label-semantic attention (LAB), a
//! label-confusion smoothing head (LBS), or both (LABS).
//!
//! Per example the pipeline is
//! encode → [label attention] → pool → predict, and for smoothing
//! variants additionally confusion → simulate → KL loss; non-smoothing
//! variants train with mean binary cross-entropy.

use crate::data::{EncodedExample, TokenSlot};
use crate::mathtext::FormulaMode;
use crate::tensor::{
    load_checkpoint, lstm_cell, save_checkpoint, CheckpointError, Gradients, LstmWeightVars,
    Tape, Tensor, TensorError, Var, LN_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op} is not defined for the {variant} variant")]
    WrongVariant {
        op: &'static str,
        variant: Variant,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("checkpoint parameter {name} has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Basic,
    Lab,
    Lbs,
    Labs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Basic, Variant::Lab, Variant::Lbs, Variant::Labs];

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::Lab | Variant::Labs)
    }

    pub fn has_smoothing(self) -> bool {
        matches!(self, Variant::Lbs | Variant::Labs)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "Basic",
            Variant::Lab => "LAB",
            Variant::Lbs => "LBS",
            Variant::Labs => "LABS",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "basic" => Ok(Variant::Basic),
            "lab" => Ok(Variant::Lab),
            "lbs" => Ok(Variant::Lbs),
            "labs" => Ok(Variant::Labs),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub n_labels: usize,
    pub vocab_size: usize,
    pub formula_table_rows: usize,
    pub alpha: f64,
    pub formula_mode: FormulaMode,
}

impl ModelConfig {
    /// The full-scale profile: 300-d embeddings, 512 hidden units,
    /// 120-token sequences, alpha = 4.
    pub fn full(variant: Variant, n_labels: usize, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            embed_dim: 300,
            hidden_dim: 512,
            max_len: 120,
            n_labels,
            vocab_size,
            formula_table_rows: 1 << 16,
            alpha: 4.0,
            formula_mode: FormulaMode::Embed,
        }
    }

    /// Shrunk profile for synthetic-data runs and tests.
    pub fn desk(variant: Variant, n_labels: usize, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            embed_dim: 32,
            hidden_dim: 64,
            max_len: 32,
            n_labels,
            vocab_size,
            formula_table_rows: 1 << 10,
            alpha: 4.0,
            formula_mode: FormulaMode::Embed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.alpha < 0.0 {
            return Err(ModelError::Config("alpha must be >= 0".into()));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
            ("n_labels", self.n_labels),
            ("formula_table_rows", self.formula_table_rows),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config("vocab_size must include PAD and UNK".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

/// All trainable arrays. The attention and confusion label matrices exist
/// only for the variants that declare them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub word_embed: Tensor,
    pub formula_embed: Tensor,
    pub lstm_fwd: LstmWeights,
    pub lstm_bwd: LstmWeights,
    /// [L × k], shared between directions.
    pub attn_labels: Option<Tensor>,
    /// [L × 2k]
    pub lcm_labels: Option<Tensor>,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 * bound - bound).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

fn init_lstm(rng: &mut ChaCha8Rng, input_dim: usize, k: usize) -> LstmWeights {
    let bound = 1.0 / (k as f64).sqrt();
    let w_ih = uniform(rng, vec![4 * k, input_dim], bound);
    let w_hh = uniform(rng, vec![4 * k, k], bound);
    // forget-gate bias starts at 1, everything else at 0
    let mut bias = vec![0.0; 4 * k];
    bias[k..2 * k].iter_mut().for_each(|b| *b = 1.0);
    LstmWeights {
        w_ih,
        w_hh,
        bias: Tensor::vector(bias),
    }
}

impl ModelParameters {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let k = config.hidden_dim;
        let l = config.n_labels;
        let word_embed = uniform(&mut rng, vec![config.vocab_size, d], 0.05);
        let formula_embed = uniform(&mut rng, vec![config.formula_table_rows, d], 0.05);
        let lstm_fwd = init_lstm(&mut rng, d, k);
        let lstm_bwd = init_lstm(&mut rng, d, k);
        let attn_labels = config
            .variant
            .has_attention()
            .then(|| uniform(&mut rng, vec![l, k], 0.05));
        let lcm_labels = config
            .variant
            .has_smoothing()
            .then(|| uniform(&mut rng, vec![l, 2 * k], 0.05));
        let out_weight = uniform(&mut rng, vec![l, 2 * k], 0.05);
        let out_bias = Tensor::zeros(vec![l]);
        Ok(ModelParameters {
            word_embed,
            formula_embed,
            lstm_fwd,
            lstm_bwd,
            attn_labels,
            lcm_labels,
            out_weight,
            out_bias,
        })
    }

    /// Named views over present parameter groups, in a fixed order shared
    /// by checkpoints, gradient collection and the optimizer.
    pub fn entries(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("embed.word", &self.word_embed),
            ("embed.formula", &self.formula_embed),
            ("lstm.fwd.w_ih", &self.lstm_fwd.w_ih),
            ("lstm.fwd.w_hh", &self.lstm_fwd.w_hh),
            ("lstm.fwd.bias", &self.lstm_fwd.bias),
            ("lstm.bwd.w_ih", &self.lstm_bwd.w_ih),
            ("lstm.bwd.w_hh", &self.lstm_bwd.w_hh),
            ("lstm.bwd.bias", &self.lstm_bwd.bias),
        ];
        if let Some(t) = &self.attn_labels {
            out.push(("attn.labels", t));
        }
        if let Some(t) = &self.lcm_labels {
            out.push(("lcm.labels", t));
        }
        out.push(("out.weight", &self.out_weight));
        out.push(("out.bias", &self.out_bias));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![
            ("embed.word", &mut self.word_embed),
            ("embed.formula", &mut self.formula_embed),
            ("lstm.fwd.w_ih", &mut self.lstm_fwd.w_ih),
            ("lstm.fwd.w_hh", &mut self.lstm_fwd.w_hh),
            ("lstm.fwd.bias", &mut self.lstm_fwd.bias),
            ("lstm.bwd.w_ih", &mut self.lstm_bwd.w_ih),
            ("lstm.bwd.w_hh", &mut self.lstm_bwd.w_hh),
            ("lstm.bwd.bias", &mut self.lstm_bwd.bias),
        ];
        if let Some(t) = &mut self.attn_labels {
            out.push(("attn.labels", t));
        }
        if let Some(t) = &mut self.lcm_labels {
            out.push(("lcm.labels", t));
        }
        out.push(("out.weight", &mut self.out_weight));
        out.push(("out.bias", &mut self.out_bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let entries: Vec<(String, &Tensor)> = self
            .entries()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        save_checkpoint(path, &entries)?;
        Ok(())
    }

    /// Load and validate a checkpoint against a config: the parameter set
    /// and every shape must match exactly.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self, ModelError> {
        let mut loaded: std::collections::HashMap<String, Tensor> =
            load_checkpoint(path)?.into_iter().collect();
        let template = ModelParameters::init(config, 0)?;
        let mut take = |name: &str, expected: &[usize]| -> Result<Tensor, ModelError> {
            let t = loaded
                .remove(name)
                .ok_or_else(|| ModelError::MissingParameter(name.to_string()))?;
            if t.shape() != expected {
                return Err(ModelError::ParameterShape {
                    name: name.to_string(),
                    got: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            Ok(t)
        };
        let params = ModelParameters {
            word_embed: take("embed.word", template.word_embed.shape())?,
            formula_embed: take("embed.formula", template.formula_embed.shape())?,
            lstm_fwd: LstmWeights {
                w_ih: take("lstm.fwd.w_ih", template.lstm_fwd.w_ih.shape())?,
                w_hh: take("lstm.fwd.w_hh", template.lstm_fwd.w_hh.shape())?,
                bias: take("lstm.fwd.bias", template.lstm_fwd.bias.shape())?,
            },
            lstm_bwd: LstmWeights {
                w_ih: take("lstm.bwd.w_ih", template.lstm_bwd.w_ih.shape())?,
                w_hh: take("lstm.bwd.w_hh", template.lstm_bwd.w_hh.shape())?,
                bias: take("lstm.bwd.bias", template.lstm_bwd.bias.shape())?,
            },
            attn_labels: match &template.attn_labels {
                Some(t) => Some(take("attn.labels", t.shape())?),
                None => None,
            },
            lcm_labels: match &template.lcm_labels {
                Some(t) => Some(take("lcm.labels", t.shape())?),
                None => None,
            },
            out_weight: take("out.weight", template.out_weight.shape())?,
            out_bias: take("out.bias", template.out_bias.shape())?,
        };
        if let Some(extra) = loaded.keys().next() {
            return Err(ModelError::UnexpectedParameter(extra.clone()));
        }
        Ok(params)
    }
}

/// Parameters registered on a tape as gradient-tracked leaves.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub word_embed: Var,
    pub formula_embed: Var,
    pub lstm_fwd: LstmWeightVars,
    pub lstm_bwd: LstmWeightVars,
    pub attn_labels: Option<Var>,
    pub lcm_labels: Option<Var>,
    pub out_weight: Var,
    pub out_bias: Var,
}

impl ModelParameters {
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), true);
        BoundParams {
            word_embed: leaf(&self.word_embed),
            formula_embed: leaf(&self.formula_embed),
            lstm_fwd: LstmWeightVars {
                w_ih: leaf(&self.lstm_fwd.w_ih),
                w_hh: leaf(&self.lstm_fwd.w_hh),
                bias: leaf(&self.lstm_fwd.bias),
            },
            lstm_bwd: LstmWeightVars {
                w_ih: leaf(&self.lstm_bwd.w_ih),
                w_hh: leaf(&self.lstm_bwd.w_hh),
                bias: leaf(&self.lstm_bwd.bias),
            },
            attn_labels: self.attn_labels.as_ref().map(&mut leaf),
            lcm_labels: self.lcm_labels.as_ref().map(&mut leaf),
            out_weight: leaf(&self.out_weight),
            out_bias: leaf(&self.out_bias),
        }
    }
}

impl BoundParams {
    /// Vars in the same order as [`ModelParameters::entries`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![
            self.word_embed,
            self.formula_embed,
            self.lstm_fwd.w_ih,
            self.lstm_fwd.w_hh,
            self.lstm_fwd.bias,
            self.lstm_bwd.w_ih,
            self.lstm_bwd.w_hh,
            self.lstm_bwd.bias,
        ];
        if let Some(v) = self.attn_labels {
            out.push(v);
        }
        if let Some(v) = self.lcm_labels {
            out.push(v);
        }
        out.push(self.out_weight);
        out.push(self.out_bias);
        out
    }
}

/// Gradients per parameter, aligned with [`ModelParameters::entries`];
/// None means the loss never touched that group.
pub fn collect_gradients(bound: &BoundParams, grads: &mut Gradients) -> Vec<Option<Tensor>> {
    bound.vars().iter().map(|&v| grads.take(v)).collect()
}

// ── forward components ───────────────────────────────────────────────

/// Per-position input vectors for the non-pad prefix of an example.
/// Words index the word table; formulas average their hashed tuple rows.
pub fn embed_tokens(
    tape: &mut Tape,
    bound: &BoundParams,
    ex: &EncodedExample,
) -> Result<Vec<Var>, ModelError> {
    let d = tape.value(bound.word_embed).shape()[1];
    let mut xs = Vec::new();
    let mut formula_iter = ex.formula_rows.iter();
    for (t, kind) in ex.token_kinds.iter().enumerate() {
        match kind {
            TokenSlot::Pad => break,
            TokenSlot::Word => {
                let g = tape.gather_rows(bound.word_embed, &[ex.token_ids[t] as usize])?;
                xs.push(tape.reshape(g, vec![d])?);
            }
            TokenSlot::Formula => {
                let rows: Vec<usize> = formula_iter
                    .next()
                    .expect("formula slot count matches formula_rows")
                    .iter()
                    .map(|&r| r as usize)
                    .collect();
                let g = tape.gather_rows(bound.formula_embed, &rows)?;
                xs.push(tape.mean_over_rows(g)?);
            }
        }
    }
    Ok(xs)
}

fn run_lstm(
    tape: &mut Tape,
    w: &LstmWeightVars,
    xs: &[Var],
    k: usize,
) -> Result<Vec<Var>, ModelError> {
    let mut h = tape.zeros(vec![k]);
    let mut c = tape.zeros(vec![k]);
    let mut hs = Vec::with_capacity(xs.len());
    for &x in xs {
        let (nh, nc) = lstm_cell(tape, x, h, c, w)?;
        h = nh;
        c = nc;
        hs.push(nh);
    }
    Ok(hs)
}

/// BiLSTM encoding of the unmasked prefix. Returns the forward and
/// backward hidden matrices [m × k], both indexed by position, or None
/// when the example is all padding (H is then the zero matrix).
pub fn encode(
    tape: &mut Tape,
    bound: &BoundParams,
    ex: &EncodedExample,
    config: &ModelConfig,
) -> Result<Option<(Var, Var)>, ModelError> {
    let xs = embed_tokens(tape, bound, ex)?;
    if xs.is_empty() {
        return Ok(None);
    }
    let k = config.hidden_dim;
    let h_fwd = run_lstm(tape, &bound.lstm_fwd, &xs, k)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let mut h_bwd = run_lstm(tape, &bound.lstm_bwd, &rev, k)?;
    h_bwd.reverse();
    let hf = tape.stack_rows(&h_fwd)?;
    let hb = tape.stack_rows(&h_bwd)?;
    Ok(Some((hf, hb)))
}

#[derive(Debug)]
pub struct Attention {
    /// [L × 2k] label-enhanced text representation.
    pub m: Var,
    /// [L × m] per-direction attention over unmasked positions.
    pub a_fwd: Var,
    pub a_bwd: Var,
}

/// A_dir = sigmoid(C · H_dirᵀ); M = (A_fwd·H_fwd, A_bwd·H_bwd).
pub fn label_attention(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    h_fwd: Var,
    h_bwd: Var,
) -> Result<Attention, ModelError> {
    let c = bound.attn_labels.ok_or(ModelError::WrongVariant {
        op: "label_attention",
        variant: config.variant,
    })?;
    let sf = tape.matmul_nt(c, h_fwd)?;
    let a_fwd = tape.sigmoid(sf);
    let sb = tape.matmul_nt(c, h_bwd)?;
    let a_bwd = tape.sigmoid(sb);
    let m_fwd = tape.matmul(a_fwd, h_fwd)?;
    let m_bwd = tape.matmul(a_bwd, h_bwd)?;
    let m = tape.concat_cols(m_fwd, m_bwd)?;
    Ok(Attention { m, a_fwd, a_bwd })
}

/// M′ as the row mean: over the L label rows of M on the attention path,
/// or over the unmasked time steps of H on the plain path.
pub fn pool(tape: &mut Tape, rows: Var) -> Result<Var, ModelError> {
    Ok(tape.mean_over_rows(rows)?)
}

/// y_pred = sigmoid(W_out · M′ + b), one independent score per label.
pub fn predict(tape: &mut Tape, bound: &BoundParams, pooled: Var) -> Result<Var, ModelError> {
    let z = tape.matvec(bound.out_weight, pooled)?;
    let logits = tape.add(z, bound.out_bias)?;
    Ok(tape.sigmoid(logits))
}

/// y_conf = softmax(C_lcm · M′), the label-confusion distribution.
pub fn confusion_distribution(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    pooled: Var,
) -> Result<Var, ModelError> {
    let c = bound.lcm_labels.ok_or(ModelError::WrongVariant {
        op: "confusion_distribution",
        variant: config.variant,
    })?;
    let z = tape.matvec(c, pooled)?;
    Ok(tape.softmax(z)?)
}

/// y_sim = softmax(y_conf + alpha · y_target).
pub fn simulate_labels(
    tape: &mut Tape,
    y_conf: Var,
    target: &[f64],
    alpha: f64,
) -> Result<Var, ModelError> {
    let t = tape.constant(Tensor::vector(target.to_vec()));
    let scaled = tape.scale(t, alpha);
    let mixed = tape.add(y_conf, scaled)?;
    Ok(tape.softmax(mixed)?)
}

/// KL(y_sim ‖ y_pred) = Σ y_sim · ln(y_sim / y_pred), taken literally
/// over the per-label sigmoid scores; y_pred is clamped away from {0, 1}.
pub fn loss_kl(tape: &mut Tape, y_sim: Var, y_pred: Var) -> Result<Var, ModelError> {
    let p = tape.clamp(y_pred, LN_EPS, 1.0 - LN_EPS);
    let ln_s = tape.ln_clamped(y_sim);
    let ln_p = tape.ln_clamped(p);
    let diff = tape.sub(ln_s, ln_p)?;
    let terms = tape.mul(y_sim, diff)?;
    Ok(tape.sum(terms))
}

/// Mean over labels of −[y·ln p + (1−y)·ln(1−p)].
pub fn loss_bce(tape: &mut Tape, target: &[f64], y_pred: Var) -> Result<Var, ModelError> {
    let l = target.len();
    let p = tape.clamp(y_pred, LN_EPS, 1.0 - LN_EPS);
    let y = tape.constant(Tensor::vector(target.to_vec()));
    let y_inv = tape.constant(Tensor::vector(target.iter().map(|v| 1.0 - v).collect()));
    let ones = tape.constant(Tensor::vector(vec![1.0; l]));
    let ln_p = tape.ln_clamped(p);
    let p_inv = tape.sub(ones, p)?;
    let ln_p_inv = tape.ln_clamped(p_inv);
    let pos = tape.mul(y, ln_p)?;
    let neg = tape.mul(y_inv, ln_p_inv)?;
    let sum_terms = tape.add(pos, neg)?;
    let total = tape.sum(sum_terms);
    Ok(tape.scale(total, -1.0 / l as f64))
}

pub struct Forward {
    pub loss: Var,
    pub y_pred: Var,
    pub y_conf: Option<Var>,
    pub y_sim: Option<Var>,
    /// [L × m] over unmasked positions; pad columns are implicit zeros.
    pub attn_fwd: Option<Var>,
    pub attn_bwd: Option<Var>,
    pub seq_len: usize,
}

/// Full per-example pass for the configured variant.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    bound: &BoundParams,
    ex: &EncodedExample,
) -> Result<Forward, ModelError> {
    let encoded = encode(tape, bound, ex, config)?;
    let k2 = 2 * config.hidden_dim;

    let mut attn_fwd = None;
    let mut attn_bwd = None;
    let pooled = match encoded {
        None => tape.zeros(vec![k2]),
        Some((hf, hb)) => {
            if config.variant.has_attention() {
                let att = label_attention(tape, config, bound, hf, hb)?;
                attn_fwd = Some(att.a_fwd);
                attn_bwd = Some(att.a_bwd);
                pool(tape, att.m)?
            } else {
                let h = tape.concat_cols(hf, hb)?;
                pool(tape, h)?
            }
        }
    };

    let y_pred = predict(tape, bound, pooled)?;
    let (loss, y_conf, y_sim) = if config.variant.has_smoothing() {
        let y_conf = confusion_distribution(tape, config, bound, pooled)?;
        let y_sim = simulate_labels(tape, y_conf, &ex.target, config.alpha)?;
        let loss = loss_kl(tape, y_sim, y_pred)?;
        (loss, Some(y_conf), Some(y_sim))
    } else {
        let loss = loss_bce(tape, &ex.target, y_pred)?;
        (loss, None, None)
    };

    Ok(Forward {
        loss,
        y_pred,
        y_conf,
        y_sim,
        attn_fwd,
        attn_bwd,
        seq_len: encoded.map_or(0, |_| ex.seq_len()),
    })
}

// ── exports ──────────────────────────────────────────────────────────

/// Fig.-3-style payload: per-direction attention maps padded to
/// [L × max_len] with exact zeros on masked columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionExport {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub a_fwd: Vec<Vec<f64>>,
    pub a_bwd: Vec<Vec<f64>>,
}

/// Pad an [L × m] attention value out to [L × n] with zero columns.
pub fn pad_attention(a: &Tensor, max_len: usize) -> Vec<Vec<f64>> {
    let l = a.shape()[0];
    let m = a.shape()[1];
    let mut out = vec![vec![0.0; max_len]; l];
    for (i, row) in out.iter_mut().enumerate() {
        for t in 0..m.min(max_len) {
            row[t] = a.at2(i, t);
        }
    }
    out
}

pub fn attention_export(
    tape: &Tape,
    fwd: &Forward,
    config: &ModelConfig,
    tokens: Vec<String>,
    labels: Vec<String>,
) -> Option<AttentionExport> {
    let (af, ab) = (fwd.attn_fwd?, fwd.attn_bwd?);
    Some(AttentionExport {
        tokens,
        labels,
        a_fwd: pad_attention(tape.value(af), config.max_len),
        a_bwd: pad_attention(tape.value(ab), config.max_len),
    })
}

/// Fig.-4-style payload: target, confusion, simulated and predicted
/// distributions for one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionExport {
    pub y_t: Vec<f64>,
    pub y_c: Vec<f64>,
    pub y_s: Vec<f64>,
    pub y_p: Vec<f64>,
}

pub fn distribution_export(
    tape: &Tape,
    fwd: &Forward,
    target: &[f64],
) -> Option<DistributionExport> {
    let (yc, ys) = (fwd.y_conf?, fwd.y_sim?);
    Some(DistributionExport {
        y_t: target.to_vec(),
        y_c: tape.value(yc).data().to_vec(),
        y_s: tape.value(ys).data().to_vec(),
        y_p: tape.value(fwd.y_pred).data().to_vec(),
    })
}
