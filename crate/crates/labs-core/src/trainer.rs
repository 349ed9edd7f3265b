//! Mini-batch Adam training with early stopping on validation loss,
//! per-epoch learning-curve records, and the four-variant ablation runner.

use crate::data::EncodedExample;
use crate::metrics::{MetricReport, MetricsError, RankedPrediction};
use crate::model::{
    self, collect_gradients, ModelConfig, ModelError, ModelParameters, Variant,
};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("training split is empty")]
    EmptyTrainSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 512,
            max_epochs: 100,
            patience: 5,
            seed: 42,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    /// Shrunk batch for synthetic-data runs.
    pub fn desk(seed: u64, max_epochs: usize) -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs,
            seed,
            ..TrainConfig::default()
        }
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, aligned with `ModelParameters::entries`.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are aligned with
/// `params.entries()`; a missing gradient is a zero gradient.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (_, tensor)) in params.entries_mut().into_iter().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = tensor.data_mut();
        match &grads[i] {
            Some(g) => {
                for ((pj, mj), (vj, gj)) in p
                    .iter_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut().zip(g.data()))
                {
                    *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
                    *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
                    let m_hat = *mj / bc1;
                    let v_hat = *vj / bc2;
                    *pj -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            None => {
                for ((pj, mj), vj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mj *= ADAM_BETA1;
                    *vj *= ADAM_BETA2;
                    let m_hat = *mj / bc1;
                    let v_hat = *vj / bc2;
                    *pj -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Scale gradients so their global L2 norm is at most `clip_norm`.
fn clip_gradients(grads: &mut [Option<Tensor>], clip_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        log::debug!("clipped gradient norm {norm:.3} -> {clip_norm}");
    }
    norm
}

// ── evaluation ───────────────────────────────────────────────────────

/// Mean loss and per-example ranked predictions over a split.
pub fn evaluate(
    config: &ModelConfig,
    params: &ModelParameters,
    examples: &[EncodedExample],
    chunk_size: usize,
) -> Result<(f64, Vec<RankedPrediction>), TrainerError> {
    let mut total_loss = 0.0;
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(chunk_size.max(1)) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        for ex in chunk {
            let f = model::forward(&mut tape, config, &bound, ex)?;
            total_loss += tape.value(f.loss).data()[0];
            preds.push(RankedPrediction::new(
                tape.value(f.y_pred).data().to_vec(),
                ex.true_indices().into_iter().collect(),
            ));
        }
    }
    let n = examples.len().max(1) as f64;
    Ok((total_loss / n, preds))
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the best validation loss; None when max_epochs = 0.
    pub best_epoch: Option<usize>,
    pub stop_epoch: usize,
    pub wall_secs: f64,
}

impl RunRecord {
    /// Learning-curve CSV: epoch, train_loss, val_loss.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

pub struct TrainOutcome {
    pub params: ModelParameters,
    pub record: RunRecord,
}

/// Train with Adam and early stopping; returns the parameters from the
/// best-validation epoch.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[EncodedExample],
    val_set: &[EncodedExample],
) -> Result<TrainOutcome, TrainerError> {
    let started = Instant::now();
    let mut params = ModelParameters::init(model_cfg, cfg.seed)?;
    let mut record = RunRecord {
        epochs: Vec::new(),
        best_epoch: None,
        stop_epoch: 0,
        wall_secs: 0.0,
    };
    if cfg.max_epochs == 0 {
        record.wall_secs = started.elapsed().as_secs_f64();
        return Ok(TrainOutcome { params, record });
    }
    if train_set.is_empty() {
        return Err(TrainerError::EmptyTrainSplit);
    }

    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let f = model::forward(&mut tape, model_cfg, &bound, &train_set[i])?;
                losses.push(f.loss);
            }
            let stacked = tape.concat1d(&losses).map_err(ModelError::from)?;
            let total = tape.sum(stacked);
            let batch_loss = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = tape.value(batch_loss).data()[0];
            if !loss_value.is_finite() {
                return Err(TrainerError::Diverged {
                    epoch,
                    batch: batch_no,
                });
            }
            epoch_loss += loss_value * batch.len() as f64;

            let mut grads = tape.backward(batch_loss).map_err(ModelError::from)?;
            let mut collected = collect_gradients(&bound, &mut grads);
            clip_gradients(&mut collected, cfg.clip_norm);
            adam_step(&mut params, &collected, &mut adam, cfg.learning_rate);
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let (val_loss, val_preds) = evaluate(model_cfg, &params, val_set, cfg.batch_size)?;
        let val_metrics = MetricReport::standard(&val_preds)?;
        record.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
        });
        record.stop_epoch = epoch;

        if val_loss < best_loss {
            best_loss = val_loss;
            best_params = params.clone();
            record.best_epoch = Some(epoch);
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                log::info!(
                    "early stop at epoch {epoch} ({} epochs past best)",
                    epochs_since_best
                );
                break;
            }
        }
    }

    record.wall_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        params: best_params,
        record,
    })
}

// ── ablation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub record: RunRecord,
    pub test_metrics: MetricReport,
}

/// All four variants trained on identical splits and seed, with a
/// Table-3-shaped comparison and epochs-to-stop per variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn run(
        base: &ModelConfig,
        cfg: &TrainConfig,
        train_set: &[EncodedExample],
        val_set: &[EncodedExample],
        test_set: &[EncodedExample],
    ) -> Result<Self, TrainerError> {
        let mut runs = Vec::new();
        for variant in Variant::ALL {
            let mut model_cfg = base.clone();
            model_cfg.variant = variant;
            log::info!("ablation: training {variant}");
            let outcome = train(&model_cfg, cfg, train_set, val_set)?;
            let (_, preds) = evaluate(&model_cfg, &outcome.params, test_set, cfg.batch_size)?;
            let test_metrics = MetricReport::standard(&preds)?;
            runs.push(AblationRun {
                variant,
                record: outcome.record,
                test_metrics,
            });
        }
        Ok(AblationReport { runs })
    }

    pub fn get(&self, variant: Variant) -> &AblationRun {
        self.runs
            .iter()
            .find(|r| r.variant == variant)
            .expect("all four variants present")
    }

    /// 9 metric rows (P/R/F1 at k = 1, 2, 3) by 4 variant columns.
    pub fn table(&self) -> Vec<(String, Vec<f64>)> {
        let mut rows = Vec::new();
        for (label, pick) in [
            ("Precision", 0usize),
            ("Recall", 1),
            ("F1", 2),
        ] {
            for (ki, k) in [1usize, 2, 3].iter().enumerate() {
                let mut cells = Vec::new();
                for run in &self.runs {
                    let m = &run.test_metrics;
                    let v = match pick {
                        0 => m.precision[ki],
                        1 => m.recall[ki],
                        _ => m.f1[ki],
                    };
                    cells.push(v);
                }
                rows.push((format!("{label}@{k}"), cells));
            }
        }
        rows
    }

    /// Aligned-text rendering of the comparison table plus the
    /// epochs-to-stop line.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<14}", "Evaluation"));
        for run in &self.runs {
            out.push_str(&format!("{:>10}", run.variant.name()));
        }
        out.push('\n');
        for (label, cells) in self.table() {
            out.push_str(&format!("{label:<14}"));
            for v in cells {
                out.push_str(&format!("{:>9.2}%", v * 100.0));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<14}", "Stop epoch"));
        for run in &self.runs {
            out.push_str(&format!("{:>10}", run.record.stop_epoch));
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, Encoder, LabelMap, Splits, Vocabulary};
    use crate::mathtext::{FormulaMode, Segmenter};

    fn encode_splits(
        splits: &Splits,
        n_labels: usize,
    ) -> (Vec<EncodedExample>, Vec<EncodedExample>, Vec<EncodedExample>, usize) {
        let seg = Segmenter::char_level();
        let vocab =
            Vocabulary::from_examples(&splits.train, FormulaMode::Embed, &seg).unwrap();
        let all: Vec<data::Example> = splits
            .train
            .iter()
            .chain(&splits.validation)
            .chain(&splits.test)
            .cloned()
            .collect();
        let labels = LabelMap::from_examples(&all);
        assert_eq!(labels.len(), n_labels);
        let enc = Encoder {
            vocab: &vocab,
            labels: &labels,
            segmenter: &seg,
            mode: FormulaMode::Embed,
            max_len: 24,
            formula_table_rows: 64,
        };
        let encode = |xs: &[data::Example]| -> Vec<EncodedExample> {
            xs.iter().map(|e| enc.encode(e).unwrap()).collect()
        };
        (
            encode(&splits.train),
            encode(&splits.validation),
            encode(&splits.test),
            vocab.len(),
        )
    }

    fn tiny_model(n_labels: usize, vocab: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            embed_dim: 8,
            hidden_dim: 8,
            max_len: 24,
            n_labels,
            vocab_size: vocab,
            formula_table_rows: 64,
            alpha: 4.0,
            formula_mode: FormulaMode::Embed,
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_fresh_parameters() {
        let config = tiny_model(3, 8, Variant::Basic);
        let mut params = ModelParameters::init(&config, 1).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads: Vec<Option<Tensor>> = params.entries().iter().map(|_| None).collect();
        adam_step(&mut params, &grads, &mut state, 0.1);
        adam_step(&mut params, &grads, &mut state, 0.1);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_drives_quadratic_to_zero() {
        // f(w) = w², starting at w = 1 with lr = 0.1; the scalar Adam
        // recurrence run directly.
        let mut w = 1.0f64;
        let mut m = 0.0;
        let mut v = 0.0;
        for t in 1..=200 {
            let g = 2.0 * w;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
            w -= 0.1 * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if w.abs() < 0.01 {
                return;
            }
        }
        panic!("|w| never dropped below 0.01 within 200 steps: {w}");
    }

    #[test]
    fn identical_seeds_give_identical_run_records() {
        let examples = data::synth_generate(60, 4, 3).unwrap();
        let splits = data::split(&examples, 9).unwrap();
        let (train_set, val_set, _, vocab) = encode_splits(&splits, 4);
        let model_cfg = tiny_model(4, vocab, Variant::Labs);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&model_cfg, &cfg, &train_set, &val_set).unwrap();
        let b = train(&model_cfg, &cfg, &train_set, &val_set).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.params, b.params);
        let ja = serde_json::to_string(&a.record).unwrap();
        let jb = serde_json::to_string(&b.record).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn zero_learning_rate_stops_exactly_patience_epochs_after_best() {
        let examples = data::synth_generate(40, 3, 8).unwrap();
        let splits = data::split(&examples, 2).unwrap();
        let (train_set, val_set, _, vocab) = encode_splits(&splits, 3);
        let model_cfg = tiny_model(3, vocab, Variant::Basic);
        let cfg = TrainConfig {
            learning_rate: 0.0, // frozen parameters -> frozen validation loss
            batch_size: 16,
            max_epochs: 50,
            patience: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&model_cfg, &cfg, &train_set, &val_set).unwrap();
        assert_eq!(out.record.best_epoch, Some(1));
        assert_eq!(out.record.stop_epoch, 4);
        let losses: Vec<f64> = out.record.epochs.iter().map(|e| e.val_loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn zero_max_epochs_returns_initial_parameters_and_empty_curve() {
        let examples = data::synth_generate(40, 3, 8).unwrap();
        let splits = data::split(&examples, 2).unwrap();
        let (train_set, val_set, _, vocab) = encode_splits(&splits, 3);
        let model_cfg = tiny_model(3, vocab, Variant::Basic);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&model_cfg, &cfg, &train_set, &val_set).unwrap();
        assert!(out.record.epochs.is_empty());
        assert_eq!(out.record.best_epoch, None);
        assert_eq!(out.params, ModelParameters::init(&model_cfg, cfg.seed).unwrap());
    }

    #[test]
    fn best_checkpoint_never_has_worse_val_loss_than_any_epoch() {
        let examples = data::synth_generate(80, 4, 1).unwrap();
        let splits = data::split(&examples, 3).unwrap();
        let (train_set, val_set, _, vocab) = encode_splits(&splits, 4);
        let model_cfg = tiny_model(4, vocab, Variant::Lbs);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 6,
            seed: 6,
            ..TrainConfig::default()
        };
        let out = train(&model_cfg, &cfg, &train_set, &val_set).unwrap();
        let (best_loss, _) = evaluate(&model_cfg, &out.params, &val_set, 64).unwrap();
        for e in &out.record.epochs {
            assert!(best_loss <= e.val_loss + 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation_bitwise() {
        let examples = data::synth_generate(60, 4, 13).unwrap();
        let splits = data::split(&examples, 21).unwrap();
        let (train_set, val_set, test_set, vocab) = encode_splits(&splits, 4);
        let model_cfg = tiny_model(4, vocab, Variant::Labs);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let out = train(&model_cfg, &cfg, &train_set, &val_set).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.labs");
        out.params.save(&path).unwrap();
        let loaded = ModelParameters::load(&path, &model_cfg).unwrap();
        let (l1, p1) = evaluate(&model_cfg, &out.params, &test_set, 64).unwrap();
        let (l2, p2) = evaluate(&model_cfg, &loaded, &test_set, 64).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in p1.iter().zip(&p2) {
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn ablation_table_has_nine_rows_and_four_columns() {
        let examples = data::synth_generate(50, 3, 17).unwrap();
        let splits = data::split(&examples, 5).unwrap();
        let (train_set, val_set, test_set, vocab) = encode_splits(&splits, 3);
        let base = tiny_model(3, vocab, Variant::Basic);
        let cfg = TrainConfig {
            batch_size: 16,
            max_epochs: 1,
            seed: 2,
            ..TrainConfig::default()
        };
        let report =
            AblationReport::run(&base, &cfg, &train_set, &val_set, &test_set).unwrap();
        let table = report.table();
        assert_eq!(table.len(), 9);
        assert!(table.iter().all(|(_, cells)| cells.len() == 4));
        let text = report.render_text();
        assert!(text.contains("Precision@1") && text.contains("LABS"));
    }
}
