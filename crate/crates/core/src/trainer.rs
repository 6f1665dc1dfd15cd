//! Mini-batch training over code, comment and augmented views.

use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::{make_augmented_views, AugConfig, DEFAULT_ALPHA};
use crate::corpus::{
    build_vocab, encode_text, FunctionRecord, Modality, TokenSequence, Vocabulary,
    DEFAULT_MAX_INPUT_LENGTH,
};
use crate::diff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::evaluate::{
    compute_metrics, score_sequences, threshold_label, Metrics, Prediction, DEFAULT_THRESHOLD,
};
use crate::model::{DualEncoderModel, EncoderConfig};
use crate::objective::{total_on_tape, EmbeddingNodes, LossBreakdown, LossWeights};
use crate::optim::{clip_grad_norm, optimizer_step, OptimizerState};
use crate::rng::{self, domain};

pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_LEARNING_RATE: f64 = 3e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_MAX_GRAD_NORM: f64 = 1.0;
pub const DEFAULT_VOCAB_SIZE: usize = 5000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub disable_aug_alignment: bool,
    pub disable_consistency: bool,
    pub fine_tuning_only: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    BestValidationF1,
    FinalEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub alpha: f64,
    pub max_input_length: usize,
    pub seed: u64,
    /// Dimensions of both encoders. The vocabulary sizes are replaced by
    /// the sizes of the vocabularies built from the training split.
    pub encoder: EncoderConfig,
    pub vocab_max_size: usize,
    pub resample_augmentation: bool,
    pub ablation: Ablation,
    pub max_grad_norm: f64,
    pub selection: Selection,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            weights: LossWeights::default(),
            alpha: DEFAULT_ALPHA,
            max_input_length: DEFAULT_MAX_INPUT_LENGTH,
            seed: 0,
            encoder: EncoderConfig::desk(0, 0),
            vocab_max_size: DEFAULT_VOCAB_SIZE,
            resample_augmentation: true,
            ablation: Ablation::default(),
            max_grad_norm: DEFAULT_MAX_GRAD_NORM,
            selection: Selection::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    /// Loss weights after the ablation switches are applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.disable_aug_alignment {
            w.clip_aug = 0.0;
        }
        if self.ablation.disable_consistency {
            w.consistency = 0.0;
        }
        if self.ablation.fine_tuning_only {
            w.clip_orig = 0.0;
            w.clip_aug = 0.0;
            w.consistency = 0.0;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config("gradient clipping norm must be positive"));
        }
        if self.max_input_length == 0 {
            return Err(Error::config("max input length must be at least 1"));
        }
        crate::evaluate::check_threshold(self.threshold)?;
        self.weights.validate()?;
        AugConfig {
            alpha: self.alpha,
            seed: self.seed,
        }
        .validate()
    }

    /// Encoder config for the given vocabularies.
    pub fn encoder_for(&self, code: &Vocabulary, text: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            code_vocab_size: code.len(),
            text_vocab_size: text.len(),
            max_input_length: self.max_input_length,
            ..self.encoder.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Logit scale used in this step (before the update).
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub validation: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub encoder: EncoderConfig,
    pub code_vocab: Vocabulary,
    pub text_vocab: Vocabulary,
    pub final_model: DualEncoderModel,
    pub best_model: DualEncoderModel,
    /// 1-based epoch whose validation F1 was highest (earliest on ties).
    pub best_epoch: usize,
    pub selection: Selection,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochReport>,
    pub optimizer_steps: u64,
}

impl TrainingRun {
    pub fn selected(&self) -> &DualEncoderModel {
        match self.selection {
            Selection::BestValidationF1 => &self.best_model,
            Selection::FinalEpoch => &self.final_model,
        }
    }
}

struct Encoded {
    key: u64,
    code: TokenSequence,
    text: Option<TokenSequence>,
    label: u8,
}

fn validation_metrics(
    model: &DualEncoderModel,
    code: &[TokenSequence],
    labels: &[u8],
    threshold: f64,
) -> Result<Metrics> {
    let probs = score_sequences(model, code)?;
    let preds: Vec<Prediction> = probs
        .iter()
        .zip(labels)
        .map(|(&p, &label)| Prediction {
            id: alloc::string::String::new(),
            probability: p,
            predicted: threshold_label(p, threshold),
            label,
            cwe: None,
        })
        .collect();
    Ok(compute_metrics(&preds))
}

fn nonfinite_as_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::NonFiniteLoss(step),
        other => other,
    }
}

/// Token streams of one batch. Empty streams are skipped.
pub struct BatchViews<'a> {
    pub code: &'a [TokenSequence],
    pub text: &'a [TokenSequence],
    pub code_aug: &'a [TokenSequence],
    pub text_aug: &'a [TokenSequence],
    pub labels: &'a [u8],
}

/// Records the full objective of one batch on `tape`.
pub fn batch_loss(
    model: &DualEncoderModel,
    tape: &mut Tape,
    views: &BatchViews<'_>,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    let project =
        |tape: &mut Tape, seqs: &[TokenSequence], modality: Modality| -> Result<Option<NodeId>> {
            if seqs.is_empty() {
                return Ok(None);
            }
            let h = model.encode_on_tape(tape, seqs, modality)?;
            model.project_on_tape(tape, h, modality).map(Some)
        };
    let z_code =
        project(tape, views.code, Modality::Code)?.ok_or_else(|| Error::invalid("empty batch"))?;
    let nodes = EmbeddingNodes {
        code: z_code,
        text: project(tape, views.text, Modality::Text)?,
        code_aug: project(tape, views.code_aug, Modality::Code)?,
        text_aug: project(tape, views.text_aug, Modality::Text)?,
    };
    let gamma = model.gamma_on_tape(tape)?;
    let logits = model.classify_on_tape(tape, z_code)?;
    let probs = tape.sigmoid(logits)?;
    total_on_tape(tape, &nodes, gamma, probs, views.labels, weights)
}

/// One optimization step on a batch. Returns the loss breakdown.
fn train_step(
    model: &mut DualEncoderModel,
    state: &mut OptimizerState,
    batch: &[&Encoded],
    epoch: usize,
    config: &TrainConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let aug = AugConfig {
        alpha: config.alpha,
        seed: config.seed,
    };
    let aug_epoch = if config.resample_augmentation {
        epoch as u64
    } else {
        0
    };
    let code: Vec<TokenSequence> = batch.iter().map(|e| e.code.clone()).collect();
    let labels: Vec<u8> = batch.iter().map(|e| e.label).collect();
    let mut text = Vec::new();
    let mut code_aug = Vec::new();
    let mut text_aug = Vec::new();
    if weights.uses_text() {
        for e in batch {
            let t = e
                .text
                .clone()
                .ok_or_else(|| Error::invalid("missing encoded comment"))?;
            if weights.uses_augmented() {
                let (c, tv) = make_augmented_views(&e.code, &t, &aug, e.key, aug_epoch)?;
                code_aug.push(c.augmented);
                text_aug.push(tv.augmented);
            }
            text.push(t);
        }
    }

    let mut tape = Tape::new();
    let views = BatchViews {
        code: &code,
        text: &text,
        code_aug: &code_aug,
        text_aug: &text_aug,
        labels: &labels,
    };
    let (total, breakdown) = batch_loss(model, &mut tape, &views, weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("total".to_string()));
    }
    tape.backward_into(total, model.params_mut())?;
    clip_grad_norm(model.params_mut(), config.max_grad_norm);
    optimizer_step(
        model.params_mut(),
        state,
        config.learning_rate,
        config.weight_decay,
    )?;
    Ok(breakdown)
}

fn mean_breakdown(logs: &[StepLog]) -> LossBreakdown {
    let n = logs.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for l in logs {
        m.clip_orig += l.loss.clip_orig / n;
        m.clip_aug += l.loss.clip_aug / n;
        m.consistency += l.loss.consistency / n;
        m.classification += l.loss.classification / n;
        m.total += l.loss.total / n;
    }
    m
}

/// Trains from scratch on `train`, validating on `validation` after every
/// epoch. Vocabularies are built from `train`.
pub fn train(
    train: &[FunctionRecord],
    validation: &[FunctionRecord],
    config: &TrainConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if validation.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    if let Some(r) = train.iter().find(|r| r.comment.is_none()) {
        return Err(Error::MissingComment(r.id.clone()));
    }
    let weights = config.effective_weights();
    let code_vocab = build_vocab(train, Modality::Code, config.vocab_max_size)?;
    let text_vocab = build_vocab(train, Modality::Text, config.vocab_max_size)?;
    let encoder = config.encoder_for(&code_vocab, &text_vocab);
    let mut model = DualEncoderModel::init(&encoder, config.seed)?;
    let mut state = OptimizerState::new(model.params());

    let max_len = config.max_input_length;
    let data: Vec<Encoded> = train
        .iter()
        .map(|r| Encoded {
            key: rng::hash_str(&r.id),
            code: encode_text(&r.code, &code_vocab, max_len),
            text: weights
                .uses_text()
                .then(|| encode_text(r.comment.as_deref().unwrap_or(""), &text_vocab, max_len)),
            label: r.label,
        })
        .collect();
    let val_code: Vec<TokenSequence> = validation
        .iter()
        .map(|r| encode_text(&r.code, &code_vocab, max_len))
        .collect();
    let val_labels: Vec<u8> = validation.iter().map(|r| r.label).collect();

    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, DualEncoderModel)> = None;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng::shuffle(
            &mut order,
            &mut rng::substream(config.seed, &[domain::SHUFFLE, epoch as u64]),
        );
        let first_step = steps.len();
        for chunk in order.chunks(config.batch_size) {
            let step = steps.len() + 1;
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &data[i]).collect();
            let gamma = model.gamma();
            let loss = train_step(&mut model, &mut state, &batch, epoch, config, &weights)
                .map_err(|e| nonfinite_as_step(e, step))?;
            steps.push(StepLog {
                step,
                epoch: epoch + 1,
                loss,
                gamma,
            });
        }
        let validation = validation_metrics(&model, &val_code, &val_labels, config.threshold)?;
        epochs.push(EpochReport {
            epoch: epoch + 1,
            mean_loss: mean_breakdown(&steps[first_step..]),
            validation,
        });
        if best.as_ref().is_none_or(|(f1, _, _)| validation.f1 > *f1) {
            best = Some((validation.f1, epoch + 1, model.fresh_copy()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainingRun {
        encoder,
        code_vocab,
        text_vocab,
        final_model: model.fresh_copy(),
        best_model,
        best_epoch,
        selection: config.selection,
        steps,
        epochs,
        optimizer_steps: state.step(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            encoder: EncoderConfig {
                embed_dim: 8,
                blocks: 1,
                heads: 2,
                ff_dim: 16,
                projection_dim: 4,
                ..EncoderConfig::desk(0, 0)
            },
            max_input_length: 32,
            ..TrainConfig::default()
        }
    }

    fn records(n: usize) -> Vec<FunctionRecord> {
        (0..n)
            .map(|i| {
                let bad = i % 2 == 0;
                let call = if bad { "gets" } else { "fgets" };
                let mut r = FunctionRecord::new(
                    format!("r{i}"),
                    format!("void f{i}(char *buf) {{ {call}(buf); n{} = {i}; }}", i % 5),
                    u8::from(bad),
                );
                r.comment = Some(format!(
                    "Defines function f{i} operating on {} identifier tokens.",
                    4 + i % 3
                ));
                r
            })
            .collect()
    }

    fn seqs(rows: &[&[u32]], modality: Modality) -> Vec<TokenSequence> {
        rows.iter()
            .map(|r| TokenSequence {
                tokens: r.to_vec(),
                modality,
            })
            .collect()
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            code_vocab_size: 12,
            text_vocab_size: 9,
            embed_dim: 8,
            blocks: 2,
            heads: 2,
            ff_dim: 12,
            max_input_length: 16,
            projection_dim: 4,
        };
        // a larger init spread keeps the check away from the near-linear regime
        let mut model = DualEncoderModel::init(&cfg, 3).unwrap();
        let mut r = rng::substream(99, &[]);
        for p in model.params_mut().iter_mut() {
            if p.name != "logit_scale" {
                p.tensor
                    .values_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.5 * rng::normal(&mut r));
            }
        }
        let code = seqs(
            &[&[2, 3, 4, 1, 1], &[5, 6, 7, 8, 2], &[9, 10, 3, 11, 4]],
            Modality::Code,
        );
        let text = seqs(&[&[2, 3], &[4, 5, 6], &[7, 8, 2, 3]], Modality::Text);
        let code_aug = seqs(
            &[&[3, 2, 4], &[5, 7, 6, 8], &[9, 10, 11, 4]],
            Modality::Code,
        );
        let text_aug = seqs(&[&[2], &[4, 6, 5], &[7, 2, 3]], Modality::Text);
        let labels = [1u8, 0, 1];
        let views = BatchViews {
            code: &code,
            text: &text,
            code_aug: &code_aug,
            text_aug: &text_aug,
            labels: &labels,
        };
        let w = LossWeights::default();
        let loss_of = |m: &DualEncoderModel| -> f64 {
            let mut tape = Tape::new();
            let (t, _) = batch_loss(m, &mut tape, &views, &w).unwrap();
            tape.value(t).item()
        };

        let mut tape = Tape::new();
        let (total, _) = batch_loss(&model, &mut tape, &views, &w).unwrap();
        model.params_mut().zero_grad();
        tape.backward_into(total, model.params_mut()).unwrap();
        let analytic: Vec<(alloc::string::String, Vec<f64>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.gradient.values().to_vec()))
            .collect();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, (name, grad)) in analytic.iter().enumerate() {
            let len = grad.len();
            for j in [0, len / 3, len / 2, len - 1] {
                let mut probe = model.clone();
                let base = probe.params().iter().nth(k).unwrap().tensor.clone();
                let mut plus = base.clone();
                plus.values_mut()[j] += h;
                probe.set_param(name, plus).unwrap();
                let lp = loss_of(&probe);
                let mut minus = base.clone();
                minus.values_mut()[j] -= h;
                probe.set_param(name, minus).unwrap();
                let lm = loss_of(&probe);
                let numeric = (lp - lm) / (2.0 * h);
                let err = (grad[j] - numeric).abs() / numeric.abs().max(1.0);
                assert!(
                    err < 1e-6,
                    "{name}[{j}]: analytic {} numeric {numeric}",
                    grad[j]
                );
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-6);
    }

    #[test]
    fn ablation_switches_map_to_weights() {
        let mut c = TrainConfig::default();
        c.ablation.disable_aug_alignment = true;
        assert_eq!(c.effective_weights().clip_aug, 0.0);
        assert_eq!(c.effective_weights().consistency, 0.1);
        c.ablation.fine_tuning_only = true;
        let w = c.effective_weights();
        assert_eq!(
            (w.clip_orig, w.clip_aug, w.consistency, w.classification),
            (0.0, 0.0, 0.0, 1.0)
        );
    }

    #[test]
    fn rejects_uncommented_and_bad_config() {
        let mut data = records(6);
        data[3].comment = None;
        assert_eq!(
            train(&data, &records(2), &tiny_config()).unwrap_err(),
            Error::MissingComment("r3".into())
        );
        let bad = TrainConfig {
            batch_size: 0,
            ..tiny_config()
        };
        assert!(train(&records(4), &records(2), &bad).is_err());
    }

    #[test]
    fn deterministic_and_fine_tuning_logs_zero() {
        let data = records(12);
        let val = records(4);
        let a = train(&data, &val, &tiny_config()).unwrap();
        let b = train(&data, &val, &tiny_config()).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.steps.len(), 6);
        assert!(a
            .steps
            .iter()
            .all(|s| s.loss.clip_orig > 0.0 && s.loss.consistency >= 0.0));

        let mut ft = tiny_config();
        ft.ablation.fine_tuning_only = true;
        let run = train(&data, &val, &ft).unwrap();
        for s in &run.steps {
            assert_eq!(
                (s.loss.clip_orig, s.loss.clip_aug, s.loss.consistency),
                (0.0, 0.0, 0.0)
            );
            assert_eq!(s.loss.total, s.loss.classification);
        }
        assert_eq!(run.final_model.text_encoder_calls(), 0);
    }
}
