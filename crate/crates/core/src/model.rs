//! Dual encoders, projection heads, logit scale and classifier head.
//!
//! Both encoders are small pre-norm transformers over token embeddings with
//! mean pooling over non-pad positions. They share an architecture but never
//! parameters. There are no positional embeddings, so a zero-block encoder is
//! exactly embedding lookup plus mean pooling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::corpus::{Modality, TokenSequence, PAD_ID};
use crate::diff::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const INIT_STD: f64 = 0.02;
pub const INIT_LOGIT_SCALE: f64 = 14.0;
pub const LOGIT_SCALE_MIN: f64 = 1.0;
pub const LOGIT_SCALE_MAX: f64 = 100.0;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Original,
    Augmented,
}

/// Pooled and projected embeddings for one stream of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub hidden: Tensor,
    pub projected: Tensor,
    pub modality: Modality,
    pub view: View,
}

/// Architecture of both encoders. The two modalities differ only in
/// vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub code_vocab_size: usize,
    pub text_vocab_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_input_length: usize,
    pub projection_dim: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: 64-wide embeddings, 2 blocks of 4 heads,
    /// feed-forward 128, projection 32, inputs up to 256 tokens.
    pub fn desk(code_vocab_size: usize, text_vocab_size: usize) -> Self {
        Self {
            code_vocab_size,
            text_vocab_size,
            embed_dim: 64,
            blocks: 2,
            heads: 4,
            ff_dim: 128,
            max_input_length: crate::corpus::DEFAULT_MAX_INPUT_LENGTH,
            projection_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("code_vocab_size", self.code_vocab_size),
            ("text_vocab_size", self.text_vocab_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_input_length", self.max_input_length),
            ("projection_dim", self.projection_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn vocab_size(&self, modality: Modality) -> usize {
        match modality {
            Modality::Code => self.code_vocab_size,
            Modality::Text => self.text_vocab_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone)]
struct HeadParams {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
}

#[derive(Debug, Clone)]
struct BlockParams {
    heads: Vec<HeadParams>,
    ff_in: ParamId,
    ff_in_bias: ParamId,
    ff_out: ParamId,
    ff_out_bias: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderParams {
    embedding: ParamId,
    blocks: Vec<BlockParams>,
    projection: ParamId,
}

#[derive(Debug, Clone)]
struct ClassifierParams {
    hidden: ParamId,
    hidden_bias: ParamId,
    out: ParamId,
    out_bias: ParamId,
}

/// All learnable state plus the text-encoder invocation counter.
#[derive(Debug)]
pub struct DualEncoderModel {
    config: EncoderConfig,
    store: ParamStore,
    code: EncoderParams,
    text: EncoderParams,
    logit_scale: ParamId,
    classifier: ClassifierParams,
    text_calls: AtomicU64,
}

impl Clone for DualEncoderModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            code: self.code.clone(),
            text: self.text.clone(),
            logit_scale: self.logit_scale,
            classifier: self.classifier.clone(),
            text_calls: AtomicU64::new(self.text_encoder_calls()),
        }
    }
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: rng::StreamRng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let values = (0..rows * cols)
            .map(|_| INIT_STD * rng::normal(&mut self.rng))
            .collect();
        let t = Tensor::matrix(rows, cols, values).expect("positive dims");
        self.store.register(name, t)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.register(name, Tensor::zeros(&[rows, cols]))
    }

    fn encoder(&mut self, prefix: &str, vocab: usize, cfg: &EncoderConfig) -> EncoderParams {
        let (d, dh, ff) = (cfg.embed_dim, cfg.head_dim(), cfg.ff_dim);
        let embedding = self.normal(format!("{prefix}.embedding"), vocab, d);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                let heads = (0..cfg.heads)
                    .map(|h| HeadParams {
                        query: self.normal(format!("{prefix}.block{b}.head{h}.query"), d, dh),
                        key: self.normal(format!("{prefix}.block{b}.head{h}.key"), d, dh),
                        value: self.normal(format!("{prefix}.block{b}.head{h}.value"), d, dh),
                        output: self.normal(format!("{prefix}.block{b}.head{h}.output"), dh, d),
                    })
                    .collect();
                BlockParams {
                    heads,
                    ff_in: self.normal(format!("{prefix}.block{b}.ff.in"), d, ff),
                    ff_in_bias: self.zeros(format!("{prefix}.block{b}.ff.in_bias"), 1, ff),
                    ff_out: self.normal(format!("{prefix}.block{b}.ff.out"), ff, d),
                    ff_out_bias: self.zeros(format!("{prefix}.block{b}.ff.out_bias"), 1, d),
                }
            })
            .collect();
        let projection = self.normal(format!("{prefix}.projection"), d, cfg.projection_dim);
        EncoderParams {
            embedding,
            blocks,
            projection,
        }
    }
}

impl DualEncoderModel {
    /// Weights ~ N(0, 0.02^2), biases zero, `exp(s) = 14`. Deterministic per seed.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: rng::substream(seed, &[domain::INIT]),
        };
        let code = init.encoder("code", config.code_vocab_size, config);
        let text = init.encoder("text", config.text_vocab_size, config);
        let p = config.projection_dim;
        let classifier = ClassifierParams {
            hidden: init.normal("classifier.hidden".into(), p, p),
            hidden_bias: init.zeros("classifier.hidden_bias".into(), 1, p),
            out: init.normal("classifier.out".into(), p, 1),
            out_bias: init.zeros("classifier.out_bias".into(), 1, 1),
        };
        let logit_scale =
            store.register("logit_scale", Tensor::scalar(libm::log(INIT_LOGIT_SCALE)));
        Ok(Self {
            config: config.clone(),
            store,
            code,
            text,
            logit_scale,
            classifier,
            text_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of text-encoder invocations since construction.
    /// Same parameters, fresh text-encoder counter.
    pub fn fresh_copy(&self) -> Self {
        let copy = self.clone();
        copy.text_calls.store(0, Ordering::Relaxed);
        copy
    }

    pub fn text_encoder_calls(&self) -> u64 {
        self.text_calls.load(Ordering::SeqCst)
    }

    pub fn logit_scale_param(&self) -> ParamId {
        self.logit_scale
    }

    /// `clamp(exp(s), 1, 100)`.
    pub fn gamma(&self) -> f64 {
        libm::exp(self.store.get(self.logit_scale).tensor.item())
            .clamp(LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)
    }

    /// Sets every classifier weight and bias to zero.
    pub fn zero_classifier(&mut self) {
        let c = self.classifier.clone();
        for id in [c.hidden, c.hidden_bias, c.out, c.out_bias] {
            self.store.get_mut(id).tensor.fill(0.0);
        }
    }

    fn encoder(&self, modality: Modality) -> &EncoderParams {
        match modality {
            Modality::Code => &self.code,
            Modality::Text => &self.text,
        }
    }

    /// Replaces a parameter tensor by name; the shape must match.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        let p = self.store.get_mut(id);
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                primitive: "set-param",
                lhs: p.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        p.tensor = tensor;
        Ok(())
    }

    /// Records `B x embed_dim` pooled hidden states on `tape`.
    ///
    /// Pad ids are masked out of attention and pooling. Text-modality calls
    /// bump the invocation counter once per call.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        sequences: &[TokenSequence],
        modality: Modality,
    ) -> Result<NodeId> {
        if sequences.is_empty() {
            return Err(Error::invalid("encode_batch needs at least one sequence"));
        }
        let vocab = self.config.vocab_size(modality);
        let mut ids: Vec<u32> = Vec::new();
        let mut bounds: Vec<(usize, usize)> = Vec::with_capacity(sequences.len());
        for (i, seq) in sequences.iter().enumerate() {
            if seq.modality != modality {
                return Err(Error::invalid(format!(
                    "sequence {i} has the wrong modality"
                )));
            }
            if seq.tokens.len() > self.config.max_input_length {
                return Err(Error::invalid(format!(
                    "sequence {i} has {} tokens, limit {}",
                    seq.tokens.len(),
                    self.config.max_input_length
                )));
            }
            let start = ids.len();
            for &id in &seq.tokens {
                if id as usize >= vocab {
                    return Err(Error::TokenOutOfRange { id, vocab });
                }
                if id != PAD_ID {
                    ids.push(id);
                }
            }
            if ids.len() == start {
                return Err(Error::invalid(format!(
                    "sequence {i} has no non-pad tokens"
                )));
            }
            bounds.push((start, ids.len()));
        }
        if modality == Modality::Text {
            self.text_calls.fetch_add(1, Ordering::SeqCst);
        }

        let enc = self.encoder(modality);
        let table = tape.param(&self.store, enc.embedding)?;
        let mut x = tape.embedding(table, ids)?;
        let scale = 1.0 / libm::sqrt(self.config.head_dim() as f64);
        for block in &enc.blocks {
            let h = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
            let mut attn: Option<NodeId> = None;
            for head in &block.heads {
                let wq = tape.param(&self.store, head.query)?;
                let wk = tape.param(&self.store, head.key)?;
                let wv = tape.param(&self.store, head.value)?;
                let q_all = tape.matmul(h, wq)?;
                let k_all = tape.matmul(h, wk)?;
                let v_all = tape.matmul(h, wv)?;
                let mut outs = Vec::with_capacity(bounds.len());
                for &(a, b) in &bounds {
                    let (q, k, v) = if bounds.len() == 1 {
                        (q_all, k_all, v_all)
                    } else {
                        (
                            tape.slice_rows(q_all, a, b)?,
                            tape.slice_rows(k_all, a, b)?,
                            tape.slice_rows(v_all, a, b)?,
                        )
                    };
                    let kt = tape.transpose(k)?;
                    let scores = tape.matmul(q, kt)?;
                    let scores = tape.scale(scores, scale)?;
                    let weights = tape.row_softmax(scores)?;
                    outs.push(tape.matmul(weights, v)?);
                }
                let o = if outs.len() == 1 {
                    outs[0]
                } else {
                    tape.concat_rows(&outs)?
                };
                let wo = tape.param(&self.store, head.output)?;
                let contrib = tape.matmul(o, wo)?;
                attn = Some(match attn {
                    None => contrib,
                    Some(acc) => tape.add(acc, contrib)?,
                });
            }
            if let Some(attn) = attn {
                x = tape.add(x, attn)?;
            }
            let h = tape.layer_norm_rows(x, LAYER_NORM_EPS)?;
            let w1 = tape.param(&self.store, block.ff_in)?;
            let b1 = tape.param(&self.store, block.ff_in_bias)?;
            let w2 = tape.param(&self.store, block.ff_out)?;
            let b2 = tape.param(&self.store, block.ff_out_bias)?;
            let f = tape.matmul(h, w1)?;
            let f = tape.add_row_bias(f, b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row_bias(f, b2)?;
            x = tape.add(x, f)?;
        }
        let pooled = bounds
            .iter()
            .map(|&(a, b)| {
                let rows = if bounds.len() == 1 {
                    x
                } else {
                    tape.slice_rows(x, a, b)?
                };
                tape.mean_pool_rows(rows)
            })
            .collect::<Result<Vec<_>>>()?;
        if pooled.len() == 1 {
            Ok(pooled[0])
        } else {
            tape.concat_rows(&pooled)
        }
    }

    /// `norm(hidden * W)` with the modality's projection head.
    pub fn project_on_tape(
        &self,
        tape: &mut Tape,
        hidden: NodeId,
        modality: Modality,
    ) -> Result<NodeId> {
        let h = tape.value(hidden);
        if h.cols() != self.config.embed_dim {
            return Err(Error::ShapeMismatch {
                primitive: "project",
                lhs: h.shape().to_vec(),
                rhs: alloc::vec![self.config.embed_dim, self.config.projection_dim],
            });
        }
        let w = tape.param(&self.store, self.encoder(modality).projection)?;
        let z = tape.matmul(hidden, w)?;
        tape.row_l2_normalize(z)
    }

    /// Scalar logits `B x 1` from projected code rows.
    pub fn classify_on_tape(&self, tape: &mut Tape, projected: NodeId) -> Result<NodeId> {
        let z = tape.value(projected);
        if z.cols() != self.config.projection_dim {
            return Err(Error::ShapeMismatch {
                primitive: "classify",
                lhs: z.shape().to_vec(),
                rhs: alloc::vec![self.config.projection_dim, self.config.projection_dim],
            });
        }
        let c = &self.classifier;
        let w1 = tape.param(&self.store, c.hidden)?;
        let b1 = tape.param(&self.store, c.hidden_bias)?;
        let w2 = tape.param(&self.store, c.out)?;
        let b2 = tape.param(&self.store, c.out_bias)?;
        let h = tape.matmul(projected, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.gelu(h)?;
        let s = tape.matmul(h, w2)?;
        tape.add_row_bias(s, b2)
    }

    /// `clamp(exp(s), 1, 100)` as a scalar node.
    pub fn gamma_on_tape(&self, tape: &mut Tape) -> Result<NodeId> {
        let s = tape.param(&self.store, self.logit_scale)?;
        let g = tape.exp(s)?;
        tape.clamp(g, LOGIT_SCALE_MIN, LOGIT_SCALE_MAX)
    }

    pub fn encode_batch(&self, sequences: &[TokenSequence], modality: Modality) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.encode_on_tape(&mut tape, sequences, modality)?;
        Ok(tape.value(h).clone())
    }

    pub fn project(&self, hidden: &Tensor, modality: Modality) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = tape.constant(hidden.clone())?;
        let z = self.project_on_tape(&mut tape, h, modality)?;
        Ok(tape.value(z).clone())
    }

    /// Returns `(logits, probabilities)` for each projected code row.
    pub fn classify(&self, projected: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let z = tape.constant(projected.clone())?;
        let s = self.classify_on_tape(&mut tape, z)?;
        let p = tape.sigmoid(s)?;
        Ok((
            tape.value(s).values().to_vec(),
            tape.value(p).values().to_vec(),
        ))
    }

    pub fn embed(
        &self,
        sequences: &[TokenSequence],
        modality: Modality,
        view: View,
    ) -> Result<EmbeddingBatch> {
        let mut tape = Tape::new();
        let h = self.encode_on_tape(&mut tape, sequences, modality)?;
        let z = self.project_on_tape(&mut tape, h, modality)?;
        Ok(EmbeddingBatch {
            hidden: tape.value(h).clone(),
            projected: tape.value(z).clone(),
            modality,
            view,
        })
    }

    /// Code-only inference: probabilities for each code sequence.
    pub fn predict_proba(&self, code: &[TokenSequence]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let h = self.encode_on_tape(&mut tape, code, Modality::Code)?;
        let z = self.project_on_tape(&mut tape, h, Modality::Code)?;
        let s = self.classify_on_tape(&mut tape, z)?;
        let p = tape.sigmoid(s)?;
        Ok(tape.value(p).values().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny(blocks: usize) -> EncoderConfig {
        EncoderConfig {
            code_vocab_size: 12,
            text_vocab_size: 9,
            embed_dim: 8,
            blocks,
            heads: 2,
            ff_dim: 16,
            max_input_length: 16,
            projection_dim: 4,
        }
    }

    fn code(ids: &[u32]) -> TokenSequence {
        TokenSequence {
            tokens: ids.to_vec(),
            modality: Modality::Code,
        }
    }

    #[test]
    fn init_is_deterministic_with_clip_scale() {
        let a = DualEncoderModel::init(&tiny(2), 3).unwrap();
        let b = DualEncoderModel::init(&tiny(2), 3).unwrap();
        assert_eq!(a.params(), b.params());
        assert!((a.gamma() - 14.0).abs() < 1e-12);
        let c = DualEncoderModel::init(&tiny(2), 4).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny(1);
        cfg.heads = 3;
        assert!(DualEncoderModel::init(&cfg, 0).is_err());
        cfg.heads = 0;
        assert!(DualEncoderModel::init(&cfg, 0).is_err());
    }

    #[test]
    fn zero_blocks_single_token_is_embedding_row() {
        let m = DualEncoderModel::init(&tiny(0), 1).unwrap();
        let h = m.encode_batch(&[code(&[5])], Modality::Code).unwrap();
        let table = &m.params().get(m.code.embedding).tensor;
        assert_eq!(h.row(0), table.row(5));
    }

    #[test]
    fn identical_sequences_identical_rows() {
        let m = DualEncoderModel::init(&tiny(2), 1).unwrap();
        let h = m
            .encode_batch(&[code(&[2, 3, 4]), code(&[2, 3, 4])], Modality::Code)
            .unwrap();
        assert_eq!(h.row(0), h.row(1));
    }

    #[test]
    fn padding_is_ignored() {
        let m = DualEncoderModel::init(&tiny(2), 1).unwrap();
        let a = m.encode_batch(&[code(&[2, 3, 4])], Modality::Code).unwrap();
        let b = m
            .encode_batch(&[code(&[2, 3, 4, PAD_ID, PAD_ID])], Modality::Code)
            .unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn out_of_range_id_rejected() {
        let m = DualEncoderModel::init(&tiny(1), 1).unwrap();
        assert_eq!(
            m.encode_batch(&[code(&[12])], Modality::Code).unwrap_err(),
            Error::TokenOutOfRange { id: 12, vocab: 12 }
        );
    }

    #[test]
    fn text_counter_only_moves_for_text() {
        let m = DualEncoderModel::init(&tiny(1), 1).unwrap();
        let h = m.encode_batch(&[code(&[2, 3])], Modality::Code).unwrap();
        let z = m.project(&h, Modality::Code).unwrap();
        m.classify(&z).unwrap();
        assert_eq!(m.text_encoder_calls(), 0);
        let t = TokenSequence {
            tokens: vec![2, 3],
            modality: Modality::Text,
        };
        m.encode_batch(&[t.clone(), t], Modality::Text).unwrap();
        assert_eq!(m.text_encoder_calls(), 1);
    }

    #[test]
    fn projection_identity_normalizes() {
        let mut m = DualEncoderModel::init(&tiny(0), 1).unwrap();
        let mut w = vec![0.0; 8 * 4];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        m.set_param("code.projection", Tensor::matrix(8, 4, w).unwrap())
            .unwrap();
        let h = Tensor::matrix(1, 8, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let z = m.project(&h, Modality::Code).unwrap();
        assert_eq!(z.values(), &[0.6, 0.8, 0.0, 0.0]);
        let h5 = Tensor::matrix(1, 8, vec![15.0, 20.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.project(&h5, Modality::Code).unwrap(), z);
        let zero = Tensor::zeros(&[1, 8]);
        assert_eq!(
            m.project(&zero, Modality::Code).unwrap_err(),
            Error::DegenerateEmbedding(0)
        );
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut m = DualEncoderModel::init(&tiny(1), 1).unwrap();
        m.zero_classifier();
        let p = m.predict_proba(&[code(&[2, 3]), code(&[4])]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn logit_ln3_gives_three_quarters() {
        let mut m = DualEncoderModel::init(&tiny(0), 1).unwrap();
        m.zero_classifier();
        m.set_param(
            "classifier.out_bias",
            Tensor::matrix(1, 1, vec![libm::log(3.0)]).unwrap(),
        )
        .unwrap();
        let z = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (s, p) = m.classify(&z).unwrap();
        assert!((s[0] - libm::log(3.0)).abs() < 1e-15);
        assert!((p[0] - 0.75).abs() < 1e-15);
    }
}
