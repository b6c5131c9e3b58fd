//! Encoder model: configuration, parameters, task heads, and the
//! prediction-side API.
//!
//! The architecture is a lexicon encoder (word + position + segment
//! embeddings, layer norm, dropout) under a stack of bidirectional
//! transformer layers (multi-head self-attention with additive masking of
//! padded keys, then a GELU feed-forward block, each with residual and layer
//! norm). The contextual embedding of the leading `[CLS]` token feeds the
//! task head: a linear softmax classifier or a scalar choice scorer.

mod encoder;
mod loss;

pub use encoder::{encode, encode_backward, encode_traced, ContextualSequence, EncoderTrace};
pub use loss::{classification_loss, choice_loss, EncodedChoice};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal_init, ParamSet, ParamSlot, Parameterized};
use crate::rng::{stream, stream_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{encode_pair, tokenize, Vocab};

/// Scale of random weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Epsilon inside every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Number of segment ids the lexicon encoder embeds.
pub const SEGMENT_TYPES: usize = 2;

/// Encoder geometry and regularization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Keep probability for every dropout site (1.0 disables dropout).
    pub dropout_keep: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "hidden_size and num_heads must be positive".into(),
            ));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.ffn_size == 0 {
            return Err(Error::Config("ffn_size must be positive".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size {} cannot even hold the special tokens",
                self.vocab_size
            )));
        }
        if self.max_positions < 3 {
            return Err(Error::Config(format!(
                "max_positions {} below the minimal [CLS] ... [SEP] layout",
                self.max_positions
            )));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout_keep {} outside (0, 1]",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Canonical (name, shape) list for a geometry; fixes manifest order
/// everywhere (initialization, checkpoints, load validation).
pub fn tensor_spec(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_size;
    let f = config.ffn_size;
    let mut spec = vec![
        ("emb.word".to_string(), vec![config.vocab_size, d]),
        ("emb.pos".to_string(), vec![config.max_positions, d]),
        ("emb.seg".to_string(), vec![SEGMENT_TYPES, d]),
        ("emb.ln.gain".to_string(), vec![d]),
        ("emb.ln.bias".to_string(), vec![d]),
    ];
    for i in 0..config.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            spec.push((format!("layer{i}.attn.{w}"), vec![d, d]));
            spec.push((format!("layer{i}.attn.{}", w.replace('w', "b")), vec![d]));
        }
        spec.push((format!("layer{i}.attn.ln.gain"), vec![d]));
        spec.push((format!("layer{i}.attn.ln.bias"), vec![d]));
        spec.push((format!("layer{i}.ffn.w1"), vec![d, f]));
        spec.push((format!("layer{i}.ffn.b1"), vec![f]));
        spec.push((format!("layer{i}.ffn.w2"), vec![f, d]));
        spec.push((format!("layer{i}.ffn.b2"), vec![d]));
        spec.push((format!("layer{i}.ffn.ln.gain"), vec![d]));
        spec.push((format!("layer{i}.ffn.ln.bias"), vec![d]));
    }
    spec
}

/// Trainable encoder parameters (task heads live separately and are never
/// part of this set).
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    config: ModelConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Random initialization: weights and embeddings `N(0, 0.02)`, biases
    /// zero, layer-norm gains one. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, stream::INIT);
        let mut params = ParamSet::new();
        for (name, shape) in tensor_spec(&config) {
            let tensor = if name.ends_with(".ln.gain") {
                Tensor::filled(&shape, T::one())
            } else if is_bias(&name) {
                Tensor::zeros(&shape)
            } else {
                normal_init(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, tensor)?;
        }
        Ok(EncoderParams { config, params })
    }

    /// Rebuilds parameters from named tensors (checkpoint load). The name
    /// set and shapes must match the canonical spec exactly.
    pub fn from_named_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let spec = tensor_spec(&config);
        if tensors.len() != spec.len() {
            return Err(Error::Config(format!(
                "expected {} encoder tensors, got {}",
                spec.len(),
                tensors.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Tensor<T>> =
            tensors.into_iter().collect();
        let mut params = ParamSet::new();
        for (name, shape) in &spec {
            let tensor = by_name
                .remove(name)
                .ok_or_else(|| Error::Config(format!("missing encoder tensor {name:?}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            params.insert(name.clone(), tensor)?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra:?}")));
        }
        Ok(EncoderParams { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Tensors in canonical manifest order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.params
            .iter()
            .map(|s| (s.name.clone(), &s.value))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or("");
    matches!(last, "bq" | "bk" | "bv" | "bo" | "b1" | "b2" | "bias")
}

impl<T: Scalar> Parameterized<T> for EncoderParams<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        self.params.slots()
    }
    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        self.params.slots_mut()
    }
}

/// Task-specific output layer over the `[CLS]` contextual embedding.
#[derive(Clone, Debug)]
pub enum TaskHead<T> {
    /// `softmax(Wᵀ v + b)` over a fixed label set; `W: [d, C]`.
    Classification {
        params: ParamSet<T>,
        num_classes: usize,
    },
    /// Scalar plausibility score `wᵀ v + b`; `w: [d, 1]`.
    MultipleChoice { params: ParamSet<T> },
}

impl<T: Scalar> TaskHead<T> {
    /// Fresh classification head, weights `N(0, 0.02)`, bias zero.
    pub fn classification(hidden_size: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classification needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = stream_rng(seed, stream::HEAD);
        let mut params = ParamSet::new();
        params.insert(
            "head.cls.w",
            normal_init(&[hidden_size, num_classes], INIT_STD, &mut rng),
        )?;
        params.insert("head.cls.b", Tensor::zeros(&[num_classes]))?;
        Ok(TaskHead::Classification {
            params,
            num_classes,
        })
    }

    /// Fresh choice-scoring head, weights `N(0, 0.02)`, bias zero.
    pub fn multiple_choice(hidden_size: usize, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, stream::HEAD);
        let mut params = ParamSet::new();
        params.insert(
            "head.choice.w",
            normal_init(&[hidden_size, 1], INIT_STD, &mut rng),
        )?;
        params.insert("head.choice.b", Tensor::zeros(&[1]))?;
        Ok(TaskHead::MultipleChoice { params })
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            TaskHead::Classification { .. } => "classification",
            TaskHead::MultipleChoice { .. } => "multiple_choice",
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            TaskHead::Classification { num_classes, .. } => Some(*num_classes),
            TaskHead::MultipleChoice { .. } => None,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        match self {
            TaskHead::Classification { params, .. } => params,
            TaskHead::MultipleChoice { params } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            TaskHead::Classification { params, .. } => params,
            TaskHead::MultipleChoice { params } => params,
        }
    }

    pub fn hidden_size(&self) -> usize {
        match self {
            TaskHead::Classification { params, .. } => params.value("head.cls.w").shape()[0],
            TaskHead::MultipleChoice { params } => params.value("head.choice.w").shape()[0],
        }
    }

    pub fn cast<U: Scalar>(&self) -> TaskHead<U> {
        match self {
            TaskHead::Classification {
                params,
                num_classes,
            } => TaskHead::Classification {
                params: params.cast(),
                num_classes: *num_classes,
            },
            TaskHead::MultipleChoice { params } => TaskHead::MultipleChoice {
                params: params.cast(),
            },
        }
    }
}

impl<T: Scalar> Parameterized<T> for TaskHead<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        self.params().slots()
    }
    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        self.params_mut().slots_mut()
    }
}

/// Class logits `Wᵀ v + b` of a classification head.
pub fn classify_logits<T: Scalar>(head: &TaskHead<T>, v: &[T]) -> Result<Vec<T>> {
    let TaskHead::Classification {
        params,
        num_classes,
    } = head
    else {
        return Err(Error::Config(
            "classify requires a classification head, found multiple_choice".into(),
        ));
    };
    let w = params.value("head.cls.w");
    let b = params.value("head.cls.b");
    if w.shape()[0] != v.len() {
        return Err(Error::Shape {
            op: "classify",
            details: format!("head expects dim {}, got {}", w.shape()[0], v.len()),
        });
    }
    let mut logits = b.data().to_vec();
    for (k, &vk) in v.iter().enumerate() {
        let row = w.row(k);
        for c in 0..*num_classes {
            logits[c] = logits[c] + vk * row[c];
        }
    }
    Ok(logits)
}

/// Class probabilities `softmax(Wᵀ v + b)`.
pub fn classify<T: Scalar>(head: &TaskHead<T>, v: &[T]) -> Result<Vec<T>> {
    let logits = classify_logits(head, v)?;
    let t = Tensor::from_vec(&[1, logits.len()], logits)?;
    Ok(crate::ops::softmax_rows(&t).data().to_vec())
}

/// Scalar plausibility score `wᵀ v + b` of a choice head.
pub fn score_choice<T: Scalar>(head: &TaskHead<T>, v: &[T]) -> Result<T> {
    let TaskHead::MultipleChoice { params } = head else {
        return Err(Error::Config(
            "score_choice requires a multiple_choice head, found classification".into(),
        ));
    };
    let w = params.value("head.choice.w");
    if w.shape()[0] != v.len() {
        return Err(Error::Shape {
            op: "score_choice",
            details: format!("head expects dim {}, got {}", w.shape()[0], v.len()),
        });
    }
    let mut s = params.value("head.choice.b").data()[0];
    for (k, &vk) in v.iter().enumerate() {
        s = s + vk * w.at2(k, 0);
    }
    Ok(s)
}

/// Scored prediction over a candidate list.
#[derive(Clone, Debug)]
pub struct ChoicePrediction<T> {
    pub scores: Vec<T>,
    /// Index of the highest score; ties resolve to the lowest index.
    pub predicted: usize,
}

/// Scores every candidate ending against the shared context and picks the
/// argmax. The context sentences are joined with single spaces into segment
/// `a`; each candidate is segment `b` of its own encoding.
pub fn predict_choice<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &TaskHead<T>,
    vocab: &Vocab,
    max_len: usize,
    context_sentences: &[String],
    choices: &[String],
) -> Result<ChoicePrediction<T>> {
    if choices.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two choices, got {}",
            choices.len()
        )));
    }
    let context = context_sentences.join(" ");
    let tokens_a = tokenize(&context, vocab);
    let mut scores = Vec::with_capacity(choices.len());
    for choice in choices {
        let tokens_b = tokenize(choice, vocab);
        let input = encode_pair(&tokens_a, Some(&tokens_b), vocab, max_len)?;
        let seq = encode(encoder, &input)?;
        scores.push(score_choice(head, seq.cls_vector())?);
    }
    let mut predicted = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[predicted] {
            predicted = i;
        }
    }
    Ok(ChoicePrediction { scores, predicted })
}

/// Encoder plus task head, trained (and gradient-checked) jointly.
#[derive(Clone, Debug)]
pub struct ModelWithHead<T> {
    pub encoder: EncoderParams<T>,
    pub head: TaskHead<T>,
}

impl<T: Scalar> Parameterized<T> for ModelWithHead<T> {
    fn slots(&self) -> Vec<&ParamSlot<T>> {
        let mut v = self.encoder.slots();
        v.extend(self.head.slots());
        v
    }
    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        let mut v = self.encoder.params_mut().slots_mut();
        v.extend(self.head.params_mut().slots_mut());
        v
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::tokenizer::train_vocab;

    pub fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            vocab_size,
            max_positions: 16,
            dropout_keep: 1.0,
        }
    }

    pub fn tiny_vocab() -> Vocab {
        train_vocab(
            "the cat sat on the mat the dog ran off a big dog sat down",
            48,
            false,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = tiny_config(16);
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config(16);
        let a = EncoderParams::<f32>::init(cfg.clone(), 5).unwrap();
        let b = EncoderParams::<f32>::init(cfg.clone(), 5).unwrap();
        let c = EncoderParams::<f32>::init(cfg, 6).unwrap();
        assert_eq!(a.params().value("emb.word"), b.params().value("emb.word"));
        assert_ne!(a.params().value("emb.word"), c.params().value("emb.word"));
    }

    #[test]
    fn init_sets_gains_one_and_biases_zero() {
        let enc = EncoderParams::<f32>::init(tiny_config(16), 0).unwrap();
        assert!(enc
            .params()
            .value("emb.ln.gain")
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(enc
            .params()
            .value("layer0.attn.bq")
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(enc
            .params()
            .value("layer1.ffn.b2")
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_names_never_mention_heads() {
        let enc = EncoderParams::<f32>::init(tiny_config(16), 0).unwrap();
        for (name, _) in enc.named_tensors() {
            assert!(!name.starts_with("head."), "{name}");
        }
    }

    #[test]
    fn from_named_tensors_validates_shapes_and_names() {
        let cfg = tiny_config(16);
        let enc = EncoderParams::<f32>::init(cfg.clone(), 0).unwrap();
        let mut tensors: Vec<(String, Tensor<f32>)> = enc
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert!(EncoderParams::from_named_tensors(cfg.clone(), tensors.clone()).is_ok());
        tensors[0].1 = Tensor::zeros(&[3, 3]);
        assert!(EncoderParams::from_named_tensors(cfg, tensors).is_err());
    }

    #[test]
    fn zero_classification_head_is_uniform() {
        let mut head = TaskHead::<f64>::classification(4, 3, 0).unwrap();
        head.params_mut().slot_mut("head.cls.w").value.fill(0.0);
        let probs = classify(&head, &[0.3, -0.7, 1.1, 0.0]).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_probs_match_hand_softmax() {
        // W column 0 = (10, 0), column 1 = (0, 0): logits (10, 0) for
        // v = (1, 0), so p ~= (0.99995, 0.00005).
        let mut head = TaskHead::<f64>::classification(2, 2, 0).unwrap();
        head.params_mut().slot_mut("head.cls.w").value =
            Tensor::from_vec(&[2, 2], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let probs = classify(&head, &[1.0, 0.0]).unwrap();
        assert!((probs[0] - 0.99995).abs() < 1e-5, "{probs:?}");
        assert!((probs[1] - 0.00005).abs() < 1e-5, "{probs:?}");
    }

    #[test]
    fn classification_bias_alone_shifts_probs() {
        let mut head = TaskHead::<f64>::classification(2, 2, 0).unwrap();
        head.params_mut().slot_mut("head.cls.w").value.fill(0.0);
        head.params_mut().slot_mut("head.cls.b").value =
            Tensor::from_vec(&[2], vec![(2.0f64).ln(), 0.0]).unwrap();
        let probs = classify(&head, &[5.0, -3.0]).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_choice_head_scores_zero() {
        let mut head = TaskHead::<f64>::multiple_choice(4, 0).unwrap();
        head.params_mut().slot_mut("head.choice.w").value.fill(0.0);
        assert_eq!(score_choice(&head, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
    }

    #[test]
    fn unit_choice_weight_reads_one_coordinate() {
        let mut head = TaskHead::<f64>::multiple_choice(2, 0).unwrap();
        head.params_mut().slot_mut("head.choice.w").value =
            Tensor::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        head.params_mut().slot_mut("head.choice.b").value.fill(0.0);
        let s = score_choice(&head, &[0.7, -9.0]).unwrap();
        assert!((s - 0.7).abs() < 1e-12);
    }

    #[test]
    fn head_variant_mismatch_is_an_error() {
        let cls = TaskHead::<f64>::classification(4, 2, 0).unwrap();
        let mc = TaskHead::<f64>::multiple_choice(4, 0).unwrap();
        assert!(score_choice(&cls, &[0.0; 4]).is_err());
        assert!(classify(&mc, &[0.0; 4]).is_err());
    }
}
