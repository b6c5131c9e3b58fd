//! Training losses over batches of encoded inputs.
//!
//! Both losses run a traced forward per example, compute mean cross-entropy,
//! and push gradients back through the head and the encoder. Gradients
//! accumulate in the parameter slots; callers zero them between optimizer
//! steps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{add_row_bias, col_sums, cross_entropy, cross_entropy_backward, matmul, matmul_nt, matmul_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::EncodedInput;

use super::{encode_backward, encode_traced, ModelWithHead, TaskHead};

/// One multiple-choice example: the same context encoded against each
/// candidate, and the index of the correct candidate.
#[derive(Clone, Debug)]
pub struct EncodedChoice {
    pub inputs: Vec<EncodedInput>,
    pub answer: usize,
}

/// Mean cross-entropy of a labeled batch under the classification head.
///
/// Backward fills gradient slots of both the head and the encoder.
pub fn classification_loss<T: Scalar>(
    model: &mut ModelWithHead<T>,
    batch: &[(EncodedInput, usize)],
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty classification batch".into()));
    }
    let TaskHead::Classification { num_classes, .. } = &model.head else {
        return Err(Error::Config(
            "classification_loss requires a classification head".into(),
        ));
    };
    let num_classes = *num_classes;
    let d = model.encoder.config().hidden_size;
    let n = batch.len();

    let mut traces = Vec::with_capacity(n);
    let mut cls = Tensor::zeros(&[n, d]);
    for (i, (input, label)) in batch.iter().enumerate() {
        if *label >= num_classes {
            return Err(Error::Data(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let (seq, trace) = encode_traced(&model.encoder, input, training, rng)?;
        cls.row_mut(i).copy_from_slice(seq.cls_vector());
        traces.push(trace);
    }

    let logits = add_row_bias(
        &matmul(&cls, model.head.params().value("head.cls.w"))?,
        model.head.params().value("head.cls.b"),
    )?;
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let (loss, probs) = cross_entropy(&logits, &labels)?;

    let d_logits = cross_entropy_backward(&probs, &labels, T::of_usize(n).recip());
    let d_w = matmul_tn(&cls, &d_logits)?;
    model.head.params_mut().add_grad("head.cls.w", &d_w)?;
    model
        .head
        .params_mut()
        .add_grad("head.cls.b", &col_sums(&d_logits))?;
    let d_cls = matmul_nt(&d_logits, model.head.params().value("head.cls.w"))?;

    for (i, ((input, _), trace)) in batch.iter().zip(&traces).enumerate() {
        let mut d_hidden = Tensor::zeros(&[input.len(), d]);
        d_hidden.row_mut(0).copy_from_slice(d_cls.row(i));
        encode_backward(&mut model.encoder, input, trace, &d_hidden)?;
    }
    Ok(loss.as_f64())
}

/// Mean cross-entropy of a multiple-choice batch: every candidate of an
/// example is scored by the choice head and the scores are softmaxed against
/// the correct candidate's index.
pub fn choice_loss<T: Scalar>(
    model: &mut ModelWithHead<T>,
    batch: &[EncodedChoice],
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty multiple-choice batch".into()));
    }
    if !matches!(model.head, TaskHead::MultipleChoice { .. }) {
        return Err(Error::Config(
            "choice_loss requires a multiple_choice head".into(),
        ));
    }
    let d = model.encoder.config().hidden_size;
    let n = batch.len();
    let inv_n = T::of_usize(n).recip();

    let mut total = T::zero();
    for example in batch {
        let choices = example.inputs.len();
        if choices < 2 {
            return Err(Error::Data(format!(
                "choice example needs at least two candidates, got {choices}"
            )));
        }
        if example.answer >= choices {
            return Err(Error::Data(format!(
                "answer {} out of range for {choices} candidates",
                example.answer
            )));
        }

        let mut cls = Tensor::zeros(&[choices, d]);
        let mut traces = Vec::with_capacity(choices);
        for (k, input) in example.inputs.iter().enumerate() {
            let (seq, trace) = encode_traced(&model.encoder, input, training, rng)?;
            cls.row_mut(k).copy_from_slice(seq.cls_vector());
            traces.push(trace);
        }

        let scores = add_row_bias(
            &matmul(&cls, model.head.params().value("head.choice.w"))?,
            model.head.params().value("head.choice.b"),
        )?;
        let score_row = Tensor::from_vec(&[1, choices], scores.data().to_vec())?;
        let (loss, probs) = cross_entropy(&score_row, &[example.answer])?;
        total = total + loss;

        let d_row = cross_entropy_backward(&probs, &[example.answer], inv_n);
        let d_scores = Tensor::from_vec(&[choices, 1], d_row.data().to_vec())?;
        let d_w = matmul_tn(&cls, &d_scores)?;
        model.head.params_mut().add_grad("head.choice.w", &d_w)?;
        model
            .head
            .params_mut()
            .add_grad("head.choice.b", &col_sums(&d_scores))?;
        let d_cls = matmul_nt(&d_scores, model.head.params().value("head.choice.w"))?;

        for (k, (input, trace)) in example.inputs.iter().zip(&traces).enumerate() {
            let mut d_hidden = Tensor::zeros(&[input.len(), d]);
            d_hidden.row_mut(0).copy_from_slice(d_cls.row(k));
            encode_backward(&mut model.encoder, input, trace, &d_hidden)?;
        }
    }
    Ok((total * inv_n).as_f64())
}
