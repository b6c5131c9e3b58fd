//! Scoring utilities: dataset encoding, accuracy, and report formatting.

use serde::Serialize;

use crate::data::{subset_context, ChoiceExample, PairExample};
use crate::error::{Error, Result};
use crate::model::{
    classify_logits, encode, predict_choice, score_choice, EncodedChoice, EncoderParams, TaskHead,
};
use crate::scalar::Scalar;
use crate::tokenizer::{encode_pair, tokenize, EncodedInput, Vocab};

/// Encodes a premise/hypothesis pair (or a bare sentence) with its label id.
pub fn encode_pair_example(
    example: &PairExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<(EncodedInput, usize)> {
    let tokens_a = tokenize(&example.text_a, vocab);
    let input = if example.text_b.is_empty() {
        encode_pair(&tokens_a, None, vocab, max_len)?
    } else {
        let tokens_b = tokenize(&example.text_b, vocab);
        encode_pair(&tokens_a, Some(&tokens_b), vocab, max_len)?
    };
    Ok((input, example.label))
}

/// Encodes every candidate ending against the joined context sentences.
///
/// The context goes in as segment 0 and the candidate as segment 1, the same
/// shape [`crate::model::predict_choice`] builds internally, so training and
/// inference see identical inputs.
pub fn encode_choice_example(
    example: &ChoiceExample,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedChoice> {
    let context = example.context_sentences.join(" ");
    let tokens_a = tokenize(&context, vocab);
    let inputs = example
        .choices
        .iter()
        .map(|choice| {
            let tokens_b = tokenize(choice, vocab);
            encode_pair(&tokens_a, Some(&tokens_b), vocab, max_len)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedChoice {
        inputs,
        answer: example.answer_index,
    })
}

/// Fraction of pair examples whose top logit matches the label.
///
/// Ties break toward the lowest class index.
pub fn pair_accuracy<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &TaskHead<T>,
    examples: &[(EncodedInput, usize)],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let mut hits = 0usize;
    for (input, label) in examples {
        let seq = encode(encoder, input)?;
        let logits = classify_logits(head, seq.cls_vector())?;
        if argmax(&logits) == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Fraction of multiple-choice examples scored in favor of the answer.
///
/// Ties break toward the lowest candidate index.
pub fn choice_accuracy<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &TaskHead<T>,
    examples: &[EncodedChoice],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let mut hits = 0usize;
    for example in examples {
        let mut scores = Vec::with_capacity(example.inputs.len());
        for input in &example.inputs {
            let seq = encode(encoder, input)?;
            scores.push(score_choice(head, seq.cls_vector())?);
        }
        if argmax(&scores) == example.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if x.as_f64() > xs[best].as_f64() {
            best = i;
        }
    }
    best
}

/// Fraction of predictions matching gold.
pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if predictions.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predictions against {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p == g)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Renders a fraction as a percentage with one decimal, e.g. 1648 of 1871
/// correct comes out as "88.1".
pub fn percent(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

/// One story's scoring outcome, kept around for error analysis.
#[derive(Clone, Debug, Serialize)]
pub struct ChoiceRecord {
    /// Head score of every candidate ending, in dataset order.
    pub scores: Vec<f64>,
    pub prediction: usize,
    pub gold: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SctEvaluation {
    /// Fraction correct; see [`percent`] for the reporting format.
    pub accuracy: f64,
    pub records: Vec<ChoiceRecord>,
}

/// Scores every story with [`predict_choice`] and keeps both candidate
/// scores per example.
pub fn evaluate_sct<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &TaskHead<T>,
    vocab: &Vocab,
    max_len: usize,
    dataset: &[ChoiceExample],
) -> Result<SctEvaluation> {
    if dataset.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let mut records = Vec::with_capacity(dataset.len());
    let mut hits = 0usize;
    for example in dataset {
        let prediction = predict_choice(
            encoder,
            head,
            vocab,
            max_len,
            &example.context_sentences,
            &example.choices,
        )?;
        let correct = prediction.predicted == example.answer_index;
        if correct {
            hits += 1;
        }
        records.push(ChoiceRecord {
            scores: prediction.scores.iter().map(|s| s.as_f64()).collect(),
            prediction: prediction.predicted,
            gold: example.answer_index,
            correct,
        });
    }
    Ok(SctEvaluation {
        accuracy: hits as f64 / dataset.len() as f64,
        records,
    })
}

/// The context combinations reported in the sentence-ablation table, from
/// no context at all up to the full four sentences.
pub const ABLATION_SWEEP: [&[usize]; 5] = [&[], &[4], &[3, 4], &[2, 3, 4], &[1, 2, 3, 4]];

/// Row label for a kept-sentence subset, e.g. "ending only" or "(3,4)".
pub fn subset_label(keep: &[usize]) -> String {
    if keep.is_empty() {
        "ending only".to_string()
    } else {
        let joined: Vec<String> = keep.iter().map(|k| k.to_string()).collect();
        format!("({})", joined.join(","))
    }
}

/// Evaluates the dataset once per kept-sentence subset and returns labeled
/// accuracy rows. Keeping all four sentences reproduces [`evaluate_sct`]
/// on the unmodified dataset exactly.
pub fn ablate_context<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &TaskHead<T>,
    vocab: &Vocab,
    max_len: usize,
    dataset: &[ChoiceExample],
    subsets: &[&[usize]],
) -> Result<Vec<(String, f64)>> {
    if subsets.is_empty() {
        return Err(Error::Config("no context subsets to ablate".into()));
    }
    let mut rows = Vec::with_capacity(subsets.len());
    for &keep in subsets {
        let reduced = dataset
            .iter()
            .map(|e| subset_context(e, keep))
            .collect::<Result<Vec<_>>>()?;
        let eval = evaluate_sct(encoder, head, vocab, max_len, &reduced)?;
        rows.push((subset_label(keep), eval.accuracy));
    }
    Ok(rows)
}

/// How an entailment classifier turns its three logits into one score per
/// candidate ending.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroShotStatistic {
    /// Probability of entailment with the neutral reading set aside,
    /// i.e. renormalized over the entailment and contradiction logits.
    /// The prediction then depends only on how the entailment coordinate
    /// orders across the endings, never on the neutral mass.
    Entailment,
    /// Entailment minus contradiction probability under the full
    /// three-way softmax. Sensitive to the neutral logit.
    EntailmentMinusContradiction,
}

/// Labels of the three entailment categories, in head-output order.
const ENTAILMENT: usize = 0;
const CONTRADICTION: usize = 2;

fn zero_shot_score(logits: &[f64], statistic: ZeroShotStatistic) -> f64 {
    match statistic {
        ZeroShotStatistic::Entailment => {
            1.0 / (1.0 + (logits[CONTRADICTION] - logits[ENTAILMENT]).exp())
        }
        ZeroShotStatistic::EntailmentMinusContradiction => {
            let peak = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - peak).exp()).collect();
            let total: f64 = exps.iter().sum();
            (exps[ENTAILMENT] - exps[CONTRADICTION]) / total
        }
    }
}

/// Applies an entailment classifier to stories without any story training:
/// each ending is scored by how strongly the context entails it, and the
/// higher-scoring ending wins (ties to the first).
pub fn zero_shot_nli_sct<T: Scalar>(
    encoder: &EncoderParams<T>,
    head: &TaskHead<T>,
    vocab: &Vocab,
    max_len: usize,
    dataset: &[ChoiceExample],
    statistic: ZeroShotStatistic,
) -> Result<f64> {
    match head {
        TaskHead::Classification { num_classes: 3, .. } => {}
        TaskHead::Classification { num_classes, .. } => {
            return Err(Error::Config(format!(
                "zero-shot scoring needs the 3-class entailment head, got {num_classes} classes"
            )));
        }
        TaskHead::MultipleChoice { .. } => {
            return Err(Error::Config(
                "zero-shot scoring needs a classification head, found multiple_choice".into(),
            ));
        }
    }
    if dataset.is_empty() {
        return Err(Error::Data("no examples to score".into()));
    }
    let mut hits = 0usize;
    for example in dataset {
        let encoded = encode_choice_example(example, vocab, max_len)?;
        let mut scores = Vec::with_capacity(encoded.inputs.len());
        for input in &encoded.inputs {
            let seq = encode(encoder, input)?;
            let logits: Vec<f64> = classify_logits(head, seq.cls_vector())?
                .iter()
                .map(|z| z.as_f64())
                .collect();
            scores.push(zero_shot_score(&logits, statistic));
        }
        if argmax(&scores) == example.answer_index {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PairExample;
    use crate::model::test_support::{tiny_config, tiny_vocab};
    use crate::model::ModelConfig;

    fn zeroed_encoder(config: ModelConfig) -> EncoderParams<f64> {
        let mut enc = EncoderParams::<f64>::init(config, 0).unwrap();
        for slot in crate::params::Parameterized::slots_mut(&mut enc) {
            slot.value.fill(0.0);
        }
        enc
    }

    #[test]
    fn zeroed_model_predicts_the_first_class() {
        let vocab = tiny_vocab();
        let encoder = zeroed_encoder(tiny_config(vocab.size()));
        let head = TaskHead::<f64>::classification(8, 3, 0).unwrap();
        let mut head = head;
        for slot in crate::params::Parameterized::slots_mut(&mut head) {
            slot.value.fill(0.0);
        }
        let examples: Vec<(EncodedInput, usize)> = [("the cat", 0), ("a dog", 1)]
            .iter()
            .map(|(text, label)| {
                let ex = PairExample::new(*text, "sat down", *label, &["a", "b", "c"]).unwrap();
                encode_pair_example(&ex, &vocab, 16).unwrap()
            })
            .collect();
        // every logit is identical, so the tie break lands on class 0
        let acc = pair_accuracy(&encoder, &head, &examples).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_example_lists_are_rejected() {
        let vocab = tiny_vocab();
        let encoder = EncoderParams::<f64>::init(tiny_config(vocab.size()), 0).unwrap();
        let cls = TaskHead::<f64>::classification(8, 2, 0).unwrap();
        let mc = TaskHead::<f64>::multiple_choice(8, 0).unwrap();
        assert!(pair_accuracy(&encoder, &cls, &[]).is_err());
        assert!(choice_accuracy(&encoder, &mc, &[]).is_err());
    }

    #[test]
    fn accuracy_counts_matches_and_rejects_misshapen_input() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1], &[1, 1]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
        // jointly permuting predictions and gold changes nothing
        let preds = [0, 1, 1, 0, 1];
        let gold = [0, 1, 0, 0, 0];
        let base = accuracy(&preds, &gold).unwrap();
        let perm = [4, 2, 0, 3, 1];
        let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
        let g2: Vec<usize> = perm.iter().map(|&i| gold[i]).collect();
        assert_eq!(accuracy(&p2, &g2).unwrap(), base);
    }

    #[test]
    fn percent_prints_one_decimal() {
        assert_eq!(percent(1.0), "100.0");
        assert_eq!(percent(0.5), "50.0");
        assert_eq!(percent(1648.0 / 1871.0), "88.1");
    }

    #[test]
    fn subset_labels_match_the_sweep_rows() {
        let labels: Vec<String> = ABLATION_SWEEP.iter().map(|k| subset_label(k)).collect();
        assert_eq!(
            labels,
            ["ending only", "(4)", "(3,4)", "(2,3,4)", "(1,2,3,4)"]
        );
    }

    fn story_dataset() -> Vec<ChoiceExample> {
        crate::synth::sct_examples(7, 6, &[0, 1, 2, 3, 4, 5])
    }

    fn story_vocab() -> Vocab {
        crate::tokenizer::train_vocab(&crate::synth::corpus_text(0), 160, false).unwrap()
    }

    fn story_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            max_positions: 64,
            ..tiny_config(vocab_size)
        }
    }

    #[test]
    fn zeroed_choice_head_always_predicts_the_first_ending() {
        let vocab = story_vocab();
        let encoder = EncoderParams::<f64>::init(story_config(vocab.size()), 1).unwrap();
        let mut head = TaskHead::<f64>::multiple_choice(8, 0).unwrap();
        for slot in crate::params::Parameterized::slots_mut(&mut head) {
            slot.value.fill(0.0);
        }
        let dataset = story_dataset();
        let eval = evaluate_sct(&encoder, &head, &vocab, 64, &dataset).unwrap();
        assert!(eval.records.iter().all(|r| r.prediction == 0));
        let gold_zero: Vec<ChoiceExample> = dataset
            .iter()
            .map(|e| {
                ChoiceExample::new(e.context_sentences.clone(), e.choices.clone(), 0).unwrap()
            })
            .collect();
        let eval = evaluate_sct(&encoder, &head, &vocab, 64, &gold_zero).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert_eq!(percent(eval.accuracy), "100.0");
    }

    #[test]
    fn keeping_every_sentence_reproduces_the_plain_evaluation() {
        let vocab = story_vocab();
        let encoder = EncoderParams::<f64>::init(story_config(vocab.size()), 3).unwrap();
        let head = TaskHead::<f64>::multiple_choice(8, 3).unwrap();
        let dataset = story_dataset();
        let plain = evaluate_sct(&encoder, &head, &vocab, 64, &dataset).unwrap();
        let rows = ablate_context(
            &encoder,
            &head,
            &vocab,
            64,
            &dataset,
            &[&[1, 2, 3, 4], &[4], &[4]],
        )
        .unwrap();
        assert_eq!(rows[0].0, "(1,2,3,4)");
        assert_eq!(rows[0].1, plain.accuracy);
        // the same subset twice scores identically
        assert_eq!(rows[1], rows[2]);
        assert!(ablate_context(&encoder, &head, &vocab, 64, &dataset, &[]).is_err());
    }

    #[test]
    fn zero_shot_needs_three_entailment_classes() {
        let vocab = story_vocab();
        let encoder = EncoderParams::<f64>::init(story_config(vocab.size()), 1).unwrap();
        let two = TaskHead::<f64>::classification(8, 2, 0).unwrap();
        let mc = TaskHead::<f64>::multiple_choice(8, 0).unwrap();
        let dataset = story_dataset();
        assert!(
            zero_shot_nli_sct(&encoder, &two, &vocab, 64, &dataset, ZeroShotStatistic::Entailment)
                .is_err()
        );
        assert!(
            zero_shot_nli_sct(&encoder, &mc, &vocab, 64, &dataset, ZeroShotStatistic::Entailment)
                .is_err()
        );
        let three = TaskHead::<f64>::classification(8, 3, 0).unwrap();
        let acc = zero_shot_nli_sct(
            &encoder,
            &three,
            &vocab,
            64,
            &dataset,
            ZeroShotStatistic::Entailment,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn zero_shot_prediction_ignores_the_neutral_coordinate() {
        let vocab = story_vocab();
        let encoder = EncoderParams::<f64>::init(story_config(vocab.size()), 5).unwrap();
        let mut head = TaskHead::<f64>::classification(8, 3, 5).unwrap();
        let dataset = story_dataset();
        let before = zero_shot_nli_sct(
            &encoder,
            &head,
            &vocab,
            64,
            &dataset,
            ZeroShotStatistic::Entailment,
        )
        .unwrap();
        // rewrite the neutral column of the head arbitrarily
        if let TaskHead::Classification { params, .. } = &mut head {
            let w = params.slot_mut("head.cls.w");
            for row in 0..8 {
                let v = w.value.at2(row, 1) + (row as f64) * 3.7 - 11.0;
                w.value.set2(row, 1, v);
            }
            let b = params.slot_mut("head.cls.b");
            b.value.data_mut()[1] = 42.0;
        }
        let after = zero_shot_nli_sct(
            &encoder,
            &head,
            &vocab,
            64,
            &dataset,
            ZeroShotStatistic::Entailment,
        )
        .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn the_two_zero_shot_statistics_can_order_endings_differently() {
        // ending A has weak entailment but no neutral mass; ending B has a
        // strong entailment logit swamped by the neutral reading
        let a = [1.0, -20.0, 0.0];
        let b = [0.9, 20.0, -20.0];
        let ent = ZeroShotStatistic::Entailment;
        let alt = ZeroShotStatistic::EntailmentMinusContradiction;
        assert!(zero_shot_score(&b, ent) > zero_shot_score(&a, ent));
        assert!(zero_shot_score(&a, alt) > zero_shot_score(&b, alt));
    }

    #[test]
    fn choice_encoding_matches_the_inference_shape() {
        let vocab = tiny_vocab();
        let example = ChoiceExample::new(
            vec!["the cat sat".into(), "a dog ran".into()],
            vec!["on the mat".into(), "off a mat".into()],
            1,
        )
        .unwrap();
        let encoded = encode_choice_example(&example, &vocab, 24).unwrap();
        assert_eq!(encoded.inputs.len(), 2);
        assert_eq!(encoded.answer, 1);
        // both candidates share the context tokens in segment 0
        let joined = tokenize("the cat sat a dog ran", &vocab);
        let direct = encode_pair(&joined, Some(&tokenize("on the mat", &vocab)), &vocab, 24).unwrap();
        assert_eq!(encoded.inputs[0], direct);
    }
}
