//! Synthetic fixture generators for every task shape, so the full pipeline
//! runs end to end without licensed data.
//!
//! The toy world is a set of named characters and six cause/effect patterns
//! arranged in antonym pairs (hungry/full, tired/awake, cold/hot). A story
//! puts the cause in its fourth sentence and offers the true effect against
//! the opposite pattern's effect, so every wrong ending is the right ending
//! of some other story: endings alone carry no signal, contexts decide. The
//! entailment task labels cause/effect pairs across all patterns, which is
//! exactly the regularity the stories test.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ChoiceExample, PairExample, NLI_LABELS, SENTIMENT_LABELS};
use crate::rng::{stream, stream_rng};

pub const NAMES: [&str; 8] = [
    "anna", "ben", "carla", "dave", "ella", "frank", "grace", "henry",
];

/// A cause sentence, its entailed effect, and the index of the antonym
/// pattern whose effect contradicts this cause.
pub struct CausePattern {
    pub cause: &'static str,
    pub effect: &'static str,
    pub opposite: usize,
}

pub const PATTERNS: [CausePattern; 6] = [
    CausePattern {
        cause: "{} was very hungry",
        effect: "{} ate a big meal",
        opposite: 1,
    },
    CausePattern {
        cause: "{} was completely full",
        effect: "{} skipped the meal",
        opposite: 0,
    },
    CausePattern {
        cause: "{} was very tired",
        effect: "{} went to sleep",
        opposite: 3,
    },
    CausePattern {
        cause: "{} was wide awake",
        effect: "{} stayed up late",
        opposite: 2,
    },
    CausePattern {
        cause: "{} was freezing cold",
        effect: "{} wore a warm coat",
        opposite: 5,
    },
    CausePattern {
        cause: "{} was burning hot",
        effect: "{} took a cool swim",
        opposite: 4,
    },
];

const FILLER_OPENINGS: [&str; 3] = ["{} woke up early", "{} stayed at home", "{} visited the park"];
const FILLER_SCENES: [&str; 3] = ["the morning was quiet", "the day felt long", "the weather was mild"];
const FILLER_DOINGS: [&str; 3] = ["{} worked for hours", "{} walked around town", "{} read an old book"];

const POSITIVE_WORDS: [&str; 4] = ["wonderful", "great", "lovely", "superb"];
const NEGATIVE_WORDS: [&str; 4] = ["awful", "terrible", "boring", "dull"];
const REVIEW_TEMPLATES: [&str; 3] = ["the film was {}", "the show felt {}", "that play seemed {}"];

fn fill(template: &str, name: &str) -> String {
    template.replace("{}", name)
}

fn synth_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    // Sub-streams of the synthesis stream; shifted left so they never
    // collide with the fixed single-digit stream ids.
    stream_rng(seed, stream::SYNTH + (salt << 8))
}

/// Unlabeled pretraining corpus: day narratives ending in a cause, activity
/// documents listing effects, and short reviews. Causes and their effects
/// never share a document, so the corpus alone does not teach which effect
/// follows which cause.
pub fn corpus_text(seed: u64) -> String {
    let mut rng = synth_rng(seed, 0);
    let mut documents: Vec<Vec<String>> = Vec::new();

    for (i, name) in NAMES.iter().enumerate() {
        for day in 0..2 {
            let pattern = &PATTERNS[(i + day * 3 + rng.gen_range(0..2)) % PATTERNS.len()];
            documents.push(vec![
                fill(FILLER_OPENINGS[rng.gen_range(0..3)], name),
                FILLER_SCENES[rng.gen_range(0..3)].to_string(),
                fill(FILLER_DOINGS[rng.gen_range(0..3)], name),
                fill(pattern.cause, name),
            ]);
        }
    }

    for group in [[0usize, 1], [2, 3], [4, 5]] {
        let mut doc = Vec::new();
        for (i, name) in NAMES.iter().enumerate() {
            doc.push(fill(PATTERNS[group[i % 2]].effect, name));
        }
        documents.push(doc);
    }

    for (i, name) in NAMES.iter().enumerate().take(4) {
        let positive = i % 2 == 0;
        let words: &[&str] = if positive { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
        documents.push(vec![
            fill("{} watched a film", name),
            fill(REVIEW_TEMPLATES[i % 3], words[rng.gen_range(0..4)]),
            fill(if positive { "{} smiled" } else { "{} frowned" }, name),
        ]);
    }

    documents.shuffle(&mut rng);
    let mut text = String::new();
    for doc in documents {
        for sentence in doc {
            text.push_str(&sentence);
            text.push('\n');
        }
        text.push('\n');
    }
    text
}

/// Labeled cause/effect pairs over every name and pattern: the entailed
/// effect, the antonym pattern's effect as a contradiction, and an effect
/// from an unrelated pattern group as neutral. Half the premises carry a
/// leading filler sentence so story-shaped inputs are in distribution.
pub fn nli_examples(seed: u64) -> Vec<PairExample> {
    let mut rng = synth_rng(seed, 1);
    let mut out = Vec::new();
    for name in NAMES {
        for (p, pattern) in PATTERNS.iter().enumerate() {
            let cause = fill(pattern.cause, name);
            let premise = if rng.gen_bool(0.5) {
                format!("{} {}", fill(FILLER_DOINGS[rng.gen_range(0..3)], name), cause)
            } else {
                cause
            };
            let group = p / 2;
            let foreign: Vec<usize> =
                (0..PATTERNS.len()).filter(|q| q / 2 != group).collect();
            let neutral = foreign[rng.gen_range(0..foreign.len())];
            for (hypothesis, label) in [
                (fill(pattern.effect, name), 0),
                (fill(PATTERNS[neutral].effect, name), 1),
                (fill(PATTERNS[pattern.opposite].effect, name), 2),
            ] {
                out.push(
                    PairExample::new(premise.clone(), hypothesis, label, &NLI_LABELS)
                        .expect("label within schema"),
                );
            }
        }
    }
    out.shuffle(&mut rng);
    out
}

/// Toy single-sentence sentiment reviews, balanced labels.
pub fn sentiment_examples(seed: u64, count: usize) -> Vec<PairExample> {
    let mut rng = synth_rng(seed, 2);
    (0..count)
        .map(|i| {
            let positive = i % 2 == 0;
            let words: &[&str] = if positive { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
            let text = fill(
                REVIEW_TEMPLATES[rng.gen_range(0..3)],
                words[rng.gen_range(0..4)],
            );
            PairExample::new(text, "", positive as usize, &SENTIMENT_LABELS)
                .expect("label within schema")
        })
        .collect()
}

/// Four-sentence stories over the given pattern indices. The cause sits in
/// the fourth sentence; the candidates are its effect and the antonym
/// pattern's effect in seeded order.
pub fn sct_examples(seed: u64, count: usize, patterns: &[usize]) -> Vec<ChoiceExample> {
    assert!(
        patterns.iter().all(|&p| p < PATTERNS.len()),
        "pattern index out of range"
    );
    let mut rng = synth_rng(seed, 3);
    (0..count)
        .map(|_| {
            let name = NAMES[rng.gen_range(0..NAMES.len())];
            let pattern = &PATTERNS[patterns[rng.gen_range(0..patterns.len())]];
            let context_sentences = vec![
                fill(FILLER_OPENINGS[rng.gen_range(0..3)], name),
                FILLER_SCENES[rng.gen_range(0..3)].to_string(),
                fill(FILLER_DOINGS[rng.gen_range(0..3)], name),
                fill(pattern.cause, name),
            ];
            let right = fill(pattern.effect, name);
            let wrong = fill(PATTERNS[pattern.opposite].effect, name);
            let (choices, answer_index) = if rng.gen_bool(0.5) {
                (vec![wrong, right], 1)
            } else {
                (vec![right, wrong], 0)
            };
            ChoiceExample {
                context_sentences,
                choices,
                answer_index,
            }
        })
        .collect()
}

/// Four-way continuation choices: one entailed effect against the effects
/// of the three other pattern groups (same name throughout).
pub fn next_action_examples(seed: u64, count: usize) -> Vec<ChoiceExample> {
    let mut rng = synth_rng(seed, 4);
    (0..count)
        .map(|_| {
            let name = NAMES[rng.gen_range(0..NAMES.len())];
            let p = rng.gen_range(0..PATTERNS.len());
            let pattern = &PATTERNS[p];
            let mut foreign: Vec<usize> =
                (0..PATTERNS.len()).filter(|&q| q / 2 != p / 2).collect();
            foreign.shuffle(&mut rng);
            let mut choices = vec![fill(pattern.effect, name)];
            choices.extend(foreign[..3].iter().map(|&q| fill(PATTERNS[q].effect, name)));
            let answer_index = rng.gen_range(0..4);
            choices.swap(0, answer_index);
            ChoiceExample {
                context_sentences: vec![fill(pattern.cause, name)],
                choices,
                answer_index,
            }
        })
        .collect()
}

/// Everything the three-stage transfer experiment needs.
///
/// The story training split covers only the first two pattern groups; the
/// development split draws on all three, so a third of it hinges on
/// cause/effect pairs no story-stage gradient ever saw. The entailment data
/// covers every group, which is what makes the transfer stage matter.
pub struct TransferSuite {
    pub corpus: String,
    pub nli_train: Vec<PairExample>,
    pub nli_dev: Vec<PairExample>,
    pub sct_train: Vec<ChoiceExample>,
    pub sct_dev: Vec<ChoiceExample>,
}

pub fn transfer_suite(seed: u64) -> TransferSuite {
    let mut nli = nli_examples(seed);
    let dev_len = nli.len() / 4;
    let nli_dev = nli.split_off(nli.len() - dev_len);
    TransferSuite {
        corpus: corpus_text(seed),
        nli_train: nli,
        nli_dev,
        sct_train: sct_examples(seed.wrapping_mul(2).wrapping_add(1), 48, &[0, 1, 2, 3]),
        sct_dev: sct_examples(seed.wrapping_mul(2), 40, &[0, 1, 2, 3, 4, 5]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{tokenize, train_vocab};

    #[test]
    fn generators_are_pure_functions_of_the_seed() {
        assert_eq!(corpus_text(3), corpus_text(3));
        assert_eq!(nli_examples(3), nli_examples(3));
        assert_eq!(sct_examples(3, 20, &[0, 1]), sct_examples(3, 20, &[0, 1]));
        assert_eq!(next_action_examples(3, 10), next_action_examples(3, 10));
        assert_eq!(sentiment_examples(3, 10), sentiment_examples(3, 10));
        assert_ne!(sct_examples(3, 20, &[0, 1]), sct_examples(4, 20, &[0, 1]));
    }

    #[test]
    fn stories_pair_the_true_effect_with_its_antonym() {
        for example in sct_examples(7, 60, &[0, 1, 2, 3, 4, 5]) {
            assert_eq!(example.context_sentences.len(), 4);
            assert_eq!(example.choices.len(), 2);
            let cause = &example.context_sentences[3];
            let (p, pattern) = PATTERNS
                .iter()
                .enumerate()
                .find(|(_, pat)| {
                    NAMES.iter().any(|n| &fill(pat.cause, n) == cause)
                })
                .expect("fourth sentence is a cause");
            let name = NAMES
                .iter()
                .find(|n| fill(pattern.cause, n) == *cause)
                .unwrap();
            assert_eq!(example.choices[example.answer_index], fill(pattern.effect, name));
            assert_eq!(
                example.choices[1 - example.answer_index],
                fill(PATTERNS[PATTERNS[p].opposite].effect, name)
            );
        }
    }

    #[test]
    fn every_effect_appears_as_right_and_as_wrong() {
        let examples = sct_examples(11, 240, &[0, 1, 2, 3, 4, 5]);
        for pattern in &PATTERNS {
            let suffix = &pattern.effect[3..];
            let rights = examples
                .iter()
                .filter(|e| e.choices[e.answer_index].ends_with(suffix))
                .count();
            let wrongs = examples
                .iter()
                .filter(|e| e.choices[1 - e.answer_index].ends_with(suffix))
                .count();
            assert!(rights > 10, "{suffix} right only {rights} times");
            assert!(wrongs > 10, "{suffix} wrong only {wrongs} times");
        }
    }

    #[test]
    fn entailment_triples_share_a_premise_and_cover_all_labels() {
        let examples = nli_examples(5);
        assert_eq!(examples.len(), NAMES.len() * PATTERNS.len() * 3);
        let mut by_premise: std::collections::HashMap<&str, Vec<&PairExample>> =
            std::collections::HashMap::new();
        for e in &examples {
            by_premise.entry(&e.text_a).or_default().push(e);
        }
        assert_eq!(by_premise.len(), NAMES.len() * PATTERNS.len());
        for group in by_premise.values() {
            let mut labels: Vec<usize> = group.iter().map(|e| e.label).collect();
            labels.sort_unstable();
            assert_eq!(labels, [0, 1, 2]);
        }
        assert!(examples.iter().any(|e| e.text_a.contains(" was ")));
    }

    #[test]
    fn neutral_hypotheses_come_from_unrelated_groups() {
        for e in nli_examples(9) {
            if e.label != 1 {
                continue;
            }
            let (p, _) = PATTERNS
                .iter()
                .enumerate()
                .find(|(_, pat)| {
                    NAMES
                        .iter()
                        .any(|n| e.text_a.ends_with(&fill(pat.cause, n)))
                })
                .expect("premise ends in a cause");
            let (q, _) = PATTERNS
                .iter()
                .enumerate()
                .find(|(_, pat)| {
                    NAMES.iter().any(|n| &fill(pat.effect, n) == &e.text_b)
                })
                .expect("hypothesis is an effect");
            assert_ne!(p / 2, q / 2, "{} vs {}", e.text_a, e.text_b);
        }
    }

    #[test]
    fn causes_and_their_effects_never_share_a_corpus_document() {
        let text = corpus_text(13);
        for document in text.split("\n\n") {
            for name in NAMES {
                for pattern in &PATTERNS {
                    let has_cause = document.contains(&fill(pattern.cause, name));
                    let has_effect = document.contains(&fill(pattern.effect, name));
                    assert!(!(has_cause && has_effect), "document teaches {name}");
                }
            }
        }
    }

    #[test]
    fn corpus_vocabulary_covers_every_task_text() {
        let text = corpus_text(1);
        let vocab = train_vocab(&text, 160, false).unwrap();
        let unk = crate::tokenizer::UNK.to_string();
        let mut task_text = String::new();
        for e in nli_examples(1) {
            task_text.push_str(&e.text_a);
            task_text.push(' ');
            task_text.push_str(&e.text_b);
            task_text.push(' ');
        }
        for e in sct_examples(1, 30, &[0, 1, 2, 3, 4, 5]) {
            task_text.push_str(&e.context_sentences.join(" "));
            task_text.push(' ');
            task_text.push_str(&e.choices.join(" "));
            task_text.push(' ');
        }
        for e in sentiment_examples(1, 16) {
            task_text.push_str(&e.text_a);
            task_text.push(' ');
        }
        assert!(!tokenize(&task_text, &vocab).contains(&unk));
    }

    #[test]
    fn next_actions_offer_four_choices_with_the_effect_right() {
        for e in next_action_examples(17, 40) {
            assert_eq!(e.choices.len(), 4);
            let cause = &e.context_sentences[0];
            let (_, pattern) = PATTERNS
                .iter()
                .enumerate()
                .find(|(_, pat)| NAMES.iter().any(|n| &fill(pat.cause, n) == cause))
                .unwrap();
            let name = NAMES.iter().find(|n| fill(pattern.cause, n) == *cause).unwrap();
            assert_eq!(e.choices[e.answer_index], fill(pattern.effect, name));
            let unique: std::collections::HashSet<&String> = e.choices.iter().collect();
            assert_eq!(unique.len(), 4);
        }
    }

    #[test]
    fn sentiment_labels_match_word_polarity() {
        for e in sentiment_examples(19, 30) {
            let positive = POSITIVE_WORDS.iter().any(|w| e.text_a.contains(w));
            let negative = NEGATIVE_WORDS.iter().any(|w| e.text_a.contains(w));
            assert!(positive != negative);
            assert_eq!(e.label == 1, positive);
        }
    }

    #[test]
    fn transfer_suite_holds_out_a_pattern_group_from_story_training() {
        let suite = transfer_suite(0);
        assert_eq!(suite.sct_train.len(), 48);
        assert_eq!(suite.sct_dev.len(), 40);
        assert!(!suite.nli_train.is_empty() && !suite.nli_dev.is_empty());

        let held_out: Vec<String> = NAMES
            .iter()
            .flat_map(|n| [fill(PATTERNS[4].cause, n), fill(PATTERNS[5].cause, n)])
            .collect();
        for e in &suite.sct_train {
            assert!(!held_out.contains(&e.context_sentences[3]));
        }
        assert!(
            suite
                .sct_dev
                .iter()
                .filter(|e| held_out.contains(&e.context_sentences[3]))
                .count()
                > 5
        );
        let nli_covers_held_out = suite.nli_train.iter().any(|e| {
            NAMES
                .iter()
                .any(|n| e.text_a.ends_with(&fill(PATTERNS[4].cause, n)))
        });
        assert!(nli_covers_held_out);
    }
}
