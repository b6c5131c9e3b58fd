//! Dataset loading and recasting for the supervised stages.
//!
//! Every supervised task arrives in one of two canonical shapes: a labeled
//! sentence pair or a multiple-choice example. Loaders consume simple
//! TSV/CSV schemas (converting original distribution formats is a
//! preprocessing step outside this crate), and the recasting operations turn
//! three-way entailment data into binary-choice form, filter relation
//! categories, slice story contexts, and split the story dev set.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};

/// Canonical entailment class names, index order fixed.
pub const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];
/// Canonical sentiment class names, index order fixed.
pub const SENTIMENT_LABELS: [&str; 2] = ["negative", "positive"];

/// Story dev-set geometry: total rows and the train/dev split sizes.
pub const SCT_V10_ROWS: usize = 1871;
pub const SCT_V10_TRAIN: usize = 1771;
pub const SCT_V10_DEV: usize = 100;

/// One labeled sentence pair (`text_b` empty for single-sentence tasks).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub text_a: String,
    pub text_b: String,
    pub label: usize,
    pub label_names: Vec<String>,
}

impl PairExample {
    pub fn new(
        text_a: impl Into<String>,
        text_b: impl Into<String>,
        label: usize,
        label_names: &[&str],
    ) -> Result<Self> {
        if label >= label_names.len() {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                label_names.len()
            )));
        }
        Ok(PairExample {
            text_a: text_a.into(),
            text_b: text_b.into(),
            label,
            label_names: label_names.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn has_nli_schema(&self) -> bool {
        self.label_names == NLI_LABELS
    }
}

/// One multiple-choice example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChoiceExample {
    pub context_sentences: Vec<String>,
    pub choices: Vec<String>,
    pub answer_index: usize,
}

impl ChoiceExample {
    pub fn new(
        context_sentences: Vec<String>,
        choices: Vec<String>,
        answer_index: usize,
    ) -> Result<Self> {
        if answer_index >= choices.len() {
            return Err(Error::Data(format!(
                "answer index {answer_index} out of range for {} choices",
                choices.len()
            )));
        }
        Ok(ChoiceExample {
            context_sentences,
            choices,
            answer_index,
        })
    }
}

/// Column layout of a labeled-pair TSV file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSchema {
    /// `premise ⟨TAB⟩ hypothesis ⟨TAB⟩ label`, three-way entailment labels.
    Nli,
    /// `text ⟨TAB⟩ label`, binary sentiment labels.
    Sentiment,
}

impl PairSchema {
    pub fn label_names(self) -> &'static [&'static str] {
        match self {
            PairSchema::Nli => &NLI_LABELS,
            PairSchema::Sentiment => &SENTIMENT_LABELS,
        }
    }

    fn columns(self) -> usize {
        match self {
            PairSchema::Nli => 3,
            PairSchema::Sentiment => 2,
        }
    }
}

/// Labeled pairs plus the count of rows whose label fell outside the schema
/// (unlabeled entailment rows are marked `-` upstream and carry no class).
#[derive(Clone, Debug)]
pub struct LoadedPairs {
    pub examples: Vec<PairExample>,
    pub skipped: usize,
}

/// Reads a labeled-pair TSV file. Rows with out-of-schema labels are skipped
/// and counted; a row with the wrong field count is an error naming its line.
pub fn load_pair_tsv(path: impl AsRef<Path>, schema: PairSchema) -> Result<LoadedPairs> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pair_tsv(&text, schema)
}

/// [`load_pair_tsv`] over in-memory text.
pub fn parse_pair_tsv(text: &str, schema: PairSchema) -> Result<LoadedPairs> {
    let names = schema.label_names();
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != schema.columns() {
            return Err(Error::Data(format!(
                "line {}: expected {} tab-separated fields, got {}",
                i + 1,
                schema.columns(),
                fields.len()
            )));
        }
        let label_text = fields[fields.len() - 1].trim();
        let Some(label) = names.iter().position(|n| *n == label_text) else {
            skipped += 1;
            continue;
        };
        let (text_a, text_b) = match schema {
            PairSchema::Nli => (fields[0], fields[1]),
            PairSchema::Sentiment => (fields[0], ""),
        };
        examples.push(PairExample::new(text_a, text_b, label, names)?);
    }
    Ok(LoadedPairs { examples, skipped })
}

/// Writes labeled pairs back out in the schema's TSV layout.
pub fn save_pair_tsv(path: impl AsRef<Path>, examples: &[PairExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in examples {
        let label = &e.label_names[e.label];
        if e.text_b.is_empty() {
            out.push_str(&format!("{}\t{}\n", e.text_a, label));
        } else {
            out.push_str(&format!("{}\t{}\t{}\n", e.text_a, e.text_b, label));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Recasts three-way entailment rows into binary-choice examples.
///
/// Rows are grouped by exact premise string (first-seen premise order, first
/// occurrence per label within a group). Each group emits up to three
/// examples from its label pairs: {entailment, neutral} and {entailment,
/// contradiction} keyed by the entailment hypothesis, and {neutral,
/// contradiction} keyed by the neutral one. Choice order is shuffled by
/// `seed` with `answer_index` tracking the right hypothesis.
pub fn recast_mc_nli(examples: &[PairExample], seed: u64) -> Result<Vec<ChoiceExample>> {
    struct Group<'a> {
        premise: &'a str,
        by_label: [Option<&'a str>; 3],
    }

    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for e in examples {
        if !e.has_nli_schema() {
            return Err(Error::Data(format!(
                "recasting needs three-way entailment rows, got labels {:?}",
                e.label_names
            )));
        }
        let g = match index.get(e.text_a.as_str()) {
            Some(&g) => g,
            None => {
                index.insert(&e.text_a, groups.len());
                groups.push(Group {
                    premise: &e.text_a,
                    by_label: [None; 3],
                });
                groups.len() - 1
            }
        };
        let slot = &mut groups[g].by_label[e.label];
        if slot.is_none() {
            *slot = Some(&e.text_b);
        }
    }

    let mut rng = stream_rng(seed, stream::RECAST);
    let mut out = Vec::new();
    for g in &groups {
        let [e, n, c] = g.by_label;
        for (right, wrong) in [(e, n), (e, c), (n, c)] {
            let (Some(right), Some(wrong)) = (right, wrong) else {
                continue;
            };
            let (choices, answer_index) = if rng.gen_bool(0.5) {
                (vec![wrong.to_string(), right.to_string()], 1)
            } else {
                (vec![right.to_string(), wrong.to_string()], 0)
            };
            out.push(ChoiceExample {
                context_sentences: vec![g.premise.to_string()],
                choices,
                answer_index,
            });
        }
    }
    Ok(out)
}

/// A pair of entailment relation categories to keep, canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NliCategoryPair {
    EntailmentNeutral,
    EntailmentContradiction,
    NeutralContradiction,
}

impl NliCategoryPair {
    /// The two kept label indices in canonical order.
    pub fn kept(self) -> [usize; 2] {
        match self {
            NliCategoryPair::EntailmentNeutral => [0, 1],
            NliCategoryPair::EntailmentContradiction => [0, 2],
            NliCategoryPair::NeutralContradiction => [1, 2],
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.to_ascii_uppercase().as_str() {
            "EN" => Ok(NliCategoryPair::EntailmentNeutral),
            "EC" => Ok(NliCategoryPair::EntailmentContradiction),
            "NC" => Ok(NliCategoryPair::NeutralContradiction),
            other => Err(Error::Config(format!(
                "unknown category pair {other:?}, expected EN, EC, or NC"
            ))),
        }
    }
}

/// Drops the entailment rows outside `kept` and re-indexes the surviving
/// labels to {0, 1} in canonical order. Row order and texts are unchanged.
pub fn filter_nli_categories(
    examples: &[PairExample],
    kept: NliCategoryPair,
) -> Result<Vec<PairExample>> {
    let kept = kept.kept();
    let names: Vec<&str> = kept.iter().map(|&k| NLI_LABELS[k]).collect();
    let mut out = Vec::new();
    for e in examples {
        if !e.has_nli_schema() {
            return Err(Error::Data(format!(
                "category filtering needs three-way entailment rows, got labels {:?}",
                e.label_names
            )));
        }
        let Some(new_label) = kept.iter().position(|&k| k == e.label) else {
            continue;
        };
        out.push(PairExample::new(
            e.text_a.clone(),
            e.text_b.clone(),
            new_label,
            &names,
        )?);
    }
    Ok(out)
}

fn csv_line(record: &csv::StringRecord) -> String {
    record
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "unknown line".into())
}

/// Reads story-cloze examples: a header row, then four context sentences,
/// two candidate endings, and a 1-based answer column.
pub fn load_sct(path: impl AsRef<Path>) -> Result<Vec<ChoiceExample>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() != 7 {
            return Err(Error::Data(format!(
                "{}: expected 7 columns (4 context sentences, 2 endings, answer), got {}",
                csv_line(&record),
                record.len()
            )));
        }
        let answer: usize = record[6]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}: answer {:?} is not a number", csv_line(&record), &record[6])))?;
        if !(1..=2).contains(&answer) {
            return Err(Error::Data(format!(
                "{}: answer {answer} outside {{1, 2}}",
                csv_line(&record)
            )));
        }
        out.push(ChoiceExample {
            context_sentences: (0..4).map(|i| record[i].to_string()).collect(),
            choices: vec![record[4].to_string(), record[5].to_string()],
            answer_index: answer - 1,
        });
    }
    Ok(out)
}

/// Writes story-cloze examples in the layout [`load_sct`] reads.
pub fn save_sct(path: impl AsRef<Path>, examples: &[ChoiceExample]) -> Result<()> {
    let path = path.as_ref();
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_record([
            "sentence1",
            "sentence2",
            "sentence3",
            "sentence4",
            "ending1",
            "ending2",
            "answer",
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    for e in examples {
        if e.context_sentences.len() != 4 || e.choices.len() != 2 {
            return Err(Error::Data(format!(
                "story rows need 4 context sentences and 2 endings, got {} and {}",
                e.context_sentences.len(),
                e.choices.len()
            )));
        }
        let answer = (e.answer_index + 1).to_string();
        let fields: Vec<&str> = e
            .context_sentences
            .iter()
            .chain(&e.choices)
            .map(|s| s.as_str())
            .chain([answer.as_str()])
            .collect();
        writer
            .write_record(&fields)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Reads single-context choice examples: a header row, then one context
/// column, two or more choice columns, and a 1-based answer column.
pub fn load_choice_csv(path: impl AsRef<Path>) -> Result<Vec<ChoiceExample>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() < 4 {
            return Err(Error::Data(format!(
                "{}: expected a context, at least two choices, and an answer, got {} columns",
                csv_line(&record),
                record.len()
            )));
        }
        let num_choices = record.len() - 2;
        let answer: usize = record[record.len() - 1]
            .trim()
            .parse()
            .map_err(|_| {
                Error::Data(format!(
                    "{}: answer {:?} is not a number",
                    csv_line(&record),
                    &record[record.len() - 1]
                ))
            })?;
        if !(1..=num_choices).contains(&answer) {
            return Err(Error::Data(format!(
                "{}: answer {answer} outside 1..={num_choices}",
                csv_line(&record)
            )));
        }
        out.push(ChoiceExample {
            context_sentences: vec![record[0].to_string()],
            choices: (1..=num_choices).map(|i| record[i].to_string()).collect(),
            answer_index: answer - 1,
        });
    }
    Ok(out)
}

/// Writes single-context choice examples in the layout [`load_choice_csv`]
/// reads. Every example must have the same choice count.
pub fn save_choice_csv(path: impl AsRef<Path>, examples: &[ChoiceExample]) -> Result<()> {
    let path = path.as_ref();
    let num_choices = examples.first().map_or(2, |e| e.choices.len());
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["context".to_string()];
    header.extend((1..=num_choices).map(|i| format!("choice{i}")));
    header.push("answer".into());
    writer
        .write_record(&header)
        .map_err(|e| Error::Data(e.to_string()))?;
    for e in examples {
        if e.context_sentences.len() != 1 || e.choices.len() != num_choices {
            return Err(Error::Data(format!(
                "choice rows need 1 context sentence and {num_choices} choices, got {} and {}",
                e.context_sentences.len(),
                e.choices.len()
            )));
        }
        let answer = (e.answer_index + 1).to_string();
        let fields: Vec<&str> = e
            .context_sentences
            .iter()
            .chain(&e.choices)
            .map(|s| s.as_str())
            .chain([answer.as_str()])
            .collect();
        writer
            .write_record(&fields)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Keeps the 1-based context sentences listed in `keep`, in original order.
/// An empty `keep` is the ending-only condition.
pub fn subset_context(example: &ChoiceExample, keep: &[usize]) -> Result<ChoiceExample> {
    for &k in keep {
        if !(1..=4).contains(&k) {
            return Err(Error::Config(format!(
                "context index {k} outside 1..=4"
            )));
        }
    }
    let context_sentences = example
        .context_sentences
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(&(i + 1)))
        .map(|(_, s)| s.clone())
        .collect();
    Ok(ChoiceExample {
        context_sentences,
        choices: example.choices.clone(),
        answer_index: example.answer_index,
    })
}

/// Splits the 1,871-row story dev set into 1,771 training and 100
/// development examples by a seeded shuffle.
pub fn split_sct_v10(
    examples: &[ChoiceExample],
    seed: u64,
) -> Result<(Vec<ChoiceExample>, Vec<ChoiceExample>)> {
    if examples.len() != SCT_V10_ROWS {
        return Err(Error::Data(format!(
            "expected exactly {SCT_V10_ROWS} rows, got {}",
            examples.len()
        )));
    }
    let mut shuffled: Vec<ChoiceExample> = examples.to_vec();
    let mut rng = stream_rng(seed, stream::SPLIT);
    shuffled.shuffle(&mut rng);
    let dev = shuffled.split_off(SCT_V10_TRAIN);
    Ok((shuffled, dev))
}
