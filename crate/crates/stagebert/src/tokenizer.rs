//! WordPiece vocabulary training, tokenization, and pair encoding.
//!
//! Vocabulary training is frequency-based pair merging (BPE style) over
//! whitespace-pre-split words; continuation pieces carry the `##` prefix.
//! Tokenization is greedy longest-match-first. Encoding lays a sentence pair
//! out as `[CLS] a [SEP] b [SEP]` with segment ids, an attention mask, and
//! `[PAD]` fill, truncating the longer side first.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Token inventory with id assignment by position.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    cased: bool,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl Vocab {
    /// Builds a vocab from an ordered token list. `[PAD]` must sit at id 0
    /// and all five specials must be present exactly once.
    pub fn from_tokens(tokens: Vec<String>, cased: bool) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocab(format!("empty token at id {i}")));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        let lookup = |name: &str| -> Result<u32> {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Vocab(format!("missing special token {name}")))
        };
        let pad = lookup(PAD)?;
        if pad != 0 {
            return Err(Error::Vocab(format!("{PAD} must have id 0, found {pad}")));
        }
        Ok(Vocab {
            pad,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
            tokens,
            ids,
            cased,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn cased(&self) -> bool {
        self.cased
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }
    pub fn unk_id(&self) -> u32 {
        self.unk
    }
    pub fn cls_id(&self) -> u32 {
        self.cls
    }
    pub fn sep_id(&self) -> u32 {
        self.sep
    }
    pub fn mask_id(&self) -> u32 {
        self.mask
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for tok in &self.tokens {
            let _ = writeln!(out, "{tok}");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a one-token-per-line file. When `cased` is `None` the flag is
    /// inferred: any uppercase character anywhere means the vocab is cased.
    pub fn load(path: impl AsRef<Path>, cased: Option<bool>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let cased = cased.unwrap_or_else(|| {
            tokens
                .iter()
                .filter(|t| !SPECIALS.contains(&t.as_str()))
                .any(|t| t.chars().any(|c| c.is_uppercase()))
        });
        Vocab::from_tokens(tokens, cased).map_err(|e| match e {
            Error::Vocab(msg) => Error::Vocab(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Trains a WordPiece vocab of at most `target_size` tokens.
///
/// Words are whitespace-split (lowercased unless `cased`), seeded with their
/// single-character pieces, and merged pairwise by descending frequency
/// (count ties break toward the lexicographically smaller pair) until the
/// budget is reached or no pair occurs at least twice. The result always
/// contains the five specials with `[PAD]` at id 0 and can represent every
/// corpus word without `[UNK]`.
pub fn train_vocab(corpus: &str, target_size: usize, cased: bool) -> Result<Vocab> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for raw in corpus.split_whitespace() {
        let word = if cased { raw.to_string() } else { raw.to_lowercase() };
        *counts.entry(word).or_insert(0) += 1;
    }
    if counts.is_empty() {
        return Err(Error::Vocab("empty corpus".into()));
    }

    // Symbolize: first char bare, continuations with the ## prefix.
    let mut words: Vec<(Vec<String>, u64)> = Vec::with_capacity(counts.len());
    let mut occurring: BTreeSet<String> = BTreeSet::new();
    let mut chars: BTreeSet<char> = BTreeSet::new();
    for (word, count) in &counts {
        let mut symbols = Vec::new();
        for (i, c) in word.chars().enumerate() {
            chars.insert(c);
            let sym = if i == 0 {
                c.to_string()
            } else {
                format!("##{c}")
            };
            occurring.insert(sym.clone());
            symbols.push(sym);
        }
        words.push((symbols, *count));
    }

    let floor = SPECIALS.len() + chars.len();
    if target_size < floor {
        return Err(Error::Vocab(format!(
            "target_size {target_size} too small: need at least {floor} \
             (5 specials + {} distinct characters)",
            chars.len()
        )));
    }
    if target_size < SPECIALS.len() + occurring.len() {
        return Err(Error::Vocab(format!(
            "target_size {target_size} cannot cover the corpus: {} distinct \
             character pieces occur (plus 5 specials)",
            occurring.len()
        )));
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: HashSet<String> = tokens.iter().cloned().collect();
    let push = |tokens: &mut Vec<String>, seen: &mut HashSet<String>, tok: String| {
        if seen.insert(tok.clone()) {
            tokens.push(tok);
        }
    };
    for sym in &occurring {
        push(&mut tokens, &mut seen, sym.clone());
    }
    // Complementary forms of seen characters, as budget allows: bare forms
    // first, then continuations, each in character order.
    for prefix in ["", "##"] {
        for &c in &chars {
            if tokens.len() >= target_size {
                break;
            }
            let sym = format!("{prefix}{c}");
            push(&mut tokens, &mut seen, sym);
        }
    }

    while tokens.len() < target_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pair_counts
                    .entry((w[0].clone(), w[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // Highest count wins; ties go to the lexicographically smaller pair
        // (BTreeMap iteration order makes the first maximum the smallest).
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(pair, count)| (pair.clone(), *count));
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let merged = format!("{left}{}", right.trim_start_matches("##"));
        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
        push(&mut tokens, &mut seen, merged);
    }

    Vocab::from_tokens(tokens, cased)
}

/// Greedy longest-match-first WordPiece tokenization.
///
/// Words the vocab cannot cover map to a single `[UNK]` piece. Lowercases
/// first when the vocab is uncased.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<String> {
    let mut pieces = Vec::new();
    for raw in text.split_whitespace() {
        let word = if vocab.cased() {
            raw.to_string()
        } else {
            raw.to_lowercase()
        };
        tokenize_word(&word, vocab, &mut pieces);
    }
    pieces
}

fn tokenize_word(word: &str, vocab: &Vocab, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return;
    }
    let mut word_pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        let mut end = chars.len();
        while end > start {
            let mut candidate: String = if start > 0 {
                String::from("##")
            } else {
                String::new()
            };
            candidate.extend(&chars[start..end]);
            if vocab.id(&candidate).is_some() {
                matched = Some((candidate, end));
                break;
            }
            end -= 1;
        }
        match matched {
            Some((piece, next)) => {
                word_pieces.push(piece);
                start = next;
            }
            None => {
                out.push(UNK.to_string());
                return;
            }
        }
    }
    out.append(&mut word_pieces);
}

/// Model-ready encoding of one sentence or sentence pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    /// 0 through the first `[SEP]`, 1 for the second segment, 0 on padding.
    pub segments: Vec<u8>,
    /// 1 on real tokens, 0 on `[PAD]` fill.
    pub mask: Vec<u8>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Lays out `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncating the
/// longer of `a`/`b` one token at a time from its end until the layout fits
/// `max_len`, then pads. `max_len` must be at least 3.
pub fn encode_pair(
    tokens_a: &[String],
    tokens_b: Option<&[String]>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedInput> {
    if max_len < 3 {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room for [CLS] and [SEP]"
        )));
    }
    let overhead = if tokens_b.is_some() { 3 } else { 2 };
    let budget = max_len - overhead;
    let mut a_len = tokens_a.len();
    let mut b_len = tokens_b.map_or(0, |b| b.len());
    while a_len + b_len > budget {
        if a_len > b_len {
            a_len -= 1;
        } else {
            b_len -= 1;
        }
    }

    let to_id = |tok: &String| vocab.id(tok).unwrap_or_else(|| vocab.unk_id());
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(vocab.cls_id());
    segments.push(0u8);
    for tok in &tokens_a[..a_len] {
        ids.push(to_id(tok));
        segments.push(0);
    }
    ids.push(vocab.sep_id());
    segments.push(0);
    if let Some(b) = tokens_b {
        for tok in &b[..b_len] {
            ids.push(to_id(tok));
            segments.push(1);
        }
        ids.push(vocab.sep_id());
        segments.push(1);
    }
    let real = ids.len();
    let mut mask = vec![1u8; real];
    ids.resize(max_len, vocab.pad_id());
    segments.resize(max_len, 0);
    mask.resize(max_len, 0);
    Ok(EncodedInput {
        ids,
        segments,
        mask,
    })
}
