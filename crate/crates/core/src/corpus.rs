//! Function-level datasets: records, tokenization, vocabularies, statistics
//! and stratified splitting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

/// Desk default; the reference configuration uses 4096.
pub const DEFAULT_MAX_INPUT_LENGTH: usize = 256;

const CODE_PUNCT: &[char] = &[
    '(', ')', '{', '}', '[', ']', ';', ',', '.', '*', '&', '=', '<', '>', '!', '+', '-', '/', '%',
    '"', '\'', '\\',
];
const TEXT_TRAILING_PUNCT: &[char] = &['.', ',', ';', ':'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Code,
    Text,
}

/// One labeled source function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub id: String,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<String>,
}

impl FunctionRecord {
    pub fn new(id: impl Into<String>, code: impl Into<String>, label: u8) -> Self {
        Self {
            id: id.into(),
            code: code.into(),
            comment: None,
            label,
            cwe: None,
            project: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code.is_empty() {
            return Err(Error::invalid(format!("record {}: empty code", self.id)));
        }
        if self.label > 1 {
            return Err(Error::invalid(format!(
                "record {}: label {} is not 0 or 1",
                self.id, self.label
            )));
        }
        for tag in self.cwe.iter().flatten() {
            if !is_cwe_tag(tag) {
                return Err(Error::invalid(format!(
                    "record {}: malformed CWE tag {tag:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn is_vulnerable(&self) -> bool {
        self.label == 1
    }
}

fn is_cwe_tag(tag: &str) -> bool {
    tag.strip_prefix("CWE-")
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

pub fn tokenize(text: &str, modality: Modality) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        match modality {
            Modality::Code => {
                let mut current = String::new();
                for ch in chunk.chars() {
                    if CODE_PUNCT.contains(&ch) {
                        if !current.is_empty() {
                            out.push(core::mem::take(&mut current));
                        }
                        out.push(ch.to_string());
                    } else {
                        current.push(ch);
                    }
                }
                if !current.is_empty() {
                    out.push(current);
                }
            }
            Modality::Text => {
                let body = chunk.trim_end_matches(TEXT_TRAILING_PUNCT);
                if !body.is_empty() {
                    out.push(body.to_string());
                }
                out.extend(chunk[body.len()..].chars().map(|c| c.to_string()));
            }
        }
    }
    if out.is_empty() {
        out.push(UNK_TOKEN.to_string());
    }
    out
}

/// Token to id mapping with `<unk>` = 0 and `<pad>` = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    modality: Modality,
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    modality: Modality,
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            modality: v.modality,
            tokens: v.tokens,
        }
    }
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_tokens(r.modality, r.tokens)
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(modality: Modality, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != PAD_TOKEN {
            return Err(Error::invalid(
                "vocabulary must start with the reserved <unk> and <pad> tokens",
            ));
        }
        let mut index = BTreeMap::new();
        for (id, tok) in tokens.iter().enumerate().skip(2) {
            if index.insert(tok.clone(), id as u32).is_some() || is_reserved(tok) {
                return Err(Error::invalid(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
        }
        Ok(Self {
            modality,
            tokens,
            index,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Reserved strings never resolve to their reserved ids through lookup;
    /// a literal `<pad>` in the input is just an unknown word.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn is_reserved(tok: &str) -> bool {
    tok == UNK_TOKEN || tok == PAD_TOKEN
}

fn record_text(record: &FunctionRecord, modality: Modality) -> Option<&str> {
    match modality {
        Modality::Code => Some(&record.code),
        Modality::Text => record.comment.as_deref(),
    }
}

/// Most frequent tokens first, ties broken lexicographically, `max_size`
/// counting the two reserved ids.
pub fn build_vocab(
    records: &[FunctionRecord],
    modality: Modality,
    max_size: usize,
) -> Result<Vocabulary> {
    if max_size < 3 {
        return Err(Error::invalid("vocabulary max size must be at least 3"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in records.iter().filter_map(|r| record_text(r, modality)) {
        for tok in tokenize(text, modality) {
            if !is_reserved(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps that for ties
    ranked.sort_by_key(|r| core::cmp::Reverse(r.1));
    let mut tokens = vec![UNK_TOKEN.to_string(), PAD_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().take(max_size - 2).map(|(t, _)| t));
    Vocabulary::from_tokens(modality, tokens)
}

/// Encoded token ids for one input. Never padded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn encode<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    max_input_length: usize,
) -> TokenSequence {
    let max = max_input_length.max(1);
    let mut ids: Vec<u32> = tokens
        .iter()
        .take(max)
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    if ids.is_empty() {
        ids.push(UNK_ID);
    }
    TokenSequence {
        tokens: ids,
        modality: vocab.modality(),
    }
}

/// Tokenizes and encodes in one go.
pub fn encode_text(text: &str, vocab: &Vocabulary, max_input_length: usize) -> TokenSequence {
    encode(&tokenize(text, vocab.modality()), vocab, max_input_length)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub functions: usize,
    pub avg_loc: f64,
    pub avg_nloc: f64,
    pub avg_tokens: f64,
    pub non_vulnerable: usize,
    pub vulnerable: usize,
    /// `non-vulnerable : vulnerable`, normalized to `x.xx:1` when any
    /// vulnerable function exists.
    pub ratio: String,
}

pub fn format_ratio(non_vulnerable: usize, vulnerable: usize) -> String {
    if vulnerable > 0 {
        format!("{:.2}:1", non_vulnerable as f64 / vulnerable as f64)
    } else {
        format!("{:.2}:0", if non_vulnerable > 0 { 1.0 } else { 0.0 })
    }
}

pub fn dataset_stats(records: &[FunctionRecord]) -> Result<DatasetStats> {
    if records.is_empty() {
        return Err(Error::invalid("dataset_stats needs at least one record"));
    }
    let n = records.len() as f64;
    let (mut loc, mut nloc, mut toks, mut vulnerable) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        for line in r.code.split('\n') {
            loc += 1;
            if line.chars().any(|c| !c.is_whitespace()) {
                nloc += 1;
            }
        }
        toks += tokenize(&r.code, Modality::Code).len();
        vulnerable += usize::from(r.label == 1);
    }
    let non_vulnerable = records.len() - vulnerable;
    Ok(DatasetStats {
        functions: records.len(),
        avg_loc: loc as f64 / n,
        avg_nloc: nloc as f64 / n,
        avg_tokens: toks as f64 / n,
        non_vulnerable,
        vulnerable,
        ratio: format_ratio(non_vulnerable, vulnerable),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Largest-remainder apportionment of `total` over `fractions`; ties go to the
/// earlier slot.
fn apportion(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = libm::floor(*e + 1e-9) as usize;
    }
    let mut left = total.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &slot in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[slot] += 1;
        left -= 1;
    }
    counts
}

/// Label-stratified train/validation/test split.
///
/// Overall split sizes follow largest-remainder rounding of the fractions;
/// each label gets `floor(fraction * class size)` per split and the leftover
/// records are placed so that the overall sizes are met, keeping every
/// per-label count within one record of its exact share. Records inside each
/// split keep their input order.
pub fn stratified_split<T: Clone>(
    items: &[T],
    label_of: impl Fn(&T) -> u8,
    fractions: [f64; 3],
    seed: u64,
) -> Result<Split<T>> {
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions sum to {sum}, expected 1"
        )));
    }
    let totals = apportion(items.len(), &fractions);
    if !items.is_empty() && totals.contains(&0) {
        return Err(Error::invalid(format!(
            "fractions {fractions:?} leave a split empty for {} records",
            items.len()
        )));
    }

    let mut by_label: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_label.entry(label_of(item)).or_default().push(i);
    }

    // per-label floors, then distribute leftovers
    let labels: Vec<u8> = by_label.keys().copied().collect();
    let mut counts: Vec<[usize; 3]> = Vec::new();
    let mut remainders: Vec<[f64; 3]> = Vec::new();
    let mut leftovers: Vec<usize> = Vec::new();
    for l in &labels {
        let n = by_label[l].len();
        let mut c = [0usize; 3];
        let mut r = [0f64; 3];
        for k in 0..3 {
            let exact = fractions[k] * n as f64;
            c[k] = libm::floor(exact + 1e-9) as usize;
            r[k] = (exact - c[k] as f64).max(0.0);
        }
        leftovers.push(n - c.iter().sum::<usize>());
        counts.push(c);
        remainders.push(r);
    }
    let mut deficit = [0isize; 3];
    for k in 0..3 {
        deficit[k] = totals[k] as isize - counts.iter().map(|c| c[k] as isize).sum::<isize>();
    }
    // cells by descending remainder; labels in order, later splits first on ties
    let mut cells: Vec<(usize, usize)> = (0..labels.len())
        .flat_map(|li| (0..3).rev().map(move |k| (li, k)))
        .collect();
    cells.sort_by(|a, b| {
        remainders[b.0][b.1]
            .partial_cmp(&remainders[a.0][a.1])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    for pass in 0..2 {
        for &(li, k) in &cells {
            if leftovers[li] > 0 && deficit[k] > 0 && (pass == 1 || remainders[li][k] > 0.0) {
                counts[li][k] += 1;
                leftovers[li] -= 1;
                deficit[k] -= 1;
            }
        }
    }
    // any deficit left means the overall totals were unreachable; keep leftovers in train
    for (li, left) in leftovers.iter().enumerate() {
        counts[li][0] += left;
    }

    let mut assignment = vec![0u8; items.len()];
    for (li, l) in labels.iter().enumerate() {
        let mut idx = by_label[l].clone();
        let mut rng = rng::substream(seed, &[domain::SPLIT, u64::from(*l)]);
        rng::shuffle(&mut idx, &mut rng);
        let (tr, va) = (counts[li][0], counts[li][1]);
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = if pos < tr {
                0
            } else if pos < tr + va {
                1
            } else {
                2
            };
        }
    }
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (item, &a) in items.iter().zip(&assignment) {
        match a {
            0 => split.train.push(item.clone()),
            1 => split.validation.push(item.clone()),
            _ => split.test.push(item.clone()),
        }
    }
    Ok(split)
}

pub fn split_records(
    records: &[FunctionRecord],
    fractions: [f64; 3],
    seed: u64,
) -> Result<Split<FunctionRecord>> {
    stratified_split(records, |r| r.label, fractions, seed)
}
