//! Temporal prompt rendering and tokenization.
//!
//! A prompt names the imaging modality, the organ and the slice position
//! `i/N`. The tokenizer replaces the fraction's numerals by a quantized
//! timestamp token `t_q`, `q = round(16·i/N)`, so the text encoder sees one of
//! 17 learnable time symbols instead of unbounded integers.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Number of timestamp quantization steps; bins are `0..=TIME_STEPS`.
pub const TIME_STEPS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("slice index {index} outside 1..={total}")]
    SliceOutOfRange { index: usize, total: usize },
    #[error("slice total must be at least 1")]
    NoSlices,
    #[error("organ name must be non-empty lowercase, got {0:?}")]
    BadOrgan(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("prompt length must be at least 1")]
    ZeroLength,
    #[error("malformed vocabulary: {0}")]
    BadVocabulary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "CT")]
    Ct,
}

impl Modality {
    /// The modality with its indefinite article, as it appears in a prompt.
    pub fn with_article(self) -> &'static str {
        match self {
            Self::Mri => "an MRI",
            Self::Ct => "a CT",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mri => "MRI",
            Self::Ct => "CT",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub modality: Modality,
    pub organ: String,
    /// 1-based slice position.
    pub slice_index: usize,
    pub slice_total: usize,
    pub include_time: bool,
}

impl PromptSpec {
    pub fn new(
        modality: Modality,
        organ: impl Into<String>,
        slice_index: usize,
        slice_total: usize,
        include_time: bool,
    ) -> Result<Self, PromptError> {
        let spec = Self {
            modality,
            organ: organ.into(),
            slice_index,
            slice_total,
            include_time,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.organ.is_empty() || self.organ.chars().any(char::is_uppercase) {
            return Err(PromptError::BadOrgan(self.organ.clone()));
        }
        if self.slice_total == 0 {
            return Err(PromptError::NoSlices);
        }
        if self.slice_index == 0 || self.slice_index > self.slice_total {
            return Err(PromptError::SliceOutOfRange {
                index: self.slice_index,
                total: self.slice_total,
            });
        }
        Ok(())
    }

    /// Normalized timestamp `i/N` in (0, 1].
    pub fn timestamp(&self) -> f64 {
        self.slice_index as f64 / self.slice_total as f64
    }
}

pub fn render_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    spec.validate()?;
    let mut s = format!(
        "This is {} of the {}",
        spec.modality.with_article(),
        spec.organ
    );
    if spec.include_time {
        s.push_str(&format!(
            " with a segmentation period of {}/{}",
            spec.slice_index, spec.slice_total
        ));
    }
    s.push('.');
    Ok(s)
}

/// Prompts for a run of slices plus the wall-clock cost of each.
#[derive(Debug, Clone)]
pub struct PromptBatch {
    pub prompts: Vec<String>,
    pub seconds_per_prompt: Vec<f64>,
}

/// One timed prompt per slice `1..=total`.
pub fn render_batch(
    modality: Modality,
    organ: &str,
    total: usize,
) -> Result<PromptBatch, PromptError> {
    render_range(modality, organ, total, 1, total)
}

/// Timed prompts for slices `first..=last` of a `total`-slice series.
pub fn render_range(
    modality: Modality,
    organ: &str,
    total: usize,
    first: usize,
    last: usize,
) -> Result<PromptBatch, PromptError> {
    if total == 0 {
        return Err(PromptError::NoSlices);
    }
    for i in [first, last] {
        if i == 0 || i > total {
            return Err(PromptError::SliceOutOfRange { index: i, total });
        }
    }
    let count = (last + 1).saturating_sub(first);
    let mut prompts = Vec::with_capacity(count);
    let mut seconds_per_prompt = Vec::with_capacity(count);
    for i in first..=last {
        let start = Instant::now();
        let spec = PromptSpec {
            modality,
            organ: organ.to_string(),
            slice_index: i,
            slice_total: total,
            include_time: true,
        };
        let p = render_prompt(&spec)?;
        seconds_per_prompt.push(start.elapsed().as_secs_f64());
        prompts.push(p);
    }
    Ok(PromptBatch {
        prompts,
        seconds_per_prompt,
    })
}

/// `round(16·i/N)`, computed exactly in integers (halves round up).
pub fn timestamp_bin(index: usize, total: usize) -> usize {
    debug_assert!(total > 0);
    ((2 * TIME_STEPS * index + total) / (2 * total)).min(TIME_STEPS)
}

pub fn time_token(bin: usize) -> String {
    format!("t_{bin}")
}

/// Lowercases and splits on whitespace; each punctuation character is its own
/// token, and both numerals of an `i/N` fraction become the `t_q` token.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut raw: Vec<String> = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            raw.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            raw.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        raw.push(word);
    }

    let numeral = |s: &str| s.parse::<usize>().ok();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if i + 2 < raw.len() && raw[i + 1] == "/" {
            if let (Some(num), Some(den)) = (numeral(&raw[i]), numeral(&raw[i + 2])) {
                if den > 0 {
                    let tok = time_token(timestamp_bin(num.min(den), den));
                    out.extend([tok.clone(), "/".to_string(), tok]);
                    i += 3;
                    continue;
                }
            }
        }
        out.push(std::mem::take(&mut raw[i]));
        i += 1;
    }
    out
}

/// Token → id map; ids 0 and 1 are reserved for padding and unknown words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    pad: usize,
    unk: usize,
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            pad: PAD_ID,
            unk: UNK_ID,
        }
    }
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = PromptError;

    fn try_from(f: VocabularyFile) -> Result<Self, PromptError> {
        if f.pad != PAD_ID || f.unk != UNK_ID {
            return Err(PromptError::BadVocabulary("pad/unk ids must be 0/1".into()));
        }
        if f.tokens.get(PAD_ID).map(String::as_str) != Some(PAD_TOKEN)
            || f.tokens.get(UNK_ID).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(PromptError::BadVocabulary("missing reserved tokens".into()));
        }
        let index: HashMap<String, usize> = f
            .tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        if index.len() != f.tokens.len() {
            return Err(PromptError::BadVocabulary("duplicate tokens".into()));
        }
        Ok(Self {
            tokens: f.tokens,
            index,
        })
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Builds a sorted vocabulary from `corpus`; every `t_q` token is always present.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary, PromptError> {
    if corpus.is_empty() {
        return Err(PromptError::EmptyCorpus);
    }
    let mut words: BTreeSet<String> = corpus
        .iter()
        .flat_map(|s| split_tokens(s.as_ref()))
        .collect();
    words.extend((0..=TIME_STEPS).map(time_token));
    words.remove(PAD_TOKEN);
    words.remove(UNK_TOKEN);
    let tokens: Vec<String> = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
        .into_iter()
        .chain(words)
        .collect();
    let index = tokens
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();
    Ok(Vocabulary { tokens, index })
}

/// Fixed-length id sequence, padded with [`PAD_ID`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Per position, whether it holds padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id == PAD_ID).collect()
    }

    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD_ID).count()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, len: usize) -> Result<TokenSequence, PromptError> {
    if len == 0 {
        return Err(PromptError::ZeroLength);
    }
    let mut ids: Vec<usize> = split_tokens(text)
        .iter()
        .map(|t| vocab.id(t))
        .take(len)
        .collect();
    ids.resize(len, PAD_ID);
    Ok(TokenSequence { ids })
}
