//! Bimodal (code, document) corpus ingestion, per-language statistics and the
//! shared token vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusExample {
    pub id: String,
    pub language: String,
    pub code_tokens: Vec<String>,
    #[serde(rename = "docstring_tokens", alias = "doc_tokens")]
    pub doc_tokens: Vec<String>,
}

/// Per-language pair counts and their fractions of the whole corpus.
///
/// Languages are kept in lexicographic order so that every derived quantity
/// has a stable iteration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageStats {
    counts: Vec<(String, usize)>,
}

impl LanguageStats {
    /// Builds statistics from raw counts. Zero counts are kept so that callers
    /// downstream can report them; duplicated languages are summed.
    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let mut merged: BTreeMap<String, usize> = BTreeMap::new();
        for (lang, n) in counts {
            *merged.entry(lang.into()).or_default() += n;
        }
        Self {
            counts: merged.into_iter().collect(),
        }
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.counts.iter().map(|(l, _)| l.as_str())
    }

    pub fn num_languages(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, n)| n).sum()
    }

    pub fn count(&self, language: &str) -> Option<usize> {
        self.counts
            .iter()
            .find(|(l, _)| l == language)
            .map(|(_, n)| *n)
    }

    pub fn counts(&self) -> &[(String, usize)] {
        &self.counts
    }

    /// `p_i = n_i / Σ n_k`, in language order.
    pub fn fractions(&self) -> Vec<(String, f64)> {
        let total = self.total() as f64;
        self.counts
            .iter()
            .map(|(l, n)| {
                let p = if total > 0.0 { *n as f64 / total } else { 0.0 };
                (l.clone(), p)
            })
            .collect()
    }

    pub fn fraction(&self, language: &str) -> Option<f64> {
        let total = self.total() as f64;
        self.count(language).map(|n| n as f64 / total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub examples: Vec<CorpusExample>,
    pub stats: LanguageStats,
    /// Records skipped because their language was outside the requested set.
    pub skipped_unknown_language: usize,
}

impl Corpus {
    /// Wraps already-validated examples, recomputing statistics.
    pub fn from_examples(examples: Vec<CorpusExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let stats = LanguageStats::from_counts(examples.iter().map(|e| (e.language.clone(), 1)));
        Ok(Self {
            examples,
            stats,
            skipped_unknown_language: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Indices of the examples of one language, in corpus order.
    pub fn indices_of(&self, language: &str) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.language == language)
            .map(|(i, _)| i)
            .collect()
    }

    /// Distinct languages in first-appearance order.
    pub fn languages_in_order(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.examples {
            if seen.insert(e.language.as_str()) {
                out.push(e.language.clone());
            }
        }
        out
    }
}

fn string_array(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|t| t.as_str().map(str::to_owned))
        .collect()
}

fn parse_record(value: &Value, line_no: usize) -> Result<CorpusExample> {
    let malformed = |message: &str| Error::MalformedLine {
        line: line_no,
        message: message.to_owned(),
    };
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record is not a JSON object"))?;

    let language = obj
        .get("language")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `language`"))?
        .to_owned();

    // HuggingFace exports use `code_tokens`, the original dump `func_code_tokens`.
    let code_tokens = ["code_tokens", "func_code_tokens"]
        .iter()
        .find_map(|k| obj.get(*k))
        .ok_or_else(|| malformed("missing field `code_tokens`"))?;
    let code_tokens =
        string_array(code_tokens).ok_or_else(|| malformed("`code_tokens` is not a string array"))?;

    let doc_tokens = ["docstring_tokens", "func_documentation_tokens"]
        .iter()
        .find_map(|k| obj.get(*k))
        .ok_or_else(|| malformed("missing field `docstring_tokens`"))?;
    let doc_tokens = string_array(doc_tokens)
        .ok_or_else(|| malformed("`docstring_tokens` is not a string array"))?;

    if code_tokens.is_empty() {
        return Err(malformed("empty `code_tokens`"));
    }
    if doc_tokens.is_empty() {
        return Err(malformed("empty `docstring_tokens`"));
    }

    let id = ["id", "func_name"]
        .iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_str))
        .map(str::to_owned)
        .unwrap_or_else(|| format!("line:{line_no}"));

    Ok(CorpusExample {
        id,
        language,
        code_tokens,
        doc_tokens,
    })
}

/// Reads a CodeSearchNet-style JSONL file, keeping records whose language is
/// in `language_set` (an empty set keeps every language). Blank lines are
/// ignored; line numbers in errors are 1-based.
pub fn load_corpus<S: AsRef<str>>(path: impl AsRef<Path>, language_set: &[S]) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let allowed: BTreeSet<&str> = language_set.iter().map(AsRef::as_ref).collect();

    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let example = parse_record(&value, line_no)?;
        if !allowed.is_empty() && !allowed.contains(example.language.as_str()) {
            skipped += 1;
            continue;
        }
        examples.push(example);
    }

    let mut corpus = Corpus::from_examples(examples)?;
    corpus.skipped_unknown_language = skipped;
    Ok(corpus)
}

/// Writes examples as JSONL readable by [`load_corpus`].
pub fn write_corpus(path: impl AsRef<Path>, examples: &[CorpusExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token vocabulary shared by code and documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let ids = all
            .iter()
            .enumerate()
            .skip(NUM_RESERVED)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn learned_tokens(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// FNV-1a over the id-ordered token list; identifies the vocabulary in
    /// checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in &self.tokens {
            for b in tok.as_bytes().iter().chain(std::iter::once(&0xffu8)) {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }
}

/// Keeps the `max_size - 4` most frequent tokens across code and documents,
/// breaking count ties by lexicographic token order.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocabulary> {
    if max_size < NUM_RESERVED {
        return Err(Error::InvalidConfig(format!(
            "vocabulary size {max_size} is smaller than the {NUM_RESERVED} reserved ids"
        )));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for e in &corpus.examples {
        for t in e.code_tokens.iter().chain(&e.doc_tokens) {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

/// A fixed-length id sequence starting with `[CLS]`, right-padded with `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIds {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenIds {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unpadded positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }
}

pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> TokenIds {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokens.iter().take(max_len - 1).map(|t| vocab.id(t.as_ref())));
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    TokenIds { ids, mask }
}
