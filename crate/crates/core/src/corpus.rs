//! Text ingestion, vocabulary construction and prompt/reference sampling.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{TokenId, VocabError, Vocabulary};

pub const UNK_TEXT: &str = "<unk>";
pub const EOS_TEXT: &str = "<eos>";
pub const MASK_TEXT: &str = "<mask>";
const TABLE_MAGIC: &str = "# psd-vocab v1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no input texts")]
    NoTexts,
    #[error("vocabulary is empty after filtering with min_count {0}")]
    EmptyVocabulary(u64),
    #[error("token {0:?} is not in the vocabulary and no unk id exists")]
    UnknownToken(String),
    #[error("no document is longer than prompt_len {0}")]
    InsufficientLength(usize),
    #[error("vocabulary table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    #[default]
    Char,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusOptions {
    #[serde(default)]
    pub tokenization: Tokenization,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
    #[serde(default)]
    pub lowercase: bool,
}

fn default_min_count() -> u64 {
    1
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            tokenization: Tokenization::Char,
            min_count: 1,
            lowercase: false,
        }
    }
}

impl CorpusOptions {
    /// Canonical form of one document.
    pub fn normalize(&self, text: &str) -> String {
        let text = text.trim_end_matches(['\r', '\n']);
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_owned()
        };
        match self.tokenization {
            Tokenization::Char => text,
            Tokenization::Whitespace => text.split_whitespace().collect::<Vec<_>>().join(" "),
        }
    }

    fn split(&self, normalized: &str) -> Vec<String> {
        match self.tokenization {
            Tokenization::Char => normalized.chars().map(String::from).collect(),
            Tokenization::Whitespace => normalized.split(' ').filter(|s| !s.is_empty()).map(String::from).collect(),
        }
    }
}

/// A vocabulary with its string table and training counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    vocab: Vocabulary,
    tokenization: Tokenization,
    counts: Vec<u64>,
    index: HashMap<String, TokenId>,
}

/// Ids by descending count then ascending text; `<unk>` (only when something
/// was filtered) and `<eos>` follow; the mask id is one past the end.
pub fn build_vocab(texts: &[String], opts: &CorpusOptions) -> Result<Lexicon, CorpusError> {
    if texts.is_empty() {
        return Err(CorpusError::NoTexts);
    }
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for t in texts {
        for tok in opts.split(&opts.normalize(t)) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let dropped: u64 = freq.values().filter(|&&c| c < opts.min_count).sum();
    let mut kept: Vec<(String, u64)> = freq.into_iter().filter(|(_, c)| *c >= opts.min_count).collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyVocabulary(opts.min_count));
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let with_unk = dropped > 0;
    let mut entries = kept;
    if with_unk {
        entries.push((UNK_TEXT.to_owned(), dropped));
    }
    entries.push((EOS_TEXT.to_owned(), 0));
    Lexicon::from_entries(entries, opts.tokenization, with_unk)
}

impl Lexicon {
    fn from_entries(entries: Vec<(String, u64)>, tokenization: Tokenization, with_unk: bool) -> Result<Self, CorpusError> {
        let size = entries.len() as TokenId;
        let mut vocab = Vocabulary::new(size, size - 1)?;
        if with_unk {
            vocab = vocab.with_unk(size - 2)?;
        }
        let (texts, counts): (Vec<String>, Vec<u64>) = entries.into_iter().unzip();
        let index = texts
            .iter()
            .enumerate()
            .take(texts.len() - 1 - usize::from(with_unk))
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Ok(Self {
            vocab: vocab.with_text(texts)?,
            tokenization,
            counts,
            index,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn tokenization(&self) -> Tokenization {
        self.tokenization
    }

    pub fn count(&self, id: TokenId) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    fn encode_tokens(&self, tokens: Vec<String>) -> Result<Vec<TokenId>, CorpusError> {
        tokens
            .into_iter()
            .map(|t| match (self.id(&t), self.vocab.unk_id()) {
                (Some(id), _) | (None, Some(id)) => Ok(id),
                (None, None) => Err(CorpusError::UnknownToken(t)),
            })
            .collect()
    }

    /// Render ids back to text; eos, unk and mask render as their markers.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let parts = ids.iter().map(|&id| {
            if id == self.vocab.mask_id() {
                MASK_TEXT
            } else {
                self.vocab.text(id).unwrap_or(UNK_TEXT)
            }
        });
        match self.tokenization {
            Tokenization::Char => parts.collect(),
            Tokenization::Whitespace => parts.collect::<Vec<_>>().join(" "),
        }
    }

    /// Tab-separated `id, token, count` table with `\\`, `\t`, `\n`, `\r` escaped.
    pub fn to_table(&self) -> String {
        let mode = match self.tokenization {
            Tokenization::Char => "char",
            Tokenization::Whitespace => "whitespace",
        };
        let mut out = format!("{TABLE_MAGIC} tokenization={mode}\nid\ttoken\tcount\n");
        let texts = self.vocab.token_text().unwrap_or_default();
        for (id, (text, count)) in texts.iter().zip(&self.counts).enumerate() {
            out.push_str(&format!("{id}\t{}\t{count}\n", escape(text)));
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self, CorpusError> {
        let bad = |line: usize, message: &str| CorpusError::Table {
            line,
            message: message.to_owned(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let tokenization = match lines.next() {
            Some((_, l)) if l == format!("{TABLE_MAGIC} tokenization=char") => Tokenization::Char,
            Some((_, l)) if l == format!("{TABLE_MAGIC} tokenization=whitespace") => Tokenization::Whitespace,
            _ => return Err(bad(1, "missing or unsupported header")),
        };
        if lines.next().map(|(_, l)| l) != Some("id\ttoken\tcount") {
            return Err(bad(2, "missing column header"));
        }
        let mut entries = Vec::new();
        for (n, line) in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, token, count] = cols[..] else {
                return Err(bad(n, "expected three tab-separated columns"));
            };
            if id.parse::<usize>().ok() != Some(entries.len()) {
                return Err(bad(n, "ids must be consecutive from 0"));
            }
            let count = count.parse::<u64>().map_err(|e| bad(n, &e.to_string()))?;
            entries.push((unescape(token).map_err(|m| bad(n, m))?, count));
        }
        if entries.last().map(|e| e.0.as_str()) != Some(EOS_TEXT) {
            return Err(bad(0, "last entry must be the eos token"));
        }
        let with_unk = entries.len() >= 2 && entries[entries.len() - 2].0 == UNK_TEXT;
        Self::from_entries(entries, tokenization, with_unk)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, &'static str> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        out.push(match chars.next() {
            Some('\\') => '\\',
            Some('t') => '\t',
            Some('n') => '\n',
            Some('r') => '\r',
            _ => return Err("bad escape sequence"),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    pub options: CorpusOptions,
}

/// Encoded documents sharing one lexicon.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Vec<TokenId>>,
    lexicon: Lexicon,
    provenance: Provenance,
}

impl Corpus {
    pub fn from_texts(texts: &[String], opts: CorpusOptions, source: Option<PathBuf>) -> Result<Self, CorpusError> {
        let lexicon = build_vocab(texts, &opts)?;
        let documents = texts
            .iter()
            .map(|t| lexicon.encode_tokens(opts.split(&opts.normalize(t))))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            documents,
            lexicon,
            provenance: Provenance { source, options: opts },
        })
    }

    /// One document per non-empty line of a UTF-8 file.
    pub fn from_file(path: &Path, opts: CorpusOptions) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_owned(),
            source,
        })?;
        let docs: Vec<String> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_owned)
            .collect();
        Self::from_texts(&docs, opts, Some(path.to_owned()))
    }

    pub fn documents(&self) -> &[Vec<TokenId>] {
        &self.documents
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.lexicon.vocab()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, CorpusError> {
        let opts = &self.provenance.options;
        self.lexicon.encode_tokens(opts.split(&opts.normalize(text)))
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        self.lexicon.decode(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub prompt: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

/// `n` prompt/reference splits of documents longer than `prompt_len`,
/// sampled with replacement from a seeded stream.
pub fn make_eval_suite(corpus: &Corpus, n: usize, prompt_len: usize, seed: u64) -> Result<Vec<EvalPair>, CorpusError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<&Vec<TokenId>> = corpus.documents.iter().filter(|d| d.len() > prompt_len).collect();
    if eligible.is_empty() {
        return Err(CorpusError::InsufficientLength(prompt_len));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let doc = eligible[rng.gen_range(0..eligible.len())];
            EvalPair {
                prompt: doc[..prompt_len].to_vec(),
                reference: doc[prompt_len..].to_vec(),
            }
        })
        .collect())
}
