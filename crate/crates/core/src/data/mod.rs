//! Corpora, tokenization, vocabulary, word vectors, batching and the BiLSTM
//! context encoder.

mod batch;
mod bilstm;
mod semeval;
mod twitter;
mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{make_batches, Batch};
pub use bilstm::{bilstm_encode, BiLstm, LstmParams};
pub use semeval::{parse_semeval_str, parse_semeval_xml};
pub use twitter::{parse_twitter, parse_twitter_str};
pub use vocab::{load_wordvecs, Vocab, WordVectors, OOV_BOUND, PAD, UNK};

/// Sentiment toward an aspect. The discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive = 0,
    Neutral = 1,
    Negative = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        Polarity::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

/// One aspect term in context.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectExample {
    pub id: String,
    pub tokens: Vec<String>,
    /// Token range of the aspect, end exclusive.
    pub span: (usize, usize),
    pub label: Polarity,
}

impl AspectExample {
    pub fn check(&self) -> Result<()> {
        let (s, e) = self.span;
        if s < e && e <= self.tokens.len() {
            Ok(())
        } else {
            Err(Error::contract(
                "AspectExample",
                format!("{}: span {:?} invalid for {} tokens", self.id, self.span, self.tokens.len()),
            ))
        }
    }

    pub fn aspect(&self) -> String {
        self.tokens[self.span.0..self.span.1].join(" ")
    }
}

/// Examples read from a corpus file, with the records that were skipped
/// and why.
#[derive(Clone, Debug, Default)]
pub struct Parsed {
    pub examples: Vec<AspectExample>,
    pub rejected: Vec<String>,
}

/// A token with its character range in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercased tokens with character offsets. Runs of alphanumeric
/// characters form words; every other non-space character stands alone.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut out: Vec<Token> = Vec::new();
    let mut word: Option<usize> = None;
    let chars: Vec<char> = text.chars().collect();
    let flush = |out: &mut Vec<Token>, start: usize, end: usize| {
        let s: String = chars[start..end].iter().collect();
        out.push(Token {
            text: s.to_lowercase(),
            start,
            end,
        });
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            word.get_or_insert(i);
            continue;
        }
        if let Some(start) = word.take() {
            flush(&mut out, start, i);
        }
        if !c.is_whitespace() {
            flush(&mut out, i, i + 1);
        }
    }
    if let Some(start) = word {
        flush(&mut out, start, chars.len());
    }
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

/// Writes one JSON object per line with fields `id`, `tokens`, `span`,
/// `label`.
pub fn write_jsonl(path: &Path, examples: &[AspectExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AspectExample>> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let ex: AspectExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        ex.check().map_err(|e| parse_err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Corpus formats understood by [`load_corpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Semeval,
    Twitter,
    Jsonl,
}

impl CorpusFormat {
    /// Guesses from the extension: `.xml`, `.jsonl`, anything else Twitter.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xml") => CorpusFormat::Semeval,
            Some("jsonl") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Twitter,
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Parsed> {
    match format {
        CorpusFormat::Semeval => parse_semeval_xml(path),
        CorpusFormat::Twitter => parse_twitter(path),
        CorpusFormat::Jsonl => Ok(Parsed {
            examples: read_jsonl(path)?,
            rejected: Vec::new(),
        }),
    }
}
