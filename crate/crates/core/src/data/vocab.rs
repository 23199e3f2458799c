use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AspectExample;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const SPECIALS: [&str; 2] = ["<pad>", "<unk>"];

/// Vectors for tokens missing from the file are drawn from `±OOV_BOUND`.
pub const OOV_BOUND: f64 = 0.1;

/// Token table with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Every token of `examples`, most frequent first, ties in byte order.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a AspectExample>) -> Vocab {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in examples {
            for t in &ex.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .map(str::to_string)
            .collect::<Vec<_>>();
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A `|V| × dim` table aligned with a [`Vocab`].
#[derive(Clone, Debug)]
pub struct WordVectors {
    pub dim: usize,
    pub table: Vec<f64>,
    /// Vocabulary rows, specials excluded, that the file supplied.
    pub found: usize,
    /// `found` over the non-special vocabulary size.
    pub coverage: f64,
}

impl WordVectors {
    /// Table with every non-PAD row drawn from `±OOV_BOUND`.
    pub fn random(vocab: &Vocab, dim: usize, seed: u64) -> WordVectors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table: Vec<f64> = (0..vocab.len() * dim)
            .map(|_| rng.gen_range(-OOV_BOUND..=OOV_BOUND))
            .collect();
        table[PAD * dim..(PAD + 1) * dim].fill(0.0);
        WordVectors {
            dim,
            table,
            found: 0,
            coverage: 0.0,
        }
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.table[id * self.dim..(id + 1) * self.dim]
    }
}

/// Reads `word v1 … v_dim` lines. A leading `count dim` header line is
/// skipped. Rows absent from the file keep their seeded random values and
/// the PAD row is zero.
pub fn load_wordvecs(path: &Path, vocab: &Vocab, dim: usize, seed: u64) -> Result<WordVectors> {
    let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut wv = WordVectors::random(vocab, dim, seed);
    let mut seen = vec![false; vocab.len()];
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(parse_err(
                i + 1,
                format!("expected a word and {dim} values, got {} fields", fields.len()),
            ));
        }
        let Some(id) = vocab.get(fields[0]) else { continue };
        if id == PAD || id == UNK || seen[id] {
            continue;
        }
        let row = &mut wv.table[id * dim..(id + 1) * dim];
        for (slot, f) in row.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(i + 1, format!("bad value {f:?}")))?;
        }
        seen[id] = true;
        wv.found += 1;
    }
    let words = vocab.len().saturating_sub(SPECIALS.len());
    wv.coverage = if words == 0 { 0.0 } else { wv.found as f64 / words as f64 };
    Ok(wv)
}
