use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AspectExample, Polarity, Vocab, PAD};

/// Token ids padded to the longest sentence of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Row-major `[size, width]` token ids, `PAD` past each length.
    pub ids: Vec<usize>,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub labels: Vec<Polarity>,
    pub example_ids: Vec<String>,
}

impl Batch {
    pub fn from_examples(examples: &[&AspectExample], vocab: &Vocab) -> Batch {
        let width = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; examples.len() * width];
        for (row, ex) in examples.iter().enumerate() {
            for (j, t) in ex.tokens.iter().enumerate() {
                ids[row * width + j] = vocab.id(t);
            }
        }
        Batch {
            ids,
            width,
            lengths: examples.iter().map(|e| e.tokens.len()).collect(),
            spans: examples.iter().map(|e| e.span).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            example_ids: examples.iter().map(|e| e.id.clone()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// True exactly at the positions that hold a real token.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.size() * self.width)
            .map(|i| i % self.width.max(1) < self.lengths[i / self.width.max(1)])
            .collect()
    }

    /// Widens every row with PAD columns.
    pub fn padded_to(&self, width: usize) -> Batch {
        let width = width.max(self.width);
        let mut ids = vec![PAD; self.size() * width];
        for row in 0..self.size() {
            ids[row * width..row * width + self.width]
                .copy_from_slice(&self.ids[row * self.width..(row + 1) * self.width]);
        }
        Batch {
            ids,
            width,
            ..self.clone()
        }
    }
}

/// Splits `examples` into batches of `batch_size` (the last may be
/// smaller), after a seeded shuffle when `shuffle_seed` is given.
pub fn make_batches(
    examples: &[AspectExample],
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&AspectExample> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs, vocab)
        })
        .collect()
}
