//! Token corpora: synthetic generators and file loaders.

use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A token stream with its vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub tokens: Vec<u32>,
}

pub const CYCLIC_PERIOD: usize = 5;
pub const CYCLIC_VOCAB: usize = 8;

/// Bracketed-grammar vocabulary: three bracket pairs, a separator and words.
pub const GRAMMAR_VOCAB: usize = 32;
const OPEN: [u32; 3] = [0, 1, 2];
const CLOSE: [u32; 3] = [3, 4, 5];
const SEPARATOR: u32 = 6;
const FIRST_WORD: u32 = 7;
const N_IDIOMS: usize = 8;
/// The idiom table is part of the language, so it uses a fixed seed.
const IDIOM_SEED: u64 = 0x1d10;
const MAX_NESTING: usize = 3;

impl Corpus {
    pub fn new(vocab_size: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::InvalidToken { token: bad, vocab: vocab_size });
        }
        Ok(Self { vocab_size, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `0 1 2 3 4 0 1 ...` over a vocabulary of 8; every offset is predictable.
    pub fn cyclic(len: usize) -> Self {
        Self {
            vocab_size: CYCLIC_VOCAB,
            tokens: (0..len).map(|i| (i % CYCLIC_PERIOD) as u32).collect(),
        }
    }

    /// Uniform i.i.d. tokens.
    pub fn uniform(len: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            vocab_size,
            tokens: (0..len).map(|_| rng.random_range(0..vocab_size as u32)).collect(),
        }
    }

    /// Order-2 Markov chain whose transition table (drawn from `seed`) puts
    /// its mass on three successors per context.
    pub fn markov(len: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab_size;
        let tables: Vec<(Vec<u32>, WeightedIndex<f64>)> = (0..v * v)
            .map(|_| {
                let next: Vec<u32> = (0..3).map(|_| rng.random_range(0..v as u32)).collect();
                let w = WeightedIndex::new([0.7, 0.2, 0.1]).expect("positive weights");
                (next, w)
            })
            .collect();
        let mut tokens = vec![rng.random_range(0..v as u32), rng.random_range(0..v as u32)];
        while tokens.len() < len {
            let n = tokens.len();
            let (next, w) = &tables[tokens[n - 2] as usize * v + tokens[n - 1] as usize];
            tokens.push(next[w.sample(&mut rng)]);
        }
        tokens.truncate(len);
        Self { vocab_size, tokens }
    }

    /// The fixed multi-token idioms of the bracketed grammar. Each starts
    /// with a distinct word, so its first token determines the rest.
    pub fn grammar_idioms() -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(IDIOM_SEED);
        let n_words = GRAMMAR_VOCAB as u32 - FIRST_WORD;
        let mut firsts: Vec<u32> = (0..n_words).collect();
        for i in (1..firsts.len()).rev() {
            firsts.swap(i, rng.random_range(0..=i));
        }
        firsts
            .into_iter()
            .take(N_IDIOMS)
            .map(|first| {
                let len = rng.random_range(3..=5);
                let mut idiom = vec![FIRST_WORD + first];
                idiom.extend((1..len).map(|_| FIRST_WORD + rng.random_range(0..n_words)));
                idiom
            })
            .collect()
    }

    /// Bracketed grammar: statements of one to three items ended by a
    /// separator; an item is an idiom or a bracket pair around nested items.
    /// Bracket kind `b` always holds exactly `b + 1` items, so every closing
    /// bracket is determined by context further back than the last idiom.
    pub fn grammar(len: usize, seed: u64) -> Self {
        fn item(rng: &mut ChaCha8Rng, idioms: &[Vec<u32>], depth: usize, out: &mut Vec<u32>) {
            if depth < MAX_NESTING && rng.random_bool(0.3) {
                let b = rng.random_range(0..OPEN.len());
                out.push(OPEN[b]);
                for _ in 0..=b {
                    item(rng, idioms, depth + 1, out);
                }
                out.push(CLOSE[b]);
            } else {
                out.extend_from_slice(&idioms[rng.random_range(0..idioms.len())]);
            }
        }
        let idioms = Self::grammar_idioms();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = Vec::with_capacity(len + 64);
        while tokens.len() < len {
            for _ in 0..rng.random_range(1..=3) {
                item(&mut rng, &idioms, 0, &mut tokens);
            }
            tokens.push(SEPARATOR);
        }
        tokens.truncate(len);
        Self {
            vocab_size: GRAMMAR_VOCAB,
            tokens,
        }
    }

    /// Byte-level tokens of a raw file (vocabulary 256).
    pub fn from_bytes_file(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::new(256, bytes.into_iter().map(u32::from).collect())
    }

    /// Whitespace-separated integer token ids. The vocabulary is
    /// `vocab_size`, or one past the largest id when not given.
    pub fn from_ids_file(path: impl AsRef<Path>, vocab_size: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_ids(&text, vocab_size)
    }

    pub fn parse_ids(text: &str, vocab_size: Option<usize>) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|_| Error::InvalidConfig(format!("bad token id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let vocab = match vocab_size {
            Some(v) => v,
            None => tokens.iter().max().map_or(0, |&m| m as usize + 1),
        };
        Self::new(vocab, tokens)
    }

    /// The leading `1 - held_out` fraction and the trailing `held_out` fraction.
    pub fn split(&self, held_out: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&held_out) {
            return Err(Error::InvalidConfig(format!("held_out fraction {held_out} outside [0, 1)")));
        }
        let cut = ((self.len() as f64) * (1.0 - held_out)).round() as usize;
        let cut = cut.clamp(1, self.len());
        let part = |t: &[u32]| Corpus {
            vocab_size: self.vocab_size,
            tokens: t.to_vec(),
        };
        Ok((part(&self.tokens[..cut]), part(&self.tokens[cut..])))
    }

    /// Non-overlapping windows of `len` tokens.
    pub fn windows(&self, len: usize) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks_exact(len.max(1))
    }

    /// A window of `len` tokens at a random offset.
    pub fn sample_window<R: Rng>(&self, len: usize, rng: &mut R) -> Result<&[u32]> {
        if len == 0 || len > self.len() {
            return Err(Error::InvalidConfig(format!(
                "window of {len} tokens from a corpus of {}",
                self.len()
            )));
        }
        let start = rng.random_range(0..=self.len() - len);
        Ok(&self.tokens[start..start + len])
    }
}
