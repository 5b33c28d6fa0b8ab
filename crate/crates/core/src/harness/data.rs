//! Token streams (synthetic Markov bytes or a user file), batching, and
//! synthetic regression data.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::models::{LmBatch, RegressionBatch};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is empty")]
    Empty(PathBuf),
    #[error("{what} has {have} tokens, need at least {need}")]
    TooShort { what: &'static str, have: usize, need: usize },
}

/// Train and validation token streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSplit {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl TokenSplit {
    /// The last `val_fraction` of `tokens` (rounded, at least one token when
    /// there are two or more) becomes validation.
    pub fn from_tokens(mut tokens: Vec<u8>, val_fraction: f64) -> TokenSplit {
        let n = tokens.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).max(1).min(n.saturating_sub(1));
        let val = tokens.split_off(n - n_val);
        TokenSplit { train: tokens, val }
    }
}

/// Byte-level tokens of a file, split into train and validation.
pub fn ingest_text(path: &Path, val_fraction: f64) -> Result<TokenSplit, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Ok(TokenSplit::from_tokens(bytes, val_fraction))
}

/// Seeded order-2 Markov chain over a small byte alphabet: each pair of
/// preceding symbols allows a fixed handful of successors with random weights.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    alphabet: Vec<u8>,
    /// Per context `a*n + b`: successor indices and cumulative probabilities.
    table: Vec<Vec<(usize, f64)>>,
    rng: ChaCha8Rng,
    context: (usize, usize),
}

impl MarkovSource {
    pub fn new(seed: u64, symbols: usize, successors: usize) -> Self {
        let symbols = symbols.clamp(1, 256);
        let successors = successors.clamp(1, symbols);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alphabet = (0..symbols).map(|i| ((b'a' as usize + i) % 256) as u8).collect();
        let table = (0..symbols * symbols)
            .map(|_| {
                let picks = sample(&mut rng, symbols, successors).into_vec();
                let weights: Vec<f64> = picks.iter().map(|_| rng.random_range(0.1..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        acc += w / total;
                        (s, acc)
                    })
                    .collect()
            })
            .collect();
        let context = (rng.random_range(0..symbols), rng.random_range(0..symbols));
        MarkovSource {
            alphabet,
            table,
            rng,
            context,
        }
    }

    pub fn next_token(&mut self) -> u8 {
        let n = self.alphabet.len();
        let row = &self.table[self.context.0 * n + self.context.1];
        let u: f64 = self.rng.random();
        let next = row.iter().find(|&&(_, c)| u < c).unwrap_or(row.last().expect("non-empty row")).0;
        self.context = (self.context.1, next);
        self.alphabet[next]
    }

    pub fn generate(&mut self, n: usize) -> Vec<u8> {
        (0..n).map(|_| self.next_token()).collect()
    }

    /// Entropy rate of the chain in nats, averaged uniformly over contexts.
    pub fn mean_context_entropy(&self) -> f64 {
        let h: f64 = self
            .table
            .iter()
            .map(|row| {
                let mut prev = 0.0;
                row.iter()
                    .map(|&(_, c)| {
                        let p = c - prev;
                        prev = c;
                        if p > 0.0 { -p * p.ln() } else { 0.0 }
                    })
                    .sum::<f64>()
            })
            .sum();
        h / self.table.len() as f64
    }
}

fn window_batch(tokens: &[u8], starts: &[usize], seq: usize) -> LmBatch {
    let mut inputs = Vec::with_capacity(starts.len() * seq);
    let mut targets = Vec::with_capacity(starts.len() * seq);
    for &s in starts {
        inputs.extend(tokens[s..s + seq].iter().map(|&t| t as usize));
        targets.extend(tokens[s + 1..s + seq + 1].iter().map(|&t| t as usize));
    }
    LmBatch {
        inputs,
        targets,
        batch: starts.len(),
        seq,
    }
}

/// `batch` random windows of `seq + 1` tokens.
pub fn sample_batch<R: Rng>(tokens: &[u8], batch: usize, seq: usize, rng: &mut R) -> Result<LmBatch, DataError> {
    if tokens.len() < seq + 1 {
        return Err(DataError::TooShort {
            what: "training split",
            have: tokens.len(),
            need: seq + 1,
        });
    }
    let last = tokens.len() - seq - 1;
    let starts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=last)).collect();
    Ok(window_batch(tokens, &starts, seq))
}

/// Consecutive non-overlapping windows of the validation stream, grouped
/// into at most `max_batches` batches of up to `batch` sequences.
pub fn eval_batches(tokens: &[u8], batch: usize, seq: usize, max_batches: usize) -> Result<Vec<LmBatch>, DataError> {
    let windows = tokens.len().saturating_sub(1) / seq;
    if windows == 0 {
        return Err(DataError::TooShort {
            what: "validation split",
            have: tokens.len(),
            need: seq + 1,
        });
    }
    let starts: Vec<usize> = (0..windows.min(batch * max_batches)).map(|w| w * seq).collect();
    Ok(starts.chunks(batch).map(|c| window_batch(tokens, c, seq)).collect())
}

/// Inputs uniform in `[-1, 1]` and targets from a fixed random tanh teacher
/// network with the same widths as the student.
#[derive(Debug, Clone)]
pub struct RegressionData {
    pub train: RegressionBatch,
    pub val: RegressionBatch,
}

impl RegressionData {
    pub fn generate(seed: u64, widths: &[usize], samples: usize) -> RegressionData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher: Vec<Tensor> = widths
            .windows(2)
            .map(|w| {
                let bound = (3.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_vec(vec![w[0], w[1]], data).expect("positive widths")
            })
            .collect();
        let mut make = |n: usize| {
            let x = Tensor::from_vec(
                vec![n, widths[0]],
                (0..n * widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .expect("positive sizes");
            let mut h = x.clone();
            for (i, w) in teacher.iter().enumerate() {
                h = h.matmul(w).expect("teacher shapes chain");
                if i + 1 < teacher.len() {
                    h = h.map_with(f64::tanh);
                }
            }
            RegressionBatch { x, y: h }
        };
        let n_val = (samples / 4).max(1);
        RegressionData {
            train: make(samples),
            val: make(n_val),
        }
    }

    /// `batch` rows of the training set drawn with replacement.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> RegressionBatch {
        let n = self.train.x.dims()[0];
        let rows: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        RegressionBatch {
            x: take_rows(&self.train.x, &rows),
            y: take_rows(&self.train.y, &rows),
        }
    }
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let cols = t.dims()[1];
    let mut out = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        out.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_vec(vec![rows.len(), cols], out).expect("non-empty selection")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_by_fraction() {
        let s = TokenSplit::from_tokens(vec![7; 1000], 0.1);
        assert_eq!((s.train.len(), s.val.len()), (900, 100));
        let s = TokenSplit::from_tokens((0..=255).collect(), 0.01);
        assert_eq!(s.val, vec![253, 254, 255]);
    }

    #[test]
    fn ingest_file_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, vec![b'x'; 1000]).unwrap();
        let a = ingest_text(&p, 0.1).unwrap();
        assert_eq!(a, ingest_text(&p, 0.1).unwrap());
        assert_eq!(a.train.len(), 900);

        let empty = dir.path().join("e.txt");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(ingest_text(&empty, 0.1), Err(DataError::Empty(_))));
        assert!(matches!(ingest_text(&dir.path().join("missing"), 0.1), Err(DataError::Io { .. })));
    }

    #[test]
    fn markov_stream_respects_successor_sets() {
        let mut src = MarkovSource::new(3, 24, 3);
        let toks = src.generate(20_000);
        assert!(toks.iter().all(|&t| (b'a'..b'a' + 24).contains(&t)));
        let mut seen = std::collections::HashMap::<(u8, u8), std::collections::HashSet<u8>>::new();
        for w in toks.windows(3) {
            seen.entry((w[0], w[1])).or_default().insert(w[2]);
        }
        assert!(seen.values().all(|s| s.len() <= 3));
        assert_eq!(MarkovSource::new(3, 24, 3).generate(500), toks[..500]);
        let h = src.mean_context_entropy();
        assert!(h > 0.0 && h < 3f64.ln() + 1e-12);
    }

    #[test]
    fn batches_are_shifted_windows() {
        let toks: Vec<u8> = (0..100).collect();
        let b = sample_batch(&toks, 3, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.inputs.len(), 15);
        for (i, t) in b.inputs.iter().zip(&b.targets) {
            assert_eq!(i + 1, *t);
        }
        assert!(sample_batch(&toks[..5], 1, 5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());

        let ev = eval_batches(&toks, 4, 10, 2).unwrap();
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].inputs[..3], [0, 1, 2]);
        assert_eq!(ev[1].inputs[0], 40);
        let ev = eval_batches(&toks[..25], 4, 10, 5).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].batch, 2);
    }

    #[test]
    fn regression_data_is_seeded() {
        let a = RegressionData::generate(1, &[3, 4, 2], 16);
        let b = RegressionData::generate(1, &[3, 4, 2], 16);
        assert_eq!(a.train.y, b.train.y);
        assert_eq!(a.train.x.dims(), &[16, 3]);
        assert_eq!(a.val.y.dims(), &[4, 2]);
        let s = a.sample(5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(s.x.dims(), &[5, 3]);
    }
}
