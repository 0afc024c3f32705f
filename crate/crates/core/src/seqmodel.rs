//! Token sequences, the scored-model interface and the built-in desk-scale
//! models: additive-smoothed n-grams, a Gaussian log-probability noise
//! wrapper, a constant-offset wrapper and the uniform model.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::rng::{self, Domain};

pub type Token = u32;

/// Largest dense n-gram table (contexts x vocabulary) we are willing to build.
const MAX_TABLE_ENTRIES: usize = 1 << 26;

/// A fixed-length sequence of token ids, each below the vocabulary size.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, vocab_size: usize) -> Result<Self> {
        if let Some((pos, &t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= vocab_size)
        {
            return Err(Error::Mismatch(format!(
                "token {t} at position {pos} is outside the vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self(tokens))
    }

    /// The `index`-th sequence of `{0..V-1}^len` in lexicographic order.
    pub fn from_index(mut index: u64, vocab_size: usize, len: usize) -> Self {
        let v = vocab_size as u64;
        let mut tokens = vec![0; len];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % v) as Token;
            index /= v;
        }
        Self(tokens)
    }

    pub fn random<R: Rng + ?Sized>(len: usize, vocab_size: usize, rng: &mut R) -> Self {
        Self(
            (0..len)
                .map(|_| rng.random_range(0..vocab_size as Token))
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Stable content hash, used as the id of exported inputs.
    pub fn content_id(&self) -> String {
        fingerprint::hash_tokens(&self.0)
    }

    /// Overwrites one position and returns the previous token.
    pub(crate) fn replace(&mut self, position: usize, token: Token) -> Token {
        std::mem::replace(&mut self.0[position], token)
    }

    pub fn hamming(&self, other: &TokenSequence) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut first = true;
        for t in &self.0 {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
            first = false;
        }
        Ok(())
    }
}

/// A model mapping a token sequence to its per-token mean negative
/// log-likelihood `z` (nats/token).
///
/// Implementations are immutable once built, so scoring is safe from any
/// number of threads and always returns bit-identical values.
pub trait ScoredModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Sequence length the model was built for, if it is fixed.
    fn seq_len(&self) -> Option<usize>;

    /// Unchecked per-token mean NLL. Callers guarantee the tokens are valid.
    fn mean_nll(&self, tokens: &[Token]) -> f64;

    /// The autoregressive log-probability table, when the model has one.
    fn log_prob_table(&self) -> Option<&LogProbTable> {
        None
    }

    fn score(&self, seq: &TokenSequence) -> Result<f64> {
        if let Some(n) = self.seq_len() {
            if seq.len() != n {
                return Err(Error::Mismatch(format!(
                    "sequence length {} does not match model length {n}",
                    seq.len()
                )));
            }
        }
        let v = self.vocab_size();
        if let Some(&t) = seq.tokens().iter().find(|&&t| t as usize >= v) {
            return Err(Error::Mismatch(format!(
                "token {t} is outside the model vocabulary of size {v}"
            )));
        }
        Ok(self.mean_nll(seq.tokens()))
    }
}

impl<M: ScoredModel + ?Sized> ScoredModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn seq_len(&self) -> Option<usize> {
        (**self).seq_len()
    }
    fn mean_nll(&self, tokens: &[Token]) -> f64 {
        (**self).mean_nll(tokens)
    }
    fn log_prob_table(&self) -> Option<&LogProbTable> {
        (**self).log_prob_table()
    }
}

pub fn score(model: &dyn ScoredModel, seq: &TokenSequence) -> Result<f64> {
    model.score(seq)
}

/// Dense conditional log-probabilities `log p(token | context)` for an
/// order-`k` model. A context is the previous `k-1` symbols written in base
/// `V+1`, where the extra symbol `V` is the begin-of-sequence pad.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbTable {
    vocab: usize,
    order: usize,
    contexts: usize,
    log_probs: Vec<f64>,
}

impl LogProbTable {
    fn context_count(vocab: usize, order: usize) -> Result<usize> {
        let mut contexts: usize = 1;
        for _ in 1..order {
            contexts = contexts
                .checked_mul(vocab + 1)
                .filter(|&c| c.saturating_mul(vocab) <= MAX_TABLE_ENTRIES)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "an order-{order} table over {vocab} tokens exceeds {MAX_TABLE_ENTRIES} entries"
                    ))
                })?;
        }
        Ok(contexts)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    /// Context before the first token: every slot is the begin-of-sequence pad.
    #[inline]
    pub fn initial_context(&self) -> usize {
        self.contexts - 1
    }

    #[inline]
    pub fn next_context(&self, context: usize, token: Token) -> usize {
        if self.contexts == 1 {
            0
        } else {
            (context * (self.vocab + 1) + token as usize) % self.contexts
        }
    }

    #[inline]
    pub fn log_prob(&self, context: usize, token: Token) -> f64 {
        self.log_probs[context * self.vocab + token as usize]
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.log_probs[context * self.vocab..(context + 1) * self.vocab]
    }

    /// `log p(tokens)` by the chain rule, summed left to right.
    pub fn sequence_log_prob(&self, tokens: &[Token]) -> f64 {
        let mut context = self.initial_context();
        let mut total = 0.0;
        for &t in tokens {
            total += self.log_prob(context, t);
            context = self.next_context(context, t);
        }
        total
    }

    pub fn mean_nll(&self, tokens: &[Token]) -> f64 {
        mean_from_log_prob(self.sequence_log_prob(tokens), tokens.len())
    }
}

/// Turns a summed log-probability into a per-token mean NLL (never `-0.0`).
#[inline]
pub fn mean_from_log_prob(log_prob: f64, len: usize) -> f64 {
    -log_prob / len as f64 + 0.0
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Every sequence is equally likely: `z = ln V`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformModel {
    pub vocab_size: usize,
    #[serde(default)]
    pub seq_len: Option<usize>,
}

impl ScoredModel for UniformModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    fn seq_len(&self) -> Option<usize> {
        self.seq_len
    }
    fn mean_nll(&self, _tokens: &[Token]) -> f64 {
        (self.vocab_size as f64).ln()
    }
}

/// Count-based n-gram model with additive smoothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NGramFile", into = "NGramFile")]
pub struct NGramModel {
    seq_len: usize,
    alpha: f64,
    counts: Vec<u64>,
    table: LogProbTable,
}

/// On-disk form of an [`NGramModel`]: `counts` is the dense
/// `contexts x vocab_size` table in row-major order.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct NGramFile {
    vocab_size: usize,
    seq_len: usize,
    order: usize,
    alpha: f64,
    counts: Vec<u64>,
}

impl TryFrom<NGramFile> for NGramModel {
    type Error = Error;
    fn try_from(file: NGramFile) -> Result<Self> {
        NGramModel::from_counts(file.vocab_size, file.seq_len, file.order, file.alpha, file.counts)
    }
}

impl From<NGramModel> for NGramFile {
    fn from(m: NGramModel) -> Self {
        NGramFile {
            vocab_size: m.table.vocab,
            seq_len: m.seq_len,
            order: m.table.order,
            alpha: m.alpha,
            counts: m.counts,
        }
    }
}

impl NGramModel {
    pub fn from_counts(
        vocab_size: usize,
        seq_len: usize,
        order: usize,
        alpha: f64,
        counts: Vec<u64>,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing constant must be positive, got {alpha}"
            )));
        }
        if vocab_size == 0 || seq_len == 0 {
            return Err(Error::Config("vocabulary and length must be positive".into()));
        }
        let contexts = LogProbTable::context_count(vocab_size, order)?;
        if counts.len() != contexts * vocab_size {
            return Err(Error::Config(format!(
                "expected {} counts for order {order} over {vocab_size} tokens, found {}",
                contexts * vocab_size,
                counts.len()
            )));
        }
        let mut log_probs = Vec::with_capacity(counts.len());
        let smoothing_mass = alpha * vocab_size as f64;
        for row in counts.chunks(vocab_size) {
            let total: u64 = row.iter().sum();
            let log_denominator = (total as f64 + smoothing_mass).ln();
            log_probs.extend(row.iter().map(|&c| (c as f64 + alpha).ln() - log_denominator));
        }
        Ok(Self {
            seq_len,
            alpha,
            counts,
            table: LogProbTable {
                vocab: vocab_size,
                order,
                contexts,
                log_probs,
            },
        })
    }

    pub fn order(&self) -> usize {
        self.table.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn table(&self) -> &LogProbTable {
        &self.table
    }

    /// Adds i.i.d. `N(0, sigma^2)` noise to every conditional
    /// log-probability, then renormalizes each context.
    pub fn perturb(&self, sigma: f64, seed: u64) -> Result<NoiseWrapper> {
        NoiseWrapper::new(self.clone(), sigma, seed)
    }
}

impl ScoredModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.table.vocab
    }
    fn seq_len(&self) -> Option<usize> {
        Some(self.seq_len)
    }
    fn mean_nll(&self, tokens: &[Token]) -> f64 {
        self.table.mean_nll(tokens)
    }
    fn log_prob_table(&self) -> Option<&LogProbTable> {
        Some(&self.table)
    }
}

/// Trains an order-`order` n-gram with conditionals
/// `(count + alpha) / (context_total + alpha * V)`. The first `order - 1`
/// positions see begin-of-sequence padding.
pub fn train_ngram(dataset: &ModuloDataset, order: usize, alpha: f64) -> Result<NGramModel> {
    if dataset.sequences.is_empty() {
        return Err(Error::Precondition("cannot train on an empty dataset".into()));
    }
    let vocab = dataset.vocab_size;
    let contexts = LogProbTable::context_count(vocab, order.max(1))?;
    let shape = LogProbTable {
        vocab,
        order: order.max(1),
        contexts,
        log_probs: Vec::new(),
    };
    let mut counts = vec![0u64; contexts * vocab];
    for seq in &dataset.sequences {
        let mut context = shape.initial_context();
        for &t in seq.tokens() {
            counts[context * vocab + t as usize] += 1;
            context = shape.next_context(context, t);
        }
    }
    NGramModel::from_counts(vocab, dataset.seq_len, order, alpha, counts)
}

/// An n-gram whose log-probabilities carry seeded Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseFile", into = "NoiseFile")]
pub struct NoiseWrapper {
    base: NGramModel,
    sigma: f64,
    seed: u64,
    table: LogProbTable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NoiseFile {
    base: NGramModel,
    sigma: f64,
    seed: u64,
}

impl TryFrom<NoiseFile> for NoiseWrapper {
    type Error = Error;
    fn try_from(file: NoiseFile) -> Result<Self> {
        NoiseWrapper::new(file.base, file.sigma, file.seed)
    }
}

impl From<NoiseWrapper> for NoiseFile {
    fn from(w: NoiseWrapper) -> Self {
        NoiseFile {
            base: w.base,
            sigma: w.sigma,
            seed: w.seed,
        }
    }
}

impl NoiseWrapper {
    pub fn new(base: NGramModel, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("noise std must be >= 0, got {sigma}")));
        }
        let table = if sigma == 0.0 {
            base.table.clone()
        } else {
            let normal = Normal::new(0.0, sigma).expect("sigma validated above");
            let mut rng = rng::stream(seed, Domain::Noise, 0);
            let src = &base.table;
            let mut log_probs = Vec::with_capacity(src.log_probs.len());
            let mut row = vec![0.0; src.vocab];
            for context in 0..src.contexts {
                for (slot, &lp) in row.iter_mut().zip(src.row(context)) {
                    *slot = lp + normal.sample(&mut rng);
                }
                let norm = log_sum_exp(&row);
                log_probs.extend(row.iter().map(|x| x - norm));
            }
            LogProbTable {
                log_probs,
                ..src.clone()
            }
        };
        Ok(Self {
            base,
            sigma,
            seed,
            table,
        })
    }

    pub fn base(&self) -> &NGramModel {
        &self.base
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl ScoredModel for NoiseWrapper {
    fn vocab_size(&self) -> usize {
        self.table.vocab
    }
    fn seq_len(&self) -> Option<usize> {
        Some(self.base.seq_len)
    }
    fn mean_nll(&self, tokens: &[Token]) -> f64 {
        self.table.mean_nll(tokens)
    }
    fn log_prob_table(&self) -> Option<&LogProbTable> {
        Some(&self.table)
    }
}

/// Adds a constant to another model's score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetModel {
    pub base: Box<Model>,
    pub offset: f64,
}

impl OffsetModel {
    pub fn new(base: Model, offset: f64) -> Result<Self> {
        if !(offset >= 0.0 && offset.is_finite()) {
            return Err(Error::Config(format!(
                "score offset must be finite and non-negative, got {offset}"
            )));
        }
        Ok(Self {
            base: Box::new(base),
            offset,
        })
    }
}

impl ScoredModel for OffsetModel {
    fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }
    fn seq_len(&self) -> Option<usize> {
        self.base.seq_len()
    }
    fn mean_nll(&self, tokens: &[Token]) -> f64 {
        self.base.mean_nll(tokens) + self.offset
    }
}

/// Any built-in model; this is also the self-describing model file format
/// (JSON with a `type` tag).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Uniform(UniformModel),
    Ngram(NGramModel),
    Noise(NoiseWrapper),
    Offset(OffsetModel),
}

impl Model {
    fn inner(&self) -> &dyn ScoredModel {
        match self {
            Model::Uniform(m) => m,
            Model::Ngram(m) => m,
            Model::Noise(m) => m,
            Model::Offset(m) => m,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("models serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("model file", e))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::hash_bytes(self.to_json().as_bytes())
    }
}

impl ScoredModel for Model {
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn seq_len(&self) -> Option<usize> {
        self.inner().seq_len()
    }
    #[inline]
    fn mean_nll(&self, tokens: &[Token]) -> f64 {
        match self {
            Model::Ngram(m) => m.table.mean_nll(tokens),
            Model::Noise(m) => m.table.mean_nll(tokens),
            Model::Uniform(m) => m.mean_nll(tokens),
            Model::Offset(m) => m.mean_nll(tokens),
        }
    }
    fn log_prob_table(&self) -> Option<&LogProbTable> {
        self.inner().log_prob_table()
    }
}

impl From<NGramModel> for Model {
    fn from(m: NGramModel) -> Self {
        Model::Ngram(m)
    }
}

impl From<NoiseWrapper> for Model {
    fn from(m: NoiseWrapper) -> Self {
        Model::Noise(m)
    }
}

impl From<UniformModel> for Model {
    fn from(m: UniformModel) -> Self {
        Model::Uniform(m)
    }
}

impl From<OffsetModel> for Model {
    fn from(m: OffsetModel) -> Self {
        Model::Offset(m)
    }
}

/// Training sequences whose token sum is divisible by `modulus`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuloDataset {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub modulus: u64,
    pub seed: u64,
    pub sequences: Vec<TokenSequence>,
}

/// Spaces at most this large are enumerated when drawing a dataset.
const ENUMERATE_DATASET_LIMIT: u128 = 100_000_000;

/// Number of sequences in `{0..V-1}^N` whose sum is divisible by `modulus`.
pub fn modulo_population(seq_len: usize, vocab_size: usize, modulus: u64) -> u128 {
    let k = modulus.max(1) as usize;
    let mut ways = vec![0u128; k];
    ways[0] = 1;
    for _ in 0..seq_len {
        let mut next = vec![0u128; k];
        for (residue, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for t in 0..vocab_size {
                next[(residue + t) % k] += w;
            }
        }
        ways = next;
    }
    ways[0]
}

/// Draws `count` distinct sequences with `(sum of tokens) mod modulus == 0`,
/// uniformly from all such sequences.
pub fn generate_modulo_dataset(
    seq_len: usize,
    vocab_size: usize,
    modulus: u64,
    count: usize,
    seed: u64,
) -> Result<ModuloDataset> {
    if modulus == 0 {
        return Err(Error::Config("modulus must be at least 1".into()));
    }
    if seq_len == 0 || vocab_size == 0 {
        return Err(Error::Config("sequence length and vocabulary must be positive".into()));
    }
    let population = modulo_population(seq_len, vocab_size, modulus);
    if count as u128 > population {
        return Err(Error::Precondition(format!(
            "only {population} sequences of length {seq_len} over {vocab_size} tokens have a sum divisible by {modulus}; {count} requested"
        )));
    }
    let mut rng = rng::stream(seed, Domain::Dataset, 0);
    let space = (vocab_size as u128).checked_pow(seq_len as u32);
    let sequences = match space {
        Some(space) if space <= ENUMERATE_DATASET_LIMIT => {
            let members = satisfying_indices(seq_len, vocab_size, modulus);
            rand::seq::index::sample(&mut rng, members.len(), count)
                .into_iter()
                .map(|i| TokenSequence::from_index(members[i], vocab_size, seq_len))
                .collect()
        }
        _ => {
            let mut seen = HashSet::with_capacity(count);
            let mut out = Vec::with_capacity(count);
            let max_attempts = (count as u64 + 1000) * modulus * 64;
            let mut attempts = 0u64;
            while out.len() < count {
                attempts += 1;
                if attempts > max_attempts {
                    return Err(Error::Precondition(format!(
                        "gave up after {max_attempts} draws with {} of {count} sequences found",
                        out.len()
                    )));
                }
                let seq = TokenSequence::random(seq_len, vocab_size, &mut rng);
                let sum: u64 = seq.tokens().iter().map(|&t| t as u64).sum();
                if sum % modulus == 0 && seen.insert(seq.clone()) {
                    out.push(seq);
                }
            }
            out
        }
    };
    Ok(ModuloDataset {
        seq_len,
        vocab_size,
        modulus,
        seed,
        sequences,
    })
}

fn satisfying_indices(seq_len: usize, vocab_size: usize, modulus: u64) -> Vec<u64> {
    let total = (vocab_size as u64).pow(seq_len as u32);
    let mut digits = vec![0u64; seq_len];
    let mut sum = 0u64;
    let mut out = Vec::new();
    for index in 0..total {
        if sum % modulus == 0 {
            out.push(index);
        }
        // odometer increment, keeping the running digit sum
        for d in digits.iter_mut().rev() {
            if *d + 1 < vocab_size as u64 {
                *d += 1;
                sum += 1;
                break;
            }
            sum -= *d;
            *d = 0;
        }
    }
    out
}

impl ModuloDataset {
    /// One sequence per line, token ids separated by spaces.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for seq in &self.sequences {
            out.push_str(&seq.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse_text(text: &str, vocab_size: usize, modulus: u64) -> Result<Self> {
        let mut sequences = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let tokens = line
                .split_whitespace()
                .map(|t| t.parse::<Token>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("dataset", format!("line {}: {e}", line_no + 1)))?;
            sequences.push(TokenSequence::new(tokens, vocab_size)?);
        }
        let seq_len = sequences.first().map_or(0, |s| s.len());
        if sequences.iter().any(|s| s.len() != seq_len) {
            return Err(Error::parse("dataset", "sequences have differing lengths"));
        }
        Ok(Self {
            seq_len,
            vocab_size,
            modulus,
            seed: 0,
            sequences,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn dataset(seqs: &[&[Token]], vocab: usize) -> ModuloDataset {
        ModuloDataset {
            seq_len: seqs[0].len(),
            vocab_size: vocab,
            modulus: 1,
            seed: 0,
            sequences: seqs
                .iter()
                .map(|s| TokenSequence::new(s.to_vec(), vocab).unwrap())
                .collect(),
        }
    }

    #[test]
    fn modulus_one_accepts_every_single_token() {
        let d = generate_modulo_dataset(1, 10, 1, 10, 3).unwrap();
        let mut got: Vec<Token> = d.sequences.iter().map(|s| s.tokens()[0]).collect();
        got.sort();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn small_modulo_dataset_is_exactly_the_satisfying_set() {
        let d = generate_modulo_dataset(5, 4, 4, 256, 11).unwrap();
        assert_eq!(d.sequences.len(), 256);
        let unique: HashSet<_> = d.sequences.iter().cloned().collect();
        assert_eq!(unique.len(), 256);
        // brute force membership over all 4^5 sequences
        let expected: HashSet<TokenSequence> = (0..1024u64)
            .map(|i| TokenSequence::from_index(i, 4, 5))
            .filter(|s| s.tokens().iter().sum::<u32>() % 4 == 0)
            .collect();
        assert_eq!(expected.len(), 256);
        assert_eq!(unique, expected);
    }

    #[test]
    fn length_eight_population_is_about_3_8_million() {
        let pop = modulo_population(8, 10, 30);
        assert!((3_700_000..3_900_000).contains(&pop), "population {pop}");
    }

    #[test]
    fn infeasible_dataset_is_an_error() {
        assert!(generate_modulo_dataset(2, 2, 5, 2, 0).is_err());
        assert!(generate_modulo_dataset(2, 2, 0, 1, 0).is_err());
    }

    #[test]
    fn dataset_is_deterministic_in_seed() {
        let a = generate_modulo_dataset(5, 10, 30, 100, 9).unwrap();
        let b = generate_modulo_dataset(5, 10, 30, 100, 9).unwrap();
        let c = generate_modulo_dataset(5, 10, 30, 100, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejection_path_respects_constraint() {
        // 10^9 candidate sequences, beyond the enumeration limit
        let d = generate_modulo_dataset(9, 10, 7, 50, 1).unwrap();
        assert_eq!(d.sequences.len(), 50);
        for s in &d.sequences {
            assert_eq!(s.tokens().iter().sum::<u32>() % 7, 0);
        }
    }

    #[test]
    fn point_mass_model_scores_zero() {
        let d = dataset(&[&[0, 0, 0, 0, 0]], 10);
        let m = train_ngram(&d, 1, 1e-12).unwrap();
        let z = m.score(&TokenSequence::new(vec![0; 5], 10).unwrap()).unwrap();
        assert!(z >= 0.0 && z < 1e-9, "z = {z}");
    }

    #[test]
    fn uniform_counts_give_ln_v() {
        let seqs: Vec<Vec<Token>> = (0..10).map(|t| vec![t; 4]).collect();
        let refs: Vec<&[Token]> = seqs.iter().map(|s| s.as_slice()).collect();
        let m = train_ngram(&dataset(&refs, 10), 1, 0.5).unwrap();
        let z = m.score(&TokenSequence::new(vec![3, 1, 4, 1], 10).unwrap()).unwrap();
        assert!((z - 10f64.ln()).abs() < 1e-12);
        let u = UniformModel { vocab_size: 10, seq_len: None };
        assert_eq!(u.score(&TokenSequence::new(vec![9, 9], 10).unwrap()).unwrap(), 10f64.ln());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = ModuloDataset { seq_len: 3, vocab_size: 4, modulus: 2, seed: 0, sequences: vec![] };
        assert!(train_ngram(&d, 2, 1.0).is_err());
    }

    #[test]
    fn bad_order_and_alpha_are_rejected() {
        let d = dataset(&[&[0, 1]], 2);
        assert!(train_ngram(&d, 0, 1.0).is_err());
        assert!(train_ngram(&d, 2, 0.0).is_err());
        assert!(train_ngram(&d, 2, -1.0).is_err());
    }

    #[test]
    fn score_rejects_mismatched_sequences() {
        let d = dataset(&[&[0, 1, 2]], 3);
        let m = train_ngram(&d, 2, 1.0).unwrap();
        assert!(m.score(&TokenSequence(vec![0, 1])).is_err());
        assert!(m.score(&TokenSequence(vec![0, 1, 3])).is_err());
        assert!(TokenSequence::new(vec![0, 5], 3).is_err());
    }

    /// Re-derives the chain rule with explicit tuple contexts and
    /// hash-map counts, independent of the base-(V+1) context encoding.
    #[test]
    fn trigram_score_matches_step_by_step_computation() {
        let d = generate_modulo_dataset(6, 5, 7, 300, 4).unwrap();
        let alpha = 0.3;
        let m = train_ngram(&d, 3, alpha).unwrap();
        let mut counts: HashMap<(Option<Token>, Option<Token>), HashMap<Token, u64>> = HashMap::new();
        for s in &d.sequences {
            let t = s.tokens();
            for i in 0..t.len() {
                let c1 = if i >= 2 { Some(t[i - 2]) } else { None };
                let c2 = if i >= 1 { Some(t[i - 1]) } else { None };
                *counts.entry((c1, c2)).or_default().entry(t[i]).or_default() += 1;
            }
        }
        let mut rng = rng::stream(99, Domain::Chain, 0);
        for _ in 0..20 {
            let seq = TokenSequence::random(6, 5, &mut rng);
            let t = seq.tokens();
            let mut prob = 1.0f64;
            for i in 0..t.len() {
                let c1 = if i >= 2 { Some(t[i - 2]) } else { None };
                let c2 = if i >= 1 { Some(t[i - 1]) } else { None };
                let row = counts.get(&(c1, c2));
                let c = row.and_then(|r| r.get(&t[i])).copied().unwrap_or(0) as f64;
                let total = row.map_or(0, |r| r.values().sum::<u64>()) as f64;
                prob *= (c + alpha) / (total + alpha * 5.0);
            }
            let expected = -prob.ln() / 6.0;
            let z = m.score(&seq).unwrap();
            assert!((z - expected).abs() < 1e-12, "{z} vs {expected}");
        }
    }

    #[test]
    fn conditionals_are_normalized() {
        let d = generate_modulo_dataset(5, 6, 5, 200, 2).unwrap();
        for order in 1..=4 {
            let m = train_ngram(&d, order, 0.1).unwrap();
            let t = m.table();
            for ctx in 0..t.contexts() {
                let s: f64 = t.row(ctx).iter().map(|lp| lp.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            let w = m.perturb(0.7, 5).unwrap();
            for ctx in 0..t.contexts() {
                let s: f64 = w.table.row(ctx).iter().map(|lp| lp.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_alpha_approaches_uniform() {
        let d = generate_modulo_dataset(5, 6, 5, 200, 2).unwrap();
        let seq = TokenSequence::new(vec![1, 2, 3, 4, 5], 6).unwrap();
        let mut prev = f64::INFINITY;
        for alpha in [1.0, 100.0, 1e4, 1e8] {
            let z = train_ngram(&d, 3, alpha).unwrap().score(&seq).unwrap();
            let gap = (z - 6f64.ln()).abs();
            assert!(gap <= prev + 1e-15);
            prev = gap;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn zero_noise_is_bit_identical() {
        let d = generate_modulo_dataset(6, 10, 30, 2000, 8).unwrap();
        let base = train_ngram(&d, 3, 0.1).unwrap();
        let wrapped = base.perturb(0.0, 77).unwrap();
        let mut rng = rng::stream(1, Domain::Chain, 0);
        for _ in 0..1000 {
            let s = TokenSequence::random(6, 10, &mut rng);
            assert_eq!(base.score(&s).unwrap().to_bits(), wrapped.score(&s).unwrap().to_bits());
        }
    }

    #[test]
    fn noise_is_deterministic_in_seed() {
        let d = generate_modulo_dataset(4, 5, 5, 100, 8).unwrap();
        let base = train_ngram(&d, 2, 0.1).unwrap();
        let a = base.perturb(0.3, 1).unwrap();
        let b = base.perturb(0.3, 1).unwrap();
        let c = base.perturb(0.3, 2).unwrap();
        assert_eq!(a.table, b.table);
        assert_ne!(a.table, c.table);
    }

    #[test]
    fn model_file_round_trips() {
        let d = generate_modulo_dataset(4, 5, 5, 100, 8).unwrap();
        let base = train_ngram(&d, 2, 0.1).unwrap();
        let models = vec![
            Model::from(base.clone()),
            Model::from(base.perturb(0.2, 4).unwrap()),
            Model::from(OffsetModel::new(base.clone().into(), 0.3).unwrap()),
            Model::from(UniformModel { vocab_size: 5, seq_len: Some(4) }),
        ];
        for m in models {
            let back = Model::from_json(&m.to_json()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn offset_model_shifts_score() {
        let d = generate_modulo_dataset(4, 5, 5, 100, 8).unwrap();
        let base: Model = train_ngram(&d, 2, 0.1).unwrap().into();
        let shifted = OffsetModel::new(base.clone(), 0.3).unwrap();
        let s = TokenSequence::new(vec![1, 2, 3, 4], 5).unwrap();
        assert!((shifted.score(&s).unwrap() - base.score(&s).unwrap() - 0.3).abs() < 1e-12);
        assert!(OffsetModel::new(base, -0.1).is_err());
    }

    #[test]
    fn dataset_text_round_trips() {
        let d = generate_modulo_dataset(4, 5, 5, 20, 8).unwrap();
        let back = ModuloDataset::parse_text(&d.to_text(), 5, 5).unwrap();
        assert_eq!(back.sequences, d.sequences);
    }

    proptest! {
        #[test]
        fn score_is_finite_nonnegative_and_repeatable(
            tokens in proptest::collection::vec(0u32..6, 5),
            order in 1usize..4,
            sigma in 0.0f64..1.5,
        ) {
            let d = generate_modulo_dataset(5, 6, 5, 50, 3).unwrap();
            let m = train_ngram(&d, order, 0.05).unwrap().perturb(sigma, 1).unwrap();
            let s = TokenSequence::new(tokens, 6).unwrap();
            let z1 = m.score(&s).unwrap();
            let z2 = m.score(&s).unwrap();
            prop_assert!(z1.is_finite() && z1 >= 0.0);
            prop_assert_eq!(z1.to_bits(), z2.to_bits());
        }

        #[test]
        fn from_index_is_lexicographic(index in 0u64..1024) {
            let s = TokenSequence::from_index(index, 4, 5);
            let back = s.tokens().iter().fold(0u64, |acc, &t| acc * 4 + t as u64);
            prop_assert_eq!(back, index);
        }
    }
}
