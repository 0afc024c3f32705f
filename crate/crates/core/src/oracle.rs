//! Exact ground truth by visiting every sequence of a small space.
//!
//! Sequences are visited in lexicographic order inside fixed-size chunks.
//! Within a chunk, n-gram scores reuse the log-probability prefix shared with
//! the previous sequence; the prefix sums are the same left fold that
//! [`LogProbTable::sequence_log_prob`] performs, so scores are bit-identical
//! to direct scoring.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffstat::{self, DiffResult, Direction, NormalizedRatio};
use crate::error::{Error, Result};
use crate::histogram::{Band, BinGrid, Histogram};
use crate::reweight::OutputDistribution;
use crate::seqmodel::{mean_from_log_prob, LogProbTable, ScoredModel, Token};

pub const DEFAULT_CAP: u64 = 100_000_000;

/// Sequences per work unit.
const CHUNK: u64 = 1 << 16;

/// `V^N`, or an error when it exceeds `cap`.
pub fn space_size(vocab_size: usize, seq_len: usize, cap: u64) -> Result<u64> {
    let required = (vocab_size as u128)
        .checked_pow(seq_len as u32)
        .unwrap_or(u128::MAX);
    if required > cap as u128 {
        return Err(Error::EnumerationCap { required, cap });
    }
    Ok(required as u64)
}

/// Running per-position log-probability sums for one model.
struct Prefix<'a> {
    table: &'a LogProbTable,
    contexts: Vec<usize>,
    sums: Vec<f64>,
}

impl<'a> Prefix<'a> {
    fn new(table: &'a LogProbTable, len: usize) -> Self {
        let mut contexts = vec![0; len + 1];
        contexts[0] = table.initial_context();
        Self {
            table,
            contexts,
            sums: vec![0.0; len + 1],
        }
    }

    #[inline]
    fn update(&mut self, tokens: &[Token], from: usize) {
        for p in from..tokens.len() {
            let (c, t) = (self.contexts[p], tokens[p]);
            self.sums[p + 1] = self.sums[p] + self.table.log_prob(c, t);
            self.contexts[p + 1] = self.table.next_context(c, t);
        }
    }

    #[inline]
    fn z(&self) -> f64 {
        let n = self.sums.len() - 1;
        mean_from_log_prob(self.sums[n], n)
    }
}

enum Scorer<'a> {
    Table(Prefix<'a>),
    Direct(&'a dyn ScoredModel, f64),
}

impl<'a> Scorer<'a> {
    fn new(model: &'a dyn ScoredModel, len: usize) -> Self {
        match model.log_prob_table() {
            Some(t) => Scorer::Table(Prefix::new(t, len)),
            None => Scorer::Direct(model, f64::NAN),
        }
    }

    #[inline]
    fn update(&mut self, tokens: &[Token], from: usize) {
        match self {
            Scorer::Table(p) => p.update(tokens, from),
            Scorer::Direct(m, z) => *z = m.mean_nll(tokens),
        }
    }

    #[inline]
    fn z(&self) -> f64 {
        match self {
            Scorer::Table(p) => p.z(),
            Scorer::Direct(_, z) => *z,
        }
    }
}

fn check_models(models: &[&dyn ScoredModel], seq_len: usize) -> Result<usize> {
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let v = models[0].vocab_size();
    for m in models {
        if m.vocab_size() != v {
            return Err(Error::Mismatch(format!(
                "models disagree on vocabulary size ({} vs {v})",
                m.vocab_size()
            )));
        }
        if let Some(n) = m.seq_len() {
            if n != seq_len {
                return Err(Error::Mismatch(format!(
                    "model built for length {n}, enumerating length {seq_len}"
                )));
            }
        }
    }
    Ok(v)
}

/// Visits every sequence of `{0..V-1}^seq_len`, calling `visit(acc, tokens,
/// scores)` with one score per model. Chunk accumulators are merged in index
/// order, so the result does not depend on the thread count.
pub fn scan<T, Make, Visit, Merge>(
    models: &[&dyn ScoredModel],
    seq_len: usize,
    cap: u64,
    make: Make,
    visit: Visit,
    mut merge: Merge,
) -> Result<T>
where
    T: Send,
    Make: Fn() -> T + Sync,
    Visit: Fn(&mut T, &[Token], &[f64]) + Sync,
    Merge: FnMut(&mut T, T) -> Result<()>,
{
    let vocab = check_models(models, seq_len)?;
    let total = space_size(vocab, seq_len, cap)?;
    let chunks = total.div_ceil(CHUNK);
    let done = AtomicU64::new(0);
    let report_every = (chunks / 10).max(1);
    let parts: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * CHUNK;
            let end = total.min(start + CHUNK);
            let mut tokens = crate::seqmodel::TokenSequence::from_index(start, vocab, seq_len)
                .tokens()
                .to_vec();
            let mut scorers: Vec<Scorer> = models.iter().map(|&m| Scorer::new(m, seq_len)).collect();
            let mut scores = vec![0.0; models.len()];
            let mut acc = make();
            let mut from = 0;
            for index in start..end {
                for (s, out) in scorers.iter_mut().zip(scores.iter_mut()) {
                    s.update(&tokens, from);
                    *out = s.z();
                }
                visit(&mut acc, &tokens, &scores);
                if index + 1 < end {
                    from = increment(&mut tokens, vocab as Token);
                }
            }
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if n % report_every == 0 {
                log::info!("enumerated {n}/{chunks} chunks");
            }
            acc
        })
        .collect();
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_else(&make);
    for part in iter {
        merge(&mut acc, part)?;
    }
    Ok(acc)
}

/// Lexicographic successor; returns the first position that changed.
#[inline]
fn increment(tokens: &mut [Token], vocab: Token) -> usize {
    let mut p = tokens.len();
    while p > 0 {
        p -= 1;
        tokens[p] += 1;
        if tokens[p] < vocab {
            return p;
        }
        tokens[p] = 0;
    }
    0
}

/// Scores of every sequence, in lexicographic index order.
pub fn enumerate_scores(model: &dyn ScoredModel, seq_len: usize, cap: u64) -> Result<Vec<f64>> {
    scan(
        &[model],
        seq_len,
        cap,
        Vec::new,
        |acc: &mut Vec<f64>, _, z| acc.push(z[0]),
        |acc, part| {
            acc.extend(part);
            Ok(())
        },
    )
}

/// Exact output histogram `rho(z)` over the whole space.
pub fn exact_histogram(model: &dyn ScoredModel, seq_len: usize, grid: BinGrid, cap: u64) -> Result<Histogram> {
    scan(
        &[model],
        seq_len,
        cap,
        || Histogram::new(grid),
        |h, _, z| h.record(z[0]),
        |acc, part| acc.merge(&part),
    )
}

/// `ln count` per non-empty bin, restricted to `band` when given.
pub fn exact_distribution(hist: &Histogram, band: Option<&Band>) -> Result<OutputDistribution> {
    let entries: Vec<(i64, f64)> = hist.iter().map(|(i, c)| (i, (c as f64).ln())).collect();
    let dist = OutputDistribution::from_log_density(*hist.grid(), &entries)?;
    match band {
        Some(b) => crate::reweight::restrict(&dist, b),
        None => Ok(dist),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationOptions {
    pub band: Band,
    pub z_grid: BinGrid,
    pub d_grid: BinGrid,
    pub cap: u64,
}

/// Everything the sampling pipeline estimates, computed exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub band: Band,
    /// `rho_A(z)` over the whole space.
    pub hist_a: Histogram,
    pub hist_b: Histogram,
    /// `D` over `X_A`; the overlap count is `|X_A ∩ X_B|`.
    pub diff_ab: DiffResult,
    /// `D` over `X_B`.
    pub diff_ba: DiffResult,
    pub size_a: u64,
    pub size_b: u64,
    pub size_ab: u64,
}

struct Accumulator {
    hist_a: Histogram,
    hist_b: Histogram,
    diff_ab: Histogram,
    diff_ba: Histogram,
    size_ab: u64,
}

impl EnumerationReport {
    pub fn space_size(&self) -> u64 {
        self.hist_a.total()
    }
}

pub fn enumerate(a: &dyn ScoredModel, b: &dyn ScoredModel, seq_len: usize, options: &EnumerationOptions) -> Result<EnumerationReport> {
    let band = options.band;
    let acc = scan(
        &[a, b],
        seq_len,
        options.cap,
        || Accumulator {
            hist_a: Histogram::new(options.z_grid),
            hist_b: Histogram::new(options.z_grid),
            diff_ab: Histogram::new(options.d_grid),
            diff_ba: Histogram::new(options.d_grid),
            size_ab: 0,
        },
        |acc, _, z| {
            let (za, zb) = (z[0], z[1]);
            acc.hist_a.record(za);
            acc.hist_b.record(zb);
            let (in_a, in_b) = (band.contains(za), band.contains(zb));
            if in_a {
                acc.diff_ab.record(za - zb);
            }
            if in_b {
                acc.diff_ba.record(za - zb);
            }
            if in_a && in_b {
                acc.size_ab += 1;
            }
        },
        |acc, part| {
            acc.hist_a.merge(&part.hist_a)?;
            acc.hist_b.merge(&part.hist_b)?;
            acc.diff_ab.merge(&part.diff_ab)?;
            acc.diff_ba.merge(&part.diff_ba)?;
            acc.size_ab += part.size_ab;
            Ok(())
        },
    )?;
    let size_a = acc.diff_ab.total();
    let size_b = acc.diff_ba.total();
    let mut diff_ab = DiffResult::new(Direction::AToB, acc.diff_ab, acc.size_ab, band)?;
    let mut diff_ba = DiffResult::new(Direction::BToA, acc.diff_ba, acc.size_ab, band)?;
    diff_ab.source_fingerprint = "exact".into();
    diff_ba.source_fingerprint = "exact".into();
    Ok(EnumerationReport {
        vocab_size: a.vocab_size(),
        seq_len,
        band,
        hist_a: acc.hist_a,
        hist_b: acc.hist_b,
        diff_ab,
        diff_ba,
        size_a,
        size_b,
        size_ab: acc.size_ab,
    })
}

/// The four-term ratio with the true `|X_A ∩ X_B|` as both denominators.
pub fn exact_ratio(report: &EnumerationReport, lambda: f64) -> Result<NormalizedRatio> {
    diffstat::normalized_ratio(&report.diff_ab, &report.diff_ba, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{generate_modulo_dataset, train_ngram, NGramModel, TokenSequence, UniformModel};

    fn toy(order: usize, seed: u64) -> NGramModel {
        let data = generate_modulo_dataset(5, 4, 6, 120, seed).unwrap();
        train_ngram(&data, order, 0.5).unwrap()
    }

    fn options(lo: f64, hi: f64) -> EnumerationOptions {
        EnumerationOptions {
            band: Band::new(lo, hi).unwrap(),
            z_grid: BinGrid::aligned(0.05).unwrap(),
            d_grid: BinGrid::centered(0.05).unwrap(),
            cap: DEFAULT_CAP,
        }
    }

    #[test]
    fn odometer_walks_lexicographically() {
        let mut t = vec![0, 2, 2];
        assert_eq!(increment(&mut t, 3), 0);
        assert_eq!(t, vec![1, 0, 0]);
        assert_eq!(increment(&mut t, 3), 2);
        assert_eq!(t, vec![1, 0, 1]);
    }

    #[test]
    fn prefix_scores_are_bit_identical() {
        let m = toy(3, 1);
        let scores = enumerate_scores(&m, 5, DEFAULT_CAP).unwrap();
        assert_eq!(scores.len(), 1024);
        for (i, &z) in scores.iter().enumerate() {
            let seq = TokenSequence::from_index(i as u64, 4, 5);
            assert_eq!(z.to_bits(), m.mean_nll(seq.tokens()).to_bits());
        }
    }

    #[test]
    fn chunk_boundaries_do_not_matter() {
        // 4^9 spans several chunks
        let data = generate_modulo_dataset(9, 4, 6, 500, 3).unwrap();
        let m = train_ngram(&data, 2, 0.5).unwrap();
        let scores = enumerate_scores(&m, 9, DEFAULT_CAP).unwrap();
        for i in [0u64, 65_535, 65_536, 65_537, 131_071, 262_143] {
            let seq = TokenSequence::from_index(i, 4, 9);
            assert_eq!(scores[i as usize].to_bits(), m.mean_nll(seq.tokens()).to_bits());
        }
    }

    #[test]
    fn identical_models_give_a_zero_spike() {
        let m = toy(3, 2);
        let h = exact_histogram(&m, 5, BinGrid::aligned(0.05).unwrap(), DEFAULT_CAP).unwrap();
        let (lo, hi) = h.index_range().unwrap();
        let band = Band::new(0.05 * lo as f64, 0.05 * (hi + 1) as f64).unwrap();
        let r = enumerate(&m, &m, 5, &options(band.lo, band.hi)).unwrap();
        assert_eq!(r.size_a, r.size_ab);
        assert_eq!(r.diff_ab.zero_bin_mass(), r.size_a);
        assert!(exact_ratio(&r, 0.0).unwrap().degenerate);
    }

    #[test]
    fn uniform_model_fills_the_band() {
        let u = UniformModel { vocab_size: 4, seq_len: Some(5) };
        let ln4 = 4f64.ln();
        let r = enumerate(&u, &u, 5, &options(ln4 - 0.1, ln4 + 0.1)).unwrap();
        assert_eq!(r.size_a, 1024);
        assert_eq!(r.size_ab, 1024);
    }

    #[test]
    fn cap_reports_required_count() {
        let u = UniformModel { vocab_size: 10, seq_len: None };
        let err = enumerate(&u, &u, 9, &EnumerationOptions { cap: 1000, ..options(0.0, 3.0) }).unwrap_err();
        match err {
            Error::EnumerationCap { required, cap } => {
                assert_eq!(required, 1_000_000_000);
                assert_eq!(cap, 1000);
            }
            e => panic!("unexpected {e}"),
        }
        assert_eq!(space_size(10, 8, DEFAULT_CAP).unwrap(), 100_000_000);
    }

    #[test]
    fn report_invariants() {
        let a = toy(3, 4);
        let b = toy(2, 5);
        let r = enumerate(&a, &b, 5, &options(1.0, 1.5)).unwrap();
        assert_eq!(r.space_size(), 1024);
        assert!(r.size_ab <= r.size_a.min(r.size_b));
        let in_band = r.hist_a.sum_where(|c| (1.0..1.5).contains(&c));
        assert_eq!(in_band, r.size_a);
        let (below, above) = diffstat::directed_sums(&r.diff_ab, 0.0);
        assert_eq!(below + above + r.diff_ab.zero_bin_mass(), r.size_a);
    }

    #[test]
    fn relabeling_symmetry_gives_equal_terms() {
        // B is A trained on data relabeled by t -> V-1-t, an involution, so
        // rho_{B->A}(D) mirrors rho_{A->B}(-D).
        let data = generate_modulo_dataset(5, 4, 6, 150, 8).unwrap();
        let mut flipped = data.clone();
        for s in &mut flipped.sequences {
            let t: Vec<Token> = s.tokens().iter().map(|&t| 3 - t).collect();
            *s = TokenSequence::new(t, 4).unwrap();
        }
        let a = train_ngram(&data, 2, 0.5).unwrap();
        let b = train_ngram(&flipped, 2, 0.5).unwrap();
        let r = enumerate(&a, &b, 5, &options(1.0, 1.4)).unwrap();
        assert!(r.size_ab > 0);
        let u = exact_ratio(&r, 0.0).unwrap().unscaled;
        let tol = 2.0 / r.size_ab as f64;
        assert!((u[0] - u[3]).abs() <= tol, "{u:?}");
        assert!((u[1] - u[2]).abs() <= tol, "{u:?}");
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let a = toy(3, 6);
        let b = toy(4, 7);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| enumerate(&a, &b, 5, &options(1.0, 1.4)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
