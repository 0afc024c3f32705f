//! Prediction-difference statistics: weighted two-stage resampling of
//! representative inputs into `D = z_A - z_B` histograms, the overlap-based
//! normalization that makes the two directions comparable, threshold sweeps
//! and the transfer of comparisons through a reference model.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::histogram::{Band, BinGrid, Histogram};
use crate::reweight::OutputDistribution;
use crate::rng::{self, Domain};
use crate::seqmodel::{ScoredModel, TokenSequence};
use crate::tempering::RepresentativeStore;

/// Samples drawn per random stream in [`sample_diff`].
const CHUNK: u64 = 4096;

/// Which model supplied the representative inputs. `D` is always
/// `z_A - z_B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Inputs from A's store, scored by B.
    AToB,
    /// Inputs from B's store, scored by A.
    BToA,
}

impl Direction {
    pub fn label(&self) -> &'static str {
        match self {
            Direction::AToB => "A->B",
            Direction::BToA => "B->A",
        }
    }
}

/// Histogram of sampled prediction differences plus the overlap count
/// (samples whose other-model score also lies in the band).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffResult {
    pub direction: Direction,
    pub histogram: Histogram,
    pub overlap_count: u64,
    pub band: Band,
    /// Identifies the inputs the draws came from (store, weights, n, seed).
    pub source_fingerprint: String,
}

impl DiffResult {
    pub fn new(direction: Direction, histogram: Histogram, overlap_count: u64, band: Band) -> Result<Self> {
        if overlap_count > histogram.total() {
            return Err(Error::Precondition(format!(
                "overlap count {overlap_count} exceeds the {} drawn samples",
                histogram.total()
            )));
        }
        Ok(Self {
            direction,
            histogram,
            overlap_count,
            band,
            source_fingerprint: String::new(),
        })
    }

    pub fn n_drawn(&self) -> u64 {
        self.histogram.total()
    }

    pub fn grid(&self) -> &BinGrid {
        self.histogram.grid()
    }

    /// Mass in bins centered exactly on zero, which neither strict sum
    /// includes at `lambda = 0`.
    pub fn zero_bin_mass(&self) -> u64 {
        self.histogram.sum_where(|c| c == 0.0)
    }

    /// Extreme bin centers among bins holding at least
    /// `max(5, 0.01% of n)` samples.
    pub fn extrema(&self) -> Option<(f64, f64)> {
        let floor = 5u64.max((self.n_drawn() as f64 * 1e-4).ceil() as u64);
        let mut kept = self
            .histogram
            .iter()
            .filter(|&(_, c)| c >= floor)
            .map(|(i, _)| self.grid().center(i));
        let first = kept.next()?;
        let last = kept.last().unwrap_or(first);
        Some((first, last))
    }

    /// Count over bins whose centers fall in `region`.
    pub fn region_sum(&self, region: DRegion) -> u64 {
        self.histogram.sum_where(|c| region.contains(c))
    }
}

/// `(sum over bins centered below min(lambda, 0), sum over bins centered
/// above max(lambda, 0))`; both inequalities are strict.
pub fn directed_sums(diff: &DiffResult, lambda: f64) -> (u64, u64) {
    (
        diff.region_sum(DRegion::Below(lambda)),
        diff.region_sum(DRegion::Above(lambda)),
    )
}

/// A set of `D` values selected by bin center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DRegion {
    All,
    /// `D < min(lambda, 0)`
    Below { lambda: f64 },
    /// `D > max(lambda, 0)`
    Above { lambda: f64 },
    /// `lo <= D <= hi`
    Window { lo: f64, hi: f64 },
}

#[allow(non_snake_case)]
impl DRegion {
    pub fn Below(lambda: f64) -> Self {
        DRegion::Below { lambda }
    }

    pub fn Above(lambda: f64) -> Self {
        DRegion::Above { lambda }
    }

    pub fn contains(&self, d: f64) -> bool {
        match *self {
            DRegion::All => true,
            DRegion::Below { lambda } => d < lambda.min(0.0),
            DRegion::Above { lambda } => d > lambda.max(0.0),
            DRegion::Window { lo, hi } => d >= lo && d <= hi,
        }
    }
}

/// Draws z-bins with probability proportional to a restricted output
/// distribution.
#[derive(Clone, Debug)]
pub struct ZSampler {
    bins: Vec<i64>,
    weights: WeightedIndex<f64>,
}

impl ZSampler {
    pub fn new(dist: &OutputDistribution) -> Result<Self> {
        let probs = dist.probabilities();
        if probs.is_empty() {
            return Err(Error::Precondition("distribution has no supported bins".into()));
        }
        let weights = WeightedIndex::new(probs.iter().map(|e| e.1))
            .map_err(|e| Error::Precondition(format!("invalid bin weights: {e}")))?;
        Ok(Self {
            bins: probs.iter().map(|e| e.0).collect(),
            weights,
        })
    }

    pub fn bins(&self) -> &[i64] {
        &self.bins
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        self.bins[self.weights.sample(rng)]
    }
}

/// Draws one z-bin with probability proportional to `exp(log_density)`.
pub fn sample_z<R: Rng + ?Sized>(dist: &OutputDistribution, rng: &mut R) -> Result<i64> {
    Ok(ZSampler::new(dist)?.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffOptions {
    /// Number of `D` samples to draw.
    pub samples: u64,
    pub grid: BinGrid,
    pub seed: u64,
    /// Keep a per-sample trace for inspection and annotation.
    pub trace: bool,
}

/// One sampled input with both scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    #[serde(rename = "z_A")]
    pub z_a: f64,
    #[serde(rename = "z_B")]
    pub z_b: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub tokens: TokenSequence,
}

#[derive(Clone, Debug)]
pub struct DiffSample {
    pub result: DiffResult,
    pub trace: Vec<TraceRecord>,
}

/// Repeats `samples` times: draw a z-bin from `dist`, draw a stored input
/// uniformly (with replacement) from that bin, score it with `other` and
/// record `D = z_A - z_B`. Samples whose `other` score lies in the band
/// count towards the overlap.
pub fn sample_diff(
    dist: &OutputDistribution,
    store: &RepresentativeStore,
    other: &dyn ScoredModel,
    direction: Direction,
    options: &DiffOptions,
) -> Result<DiffSample> {
    if options.samples == 0 {
        return Err(Error::Config("number of D samples must be at least 1".into()));
    }
    let band = *dist.band().ok_or_else(|| {
        Error::Precondition("the output distribution must be restricted to a band first".into())
    })?;
    if band != *store.band() {
        return Err(Error::Precondition(format!(
            "distribution band [{}, {}) differs from the store band [{}, {})",
            band.lo,
            band.hi,
            store.band().lo,
            store.band().hi
        )));
    }
    if !dist.grid().same_as(store.grid()) {
        return Err(Error::Binning("distribution and store use different z bins".into()));
    }
    let sampler = ZSampler::new(dist)?;
    let empty: Vec<i64> = sampler
        .bins()
        .iter()
        .copied()
        .filter(|&b| store.bin(b).is_none_or(|r| r.items().is_empty()))
        .collect();
    if !empty.is_empty() {
        return Err(Error::Precondition(format!(
            "no stored inputs for supported z-bins {empty:?}"
        )));
    }
    let reservoirs: Vec<&[(TokenSequence, f64)]> = sampler
        .bins()
        .iter()
        .map(|&b| store.bin(b).expect("checked above").items())
        .collect();
    let bin_slot = |bin: i64| sampler.bins().binary_search(&bin).expect("sampled bins are supported");

    let source_fingerprint = fingerprint::hash_json(&(
        store.fingerprint(),
        dist,
        options.samples,
        options.seed,
        options.grid,
        direction,
    ));

    let chunks = options.samples.div_ceil(CHUNK);
    let parts: Vec<(Histogram, u64, Vec<TraceRecord>)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng::stream(options.seed, Domain::DiffChunk, chunk);
            let count = CHUNK.min(options.samples - chunk * CHUNK);
            let mut hist = Histogram::new(options.grid);
            let mut overlap = 0;
            let mut trace = Vec::new();
            for _ in 0..count {
                let bin = sampler.sample(&mut rng);
                let items = reservoirs[bin_slot(bin)];
                let (seq, z_stored) = &items[rng.random_range(0..items.len())];
                let z_other = other.mean_nll(seq.tokens());
                let (z_a, z_b) = match direction {
                    Direction::AToB => (*z_stored, z_other),
                    Direction::BToA => (z_other, *z_stored),
                };
                let d = z_a - z_b;
                hist.record(d);
                if band.contains(z_other) {
                    overlap += 1;
                }
                if options.trace {
                    trace.push(TraceRecord {
                        id: seq.content_id(),
                        z_a,
                        z_b,
                        d,
                        tokens: seq.clone(),
                    });
                }
            }
            (hist, overlap, trace)
        })
        .collect();

    let mut histogram = Histogram::new(options.grid);
    let mut overlap_count = 0;
    let mut trace = Vec::new();
    for (h, o, t) in parts {
        histogram.merge(&h)?;
        overlap_count += o;
        trace.extend(t);
    }
    let mut result = DiffResult::new(direction, histogram, overlap_count, band)?;
    result.source_fingerprint = source_fingerprint;
    Ok(DiffSample { result, trace })
}

/// The four normalized terms `PD_{A->B} : PA_{A->B} : PA_{B->A} : PD_{B->A}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRatio {
    pub lambda: f64,
    /// Directed sums divided by their overlap counts.
    pub unscaled: [f64; 4],
    /// `PD_{A->B}` is zero, so the terms cannot be rescaled.
    pub degenerate: bool,
}

impl NormalizedRatio {
    /// Terms divided by the first one, or `None` when degenerate.
    pub fn terms(&self) -> Option<[f64; 4]> {
        if self.degenerate {
            return None;
        }
        let first = self.unscaled[0];
        Some(self.unscaled.map(|t| t / first))
    }
}

/// Divides each directed sum by its direction's overlap count, making the
/// two directions comparable on the common `X_A ∩ X_B` scale.
pub fn normalized_ratio(ab: &DiffResult, ba: &DiffResult, lambda: f64) -> Result<NormalizedRatio> {
    check_pair(ab, ba)?;
    let (below_ab, above_ab) = directed_sums(ab, lambda);
    let (below_ba, above_ba) = directed_sums(ba, lambda);
    let (oa, ob) = (ab.overlap_count as f64, ba.overlap_count as f64);
    let unscaled = [
        below_ab as f64 / oa,
        above_ab as f64 / oa,
        below_ba as f64 / ob,
        above_ba as f64 / ob,
    ];
    Ok(NormalizedRatio {
        lambda,
        unscaled,
        degenerate: unscaled[0] == 0.0,
    })
}

fn check_pair(ab: &DiffResult, ba: &DiffResult) -> Result<()> {
    if ab.band != ba.band {
        return Err(Error::Precondition("the two directions used different bands".into()));
    }
    if !ab.grid().same_as(ba.grid()) {
        return Err(Error::Binning("the two directions used different D bins".into()));
    }
    for d in [ab, ba] {
        if d.overlap_count == 0 {
            return Err(Error::NoOverlap(format!(
                "{} has zero overlap among {} samples",
                d.direction.label(),
                d.n_drawn()
            )));
        }
    }
    Ok(())
}

pub fn lambda_sweep(ab: &DiffResult, ba: &DiffResult, lambdas: &[f64]) -> Result<Vec<NormalizedRatio>> {
    lambdas.iter().map(|&l| normalized_ratio(ab, ba, l)).collect()
}

/// Comparison of models B and C through the reference model A.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub region: DRegion,
    /// Fraction of A's drawn inputs in `region` when scored by B.
    pub forward_b: f64,
    /// Fraction of A's drawn inputs in `region` when scored by C.
    pub forward_c: f64,
    /// `(sum of B->A in region / |X~_{B->A}|) * |X~_{A->B}|`
    pub q_b: f64,
    /// `(sum of C->A in region / |X~_{C->A}|) * |X~_{A->C}|`
    pub q_c: f64,
}

impl ReferenceComparison {
    /// Estimate of `sum rho_{B->A} / sum rho_{C->A}` over the region.
    pub fn reverse_ratio(&self) -> f64 {
        self.q_b / self.q_c
    }
}

/// Makes B and C comparable using the draws from A's inputs as the common
/// scale. `a_to_b` and `a_to_c` must come from the same draws of A's inputs.
pub fn compare_via_reference(
    a_to_b: &DiffResult,
    a_to_c: &DiffResult,
    b_to_a: &DiffResult,
    c_to_a: &DiffResult,
    region: DRegion,
) -> Result<ReferenceComparison> {
    if a_to_b.source_fingerprint != a_to_c.source_fingerprint {
        return Err(Error::Fingerprint(
            "A->B and A->C were not drawn from the same representative inputs".into(),
        ));
    }
    check_pair(a_to_b, b_to_a)?;
    check_pair(a_to_c, c_to_a)?;
    let n = a_to_b.n_drawn() as f64;
    let q = |reverse: &DiffResult, forward: &DiffResult| {
        reverse.region_sum(region) as f64 / reverse.overlap_count as f64 * forward.overlap_count as f64
    };
    Ok(ReferenceComparison {
        region,
        forward_b: a_to_b.region_sum(region) as f64 / n,
        forward_c: a_to_c.region_sum(region) as f64 / n,
        q_b: q(b_to_a, a_to_b),
        q_c: q(c_to_a, a_to_c),
    })
}
