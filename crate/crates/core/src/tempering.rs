//! Parallel tempering: replicas on a temperature ladder with adjacent
//! replica exchange, collecting per-temperature energy histograms and a
//! shared per-bin reservoir of in-band inputs.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::histogram::{Band, BinGrid, EnergyHistogram, Histogram};
use crate::mcmc::{self, ChainConfig, ChainState};
use crate::rng::{self, Domain, StreamRng};
use crate::seqmodel::{ScoredModel, TokenSequence};

/// Strictly increasing positive temperatures, coldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TemperatureLadder {
    temperatures: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TemperatureLadder {
    type Error = Error;
    fn try_from(temperatures: Vec<f64>) -> Result<Self> {
        Self::new(temperatures)
    }
}

impl From<TemperatureLadder> for Vec<f64> {
    fn from(l: TemperatureLadder) -> Self {
        l.temperatures
    }
}

impl TemperatureLadder {
    pub fn new(temperatures: Vec<f64>) -> Result<Self> {
        if temperatures.is_empty() {
            return Err(Error::Config("temperature ladder is empty".into()));
        }
        if temperatures.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config(format!(
                "temperatures must be positive and finite: {temperatures:?}"
            )));
        }
        if temperatures.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "temperatures must be strictly increasing: {temperatures:?}"
            )));
        }
        Ok(Self { temperatures })
    }

    /// `count` temperatures spaced log-uniformly from `t_min` to `t_max`.
    pub fn geometric(t_min: f64, t_max: f64, count: usize) -> Result<Self> {
        if count == 1 {
            return Self::new(vec![t_min]);
        }
        if count == 0 {
            return Err(Error::Config("ladder needs at least one replica".into()));
        }
        let ratio = (t_max / t_min).ln() / (count - 1) as f64;
        let mut temps: Vec<f64> = (0..count)
            .map(|k| t_min * (ratio * k as f64).exp())
            .collect();
        temps[count - 1] = t_max;
        Self::new(temps)
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn betas(&self) -> Vec<f64> {
        self.temperatures.iter().map(|t| 1.0 / t).collect()
    }

    pub fn len(&self) -> usize {
        self.temperatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temperatures.is_empty()
    }
}

/// `min(1, exp((beta_i - beta_j)(z_i - z_j)))` for exchanging the
/// configurations of replicas `i` and `j`.
pub fn swap_accept_probability(z_i: f64, z_j: f64, beta_i: f64, beta_j: f64) -> f64 {
    let exponent = (beta_i - beta_j) * (z_i - z_j);
    if exponent >= 0.0 {
        1.0
    } else {
        exponent.exp()
    }
}

/// Fixed-capacity uniform sample of the inputs offered to one z-bin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Reservoir {
    items: Vec<(TokenSequence, f64)>,
    seen: u64,
}

impl Reservoir {
    pub fn items(&self) -> &[(TokenSequence, f64)] {
        &self.items
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Algorithm R: after `n >= capacity` offers each one is retained with
    /// probability `capacity / n`.
    pub fn offer<R: Rng + ?Sized>(&mut self, seq: &TokenSequence, z: f64, capacity: usize, rng: &mut R) {
        self.seen += 1;
        if self.items.len() < capacity {
            self.items.push((seq.clone(), z));
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < capacity {
                self.items[j as usize] = (seq.clone(), z);
            }
        }
    }
}

/// Per-z-bin reservoirs of representative inputs inside a band.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentativeStore {
    grid: BinGrid,
    band: Band,
    capacity: usize,
    bins: BTreeMap<i64, Reservoir>,
}

/// One exported reservoir entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredInput {
    pub id: String,
    pub z: f64,
    pub tokens: TokenSequence,
}

impl RepresentativeStore {
    pub fn new(grid: BinGrid, band: Band, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("reservoir capacity must be at least 1".into()));
        }
        Ok(Self {
            grid,
            band,
            capacity,
            bins: BTreeMap::new(),
        })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn band(&self) -> &Band {
        &self.band
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Offers an input; ignored unless its score lies in the band.
    pub fn offer<R: Rng + ?Sized>(&mut self, seq: &TokenSequence, z: f64, rng: &mut R) {
        if !self.band.contains(z) {
            return;
        }
        let bin = self.grid.index(z);
        self.bins
            .entry(bin)
            .or_default()
            .offer(seq, z, self.capacity, rng);
    }

    /// Offers a state drawn at `temperature`. It is first kept with
    /// probability `exp((z - upper)/T)`, where `upper` is the bin's upper
    /// edge, so that the Boltzmann tilt inside the bin cancels and every
    /// member of the bin is equally likely to be offered.
    pub fn offer_tempered<R: Rng + ?Sized>(&mut self, seq: &TokenSequence, z: f64, temperature: f64, rng: &mut R) {
        if !self.band.contains(z) {
            return;
        }
        let upper = self.grid.upper(self.grid.index(z));
        let keep = ((z - upper) / temperature).exp();
        if keep < 1.0 && rng.random::<f64>() >= keep {
            return;
        }
        self.offer(seq, z, rng);
    }

    pub fn bin(&self, index: i64) -> Option<&Reservoir> {
        self.bins.get(&index)
    }

    pub fn bins(&self) -> impl Iterator<Item = (i64, &Reservoir)> {
        self.bins.iter().map(|(&i, r)| (i, r))
    }

    pub fn len(&self) -> usize {
        self.bins.values().map(|r| r.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored entries in bin order, as exported.
    pub fn entries(&self) -> Vec<StoredInput> {
        self.bins
            .values()
            .flat_map(|r| r.items.iter())
            .map(|(seq, z)| StoredInput {
                id: seq.content_id(),
                z: *z,
                tokens: seq.clone(),
            })
            .collect()
    }

    /// Rebuilds a store from exported entries. Seen-counts restart at the
    /// number of stored items.
    pub fn from_entries(grid: BinGrid, band: Band, capacity: usize, entries: Vec<StoredInput>) -> Result<Self> {
        let mut store = Self::new(grid, band, capacity)?;
        for e in entries {
            if !band.contains(e.z) {
                return Err(Error::Precondition(format!(
                    "stored input {} has z = {} outside the band [{}, {})",
                    e.id, e.z, band.lo, band.hi
                )));
            }
            let r = store.bins.entry(grid.index(e.z)).or_default();
            if r.items.len() >= capacity {
                return Err(Error::Precondition(format!(
                    "more than {capacity} stored inputs in one bin"
                )));
            }
            r.seen += 1;
            r.items.push((e.tokens, e.z));
        }
        Ok(store)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::hash_json(&(self.grid, self.band, self.capacity, self.entries()))
    }
}

/// Schedule and collection settings for [`run_pt`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtConfig {
    pub seq_len: usize,
    pub steps_per_replica: u64,
    pub swap_interval: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub band: Band,
    pub grid: BinGrid,
    pub reservoir_capacity: usize,
    /// Energy histograms are kept on `grid` with each bin split this many
    /// times, which keeps reweighting accurate where the density is steep.
    #[serde(default = "default_subdivisions")]
    pub subdivisions: u32,
}

pub const DEFAULT_SUBDIVISIONS: u32 = 50;

fn default_subdivisions() -> u32 {
    DEFAULT_SUBDIVISIONS
}

impl PtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.swap_interval == 0 {
            return Err(Error::Config("swap interval must be at least 1".into()));
        }
        if self.steps_per_replica <= self.burn_in {
            return Err(Error::Config(format!(
                "steps per replica ({}) must exceed burn-in ({})",
                self.steps_per_replica, self.burn_in
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        Band::new(self.band.lo, self.band.hi)?;
        self.energy_grid()?;
        self.chain().validate()
    }

    /// Grid of the per-replica energy histograms.
    pub fn energy_grid(&self) -> Result<BinGrid> {
        self.grid.subdivide(self.subdivisions)
    }

    fn chain(&self) -> ChainConfig {
        ChainConfig {
            steps: self.steps_per_replica,
            burn_in: self.burn_in,
            thin: self.thin,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub attempts: u64,
    pub accepted: u64,
}

impl PairStats {
    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

/// Acceptance statistics of a tempering run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtDiagnostics {
    pub temperatures: Vec<f64>,
    pub move_acceptance: Vec<f64>,
    pub swap_acceptance: Vec<f64>,
    pub swap_attempts: Vec<u64>,
    pub delivered: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct PtOutput {
    /// One histogram per temperature slot, coldest first, on
    /// [`PtConfig::energy_grid`].
    pub histograms: Vec<EnergyHistogram>,
    pub store: RepresentativeStore,
    pub diagnostics: PtDiagnostics,
    pub final_states: Vec<ChainState>,
}

struct Replica {
    state: ChainState,
    temperature: f64,
    histogram: Histogram,
    offers: Vec<(TokenSequence, f64)>,
    delivered: u64,
}

/// Runs `ladder.len()` replicas for `steps_per_replica` Metropolis steps
/// each, attempting adjacent swaps every `swap_interval` steps (even pairs
/// and odd pairs on alternate rounds).
///
/// Replica `k` draws from stream `(seed, Replica, k)`, swap decisions from
/// `(seed, Swap, 0)` and reservoir replacement from `(seed, Reservoir, 0)`,
/// so the output does not depend on the worker count.
pub fn run_pt(
    model: &dyn ScoredModel,
    ladder: &TemperatureLadder,
    config: &PtConfig,
    seed: u64,
) -> Result<PtOutput> {
    config.validate()?;
    let chain = config.chain();
    let energy_grid = config.energy_grid()?;
    let (grid, parts) = (config.grid, config.subdivisions);
    let mut replicas = ladder
        .temperatures()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            Ok(Replica {
                state: ChainState::random(model, config.seq_len, rng::stream(seed, Domain::Replica, k as u64))?,
                temperature: t,
                histogram: Histogram::new(energy_grid),
                offers: Vec::new(),
                delivered: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = RepresentativeStore::new(config.grid, config.band, config.reservoir_capacity)?;
    let mut swap_rng: StreamRng = rng::stream(seed, Domain::Swap, 0);
    let mut reservoir_rng: StreamRng = rng::stream(seed, Domain::Reservoir, 0);
    let mut pairs = vec![PairStats::default(); ladder.len().saturating_sub(1)];
    let band = config.band;

    let mut done = 0u64;
    let mut round = 0u64;
    while done < config.steps_per_replica {
        let span = config.swap_interval.min(config.steps_per_replica - done);
        replicas.par_iter_mut().for_each(|r| {
            for s in 1..=span {
                mcmc::step_unchecked(&mut r.state, model, r.temperature);
                let step = done + s;
                if chain.delivers(step) {
                    let z = r.state.z();
                    r.histogram.add(grid.sub_index(z, parts), 1);
                    r.delivered += 1;
                    if band.contains(z) {
                        r.offers.push((r.state.seq().clone(), z));
                    }
                }
            }
        });
        done += span;
        for r in replicas.iter_mut() {
            for (seq, z) in r.offers.drain(..) {
                store.offer_tempered(&seq, z, r.temperature, &mut reservoir_rng);
            }
        }
        swap_round(&mut replicas, &mut pairs, round, &mut swap_rng);
        round += 1;
    }

    let diagnostics = PtDiagnostics {
        temperatures: ladder.temperatures().to_vec(),
        move_acceptance: replicas.iter().map(|r| r.state.acceptance_rate()).collect(),
        swap_acceptance: pairs.iter().map(PairStats::rate).collect(),
        swap_attempts: pairs.iter().map(|p| p.attempts).collect(),
        delivered: replicas.iter().map(|r| r.delivered).collect(),
    };
    let (histograms, final_states) = replicas
        .into_iter()
        .map(|r| (r.histogram, r.state))
        .unzip();
    Ok(PtOutput {
        histograms,
        store,
        diagnostics,
        final_states,
    })
}

fn swap_round(replicas: &mut [Replica], pairs: &mut [PairStats], round: u64, rng: &mut StreamRng) {
    let start = (round % 2) as usize;
    let mut i = start;
    while i + 1 < replicas.len() {
        let (left, right) = replicas.split_at_mut(i + 1);
        let (a, b) = (&mut left[i], &mut right[0]);
        let p = swap_accept_probability(a.state.z(), b.state.z(), 1.0 / a.temperature, 1.0 / b.temperature);
        pairs[i].attempts += 1;
        if p >= 1.0 || rng.random::<f64>() < p {
            pairs[i].accepted += 1;
            a.state.swap_configuration(&mut b.state);
        }
        i += 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::run_chain;
    use crate::seqmodel::{generate_modulo_dataset, train_ngram, NGramModel};

    fn toy() -> NGramModel {
        let d = generate_modulo_dataset(5, 4, 4, 200, 5).unwrap();
        train_ngram(&d, 2, 0.5).unwrap()
    }

    fn config(steps: u64) -> PtConfig {
        PtConfig {
            seq_len: 5,
            steps_per_replica: steps,
            swap_interval: 10,
            burn_in: 100,
            thin: 1,
            band: Band::new(0.0, 10.0).unwrap(),
            grid: BinGrid::aligned(0.05).unwrap(),
            reservoir_capacity: 16,
            subdivisions: 1,
        }
    }

    #[test]
    fn swap_probability_cases() {
        assert_eq!(swap_accept_probability(1.3, 1.3, 5.0, 2.0), 1.0);
        // cold replica (larger beta) holding the hotter state
        assert_eq!(swap_accept_probability(2.0, 1.0, 5.0, 2.0), 1.0);
        let p = swap_accept_probability(1.0, 1.0 + 2f64.ln(), 2.0, 1.0);
        assert!((p - 0.5).abs() < 1e-15);
        // simultaneous relabeling leaves the probability unchanged
        assert_eq!(
            swap_accept_probability(1.1, 2.5, 3.0, 1.5),
            swap_accept_probability(2.5, 1.1, 1.5, 3.0)
        );
    }

    #[test]
    fn ladder_validation() {
        assert!(TemperatureLadder::new(vec![]).is_err());
        assert!(TemperatureLadder::new(vec![0.1, 0.1]).is_err());
        assert!(TemperatureLadder::new(vec![0.2, 0.1]).is_err());
        assert!(TemperatureLadder::new(vec![0.0, 0.1]).is_err());
        let l = TemperatureLadder::geometric(0.01, 1.0, 5).unwrap();
        assert_eq!(l.len(), 5);
        assert!((l.temperatures()[2] - 0.1).abs() < 1e-12);
        assert_eq!(l.temperatures()[4], 1.0);
    }

    #[test]
    fn single_replica_matches_run_chain() {
        let m = toy();
        let ladder = TemperatureLadder::new(vec![0.4]).unwrap();
        let cfg = config(5_000);
        let out = run_pt(&m, &ladder, &cfg, 21).unwrap();
        let mut hist = Histogram::new(cfg.grid);
        let single = run_chain(
            &m,
            0.4,
            ChainConfig { steps: 5_000, burn_in: 100, thin: 1 },
            5,
            rng::stream(21, Domain::Replica, 0),
            &mut hist,
        )
        .unwrap();
        assert_eq!(out.histograms[0], hist);
        assert_eq!(out.final_states[0].seq(), single.final_state.seq());
        assert_eq!(out.diagnostics.move_acceptance[0], single.acceptance_rate);
    }

    #[test]
    fn equal_temperatures_always_swap() {
        // a ladder must be strictly increasing, so exercise the round directly
        let m = toy();
        let mut replicas: Vec<Replica> = (0..4)
            .map(|k| Replica {
                state: ChainState::random(&m, 5, rng::stream(1, Domain::Replica, k)).unwrap(),
                temperature: 0.5,
                histogram: Histogram::new(BinGrid::aligned(0.05).unwrap()),
                offers: vec![],
                delivered: 0,
            })
            .collect();
        let mut pairs = vec![PairStats::default(); 3];
        let mut rng = rng::stream(1, Domain::Swap, 0);
        for round in 0..10 {
            swap_round(&mut replicas, &mut pairs, round, &mut rng);
        }
        for p in &pairs {
            assert!(p.attempts > 0);
            assert_eq!(p.accepted, p.attempts);
        }
    }

    #[test]
    fn alternating_pairs_are_attempted() {
        let m = toy();
        let ladder = TemperatureLadder::geometric(0.1, 2.0, 4).unwrap();
        let out = run_pt(&m, &ladder, &config(10_000), 3).unwrap();
        // 1000 rounds: 500 even (pairs 0, 2) and 500 odd (pair 1)
        assert_eq!(out.diagnostics.swap_attempts, vec![500, 500, 500]);
        for r in &out.diagnostics.swap_acceptance {
            assert!(*r > 0.0 && *r <= 1.0);
        }
    }

    #[test]
    fn reservoir_respects_capacity_and_bins() {
        let m = toy();
        let ladder = TemperatureLadder::geometric(0.1, 2.0, 4).unwrap();
        let mut cfg = config(20_000);
        cfg.band = Band::new(0.9, 1.6).unwrap();
        let out = run_pt(&m, &ladder, &cfg, 4).unwrap();
        assert!(!out.store.is_empty());
        for (bin, r) in out.store.bins() {
            assert!(r.items().len() <= cfg.reservoir_capacity);
            assert!(r.seen() >= r.items().len() as u64);
            for (seq, z) in r.items() {
                assert!(cfg.band.contains(*z));
                assert_eq!(cfg.grid.index(*z), bin);
                assert_eq!(m.score(seq).unwrap(), *z);
            }
        }
    }

    #[test]
    fn run_is_deterministic_across_thread_counts() {
        let m = toy();
        let ladder = TemperatureLadder::geometric(0.1, 2.0, 5).unwrap();
        let cfg = config(8_000);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_pt(&m, &ladder, &cfg, 17).unwrap())
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a.histograms, b.histograms);
        assert_eq!(a.store, b.store);
        assert_eq!(a.diagnostics, b.diagnostics);
    }

    #[test]
    fn reservoir_keeps_each_offer_with_probability_c_over_n() {
        // 20 offers into capacity 5, repeated: each offer kept ~ 1/4 of the time
        let mut kept = vec![0u32; 20];
        let seqs: Vec<TokenSequence> = (0..20).map(|i| TokenSequence::from_index(i, 4, 5)).collect();
        let mut rng = rng::stream(3, Domain::Reservoir, 0);
        let trials = 20_000;
        for _ in 0..trials {
            let mut r = Reservoir::default();
            for s in &seqs {
                r.offer(s, 0.0, 5, &mut rng);
            }
            for (s, _) in r.items() {
                kept[seqs.iter().position(|x| x == s).unwrap()] += 1;
            }
        }
        for k in kept {
            let p = k as f64 / trials as f64;
            // binomial sd = sqrt(.25*.75/20000) ~ 0.003
            assert!((p - 0.25).abs() < 0.015, "{p}");
        }
    }

    #[test]
    fn tempered_offers_cancel_the_tilt_within_a_bin() {
        // Two states in one bin, visited in Boltzmann proportion at T = 0.01.
        let grid = BinGrid::aligned(0.05).unwrap();
        let band = Band::new(0.0, 1.0).unwrap();
        let (lo, hi) = (TokenSequence::from_index(0, 4, 5), TokenSequence::from_index(1, 4, 5));
        let (z_lo, z_hi, t): (f64, f64, f64) = (0.51, 0.54, 0.01);
        let tilt = (-(z_lo - z_hi) / t).exp();
        let mut rng = rng::stream(9, Domain::Reservoir, 0);
        let mut store = RepresentativeStore::new(grid, band, 100_000).unwrap();
        for k in 0..200_000u32 {
            let low = (k as f64 + 0.5) / 200_000.0 < tilt / (1.0 + tilt);
            let (s, z) = if low { (&lo, z_lo) } else { (&hi, z_hi) };
            store.offer_tempered(s, z, t, &mut rng);
        }
        let items = store.bin(grid.index(z_lo)).unwrap().items();
        let share = items.iter().filter(|(s, _)| s == &lo).count() as f64 / items.len() as f64;
        assert!((share - 0.5).abs() < 0.03, "{share}");
        store.offer_tempered(&lo, 1.5, t, &mut rng);
        assert!(store.bin(grid.index(1.5)).is_none());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let m = toy();
        let ladder = TemperatureLadder::new(vec![0.5]).unwrap();
        let mut cfg = config(100);
        cfg.swap_interval = 0;
        assert!(run_pt(&m, &ladder, &cfg, 0).is_err());
        let mut cfg = config(100);
        cfg.steps_per_replica = 100;
        assert!(run_pt(&m, &ladder, &cfg, 0).is_err());
        let mut cfg = config(1000);
        cfg.band = Band { lo: 2.0, hi: 1.0 };
        assert!(run_pt(&m, &ladder, &cfg, 0).is_err());
    }
}
