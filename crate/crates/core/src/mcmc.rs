//! Single-chain Metropolis sampling over `{0..V-1}^N` targeting
//! `p(x) ∝ exp(-z(x) / T)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::histogram::Histogram;
use crate::rng::StreamRng;
use crate::seqmodel::{ScoredModel, Token, TokenSequence};

/// Steps between re-scoring checks of the cached `z` in debug builds.
const RESCORE_INTERVAL: u64 = 10_000;

/// Draws the (position, token) pair of a single-site update. The current
/// token may be redrawn, which keeps the proposal symmetric.
#[inline]
pub fn draw_site<R: Rng + ?Sized>(len: usize, vocab_size: usize, rng: &mut R) -> (usize, Token) {
    let position = rng.random_range(0..len);
    let token = rng.random_range(0..vocab_size as Token);
    (position, token)
}

/// Copy of `seq` with one uniformly chosen position set to a uniformly
/// chosen token.
pub fn propose<R: Rng + ?Sized>(seq: &TokenSequence, vocab_size: usize, rng: &mut R) -> TokenSequence {
    let mut next = seq.clone();
    if !seq.is_empty() {
        let (position, token) = draw_site(seq.len(), vocab_size, rng);
        next.replace(position, token);
    }
    next
}

/// `min(1, exp(-(z_new - z_old) / T))`.
#[inline]
pub fn acceptance_probability(delta_z: f64, temperature: f64) -> f64 {
    if delta_z <= 0.0 {
        1.0
    } else {
        (-delta_z / temperature).exp()
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "temperature must be positive, got {temperature}"
        )))
    }
}

/// A chain's current sequence, its cached score and its private random stream.
#[derive(Clone, Debug)]
pub struct ChainState {
    seq: TokenSequence,
    z: f64,
    rng: StreamRng,
    step_count: u64,
    accepted: u64,
}

impl ChainState {
    pub fn new(seq: TokenSequence, model: &dyn ScoredModel, rng: StreamRng) -> Result<Self> {
        let z = model.score(&seq)?;
        Ok(Self {
            seq,
            z,
            rng,
            step_count: 0,
            accepted: 0,
        })
    }

    /// Starts from a uniformly random sequence drawn from the chain's stream.
    pub fn random(model: &dyn ScoredModel, len: usize, mut rng: StreamRng) -> Result<Self> {
        let seq = TokenSequence::random(len, model.vocab_size(), &mut rng);
        Self::new(seq, model, rng)
    }

    pub fn seq(&self) -> &TokenSequence {
        &self.seq
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.step_count == 0 {
            0.0
        } else {
            self.accepted as f64 / self.step_count as f64
        }
    }

    /// Exchanges configurations (sequence and score) with another chain.
    /// Random streams and counters stay where they are.
    pub fn swap_configuration(&mut self, other: &mut ChainState) {
        std::mem::swap(&mut self.seq, &mut other.seq);
        std::mem::swap(&mut self.z, &mut other.z);
    }
}

/// One Metropolis update at temperature `temperature`. Returns whether the
/// proposal was accepted.
pub fn metropolis_step(state: &mut ChainState, model: &dyn ScoredModel, temperature: f64) -> Result<bool> {
    check_temperature(temperature)?;
    Ok(step_unchecked(state, model, temperature))
}

#[inline]
pub(crate) fn step_unchecked(state: &mut ChainState, model: &dyn ScoredModel, temperature: f64) -> bool {
    let vocab = model.vocab_size();
    let (position, token) = draw_site(state.seq.len(), vocab, &mut state.rng);
    let previous = state.seq.replace(position, token);
    let z_new = if previous == token {
        state.z
    } else {
        model.mean_nll(state.seq.tokens())
    };
    let p = acceptance_probability(z_new - state.z, temperature);
    let accept = p >= 1.0 || state.rng.random::<f64>() < p;
    if accept {
        state.z = z_new;
        state.accepted += 1;
    } else {
        state.seq.replace(position, previous);
    }
    state.step_count += 1;
    if cfg!(debug_assertions) && state.step_count % RESCORE_INTERVAL == 0 {
        let fresh = model.mean_nll(state.seq.tokens());
        debug_assert!(
            (fresh - state.z).abs() <= 1e-12,
            "cached z {} drifted from rescored {}",
            state.z,
            fresh
        );
    }
    accept
}

/// Burn-in and thinning schedule for one chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainConfig {
    pub steps: u64,
    pub burn_in: u64,
    pub thin: u64,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.steps < self.burn_in {
            return Err(Error::Config(format!(
                "steps ({}) must not be below burn-in ({})",
                self.steps, self.burn_in
            )));
        }
        Ok(())
    }

    /// Whether the state after step `step` (1-based) is delivered.
    #[inline]
    pub fn delivers(&self, step: u64) -> bool {
        step > self.burn_in && (step - self.burn_in) % self.thin == 0
    }
}

/// Receives the states a chain delivers.
pub trait SampleSink {
    fn record(&mut self, seq: &TokenSequence, z: f64);
}

impl SampleSink for Histogram {
    fn record(&mut self, _seq: &TokenSequence, z: f64) {
        Histogram::record(self, z);
    }
}

impl<F: FnMut(&TokenSequence, f64)> SampleSink for F {
    fn record(&mut self, seq: &TokenSequence, z: f64) {
        self(seq, z)
    }
}

#[derive(Clone, Debug)]
pub struct ChainSummary {
    pub acceptance_rate: f64,
    pub delivered: u64,
    pub final_state: ChainState,
}

/// Runs a single chain from a random start drawn from `rng`.
pub fn run_chain(
    model: &dyn ScoredModel,
    temperature: f64,
    config: ChainConfig,
    seq_len: usize,
    rng: StreamRng,
    sink: &mut dyn SampleSink,
) -> Result<ChainSummary> {
    check_temperature(temperature)?;
    config.validate()?;
    let mut state = ChainState::random(model, seq_len, rng)?;
    let mut delivered = 0;
    for step in 1..=config.steps {
        step_unchecked(&mut state, model, temperature);
        if config.delivers(step) {
            sink.record(&state.seq, state.z);
            delivered += 1;
        }
    }
    Ok(ChainSummary {
        acceptance_rate: state.acceptance_rate(),
        delivered,
        final_state: state,
    })
}
