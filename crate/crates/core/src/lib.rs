//! Compare two autoregressive sequence models by how they distribute
//! prediction differences `D = z_A - z_B` over the inputs each one maps into
//! a low-NLL band.
//!
//! The pipeline per model is: parallel-tempered Metropolis sampling
//! ([`tempering::run_pt`]), multi-histogram reweighting into an output
//! distribution ([`reweight::wham`], [`reweight::restrict`]), then weighted
//! resampling of stored representative inputs into `D` histograms
//! ([`diffstat::sample_diff`]) which are normalized by their band overlap
//! ([`diffstat::normalized_ratio`]). [`oracle`] computes every quantity
//! exactly on spaces small enough to enumerate.

pub mod annotate;
pub mod diffstat;
pub mod error;
pub mod fingerprint;
pub mod histogram;
pub mod mcmc;
pub mod oracle;
pub mod pipeline;
pub mod reweight;
pub mod rng;
pub mod seqmodel;
pub mod tempering;

pub use diffstat::{DiffResult, Direction, NormalizedRatio};
pub use error::{Error, Result};
pub use histogram::{Band, BinGrid, EnergyHistogram, Histogram};
pub use reweight::OutputDistribution;
pub use seqmodel::{Model, ScoredModel, TokenSequence};
pub use tempering::{RepresentativeStore, TemperatureLadder};
