//! Multi-histogram reweighting (WHAM) of tempered energy histograms into an
//! unbiased output distribution, and its restriction to a band.
//!
//! Everything is computed in the log domain. With `H_k(b)` the counts of
//! replica `k` in bin `b`, `n_k` its total, `z_b` the bin center and `f_k`
//! the replica free energies, the self-consistent equations are
//!
//! ```text
//! log rho(b) = log sum_k H_k(b) - logsumexp_k(log n_k + f_k - beta_k z_b)
//! f_k        = -logsumexp_b(log rho(b) - beta_k z_b)
//! ```
//!
//! with the gauge fixed by `f_0 = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::histogram::{Band, BinGrid, EnergyHistogram};

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Binned log-density over `z`, defined up to an additive constant until it
/// is restricted to a band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDistribution {
    grid: BinGrid,
    first: i64,
    /// `-inf` marks unsupported bins.
    #[serde(with = "log_density_serde")]
    log_density: Vec<f64>,
    /// Set once the distribution is normalized over a band.
    band: Option<Band>,
}

mod log_density_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| if x.is_finite() { Some(*x) } else { None })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

impl OutputDistribution {
    /// Builds a distribution from `(bin index, log density)` pairs.
    pub fn from_log_density(grid: BinGrid, entries: &[(i64, f64)]) -> Result<Self> {
        let Some(first) = entries.iter().map(|e| e.0).min() else {
            return Err(Error::Precondition("distribution has no supported bins".into()));
        };
        let last = entries.iter().map(|e| e.0).max().unwrap();
        let mut log_density = vec![f64::NEG_INFINITY; (last - first + 1) as usize];
        for &(i, v) in entries {
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::Precondition(format!("invalid log density {v} in bin {i}")));
            }
            log_density[(i - first) as usize] = v;
        }
        Ok(Self {
            grid,
            first,
            log_density,
            band: None,
        })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn band(&self) -> Option<&Band> {
        self.band.as_ref()
    }

    pub fn is_normalized(&self) -> bool {
        self.band.is_some()
    }

    pub fn log_density(&self, index: i64) -> f64 {
        if index < self.first {
            return f64::NEG_INFINITY;
        }
        self.log_density
            .get((index - self.first) as usize)
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Supported bins and their log density, in index order.
    pub fn support(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.log_density
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(move |(i, &v)| (self.first + i as i64, v))
    }

    /// Bin probabilities after normalizing over the support.
    pub fn probabilities(&self) -> Vec<(i64, f64)> {
        let values: Vec<f64> = self.support().map(|(_, v)| v).collect();
        let norm = log_sum_exp(values.iter().copied());
        self.support().map(|(i, v)| (i, (v - norm).exp())).collect()
    }

    /// Sums groups of `parts` adjacent bins into the bins of `target`, which
    /// must be this grid with every `parts` bins merged.
    pub fn coarsen(&self, target: BinGrid, parts: u32) -> Result<OutputDistribution> {
        if !self.grid.same_as(&target.subdivide(parts)?) {
            return Err(Error::Binning(format!(
                "{:?} is not {:?} split into {parts} parts",
                self.grid, target
            )));
        }
        let p = parts as i64;
        let mut groups: Vec<(i64, Vec<f64>)> = Vec::new();
        for (i, v) in self.support() {
            let c = i.div_euclid(p);
            match groups.last_mut() {
                Some((last, vals)) if *last == c => vals.push(v),
                _ => groups.push((c, vec![v])),
            }
        }
        let entries: Vec<(i64, f64)> = groups
            .into_iter()
            .map(|(c, vals)| (c, log_sum_exp(vals.into_iter())))
            .collect();
        let mut out = OutputDistribution::from_log_density(target, &entries)?;
        out.band = self.band;
        Ok(out)
    }

    /// Unsupported bins lying between supported ones.
    pub fn gaps(&self) -> Vec<i64> {
        let Some(last) = self.support().last().map(|e| e.0) else {
            return Vec::new();
        };
        (self.first..last)
            .filter(|&i| !self.log_density(i).is_finite())
            .collect()
    }

    /// Whether two distributions agree up to one additive constant on a
    /// common support, within `tol`.
    pub fn shift_equivalent(&self, other: &OutputDistribution, tol: f64) -> bool {
        let pairs: Vec<(f64, f64)> = self
            .support()
            .map(|(i, v)| (v, other.log_density(i)))
            .collect();
        if pairs.iter().any(|(_, w)| !w.is_finite()) || other.support().count() != pairs.len() {
            return false;
        }
        let shift = pairs.iter().map(|(v, w)| v - w).sum::<f64>() / pairs.len() as f64;
        pairs.iter().all(|(v, w)| (v - w - shift).abs() <= tol)
    }

    /// Plot-ready CSV `bin_center,log_density,normalized_probability`; the
    /// last column is only present after [`restrict`].
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.is_normalized() {
            out.push_str("bin_center,log_density,normalized_probability\n");
            for (i, v) in self.support() {
                out.push_str(&format!("{},{},{}\n", self.grid.center(i), v, v.exp()));
            }
        } else {
            out.push_str("bin_center,log_density\n");
            for (i, v) in self.support() {
                out.push_str(&format!("{},{}\n", self.grid.center(i), v));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhamOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for WhamOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WhamResult {
    pub distribution: OutputDistribution,
    /// Replica free energies, gauge `f_0 = 0`.
    pub free_energies: Vec<f64>,
    pub iterations: usize,
    /// `max_k |f_k^new - f_k^old|` after each iteration.
    pub residuals: Vec<f64>,
    /// Empty bins lying between supported bins.
    pub gaps: Vec<i64>,
}

/// Combines per-temperature histograms into one density estimate.
pub fn wham(histograms: &[EnergyHistogram], betas: &[f64], options: WhamOptions) -> Result<WhamResult> {
    if histograms.len() != betas.len() {
        return Err(Error::Precondition(format!(
            "{} histograms but {} inverse temperatures",
            histograms.len(),
            betas.len()
        )));
    }
    if !(options.tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", options.tol)));
    }
    let Some(first) = histograms.first() else {
        return Err(Error::Precondition("no histograms to reweight".into()));
    };
    let grid = *first.grid();
    if let Some(h) = histograms.iter().find(|h| !h.grid().same_as(&grid)) {
        return Err(Error::Binning(format!("{:?} differs from {:?}", h.grid(), grid)));
    }
    let (lo, hi) = histograms
        .iter()
        .filter_map(|h| h.index_range())
        .fold(None, |acc: Option<(i64, i64)>, (a, b)| match acc {
            None => Some((a, b)),
            Some((x, y)) => Some((x.min(a), y.max(b))),
        })
        .ok_or_else(|| Error::Precondition("all histograms are empty".into()))?;

    let bins = (hi - lo + 1) as usize;
    let centers: Vec<f64> = (0..bins).map(|b| grid.center(lo + b as i64)).collect();
    let log_pooled: Vec<f64> = (0..bins)
        .map(|b| {
            let total: u64 = histograms.iter().map(|h| h.count(lo + b as i64)).sum();
            if total == 0 {
                f64::NEG_INFINITY
            } else {
                (total as f64).ln()
            }
        })
        .collect();
    let log_n: Vec<f64> = histograms
        .iter()
        .map(|h| if h.is_empty() { f64::NEG_INFINITY } else { (h.total() as f64).ln() })
        .collect();

    let k = histograms.len();
    let mut f = vec![0.0; k];
    let mut log_rho = vec![f64::NEG_INFINITY; bins];
    let mut residuals = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        for b in 0..bins {
            if log_pooled[b] == f64::NEG_INFINITY {
                continue;
            }
            let z = centers[b];
            let denom = log_sum_exp((0..k).map(|j| log_n[j] + f[j] - betas[j] * z));
            log_rho[b] = log_pooled[b] - denom;
        }
        let mut f_new: Vec<f64> = (0..k)
            .map(|j| {
                -log_sum_exp(
                    (0..bins)
                        .filter(|&b| log_rho[b].is_finite())
                        .map(|b| log_rho[b] - betas[j] * centers[b]),
                )
            })
            .collect();
        let gauge = f_new[0];
        for v in f_new.iter_mut() {
            *v -= gauge;
        }
        let residual = f
            .iter()
            .zip(&f_new)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        residuals.push(residual);
        f = f_new;
        if residual < options.tol {
            break;
        }
        if iterations >= options.max_iter || !residual.is_finite() {
            return Err(Error::Convergence { iterations, residual });
        }
    }

    let distribution = OutputDistribution {
        grid,
        first: lo,
        log_density: log_rho,
        band: None,
    };
    Ok(WhamResult {
        gaps: distribution.gaps(),
        distribution,
        free_energies: f,
        iterations,
        residuals,
    })
}

/// Keeps the bins whose centers lie in `band` and normalizes them to sum to
/// one. Empty bins inside the band carry zero probability.
pub fn restrict(dist: &OutputDistribution, band: &Band) -> Result<OutputDistribution> {
    let kept: Vec<(i64, f64)> = dist
        .support()
        .filter(|&(i, _)| band.contains(dist.grid.center(i)))
        .collect();
    if kept.is_empty() {
        return Err(Error::Precondition(format!(
            "band [{}, {}) does not intersect the distribution's support",
            band.lo, band.hi
        )));
    }
    let norm = log_sum_exp(kept.iter().map(|e| e.1));
    let normalized: Vec<(i64, f64)> = kept.iter().map(|&(i, v)| (i, v - norm)).collect();
    let mut out = OutputDistribution::from_log_density(dist.grid, &normalized)?;
    out.band = Some(*band);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram::Histogram;
    use proptest::prelude::*;

    fn grid() -> BinGrid {
        BinGrid::aligned(0.05).unwrap()
    }

    fn hist(entries: &[(f64, u64)]) -> Histogram {
        Histogram::from_counts(grid(), entries)
    }

    #[test]
    fn infinite_temperature_returns_the_histogram() {
        let h = hist(&[(1.02, 10), (1.07, 40), (1.12, 25)]);
        let r = wham(&[h.clone()], &[0.0], WhamOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        let expected = OutputDistribution::from_log_density(
            grid(),
            &h.iter().map(|(i, c)| (i, (c as f64).ln())).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(r.distribution.shift_equivalent(&expected, 1e-12));
    }

    #[test]
    fn single_temperature_is_exponential_deweighting() {
        let beta = 4.0;
        let h = hist(&[(1.02, 10), (1.07, 40), (1.12, 25), (1.3, 3)]);
        let r = wham(&[h.clone()], &[beta], WhamOptions::default()).unwrap();
        let expected = OutputDistribution::from_log_density(
            grid(),
            &h.iter()
                .map(|(i, c)| (i, (c as f64).ln() + beta * grid().center(i)))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(r.distribution.shift_equivalent(&expected, 1e-10));
        assert_eq!(r.gaps.len(), 3);
    }

    /// Exact expected histograms of a known density recover that density.
    #[test]
    fn recovers_density_from_exact_tempered_histograms() {
        let log_rho: Vec<(i64, f64)> = (0..40).map(|i| (i, 0.3 * i as f64 - 0.004 * (i * i) as f64)).collect();
        let betas = [0.5, 2.0, 6.0, 15.0];
        let hists: Vec<Histogram> = betas
            .iter()
            .map(|&b| {
                let w: Vec<f64> = log_rho.iter().map(|&(i, v)| v - b * grid().center(i)).collect();
                let norm = log_sum_exp(w.iter().copied());
                let mut h = Histogram::new(grid());
                for (&(i, _), lw) in log_rho.iter().zip(&w) {
                    let c = (1e8 * (lw - norm).exp()).round() as u64;
                    h.add(i, c);
                }
                h
            })
            .collect();
        let r = wham(&hists, &betas, WhamOptions::default()).unwrap();
        let truth = OutputDistribution::from_log_density(grid(), &log_rho).unwrap();
        assert!(r.distribution.shift_equivalent(&truth, 1e-3));
        assert!(r.residuals.last().unwrap() < &1e-8);
    }

    #[test]
    fn mismatched_inputs_are_errors() {
        let a = hist(&[(1.0, 3)]);
        let b = Histogram::from_counts(BinGrid::aligned(0.1).unwrap(), &[(1.0, 3)]);
        assert!(matches!(wham(&[a.clone(), b], &[1.0, 2.0], WhamOptions::default()), Err(Error::Binning(_))));
        assert!(wham(&[a.clone()], &[1.0, 2.0], WhamOptions::default()).is_err());
        assert!(wham(&[Histogram::new(grid())], &[1.0], WhamOptions::default()).is_err());
        assert!(wham(&[], &[], WhamOptions::default()).is_err());
    }

    #[test]
    fn non_convergence_reports_residual() {
        let a = hist(&[(1.0, 30), (1.5, 10), (2.0, 1)]);
        let b = hist(&[(1.0, 3), (1.5, 10), (2.0, 30)]);
        let err = wham(&[a, b], &[10.0, 0.1], WhamOptions { tol: 1e-14, max_iter: 2 }).unwrap_err();
        match err {
            Error::Convergence { iterations, residual } => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn coarsen_sums_groups_of_fine_bins() {
        let fine = grid().subdivide(2).unwrap();
        let d = OutputDistribution::from_log_density(fine, &[(20, 0.0), (21, 1.0_f64.ln()), (23, 3.0_f64.ln())]).unwrap();
        let c = d.coarsen(grid(), 2).unwrap();
        assert!((c.log_density(10) - 2.0_f64.ln()).abs() < 1e-12);
        assert!((c.log_density(11) - 3.0_f64.ln()).abs() < 1e-12);
        assert_eq!(c.log_density(12), f64::NEG_INFINITY);
        assert!(d.coarsen(grid(), 3).is_err());
    }

    #[test]
    fn gaps_are_interior_empty_bins() {
        let d = OutputDistribution::from_log_density(grid(), &[(3, 0.0), (6, 0.0)]).unwrap();
        assert_eq!(d.gaps(), vec![4, 5]);
        let d = OutputDistribution::from_log_density(grid(), &[(3, 0.0), (4, 0.0)]).unwrap();
        assert!(d.gaps().is_empty());
    }

    #[test]
    fn restrict_cases() {
        let d = OutputDistribution::from_log_density(grid(), &[(20, 0.0), (21, 1.0), (22, 2.0)]).unwrap();
        let full = restrict(&d, &Band::new(0.0, 5.0).unwrap()).unwrap();
        assert!(full.shift_equivalent(&d, 1e-12));
        let total: f64 = full.probabilities().iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((full.support().map(|e| e.1.exp()).sum::<f64>() - 1.0).abs() < 1e-12);

        let one = restrict(&d, &Band::new(1.05, 1.1).unwrap()).unwrap();
        assert_eq!(one.support().collect::<Vec<_>>(), vec![(21, 0.0)]);

        assert!(restrict(&d, &Band::new(3.0, 4.0).unwrap()).is_err());
        assert!(full.to_csv().starts_with("bin_center,log_density,normalized_probability"));
    }

    proptest! {
        #[test]
        fn scaling_counts_only_shifts_the_estimate(scale in 1u64..20, seed in 0u64..1000) {
            let base: Vec<Histogram> = (0..3)
                .map(|k| {
                    let entries: Vec<(f64, u64)> = (0..12)
                        .map(|i| (0.5 + 0.05 * i as f64 + 0.01, 1 + (seed * 31 + i * 7 + k * 13) % 50))
                        .collect();
                    hist(&entries)
                })
                .collect();
            let scaled: Vec<Histogram> = base
                .iter()
                .map(|h| {
                    let mut s = Histogram::new(grid());
                    for (i, c) in h.iter() {
                        s.add(i, c * scale);
                    }
                    s
                })
                .collect();
            let betas = [1.0, 3.0, 8.0];
            let a = wham(&base, &betas, WhamOptions::default()).unwrap();
            let b = wham(&scaled, &betas, WhamOptions::default()).unwrap();
            prop_assert!(a.distribution.shift_equivalent(&b.distribution, 1e-7));
            let band = Band::new(0.6, 1.0).unwrap();
            let ra = restrict(&a.distribution, &band).unwrap();
            let rb = restrict(&b.distribution, &band).unwrap();
            for ((i, x), (j, y)) in ra.support().zip(rb.support()) {
                prop_assert_eq!(i, j);
                prop_assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
