//! Uniform binning shared by energy histograms, output distributions and
//! prediction-difference histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniform grid of half-open bins `[origin + i*width, origin + (i+1)*width)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub width: f64,
    pub origin: f64,
}

impl BinGrid {
    pub fn new(width: f64, origin: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) || !origin.is_finite() {
            return Err(Error::Config(format!(
                "bin width must be positive and finite (got width={width}, origin={origin})"
            )));
        }
        Ok(Self { width, origin })
    }

    /// Grid whose bin edges fall on multiples of `width`.
    pub fn aligned(width: f64) -> Result<Self> {
        Self::new(width, 0.0)
    }

    /// Grid whose bin *centers* fall on multiples of `width`, so that one bin
    /// is centered exactly on zero.
    pub fn centered(width: f64) -> Result<Self> {
        Self::new(width, -0.5 * width)
    }

    #[inline]
    pub fn index(&self, value: f64) -> i64 {
        ((value - self.origin) / self.width).floor() as i64
    }

    /// Bin midpoint, rounded to 12 decimals so that exported centers read
    /// cleanly.
    #[inline]
    pub fn center(&self, index: i64) -> f64 {
        let c = self.origin + (index as f64 + 0.5) * self.width;
        (c * 1e12).round() / 1e12
    }

    pub fn lower(&self, index: i64) -> f64 {
        self.origin + index as f64 * self.width
    }

    pub fn upper(&self, index: i64) -> f64 {
        self.origin + (index + 1) as f64 * self.width
    }

    /// The grid with `parts` equal bins inside each bin of this one.
    pub fn subdivide(&self, parts: u32) -> Result<BinGrid> {
        if parts == 0 {
            return Err(Error::Config("bins must be split into at least one part".into()));
        }
        BinGrid::new(self.width / parts as f64, self.origin)
    }

    /// Index of `value` on `self.subdivide(parts)`, clamped so that the fine
    /// bin always lies inside the coarse bin `self.index(value)`.
    #[inline]
    pub fn sub_index(&self, value: f64, parts: u32) -> i64 {
        let coarse = self.index(value);
        let p = parts as i64;
        let within = ((value - self.lower(coarse)) / self.width * parts as f64).floor() as i64;
        coarse * p + within.clamp(0, p - 1)
    }

    pub fn same_as(&self, other: &BinGrid) -> bool {
        (self.width - other.width).abs() <= 1e-12 * self.width
            && (self.origin - other.origin).abs() <= 1e-12 * self.width.max(1.0)
    }
}

/// The output band `Z = [lo, hi)` treated as the meaningful input space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::Precondition(format!(
                "empty band: z- = {lo} must be below z+ = {hi}"
            )));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn contains(&self, z: f64) -> bool {
        z >= self.lo && z < self.hi
    }

    /// Bin indices of `grid` whose centers lie in the band.
    pub fn bin_range(&self, grid: &BinGrid) -> std::ops::RangeInclusive<i64> {
        let mut first = grid.index(self.lo);
        while grid.center(first) < self.lo {
            first += 1;
        }
        let mut last = grid.index(self.hi);
        while grid.center(last) >= self.hi {
            last -= 1;
        }
        first..=last
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Integer counts on a [`BinGrid`], stored densely between the lowest and
/// highest touched bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    grid: BinGrid,
    first: i64,
    counts: Vec<u64>,
    total: u64,
}

/// Histogram of model outputs `z`.
pub type EnergyHistogram = Histogram;

impl Histogram {
    pub fn new(grid: BinGrid) -> Self {
        Self {
            grid,
            first: 0,
            counts: Vec::new(),
            total: 0,
        }
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn record(&mut self, value: f64) {
        let index = self.grid.index(value);
        self.add(index, 1);
    }

    pub fn add(&mut self, index: i64, count: u64) {
        if count == 0 {
            return;
        }
        if self.counts.is_empty() {
            self.first = index;
            self.counts.push(0);
        } else if index < self.first {
            let grow = (self.first - index) as usize;
            let mut counts = vec![0; grow];
            counts.extend_from_slice(&self.counts);
            self.counts = counts;
            self.first = index;
        } else {
            let needed = (index - self.first) as usize + 1;
            if needed > self.counts.len() {
                self.counts.resize(needed, 0);
            }
        }
        self.counts[(index - self.first) as usize] += count;
        self.total += count;
    }

    pub fn count(&self, index: i64) -> u64 {
        if index < self.first {
            return 0;
        }
        self.counts
            .get((index - self.first) as usize)
            .copied()
            .unwrap_or(0)
    }

    /// Non-zero bins in increasing index order.
    pub fn iter(&self) -> impl Iterator<Item = (i64, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(i, &c)| (self.first + i as i64, c))
    }

    /// Lowest and highest non-empty bin.
    pub fn index_range(&self) -> Option<(i64, i64)> {
        let lo = self.iter().next()?.0;
        let hi = self.iter().last()?.0;
        Some((lo, hi))
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::Binning(format!(
                "cannot merge grid {:?} into {:?}",
                other.grid, self.grid
            )));
        }
        for (index, count) in other.iter() {
            self.add(index, count);
        }
        Ok(())
    }

    /// Sum of counts over bins whose center satisfies `keep`.
    pub fn sum_where(&self, mut keep: impl FnMut(f64) -> bool) -> u64 {
        self.iter()
            .filter(|&(i, _)| keep(self.grid.center(i)))
            .map(|(_, c)| c)
            .sum()
    }

    /// Builds a histogram directly from `(bin center value, count)` pairs.
    pub fn from_counts(grid: BinGrid, entries: &[(f64, u64)]) -> Self {
        let mut hist = Self::new(grid);
        for &(value, count) in entries {
            hist.add(grid.index(value), count);
        }
        hist
    }

    /// Plot-ready CSV rows `bin_center,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_center,count\n");
        for (i, c) in self.iter() {
            out.push_str(&format!("{},{}\n", self.grid.center(i), c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centered_grid_has_a_zero_bin() {
        let g = BinGrid::centered(0.05).unwrap();
        assert_eq!(g.index(0.0), 0);
        assert_eq!(g.center(0), 0.0);
        assert_eq!(g.index(-0.3), -6);
        assert!((g.center(-6) + 0.3).abs() < 1e-12);
        assert_eq!(g.index(0.024), 0);
        assert_eq!(g.index(-0.024), 0);
    }

    #[test]
    fn band_rejects_empty_interval() {
        assert!(Band::new(2.0, 2.0).is_err());
        assert!(Band::new(2.5, 2.0).is_err());
    }

    #[test]
    fn band_bin_range_matches_centers() {
        let g = BinGrid::aligned(0.05).unwrap();
        let band = Band::new(1.8, 2.8).unwrap();
        let r = band.bin_range(&g);
        assert_eq!(r.clone().count(), 20);
        for i in r {
            assert!(band.contains(g.center(i)));
        }
    }

    #[test]
    fn merge_rejects_other_grid() {
        let mut a = Histogram::new(BinGrid::aligned(0.05).unwrap());
        let b = Histogram::new(BinGrid::aligned(0.1).unwrap());
        assert!(a.merge(&b).is_err());
    }

    #[test]
    fn sub_index_stays_inside_the_coarse_bin() {
        let g = BinGrid::aligned(0.05).unwrap();
        let fine = g.subdivide(5).unwrap();
        assert!((fine.width - 0.01).abs() < 1e-15);
        assert_eq!(g.sub_index(1.0, 5), 100);
        assert_eq!(g.sub_index(1.049_999, 5), 104);
        assert_eq!(g.sub_index(1.027, 5), 102);
        assert!(g.subdivide(0).is_err());
        assert_eq!(g.sub_index(2.3, 1), g.index(2.3));
    }

    proptest! {
        #[test]
        fn sub_index_refines_index(v in -20.0f64..20.0, parts in 1u32..80) {
            let g = BinGrid::aligned(0.05).unwrap();
            prop_assert_eq!(g.sub_index(v, parts).div_euclid(parts as i64), g.index(v));
        }

        #[test]
        fn counts_sum_to_total(values in proptest::collection::vec(-50.0f64..50.0, 0..200)) {
            let mut h = Histogram::new(BinGrid::aligned(0.37).unwrap());
            for &v in &values {
                h.record(v);
            }
            prop_assert_eq!(h.total(), values.len() as u64);
            prop_assert_eq!(h.iter().map(|(_, c)| c).sum::<u64>(), h.total());
            for &v in &values {
                let i = h.grid().index(v);
                prop_assert!(h.grid().lower(i) <= v + 1e-9 && v < h.grid().upper(i) + 1e-9);
            }
        }

        #[test]
        fn merge_is_order_independent(
            xs in proptest::collection::vec(-5.0f64..5.0, 0..60),
            ys in proptest::collection::vec(-5.0f64..5.0, 0..60),
        ) {
            let g = BinGrid::centered(0.05).unwrap();
            let mut a = Histogram::new(g);
            let mut b = Histogram::new(g);
            xs.iter().for_each(|&v| a.record(v));
            ys.iter().for_each(|&v| b.record(v));
            let mut ab = a.clone();
            ab.merge(&b).unwrap();
            let mut ba = b.clone();
            ba.merge(&a).unwrap();
            prop_assert_eq!(ab.iter().collect::<Vec<_>>(), ba.iter().collect::<Vec<_>>());
        }
    }
}
