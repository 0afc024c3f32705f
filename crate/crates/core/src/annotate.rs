//! Goodness annotations on sampled inputs, and the precision and
//! proportional recall they induce over a region of `D`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::diffstat::{DRegion, DiffResult, TraceRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    score: f64,
}

/// Scores in `[0, 1]` keyed by input content id, plus the half-width of the
/// window used when averaging them around a `D` value.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    scores: HashMap<String, f64>,
    window: f64,
}

impl AnnotationSet {
    pub fn new(window: f64) -> Result<Self> {
        if !(window > 0.0 && window.is_finite()) {
            return Err(Error::Config(format!("annotation window must be positive, got {window}")));
        }
        Ok(Self {
            scores: HashMap::new(),
            window,
        })
    }

    /// Scores outside `[0, 1]` are clamped. A repeated id keeps its last score.
    pub fn insert(&mut self, id: impl Into<String>, score: f64) -> Result<()> {
        if score.is_nan() {
            return Err(Error::Parse {
                what: "annotation".into(),
                message: "score is NaN".into(),
            });
        }
        self.scores.insert(id.into(), score.clamp(0.0, 1.0));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    /// One `{"id": ..., "score": ...}` object per line; blank lines are skipped.
    pub fn parse_jsonl(text: &str, window: f64) -> Result<Self> {
        let mut set = Self::new(window)?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let a: AnnotationLine = serde_json::from_str(line)
                .map_err(|e| Error::parse("annotation", format!("line {}: {e}", n + 1)))?;
            set.insert(a.id, a.score)?;
        }
        Ok(set)
    }

    pub fn to_jsonl(&self) -> String {
        let sorted: BTreeMap<_, _> = self.scores.iter().collect();
        let mut out = String::new();
        for (id, &score) in sorted {
            let line = AnnotationLine { id: id.clone(), score };
            out.push_str(&serde_json::to_string(&line).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    /// Attach the annotations to a trace of sampled inputs.
    pub fn over<'a>(&'a self, trace: &'a [TraceRecord]) -> AnnotatedTrace<'a> {
        let mut seen = std::collections::HashSet::new();
        let points = trace
            .iter()
            .filter(|r| seen.insert(r.id.as_str()))
            .filter_map(|r| self.get(&r.id).map(|s| (r.d, s)))
            .collect();
        AnnotatedTrace { set: self, points }
    }
}

/// Distinct annotated inputs of a trace, as `(D, score)` pairs.
#[derive(Clone, Debug)]
pub struct AnnotatedTrace<'a> {
    set: &'a AnnotationSet,
    points: Vec<(f64, f64)>,
}

impl AnnotatedTrace<'_> {
    pub fn annotated_inputs(&self) -> usize {
        self.points.len()
    }

    /// Mean score of annotated inputs with `|D_i - d| < window`.
    pub fn r_of_d(&self, d: f64) -> Result<f64> {
        let w = self.set.window;
        let (sum, n) = self
            .points
            .iter()
            .filter(|(di, _)| (di - d).abs() < w)
            .fold((0.0, 0usize), |(s, n), (_, score)| (s + score, n + 1));
        if n == 0 {
            return Err(Error::Precondition(format!(
                "no annotated inputs with D in ({}, {})",
                d - w,
                d + w
            )));
        }
        Ok(sum / n as f64)
    }
}

/// Precision and proportional recall over one region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub region: DRegion,
    pub precision: f64,
    /// Recall up to the unknown number of positive inputs.
    pub proportional_recall: f64,
    /// Samples in the region.
    pub mass: u64,
    /// Non-empty D bins in the region.
    pub bins: usize,
    pub annotated_inputs: usize,
}

/// `(sum of r * count, sum of count)` over non-empty bins in the region.
fn weighted_sums(diff: &DiffResult, r: impl Fn(f64) -> Result<f64>, region: DRegion) -> Result<(f64, u64, usize)> {
    let mut numerator = 0.0;
    let mut mass = 0;
    let mut bins = 0;
    let mut gaps = Vec::new();
    for (i, c) in diff.histogram.iter() {
        let center = diff.grid().center(i);
        if !region.contains(center) {
            continue;
        }
        match r(center) {
            Ok(v) => numerator += v * c as f64,
            Err(_) => gaps.push(center),
        }
        mass += c;
        bins += 1;
    }
    if !gaps.is_empty() {
        return Err(Error::Precondition(format!("no annotations cover D bins {gaps:?}")));
    }
    Ok((numerator, mass, bins))
}

/// `sum r(D) rho(D) / sum rho(D)` over the region.
pub fn precision(diff: &DiffResult, r: impl Fn(f64) -> Result<f64>, region: DRegion) -> Result<f64> {
    let (num, mass, _) = weighted_sums(diff, r, region)?;
    if mass == 0 {
        return Err(Error::Precondition("region holds no samples".into()));
    }
    Ok(num / mass as f64)
}

/// `sum r(D) rho(D)` over the region.
pub fn recall_proportional(diff: &DiffResult, r: impl Fn(f64) -> Result<f64>, region: DRegion) -> Result<f64> {
    let (num, mass, _) = weighted_sums(diff, r, region)?;
    if mass == 0 {
        return Err(Error::Precondition("region holds no samples".into()));
    }
    Ok(num)
}

pub fn report(diff: &DiffResult, annotated: &AnnotatedTrace<'_>, region: DRegion) -> Result<AnnotationReport> {
    let (num, mass, bins) = weighted_sums(diff, |d| annotated.r_of_d(d), region)?;
    if mass == 0 {
        return Err(Error::Precondition("region holds no samples".into()));
    }
    Ok(AnnotationReport {
        region,
        precision: num / mass as f64,
        proportional_recall: num,
        mass,
        bins,
        annotated_inputs: annotated.annotated_inputs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffstat::Direction;
    use crate::histogram::{Band, BinGrid, Histogram};
    use crate::seqmodel::TokenSequence;
    use proptest::prelude::*;

    fn diff(entries: &[(f64, u64)]) -> DiffResult {
        let grid = BinGrid::centered(0.05).unwrap();
        DiffResult::new(
            Direction::AToB,
            Histogram::from_counts(grid, entries),
            0,
            Band::new(1.0, 2.0).unwrap(),
        )
        .unwrap()
    }

    fn record(i: u32, d: f64) -> TraceRecord {
        let tokens = TokenSequence::new(vec![i % 10, i / 10], 10).unwrap();
        TraceRecord {
            id: tokens.content_id(),
            z_a: 0.0,
            z_b: -d,
            d,
            tokens,
        }
    }

    fn hand_r(d: f64) -> Result<f64> {
        Ok(if d < -0.5 { 1.0 } else { 0.5 })
    }

    #[test]
    fn two_bin_hand_case() {
        let d = diff(&[(-0.8, 10), (-0.3, 30)]);
        let region = DRegion::Below(0.0);
        assert_eq!(precision(&d, hand_r, region).unwrap(), 0.625);
        assert_eq!(recall_proportional(&d, hand_r, region).unwrap(), 25.0);
    }

    #[test]
    fn constant_scores() {
        let d = diff(&[(-0.8, 10), (-0.3, 30), (0.4, 7)]);
        for region in [DRegion::Below(0.0), DRegion::Above(0.0), DRegion::All] {
            assert_eq!(precision(&d, |_| Ok(1.0), region).unwrap(), 1.0);
            assert_eq!(precision(&d, |_| Ok(0.0), region).unwrap(), 0.0);
            assert_eq!(recall_proportional(&d, |_| Ok(0.0), region).unwrap(), 0.0);
        }
    }

    #[test]
    fn empty_region_and_gaps_are_errors() {
        let d = diff(&[(-0.8, 10)]);
        assert!(precision(&d, |_| Ok(1.0), DRegion::Above(0.0)).is_err());
        let err = precision(&d, |_| Err(Error::Precondition("x".into())), DRegion::All).unwrap_err();
        assert!(err.to_string().contains("-0.8"));
    }

    #[test]
    fn r_of_d_window_average() {
        let trace: Vec<_> = (0..40).map(|i| record(i, -1.0 + 0.05 * i as f64)).collect();
        let mut set = AnnotationSet::new(0.1).unwrap();
        for r in &trace {
            set.insert(r.id.clone(), if r.d < -0.5 { 1.0 } else { 0.0 }).unwrap();
        }
        let at = set.over(&trace);
        assert_eq!(at.r_of_d(-0.8).unwrap(), 1.0);
        assert!(at.r_of_d(-2.0).is_err());
        // neighbours at -0.55 and -0.5 sit on either side of the step
        let mixed = at.r_of_d(-0.525).unwrap();
        assert_eq!(mixed, 0.5);
    }

    #[test]
    fn open_window_excludes_edges() {
        let trace = vec![record(1, 0.0), record(2, 0.5)];
        let mut set = AnnotationSet::new(0.5).unwrap();
        set.insert(trace[0].id.clone(), 1.0).unwrap();
        set.insert(trace[1].id.clone(), 0.0).unwrap();
        assert_eq!(set.over(&trace).r_of_d(0.0).unwrap(), 1.0);
    }

    #[test]
    fn jsonl_roundtrip_and_clamping() {
        let set = AnnotationSet::parse_jsonl("{\"id\":\"a\",\"score\":1.5}\n\n{\"id\":\"b\",\"score\":-2}\n", 0.05).unwrap();
        assert_eq!(set.get("a"), Some(1.0));
        assert_eq!(set.get("b"), Some(0.0));
        let again = AnnotationSet::parse_jsonl(&set.to_jsonl(), 0.05).unwrap();
        assert_eq!(again, set);
        assert!(AnnotationSet::parse_jsonl("{\"id\":\"a\"}", 0.05).is_err());
    }

    #[test]
    fn report_uses_trace_annotations() {
        let trace = vec![record(1, -0.8), record(1, -0.8), record(2, -0.3)];
        let mut set = AnnotationSet::new(0.05).unwrap();
        set.insert(trace[0].id.clone(), 1.0).unwrap();
        set.insert(trace[2].id.clone(), 0.5).unwrap();
        let at = set.over(&trace);
        assert_eq!(at.annotated_inputs(), 2);
        let rep = report(&diff(&[(-0.8, 10), (-0.3, 30)]), &at, DRegion::Below(0.0)).unwrap();
        assert_eq!(rep.precision, 0.625);
        assert_eq!(rep.proportional_recall, 25.0);
        assert_eq!(rep.mass, 40);
    }

    proptest! {
        #[test]
        fn precision_bounded_and_recall_linear(
            counts in proptest::collection::vec(1u64..1000, 1..8),
            scores in proptest::collection::vec(0.0f64..=1.0, 8),
            bump in 0usize..8,
        ) {
            let entries: Vec<_> = counts.iter().enumerate().map(|(i, &c)| (-0.1 * (i + 1) as f64, c)).collect();
            let d = diff(&entries);
            let doubled = diff(&entries.iter().map(|&(x, c)| (x, 2 * c)).collect::<Vec<_>>());
            let r = |x: f64| Ok(scores[((-x / 0.1).round() as usize - 1) % 8]);
            let region = DRegion::Below(0.0);
            let p = precision(&d, r, region).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
            let rec = recall_proportional(&d, r, region).unwrap();
            let rec2 = recall_proportional(&doubled, r, region).unwrap();
            prop_assert!((rec2 - 2.0 * rec).abs() <= 1e-9 * rec.max(1.0));

            let mut raised = scores.clone();
            raised[bump] = (raised[bump] + 0.3).min(1.0);
            let r2 = |x: f64| Ok(raised[((-x / 0.1).round() as usize - 1) % 8]);
            prop_assert!(precision(&d, r2, region).unwrap() >= p - 1e-12);
            prop_assert!(recall_proportional(&d, r2, region).unwrap() >= rec - 1e-9);
        }
    }
}
