//! Detection and classification scores: confusion-matrix arithmetic, FROC
//! curves and bootstrap confidence intervals.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{hit, Candidate};
use crate::error::{Error, Result};
use crate::volume_io::NoduleAnnotation;

/// Operating points of the detector table, in false positives per scan.
pub const FROC_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tally `(predicted, actual)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut cm = Self::default();
        for (p, a) in pairs {
            match (p, a) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, false) => cm.tn += 1,
                (false, true) => cm.fn_ += 1,
            }
        }
        cm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64, metric: &'static str) -> Result<f64> {
    if den == 0 {
        return Err(Error::UndefinedScore { metric });
    }
    Ok(num as f64 / den as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.tp, cm.tp + cm.fp, "precision")
}

pub fn recall(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.tp, cm.tp + cm.fn_, "recall")
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    ratio(cm.tp + cm.tn, cm.total(), "accuracy")
}

/// Harmonic mean of precision and recall, `2tp / (2tp + fp + fn)`.
pub fn f1(cm: &ConfusionMatrix) -> Result<f64> {
    precision(cm)?;
    recall(cm)?;
    ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_, "f1")
}

/// All four scores; fails on the first one whose denominator is zero.
pub fn derive_scores(cm: &ConfusionMatrix) -> Result<Scores> {
    Ok(Scores { precision: precision(cm)?, recall: recall(cm)?, f1: f1(cm)?, accuracy: accuracy(cm)? })
}

/// Fraction of `total` objects found.
pub fn sensitivity(found: u64, total: u64) -> Result<f64> {
    ratio(found, total, "sensitivity")
}

/// Candidates and ground truth of one scan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanDetections {
    pub candidates: Vec<Candidate>,
    pub annotations: Vec<NoduleAnnotation>,
}

/// What the FROC sweep needs from a scan: the probability of every false
/// positive and, per annotation, the best probability among the candidates
/// hitting it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub fp_probabilities: Vec<f64>,
    pub hit_probabilities: Vec<Option<f64>>,
}

impl ScanOutcome {
    /// A candidate hitting any annotation is never a false positive, even
    /// when another candidate hits the same annotation more confidently.
    pub fn new(scan: &ScanDetections) -> Result<Self> {
        let mut fp_probabilities = Vec::new();
        let mut hit_probabilities = vec![None::<f64>; scan.annotations.len()];
        for c in &scan.candidates {
            if !c.probability.is_finite() {
                return Err(Error::InvalidArgument(format!("candidate probability {} is not finite", c.probability)));
            }
            let mut any = false;
            for (k, a) in scan.annotations.iter().enumerate() {
                if hit(c, a) {
                    any = true;
                    let best = &mut hit_probabilities[k];
                    *best = Some(best.map_or(c.probability, |b| b.max(c.probability)));
                }
            }
            if !any {
                fp_probabilities.push(c.probability);
            }
        }
        Ok(Self { fp_probabilities, hit_probabilities })
    }
}

pub fn scan_outcomes(scans: &[ScanDetections]) -> Result<Vec<ScanOutcome>> {
    scans.iter().map(ScanOutcome::new).collect()
}

/// Sensitivity at each target rate for a multiset of scans.
///
/// Candidates with probability at or above a threshold are kept. For each
/// rate the lowest threshold whose mean FP count per scan does not exceed the
/// rate is used; an infinite threshold (nothing kept, sensitivity 0) is
/// always admissible.
pub fn froc_from_outcomes(scans: &[&ScanOutcome], fp_rates: &[f64]) -> Result<Vec<f64>> {
    if scans.is_empty() {
        return Err(Error::Empty("FROC needs at least one scan".into()));
    }
    let n_ann: usize = scans.iter().map(|s| s.hit_probabilities.len()).sum();
    if n_ann == 0 {
        return Err(Error::UndefinedScore { metric: "sensitivity" });
    }
    // (probability, is_false_positive), swept from the top.
    let mut events: Vec<(f64, bool)> = Vec::new();
    for s in scans {
        events.extend(s.fp_probabilities.iter().map(|&p| (p, true)));
        events.extend(s.hit_probabilities.iter().flatten().map(|&p| (p, false)));
    }
    events.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let n_scans = scans.len() as f64;
    // Cumulative (fp, hits) after each distinct threshold, starting at +inf.
    let mut steps = vec![(0usize, 0usize)];
    let (mut fp, mut hits) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let p = events[i].0;
        while i < events.len() && events[i].0 == p {
            if events[i].1 {
                fp += 1;
            } else {
                hits += 1;
            }
            i += 1;
        }
        steps.push((fp, hits));
    }
    Ok(fp_rates
        .iter()
        .map(|&rate| {
            let best = steps.iter().take_while(|(fp, _)| *fp as f64 <= rate * n_scans).last().map_or(0, |s| s.1);
            best as f64 / n_ann as f64
        })
        .collect())
}

pub fn froc(scans: &[ScanDetections], fp_rates: &[f64]) -> Result<Vec<f64>> {
    let outcomes = scan_outcomes(scans)?;
    froc_from_outcomes(&outcomes.iter().collect::<Vec<_>>(), fp_rates)
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Percentile bootstrap interval per rate. Scans are resampled with
/// replacement; resample `i` draws from its own ChaCha8 stream, so the
/// result does not depend on evaluation order. Resamples without any
/// annotation are skipped.
pub fn bootstrap_ci(outcomes: &[ScanOutcome], fp_rates: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    if outcomes.is_empty() {
        return Err(Error::Empty("bootstrap needs at least one scan".into()));
    }
    if n_resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("bootstrap needs n_resamples > 0 and 0 < level < 1, got {n_resamples} and {level}")));
    }
    let n = outcomes.len();
    let mut per_rate: Vec<Vec<f64>> = vec![Vec::with_capacity(n_resamples); fp_rates.len()];
    let mut sample: Vec<&ScanOutcome> = Vec::with_capacity(n);
    for i in 0..n_resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        sample.clear();
        sample.extend((0..n).map(|_| &outcomes[rng.gen_range(0..n)]));
        match froc_from_outcomes(&sample, fp_rates) {
            Ok(s) => {
                for (k, v) in s.into_iter().enumerate() {
                    per_rate[k].push(v);
                }
            }
            Err(Error::UndefinedScore { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if per_rate.first().is_some_and(|v| v.is_empty()) {
        return Err(Error::UndefinedScore { metric: "sensitivity" });
    }
    let tail = (1.0 - level) / 2.0;
    Ok(per_rate
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            (percentile(&v, tail), percentile(&v, 1.0 - tail))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fp_rate: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
}

impl FrocCurve {
    /// Point estimates on the full data with bootstrap bounds.
    pub fn compute(scans: &[ScanDetections], fp_rates: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<Self> {
        let outcomes = scan_outcomes(scans)?;
        let mean = froc_from_outcomes(&outcomes.iter().collect::<Vec<_>>(), fp_rates)?;
        let ci = bootstrap_ci(&outcomes, fp_rates, n_resamples, level, seed)?;
        let points = fp_rates.iter().zip(mean).zip(ci).map(|((&fp_rate, mean), (lower, upper))| FrocPoint { fp_rate, mean, lower, upper }).collect();
        Ok(Self { points })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fp_rate", "mean", "lower", "upper"])?;
        for p in &self.points {
            w.write_record([p.fp_rate.to_string(), format!("{:.4}", p.mean), format!("{:.4}", p.lower), format!("{:.4}", p.upper)])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::TimePoint;

    fn ann(x: f64) -> NoduleAnnotation {
        NoduleAnnotation { series_id: "s".into(), center_world: [x, 0.0, 0.0], diameter: 10.0, time_point: TimePoint::T1 }
    }

    fn cand(x: f64, p: f64) -> Candidate {
        Candidate { center_world: [x, 0.0, 0.0], diameter: 10.0, probability: p }
    }

    #[test]
    fn supplementary_classifier_scores() {
        let s = derive_scores(&ConfusionMatrix { tp: 129, fp: 103, tn: 75677, fn_: 15 }).unwrap();
        assert!((s.precision - 0.56).abs() < 0.005, "{}", s.precision);
        assert!((s.recall - 0.90).abs() < 0.005, "{}", s.recall);
        assert_eq!(s.precision, 129.0 / 232.0);
        assert_eq!(s.recall, 129.0 / 144.0);
    }

    #[test]
    fn undefined_scores_name_the_metric() {
        let cm = ConfusionMatrix { tp: 0, fp: 0, tn: 5, fn_: 1 };
        assert!(matches!(derive_scores(&cm), Err(Error::UndefinedScore { metric: "precision" })));
        assert!(matches!(recall(&ConfusionMatrix::default()), Err(Error::UndefinedScore { metric: "recall" })));
        let perfect = derive_scores(&ConfusionMatrix { tp: 3, fp: 0, tn: 4, fn_: 0 }).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn confusion_from_pairs() {
        let cm = ConfusionMatrix::from_pairs([(true, true), (true, false), (false, false), (false, true), (true, true)]);
        assert_eq!(cm, ConfusionMatrix { tp: 2, fp: 1, tn: 1, fn_: 1 });
    }

    #[test]
    fn perfect_detector_has_full_sensitivity_everywhere() {
        let scans: Vec<ScanDetections> = (0..4).map(|i| ScanDetections { candidates: vec![cand(i as f64, 1.0)], annotations: vec![ann(i as f64)] }).collect();
        assert_eq!(froc(&scans, &FROC_RATES).unwrap(), vec![1.0; 7]);
    }

    #[test]
    fn hits_are_not_false_positives() {
        // Two candidates on the same nodule: the weaker one must not cost an FP.
        let scan = ScanDetections { candidates: vec![cand(0.0, 0.9), cand(1.0, 0.4), cand(50.0, 0.6)], annotations: vec![ann(0.0)] };
        let o = ScanOutcome::new(&scan).unwrap();
        assert_eq!(o.fp_probabilities, vec![0.6]);
        assert_eq!(o.hit_probabilities, vec![Some(0.9)]);
    }

    #[test]
    fn froc_errors() {
        assert!(matches!(froc(&[], &FROC_RATES), Err(Error::Empty(_))));
        let no_ann = ScanDetections { candidates: vec![cand(0.0, 0.5)], annotations: vec![] };
        assert!(matches!(froc(&[no_ann], &FROC_RATES), Err(Error::UndefinedScore { .. })));
    }

    #[test]
    fn percentile_is_nearest_rank() {
        let v = [0.0, 0.5, 0.5, 1.0];
        assert_eq!(percentile(&v, 0.025), 0.0);
        assert_eq!(percentile(&v, 0.975), 1.0);
        assert_eq!(percentile(&v, 0.5), 0.5);
        assert_eq!(percentile(&v, 0.0), 0.0);
    }
}
