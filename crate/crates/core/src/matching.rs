//! Re-identification of a nodule between two time points: every T1
//! candidate is paired with every T2 candidate and the best-scoring pair wins.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{distance, hit, Candidate};
use crate::error::{Error, Result};
use crate::siamese::{LossKind, SiameseModel};
use crate::volume_io::{extract_patch, NoduleAnnotation, Patch, Volume, NODULE_PATCH_SIDE};

/// Anything that scores every `(t1[i], t2[j])` patch pair.
pub trait PairScorer {
    fn score_table(&self, t1: &[&Patch], t2: &[&Patch]) -> Result<Vec<Vec<f64>>>;

    /// Whether larger scores mean "more likely the same nodule".
    fn higher_is_better(&self) -> bool;
}

impl PairScorer for SiameseModel {
    fn score_table(&self, t1: &[&Patch], t2: &[&Patch]) -> Result<Vec<Vec<f64>>> {
        let a = self.embed(t1)?;
        let b = self.embed(t2)?;
        SiameseModel::score_table(self, &a, &b)
    }

    fn higher_is_better(&self) -> bool {
        self.config.loss == LossKind::Bce
    }
}

/// Best entry of a score table; ties go to the lowest T1 index, then the
/// lowest T2 index.
pub fn select_pair(table: &[Vec<f64>], higher_is_better: bool) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, row) in table.iter().enumerate() {
        for (j, &s) in row.iter().enumerate() {
            let better = match best {
                None => true,
                Some((_, _, b)) => {
                    if higher_is_better {
                        s > b
                    } else {
                        s < b
                    }
                }
            };
            if better {
                best = Some((i, j, s));
            }
        }
    }
    best.map(|(i, j, _)| (i, j))
}

/// Where the T1 side of a match comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum T1Source {
    /// Detector candidates at both time points.
    #[default]
    Detector,
    /// The annotated T1 nodule as the only T1 candidate.
    Annotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub case_id: String,
    pub t1: Candidate,
    pub t2: Candidate,
    pub t1_index: usize,
    pub t2_index: usize,
    pub score: f64,
    pub correct: Option<bool>,
    pub elapsed_s: f64,
}

fn patches(volume: &Volume, cands: &[Candidate]) -> Result<Vec<Patch>> {
    cands.iter().map(|c| extract_patch(volume, c.center_world, NODULE_PATCH_SIDE)).collect()
}

/// Score all `|T1| x |T2|` candidate pairs and keep the best one.
pub fn match_case<S: PairScorer + ?Sized>(
    scorer: &S,
    case_id: &str,
    volume_t1: &Volume,
    volume_t2: &Volume,
    candidates_t1: &[Candidate],
    candidates_t2: &[Candidate],
) -> Result<MatchResult> {
    if candidates_t1.is_empty() {
        return Err(Error::NoCandidates("T1"));
    }
    if candidates_t2.is_empty() {
        return Err(Error::NoCandidates("T2"));
    }
    let start = Instant::now();
    let p1 = patches(volume_t1, candidates_t1)?;
    let p2 = patches(volume_t2, candidates_t2)?;
    let table = scorer.score_table(&p1.iter().collect::<Vec<_>>(), &p2.iter().collect::<Vec<_>>())?;
    let (i, j) = select_pair(&table, scorer.higher_is_better()).expect("non-empty table");
    Ok(MatchResult {
        case_id: case_id.to_string(),
        t1: candidates_t1[i].clone(),
        t2: candidates_t2[j].clone(),
        t1_index: i,
        t2_index: j,
        score: table[i][j],
        correct: None,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// How a chosen T2 candidate is judged against the annotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceRule {
    /// Strictly within the annotated radius.
    #[default]
    Radius,
    /// Strictly closer than a fixed distance in mm.
    Within(f64),
}

impl DistanceRule {
    pub fn accepts(&self, c: &Candidate, a: &NoduleAnnotation) -> bool {
        match *self {
            DistanceRule::Radius => hit(c, a),
            DistanceRule::Within(mm) => distance(c.center_world, a.center_world) < mm,
        }
    }

    pub fn label(&self) -> String {
        match self {
            DistanceRule::Radius => "radius".into(),
            DistanceRule::Within(mm) => format!("{mm} mm"),
        }
    }
}

/// The distance rules of the candidate-density table.
pub const DENSITY_RULES: [DistanceRule; 8] = [
    DistanceRule::Radius,
    DistanceRule::Within(30.0),
    DistanceRule::Within(20.0),
    DistanceRule::Within(15.0),
    DistanceRule::Within(10.0),
    DistanceRule::Within(5.0),
    DistanceRule::Within(3.0),
    DistanceRule::Within(1.5),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingSummary {
    pub correct: usize,
    pub incorrect: usize,
    pub accuracy: f64,
    pub total_time_s: f64,
}

/// Mark each result correct or not and summarize.
pub fn evaluate_matching(results: &mut [MatchResult], annotations_t2: &[NoduleAnnotation], rule: DistanceRule) -> Result<MatchingSummary> {
    if results.is_empty() {
        return Err(Error::Empty("no match results".into()));
    }
    let by_id: HashMap<&str, &NoduleAnnotation> = annotations_t2.iter().map(|a| (a.series_id.as_str(), a)).collect();
    let mut correct = 0;
    let mut total_time_s = 0.0;
    for r in results.iter_mut() {
        let a = by_id.get(r.case_id.as_str()).ok_or_else(|| Error::MissingAnnotation(r.case_id.clone()))?;
        let ok = rule.accepts(&r.t2, a);
        r.correct = Some(ok);
        correct += ok as usize;
        total_time_s += r.elapsed_s;
    }
    Ok(MatchingSummary { correct, incorrect: results.len() - correct, accuracy: correct as f64 / results.len() as f64, total_time_s })
}

/// Number of candidates accepted by each rule.
pub fn count_within_distance(candidates: &[Candidate], annotation: &NoduleAnnotation, rules: &[DistanceRule]) -> Vec<usize> {
    rules.iter().map(|r| candidates.iter().filter(|c| r.accepts(c, annotation)).count()).collect()
}

/// Share of scans with exactly one accepted candidate.
pub fn single_candidate_accuracy(counts: &[usize]) -> f64 {
    if counts.is_empty() {
        return 0.0;
    }
    counts.iter().filter(|&&n| n == 1).count() as f64 / counts.len() as f64
}

pub const MATCH_HEADER: [&str; 10] = ["case_id", "t1_x", "t1_y", "t1_z", "t2_x", "t2_y", "t2_z", "probability", "correct", "elapsed_s"];

pub fn write_match_report(path: impl AsRef<Path>, results: &[MatchResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MATCH_HEADER)?;
    for r in results {
        let mut row = vec![r.case_id.clone()];
        row.extend(r.t1.center_world.iter().chain(&r.t2.center_world).map(|v| v.to_string()));
        row.push(r.score.to_string());
        row.push(r.correct.map(|c| c.to_string()).unwrap_or_default());
        row.push(format!("{:.6}", r.elapsed_s));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::TimePoint;

    #[test]
    fn ties_go_to_the_lowest_indices() {
        let t = vec![vec![0.1, 0.9, 0.9], vec![0.9, 0.2, 0.0]];
        assert_eq!(select_pair(&t, true), Some((0, 1)));
        assert_eq!(select_pair(&t, false), Some((1, 2)));
        assert_eq!(select_pair(&[vec![0.3]], true), Some((0, 0)));
        assert_eq!(select_pair(&[], true), None);
    }

    #[test]
    fn published_matching_counts() {
        let cands = |n: usize| -> Vec<MatchResult> {
            (0..36)
                .map(|i| {
                    let c = Candidate { center_world: [if i < n { 0.0 } else { 50.0 }, 0.0, 0.0], diameter: 8.0, probability: 0.9 };
                    MatchResult {
                        case_id: format!("c{i}"),
                        t1: c.clone(),
                        t2: c,
                        t1_index: 0,
                        t2_index: 0,
                        score: 0.9,
                        correct: None,
                        elapsed_s: 0.25,
                    }
                })
                .collect()
        };
        let ann: Vec<NoduleAnnotation> = (0..36)
            .map(|i| NoduleAnnotation { series_id: format!("c{i}"), center_world: [0.0; 3], diameter: 8.0, time_point: TimePoint::T2 })
            .collect();
        let mut r = cands(32);
        let s = evaluate_matching(&mut r, &ann, DistanceRule::Radius).unwrap();
        assert_eq!((s.correct, s.incorrect), (32, 4));
        assert!((s.accuracy - 0.888).abs() < 0.001);
        assert_eq!(s.total_time_s, 9.0);
        let mut r = cands(25);
        assert!((evaluate_matching(&mut r, &ann, DistanceRule::Radius).unwrap().accuracy - 0.694).abs() < 0.001);
        let mut r = cands(36);
        assert_eq!(evaluate_matching(&mut r, &ann, DistanceRule::Radius).unwrap().accuracy, 1.0);
        let mut r = cands(36);
        assert!(matches!(evaluate_matching(&mut r, &ann[1..], DistanceRule::Radius), Err(Error::MissingAnnotation(_))));
    }

    #[test]
    fn density_counts() {
        let a = NoduleAnnotation { series_id: "s".into(), center_world: [0.0; 3], diameter: 8.0, time_point: TimePoint::T2 };
        assert_eq!(count_within_distance(&[], &a, &DENSITY_RULES), vec![0; 8]);
        let c = |x: f64| Candidate { center_world: [x, 0.0, 0.0], diameter: 5.0, probability: 0.5 };
        let list = [c(1.0), c(4.5), c(12.0), c(25.0)];
        assert_eq!(count_within_distance(&list, &a, &DENSITY_RULES), vec![1, 4, 3, 3, 2, 2, 1, 1]);
        let n1 = [1, 1, 0, 2];
        assert_eq!(single_candidate_accuracy(&n1), 0.5);
    }

    /// Scores depend only on the patch centres, so a brute force over the
    /// candidate lists can predict the winner.
    struct StubScorer {
        higher: bool,
    }

    fn stub_score(a: [f64; 3], b: [f64; 3]) -> f64 {
        let h = (a[0] * 7.0 + a[1] * 13.0 + a[2] * 3.0 + b[0] * 5.0 - b[1] * 11.0 + b[2] * 17.0).sin();
        (h * 8.0).round() / 8.0
    }

    impl PairScorer for StubScorer {
        fn score_table(&self, t1: &[&Patch], t2: &[&Patch]) -> Result<Vec<Vec<f64>>> {
            Ok(t1.iter().map(|a| t2.iter().map(|b| stub_score(a.source_center_world(), b.source_center_world())).collect()).collect())
        }

        fn higher_is_better(&self) -> bool {
            self.higher
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn match_case_agrees_with_brute_force(
            c1 in proptest::collection::vec((0u8..40, 0u8..40, 0u8..40), 1..6),
            c2 in proptest::collection::vec((0u8..40, 0u8..40, 0u8..40), 1..6),
            higher in proptest::bool::ANY,
        ) {
            let vol = Volume::filled([40, 40, 40], [1.0; 3], [0.0; 3], 0.0).unwrap();
            let cand = |&(x, y, z): &(u8, u8, u8)| Candidate { center_world: [x as f64, y as f64, z as f64], diameter: 6.0, probability: 0.5 };
            let l1: Vec<Candidate> = c1.iter().map(cand).collect();
            let l2: Vec<Candidate> = c2.iter().map(cand).collect();
            let r = match_case(&StubScorer { higher }, "s", &vol, &vol, &l1, &l2).unwrap();
            let mut best = None;
            for (i, a) in l1.iter().enumerate() {
                for (j, b) in l2.iter().enumerate() {
                    let s = stub_score(a.center_world, b.center_world);
                    let s = if higher { s } else { -s };
                    if best.map_or(true, |(_, _, bs)| s > bs) {
                        best = Some((i, j, s));
                    }
                }
            }
            let (i, j, _) = best.unwrap();
            proptest::prop_assert_eq!((r.t1_index, r.t2_index), (i, j));
            proptest::prop_assert_eq!(&r.t2, &l2[j]);
        }

        #[test]
        fn selection_ignores_monotone_rescaling(
            table in proptest::collection::vec(proptest::collection::vec(-100i32..100, 1..5), 1..5),
        ) {
            let width = table[0].len();
            let t: Vec<Vec<f64>> = table.iter().map(|r| (0..width).map(|j| *r.get(j).unwrap_or(&0) as f64).collect()).collect();
            let scaled: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| (v / 50.0).exp() * 3.0 + 1.0).collect()).collect();
            proptest::prop_assert_eq!(select_pair(&t, true), select_pair(&scaled, true));
            let neg: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
            proptest::prop_assert_eq!(select_pair(&t, true), select_pair(&neg, false));
        }

        #[test]
        fn wider_radius_never_counts_fewer(xs in proptest::collection::vec(0.0f64..40.0, 0..20)) {
            let a = NoduleAnnotation { series_id: "s".into(), center_world: [0.0; 3], diameter: 8.0, time_point: TimePoint::T2 };
            let list: Vec<Candidate> = xs.iter().map(|&x| Candidate { center_world: [x, 0.0, 0.0], diameter: 5.0, probability: 0.5 }).collect();
            let counts = count_within_distance(&list, &a, &DENSITY_RULES[1..]);
            for w in counts.windows(2) {
                proptest::prop_assert!(w[0] >= w[1]);
            }
        }
    }
}
