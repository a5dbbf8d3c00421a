//! Detect, match and measure growth over a set of longitudinal cases, then
//! write every report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedCase;
use crate::detector::{top_k, write_candidates, Candidate, DetectOptions, DetectorModel};
use crate::error::{Error, Result};
use crate::growth::{self, AgreementReport, GrowthAssessment, TTestTransform};
use crate::matching::{evaluate_matching, match_case, write_match_report, DistanceRule, MatchResult, MatchingSummary, PairScorer, T1Source};
use crate::metrics::{derive_scores, ConfusionMatrix, FrocCurve, ScanDetections, Scores, DEFAULT_LEVEL, DEFAULT_RESAMPLES, FROC_RATES};
use crate::plot;

pub const DEFAULT_TOP_K: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineOptions {
    pub top_k: usize,
    /// Candidates below this probability are not matched. When none pass,
    /// the single most probable candidate is used.
    pub match_min_probability: f64,
    pub t1_source: T1Source,
    pub rule: DistanceRule,
    pub detect: DetectOptions,
    pub t_test: TTestTransform,
    pub froc_resamples: usize,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            match_min_probability: 0.5,
            t1_source: T1Source::Detector,
            rule: DistanceRule::Radius,
            detect: DetectOptions::default(),
            t_test: TTestTransform::Raw,
            froc_resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.match_min_probability) {
            return Err(Error::Config("match_min_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The list handed to the matcher: the `k` most probable candidates above
/// the floor, or the best one if none clears it.
pub fn matching_candidates(all: &[Candidate], k: usize, floor: f64) -> Vec<Candidate> {
    let above: Vec<Candidate> = all.iter().filter(|c| c.probability >= floor).cloned().collect();
    if above.is_empty() {
        top_k(all, 1)
    } else {
        top_k(&above, k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub detect_s: f64,
    pub match_s: f64,
    pub growth_s: f64,
    pub evaluation_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthSummary {
    /// Correctly matched cases, the only ones assessed.
    pub assessed: usize,
    pub confusion: ConfusionMatrix,
    pub sign_accuracy: Option<f64>,
    pub scores: Option<Scores>,
    pub agreement: Option<AgreementReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_cases: usize,
    pub options: PipelineOptions,
    pub matching: MatchingSummary,
    pub growth: GrowthSummary,
    pub froc: FrocCurve,
    pub timing: StageTimes,
}

pub struct PipelineOutput {
    pub summary: PipelineSummary,
    pub matches: Vec<MatchResult>,
    pub growth: Vec<GrowthAssessment>,
    pub files: Vec<PathBuf>,
}

fn annotation_candidate(a: &crate::volume_io::NoduleAnnotation) -> Candidate {
    Candidate { center_world: a.center_world, diameter: a.diameter, probability: 1.0 }
}

/// Run the full pipeline and write its reports into `out_dir`:
/// `candidates_t1.csv`, `candidates_t2.csv`, `matches.csv`, `growth.csv`,
/// `froc.csv`, `froc.svg`, `bland_altman.svg` and `summary.json`.
pub fn run_pipeline<S: PairScorer + ?Sized>(
    detector: &DetectorModel,
    scorer: &S,
    cases: &[AnnotatedCase],
    opts: &PipelineOptions,
    out_dir: impl AsRef<Path>,
) -> Result<PipelineOutput> {
    opts.validate()?;
    if cases.is_empty() {
        return Err(Error::Empty("no cases".into()));
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out)?;
    let mut timing = StageTimes::default();

    let t = Instant::now();
    let mut detections = Vec::with_capacity(cases.len());
    for c in cases {
        let d1 = detector.detect(&c.volume_t1, &opts.detect)?;
        let d2 = detector.detect(&c.volume_t2, &opts.detect)?;
        detections.push((d1, d2));
    }
    timing.detect_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut matches = Vec::with_capacity(cases.len());
    for (c, (d1, d2)) in cases.iter().zip(&detections) {
        let l1 = match opts.t1_source {
            T1Source::Detector => matching_candidates(d1, opts.top_k, opts.match_min_probability),
            T1Source::Annotation => vec![annotation_candidate(&c.nodule_t1)],
        };
        let l2 = matching_candidates(d2, opts.top_k, opts.match_min_probability);
        matches.push(match_case(scorer, &c.case_id, &c.volume_t1, &c.volume_t2, &l1, &l2)?);
    }
    timing.match_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let truth_t2: Vec<_> = cases.iter().map(|c| c.nodule_t2.clone()).collect();
    let matching = evaluate_matching(&mut matches, &truth_t2, opts.rule)?;
    let assessments: Vec<GrowthAssessment> = matches
        .iter()
        .zip(cases)
        .filter(|(m, _)| m.correct == Some(true))
        .map(|(m, c)| GrowthAssessment::new(&c.case_id, m.t1.diameter, m.t2.diameter, c.growth_mm))
        .collect();
    let confusion = growth::confusion(&assessments);
    let pred: Vec<f64> = assessments.iter().map(|a| a.delta_pred).collect();
    let truth: Vec<f64> = assessments.iter().map(|a| a.delta_true).collect();
    let agreement = if assessments.len() >= 2 { Some(growth::agreement(&pred, &truth, opts.t_test)?) } else { None };
    let growth_summary = GrowthSummary {
        assessed: assessments.len(),
        confusion,
        sign_accuracy: growth::sign_accuracy(&assessments).ok(),
        scores: derive_scores(&confusion).ok(),
        agreement,
    };
    timing.growth_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let scans: Vec<ScanDetections> = cases
        .iter()
        .zip(&detections)
        .flat_map(|(c, (d1, d2))| {
            [
                ScanDetections { candidates: d1.clone(), annotations: c.all_nodules(false) },
                ScanDetections { candidates: d2.clone(), annotations: c.all_nodules(true) },
            ]
        })
        .collect();
    let froc = FrocCurve::compute(&scans, &FROC_RATES, opts.froc_resamples, DEFAULT_LEVEL, opts.seed)?;

    let mut files = Vec::new();
    let mut file = |name: &str| {
        let p = out.join(name);
        files.push(p.clone());
        p
    };
    for (second, name) in [(false, "candidates_t1.csv"), (true, "candidates_t2.csv")] {
        let rows: Vec<(String, Candidate)> = cases
            .iter()
            .zip(&detections)
            .flat_map(|(c, (d1, d2))| (if second { d2 } else { d1 }).iter().map(move |k| (c.case_id.clone(), k.clone())))
            .collect();
        write_candidates(file(name), &rows)?;
    }
    write_match_report(file("matches.csv"), &matches)?;
    growth::write_growth_report(file("growth.csv"), &assessments)?;
    froc.write_csv(file("froc.csv"))?;
    plot::froc_svg(&froc, file("froc.svg"))?;
    if growth_summary.agreement.is_some() {
        let ba = growth::bland_altman(&pred, &truth)?;
        plot::bland_altman_svg(&pred, &truth, &ba, file("bland_altman.svg"))?;
    }
    timing.evaluation_s = t.elapsed().as_secs_f64();

    let summary = PipelineSummary {
        n_cases: cases.len(),
        options: opts.clone(),
        matching,
        growth: growth_summary,
        froc,
        timing,
    };
    let path = file("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    Ok(PipelineOutput { summary, matches, growth: assessments, files })
}
