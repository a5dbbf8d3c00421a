use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nodule_reid::backbone::{train_classifier, BackboneModel};
use nodule_reid::config::{require_paths, RunConfig};
use nodule_reid::dataset::{classifier_patches, load_cases, matching_pairs, nodule_patches, AnnotatedCase};
use nodule_reid::desk;
use nodule_reid::detector::{read_candidates, train_detector, write_candidates, Candidate, DetectorModel};
use nodule_reid::growth::{self, GrowthAssessment};
use nodule_reid::matching::{evaluate_matching, match_case, write_match_report, MatchResult, T1Source};
use nodule_reid::metrics::{FrocCurve, ScanDetections, DEFAULT_LEVEL, FROC_RATES};
use nodule_reid::phantom::{generate_dataset_from, Manifest};
use nodule_reid::pipeline::{matching_candidates, run_pipeline};
use nodule_reid::siamese::{build_pair_dataset, cross_validate, train, ConfigName, SiameseConfig, SiameseModel};
use nodule_reid::volume_io::load_annotations;
use nodule_reid::{plot, Error};

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "NODULE_REID_OUT";

#[derive(Parser)]
#[command(name = "nodule-reid", version, about = "Re-identify lung nodules across CT pairs and measure their growth")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config_file: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Out {
    /// Output directory [default: $NODULE_REID_OUT/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic longitudinal dataset.
    Phantom {
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Seed of the first case; later cases use the following seeds.
        #[arg(long)]
        first_seed: Option<u64>,
        #[command(flatten)]
        out: Out,
    },
    /// Pretrain the 3D ResNet on nodule vs background patches.
    TrainClassifier {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        background_per_volume: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Train one siamese configuration, with cross-validation.
    TrainSiamese {
        #[arg(long)]
        data: Option<PathBuf>,
        /// FIBC, UIBC, FIFB, UIFB, FICB, UICB, FCMB or UCMB.
        #[arg(long)]
        config: Option<ConfigName>,
        /// Backbone checkpoint from train-classifier.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Stratified folds; 0 trains once on all pairs.
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Train the candidate detector.
    TrainDetector {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Detect candidates at both time points of every case.
    Detect {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Match detected candidates between time points.
    Match {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        siamese: Option<PathBuf>,
        /// Directory holding candidates_t1.csv and candidates_t2.csv.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Detect, match and assess growth in one run.
    Pipeline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        detector: Option<PathBuf>,
        #[arg(long)]
        siamese: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        /// Use the annotated T1 nodule instead of T1 detections.
        #[arg(long)]
        t1_annotation: bool,
        #[command(flatten)]
        out: Out,
    },
    /// FROC curve with bootstrap intervals from candidate files.
    EvalFroc {
        /// A candidate CSV, or a directory with candidates_t1.csv and candidates_t2.csv when --data is used.
        #[arg(long)]
        candidates: PathBuf,
        /// Ground truth as an annotation CSV; scans are grouped by series_id.
        #[arg(long, conflicts_with = "data")]
        annotations: Option<PathBuf>,
        /// Dataset manifest; every nodule of both time points is ground truth.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: Out,
    },
    /// Growth outcomes and agreement statistics from a match run.
    GrowthReport {
        /// matches.json written by `match`.
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Phantom { .. } => "phantom",
            Cmd::TrainClassifier { .. } => "train-classifier",
            Cmd::TrainSiamese { .. } => "train-siamese",
            Cmd::TrainDetector { .. } => "train-detector",
            Cmd::Detect { .. } => "detect",
            Cmd::Match { .. } => "match",
            Cmd::Pipeline { .. } => "pipeline",
            Cmd::EvalFroc { .. } => "eval-froc",
            Cmd::GrowthReport { .. } => "growth-report",
        }
    }

    fn out(&self) -> &Out {
        match self {
            Cmd::Phantom { out, .. }
            | Cmd::TrainClassifier { out, .. }
            | Cmd::TrainSiamese { out, .. }
            | Cmd::TrainDetector { out, .. }
            | Cmd::Detect { out, .. }
            | Cmd::Match { out, .. }
            | Cmd::Pipeline { out, .. }
            | Cmd::EvalFroc { out, .. }
            | Cmd::GrowthReport { out, .. } => out,
        }
    }
}

/// Errors the user can fix by changing the command line.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<Usage>() { 2 } else { 1 })
        }
    }
}

fn out_dir(cmd: &Cmd, cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(p) = &cmd.out().out {
        return Ok(p.clone());
    }
    if let Some(p) = &cfg.out_dir {
        return Ok(p.clone());
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => Ok(PathBuf::from(root).join(cmd.name())),
        _ => Err(usage(format!("no output directory: pass --out, set out_dir in the config file, or set {OUT_ENV}"))),
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("reading dataset manifest {}", path.display()))
}

fn load_data(path: &Path) -> Result<Vec<AnnotatedCase>> {
    let cases = load_cases(&load_manifest(path)?)?;
    if cases.is_empty() {
        bail!(Error::Empty("no cases in the manifest".into()));
    }
    Ok(cases)
}

fn pick<T: Clone>(flag: &Option<T>, cfg: &mut T) -> T {
    if let Some(v) = flag {
        *cfg = v.clone();
    }
    cfg.clone()
}

fn pick_path(flag: &Option<PathBuf>, cfg: &mut Option<PathBuf>) -> Option<PathBuf> {
    if flag.is_some() {
        *cfg = flag.clone();
    }
    cfg.clone()
}

fn inputs(list: &[(&str, Option<&Path>)]) -> Result<()> {
    require_paths(list).map_err(|e| usage(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config_file {
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let out = out_dir(&cli.cmd, &cfg)?;
    cfg.out_dir = Some(out.clone());
    match &cli.cmd {
        Cmd::Phantom { cases, seed, first_seed, .. } => {
            let n = pick(cases, &mut cfg.phantom.cases);
            let first = pick(first_seed, &mut cfg.phantom.first_seed);
            pick(seed, &mut cfg.phantom.spec.seed);
            cfg.phantom.spec.validate().map_err(|e| usage(e.to_string()))?;
            cfg.write_snapshot(&out)?;
            let m = generate_dataset_from(&cfg.phantom.spec, first, n, &out)?;
            println!("{}", m.path().display());
        }
        Cmd::TrainClassifier { data, epochs, background_per_volume, .. } => {
            let data = pick_path(data, &mut cfg.classifier.data);
            pick(epochs, &mut cfg.classifier.recipe.epochs);
            let bg = pick(background_per_volume, &mut cfg.classifier.background_per_volume);
            inputs(&[("data", data.as_deref())])?;
            cfg.classifier.recipe.validate().map_err(|e| usage(e.to_string()))?;
            cfg.write_snapshot(&out)?;
            let cases = load_data(data.as_deref().unwrap())?;
            let patches = classifier_patches(&cases, bg, cfg.classifier.seed)?;
            let mut model = BackboneModel::new(cfg.classifier.recipe.seed);
            let history = train_classifier(&mut model, &patches, &cfg.classifier.recipe)?;
            write_rows(out.join("classifier_history.csv"), &history)?;
            model.save(out.join("backbone.ckpt"))?;
            if let Some(last) = history.last() {
                println!("epoch {} loss {:.4} accuracy {:.3}", last.epoch, last.loss, last.accuracy);
            }
        }
        Cmd::TrainSiamese { data, config, backbone, folds, epochs, lr, .. } => {
            let data = pick_path(data, &mut cfg.siamese.data);
            let name = pick(config, &mut cfg.siamese.config);
            let backbone_path = pick_path(backbone, &mut cfg.siamese.backbone);
            let folds = pick(folds, &mut cfg.siamese.folds);
            pick(epochs, &mut cfg.siamese.recipe.epochs);
            pick(lr, &mut cfg.siamese.recipe.learning_rate);
            let mut list = vec![("data", data.as_deref())];
            if backbone_path.is_some() {
                list.push(("backbone", backbone_path.as_deref()));
            }
            inputs(&list)?;
            cfg.siamese.recipe.validate().map_err(|e| usage(e.to_string()))?;
            if folds == 1 {
                return Err(usage("--folds must be 0 or at least 2"));
            }
            cfg.write_snapshot(&out)?;
            let bb = match &backbone_path {
                Some(p) => BackboneModel::load(p)?,
                None => BackboneModel::new(cfg.siamese.backbone_seed),
            };
            let sc = SiameseConfig::from_name(name);
            let cases = load_data(data.as_deref().unwrap())?;
            let pairs = match &cfg.siamese.pairs {
                Some(opts) => matching_pairs(&cases, opts)?,
                None => build_pair_dataset(&nodule_patches(&cases)?, cfg.siamese.recipe.seed)?,
            };
            let model = if folds >= 2 {
                let cv = cross_validate(&sc, &bb, &pairs, folds, &cfg.siamese.recipe)?;
                cv.write_csv(out.join("folds.csv"))?;
                println!("{}", cv.summary());
                cv.best_model
            } else {
                let mut m = SiameseModel::build_with_dropout(&sc, &bb, cfg.siamese.recipe.seed, cfg.siamese.recipe.dropout)?;
                let report = train(&mut m, &pairs, &[], &cfg.siamese.recipe)?;
                write_rows(out.join("siamese_history.csv"), &report.history)?;
                println!("{name}: tr_acc {:.3}", report.tr_acc);
                m
            };
            model.save(out.join("siamese.ckpt"))?;
        }
        Cmd::TrainDetector { data, epochs, lr, .. } => {
            let data = pick_path(data, &mut cfg.detector.data);
            pick(epochs, &mut cfg.detector.recipe.epochs);
            pick(lr, &mut cfg.detector.recipe.learning_rate);
            inputs(&[("data", data.as_deref())])?;
            cfg.detector.recipe.validate().map_err(|e| usage(e.to_string()))?;
            cfg.write_snapshot(&out)?;
            let cases = load_data(data.as_deref().unwrap())?;
            let scans = desk::training_scans(&cases);
            let mut model = DetectorModel::new(&cfg.detector.anchors_mm, cfg.detector.recipe.seed)?;
            let history = train_detector(&mut model, &scans, &cfg.detector.recipe)?;
            write_rows(out.join("detector_history.csv"), &history)?;
            model.save(out.join("detector.ckpt"))?;
            if let Some(last) = history.last() {
                println!("epoch {} loss {:.4}", last.epoch, last.loss);
            }
        }
        Cmd::Detect { data, detector, .. } => {
            let data = pick_path(data, &mut cfg.pipeline.data);
            let det = pick_path(detector, &mut cfg.pipeline.detector);
            inputs(&[("data", data.as_deref()), ("detector", det.as_deref())])?;
            cfg.write_snapshot(&out)?;
            let model = DetectorModel::load(det.unwrap())?;
            let cases = load_data(data.as_deref().unwrap())?;
            let (mut r1, mut r2) = (Vec::new(), Vec::new());
            for c in &cases {
                for k in model.detect(&c.volume_t1, &cfg.pipeline.options.detect)? {
                    r1.push((c.case_id.clone(), k));
                }
                for k in model.detect(&c.volume_t2, &cfg.pipeline.options.detect)? {
                    r2.push((c.case_id.clone(), k));
                }
            }
            write_candidates(out.join("candidates_t1.csv"), &r1)?;
            write_candidates(out.join("candidates_t2.csv"), &r2)?;
            println!("{} + {} candidates over {} cases", r1.len(), r2.len(), cases.len());
        }
        Cmd::Match { data, siamese, candidates, top_k, .. } => {
            let data = pick_path(data, &mut cfg.pipeline.data);
            let sia = pick_path(siamese, &mut cfg.pipeline.siamese);
            let k = pick(top_k, &mut cfg.pipeline.options.top_k);
            let (f1, f2) = (candidates.join("candidates_t1.csv"), candidates.join("candidates_t2.csv"));
            inputs(&[("data", data.as_deref()), ("siamese", sia.as_deref()), ("T1 candidates", Some(&f1)), ("T2 candidates", Some(&f2))])?;
            cfg.write_snapshot(&out)?;
            let model = SiameseModel::load(sia.unwrap())?;
            let cases = load_data(data.as_deref().unwrap())?;
            let (c1, c2) = (group(read_candidates(&f1)?), group(read_candidates(&f2)?));
            let opts = &cfg.pipeline.options;
            let empty = Vec::new();
            let mut results = Vec::new();
            for c in &cases {
                let l1 = match opts.t1_source {
                    T1Source::Detector => matching_candidates(c1.get(&c.case_id).unwrap_or(&empty), k, opts.match_min_probability),
                    T1Source::Annotation => vec![Candidate { center_world: c.nodule_t1.center_world, diameter: c.nodule_t1.diameter, probability: 1.0 }],
                };
                let l2 = matching_candidates(c2.get(&c.case_id).unwrap_or(&empty), k, opts.match_min_probability);
                results.push(match_case(&model, &c.case_id, &c.volume_t1, &c.volume_t2, &l1, &l2).with_context(|| format!("case {}", c.case_id))?);
            }
            let truth: Vec<_> = cases.iter().map(|c| c.nodule_t2.clone()).collect();
            let summary = evaluate_matching(&mut results, &truth, opts.rule)?;
            write_match_report(out.join("matches.csv"), &results)?;
            std::fs::write(out.join("matches.json"), serde_json::to_string_pretty(&results)?)?;
            std::fs::write(out.join("matching_summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("accuracy {:.3} ({} correct, {} incorrect, {:.2} s)", summary.accuracy, summary.correct, summary.incorrect, summary.total_time_s);
        }
        Cmd::Pipeline { data, detector, siamese, top_k, t1_annotation, .. } => {
            let data = pick_path(data, &mut cfg.pipeline.data);
            let det = pick_path(detector, &mut cfg.pipeline.detector);
            let sia = pick_path(siamese, &mut cfg.pipeline.siamese);
            pick(top_k, &mut cfg.pipeline.options.top_k);
            if *t1_annotation {
                cfg.pipeline.options.t1_source = T1Source::Annotation;
            }
            inputs(&[("data", data.as_deref()), ("detector", det.as_deref()), ("siamese", sia.as_deref())])?;
            cfg.pipeline.options.validate().map_err(|e| usage(e.to_string()))?;
            cfg.write_snapshot(&out)?;
            let detector = DetectorModel::load(det.unwrap())?;
            let siamese = SiameseModel::load(sia.unwrap())?;
            let cases = load_data(data.as_deref().unwrap())?;
            let r = run_pipeline(&detector, &siamese, &cases, &cfg.pipeline.options, &out)?;
            let s = &r.summary;
            let t = &s.timing;
            eprintln!("detect {:.1} s, match {:.1} s, growth {:.2} s, evaluation {:.1} s", t.detect_s, t.match_s, t.growth_s, t.evaluation_s);
            println!("matching accuracy {:.3} ({} / {})", s.matching.accuracy, s.matching.correct, s.n_cases);
            if let Some(a) = s.growth.sign_accuracy {
                println!("growth sign accuracy {a:.3} over {} matched cases", s.growth.assessed);
            }
        }
        Cmd::EvalFroc { candidates, annotations, data, resamples, seed, .. } => {
            let scans = match (annotations, data) {
                (Some(a), None) => {
                    inputs(&[("candidates", Some(candidates)), ("annotations", Some(a))])?;
                    scans_by_series(read_candidates(candidates)?, load_annotations(a)?)
                }
                (None, Some(d)) => {
                    let (f1, f2) = (candidates.join("candidates_t1.csv"), candidates.join("candidates_t2.csv"));
                    inputs(&[("data", Some(d)), ("T1 candidates", Some(&f1)), ("T2 candidates", Some(&f2))])?;
                    let cases = load_data(d)?;
                    let (c1, c2) = (group(read_candidates(&f1)?), group(read_candidates(&f2)?));
                    cases
                        .iter()
                        .flat_map(|c| {
                            [
                                ScanDetections { candidates: c1.get(&c.case_id).cloned().unwrap_or_default(), annotations: c.all_nodules(false) },
                                ScanDetections { candidates: c2.get(&c.case_id).cloned().unwrap_or_default(), annotations: c.all_nodules(true) },
                            ]
                        })
                        .collect()
                }
                _ => return Err(usage("pass either --annotations or --data")),
            };
            cfg.write_snapshot(&out)?;
            let curve = FrocCurve::compute(&scans, &FROC_RATES, *resamples, DEFAULT_LEVEL, *seed)?;
            curve.write_csv(out.join("froc.csv"))?;
            plot::froc_svg(&curve, out.join("froc.svg"))?;
            for p in &curve.points {
                println!("{:>6} {:.4} [{:.4}, {:.4}]", p.fp_rate, p.mean, p.lower, p.upper);
            }
        }
        Cmd::GrowthReport { matches, data, .. } => {
            let data = pick_path(data, &mut cfg.pipeline.data);
            inputs(&[("matches", Some(matches)), ("data", data.as_deref())])?;
            cfg.write_snapshot(&out)?;
            let results: Vec<MatchResult> = serde_json::from_slice(&std::fs::read(matches)?).context("reading matches.json")?;
            let manifest = load_manifest(data.as_deref().unwrap())?;
            let truth: BTreeMap<&str, f64> = manifest.cases.iter().map(|c| (c.case_id.as_str(), c.growth_mm)).collect();
            let mut rows = Vec::new();
            for r in results.iter().filter(|r| r.correct == Some(true)) {
                let g = truth.get(r.case_id.as_str()).ok_or_else(|| Error::MissingAnnotation(r.case_id.clone()))?;
                rows.push(GrowthAssessment::new(&r.case_id, r.t1.diameter, r.t2.diameter, *g));
            }
            growth::write_growth_report(out.join("growth.csv"), &rows)?;
            let pred: Vec<f64> = rows.iter().map(|a| a.delta_pred).collect();
            let tru: Vec<f64> = rows.iter().map(|a| a.delta_true).collect();
            let report = growth::agreement(&pred, &tru, cfg.pipeline.options.t_test)?;
            let cm = growth::confusion(&rows);
            let summary = GrowthReport { confusion: cm, scores: nodule_reid::metrics::derive_scores(&cm).ok(), agreement: report.clone() };
            std::fs::write(out.join("growth_summary.json"), serde_json::to_string_pretty(&summary)?)?;
            plot::bland_altman_svg(&pred, &tru, &growth::bland_altman(&pred, &tru)?, out.join("bland_altman.svg"))?;
            println!("mean difference {:.2} mm, LoA [{:.2}, {:.2}], MAE {:.2} mm", report.mean_diff, report.loa_low, report.loa_high, report.mae);
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GrowthReport {
    confusion: nodule_reid::metrics::ConfusionMatrix,
    scores: Option<nodule_reid::metrics::Scores>,
    agreement: growth::AgreementReport,
}

fn group(rows: Vec<(String, Candidate)>) -> BTreeMap<String, Vec<Candidate>> {
    let mut m: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for (id, c) in rows {
        m.entry(id).or_default().push(c);
    }
    for v in m.values_mut() {
        nodule_reid::detector::sort_candidates(v);
    }
    m
}

fn scans_by_series(cands: Vec<(String, Candidate)>, anns: Vec<nodule_reid::volume_io::NoduleAnnotation>) -> Vec<ScanDetections> {
    let mut scans: BTreeMap<String, ScanDetections> = BTreeMap::new();
    for (id, c) in cands {
        scans.entry(id).or_default().candidates.push(c);
    }
    for a in anns {
        scans.entry(a.series_id.clone()).or_default().annotations.push(a);
    }
    scans.into_values().collect()
}

fn write_rows<T: Serialize>(path: PathBuf, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
