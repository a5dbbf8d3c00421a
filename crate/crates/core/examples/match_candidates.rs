//! Train a FIFB matcher on a few phantom cases, then re-identify the tracked
//! nodule of held-out cases among annotated candidates at both time points.
//!
//! cargo run --release --example match_candidates

use nodule_reid::augment::Augmentation;
use nodule_reid::backbone::BackboneModel;
use nodule_reid::dataset::{load_cases, matching_pairs, PairOptions};
use nodule_reid::detector::Candidate;
use nodule_reid::matching::{evaluate_matching, match_case, DistanceRule};
use nodule_reid::phantom::{generate_dataset_from, PhantomSpec};
use nodule_reid::siamese::{train, ConfigName, SiameseConfig, SiameseModel, TrainRecipe};

fn main() -> anyhow::Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    let spec = PhantomSpec { seed: 4, ..Default::default() };
    let train_cases = load_cases(&generate_dataset_from(&spec, 0, 12, dir.join("train"))?)?;
    let test_cases = load_cases(&generate_dataset_from(&spec, 500, 6, dir.join("test"))?)?;

    let backbone = BackboneModel::new(0);
    let mut model = SiameseModel::build(&SiameseConfig::from_name(ConfigName::FIFB), &backbone, 0)?;
    let pairs = matching_pairs(&train_cases, &PairOptions { copies: 6, ..Default::default() })?;
    let recipe = TrainRecipe { epochs: 25, learning_rate: 1e-3, augmentation: Augmentation::none(), ..Default::default() };
    let report = train(&mut model, &pairs, &[], &recipe)?;
    println!("trained on {} pairs, training accuracy {:.3}", pairs.len(), report.tr_acc);

    let as_candidate = |a: &nodule_reid::volume_io::NoduleAnnotation| Candidate { center_world: a.center_world, diameter: a.diameter, probability: 1.0 };
    let mut results = Vec::new();
    for c in &test_cases {
        let l1: Vec<Candidate> = c.all_nodules(false).iter().map(as_candidate).collect();
        let l2: Vec<Candidate> = c.all_nodules(true).iter().map(as_candidate).collect();
        results.push(match_case(&model, &c.case_id, &c.volume_t1, &c.volume_t2, &l1, &l2)?);
    }
    let truth: Vec<_> = test_cases.iter().map(|c| c.nodule_t2.clone()).collect();
    let summary = evaluate_matching(&mut results, &truth, DistanceRule::Radius)?;
    for r in &results {
        println!("{}: T1 #{} -> T2 #{} score {:.3} correct {:?}", r.case_id, r.t1_index, r.t2_index, r.score, r.correct);
    }
    println!("accuracy {:.3} ({} of {})", summary.accuracy, summary.correct, results.len());
    Ok(())
}

