//! The desk-scale protocol: seeded phantom train and test splits, a short
//! detector schedule, a FIFB matcher trained on hard-negative pairs, and the
//! full pipeline on the held-out split. Runs on one CPU core in well under
//! half an hour.

use std::path::Path;
use std::time::Instant;

use crate::augment::Augmentation;
use crate::backbone::BackboneModel;
use crate::dataset::{load_cases, matching_pairs, AnnotatedCase, PairOptions};
use crate::detector::{train_detector, DetectorModel, DetectorRecipe, TrainingScan, DEFAULT_ANCHORS_MM};
use crate::error::Result;
use crate::phantom::{generate_dataset_from, PhantomSpec};
use crate::pipeline::{run_pipeline, PipelineOptions, PipelineOutput};
use crate::siamese::{train, ConfigName, SiameseConfig, SiameseModel, TrainRecipe};

pub const TRAIN_CASES: usize = 40;
pub const TEST_CASES: usize = 16;
/// Test cases use seeds from here on, disjoint from the training seeds.
pub const TEST_FIRST_SEED: u64 = 1000;

/// Growth below half a voxel cannot be resolved on a 1 mm grid, so the
/// desk phantom draws none.
pub fn phantom_spec() -> PhantomSpec {
    PhantomSpec { seed: 1, min_abs_growth: 0.5, ..Default::default() }
}

pub fn detector_recipe() -> DetectorRecipe {
    DetectorRecipe { epochs: 60, learning_rate: 1e-3, lr_decay: 0.3, decay_every: 30, seed: 0, ..Default::default() }
}

pub fn siamese_recipe() -> TrainRecipe {
    TrainRecipe { epochs: 40, learning_rate: 1e-3, augmentation: Augmentation::none(), ..Default::default() }
}

pub fn pair_options() -> PairOptions {
    PairOptions { copies: 8, ..Default::default() }
}

/// Every nodule of both time points, as detector training scans.
pub fn training_scans(cases: &[AnnotatedCase]) -> Vec<TrainingScan> {
    cases
        .iter()
        .flat_map(|c| {
            [
                TrainingScan { volume: c.volume_t1.clone(), nodules: c.all_nodules(false) },
                TrainingScan { volume: c.volume_t2.clone(), nodules: c.all_nodules(true) },
            ]
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct DeskTimes {
    pub phantom_s: f64,
    pub detector_s: f64,
    pub siamese_s: f64,
    pub pipeline_s: f64,
}

impl DeskTimes {
    pub fn total_s(&self) -> f64 {
        self.phantom_s + self.detector_s + self.siamese_s + self.pipeline_s
    }
}

pub struct DeskRun {
    pub output: PipelineOutput,
    pub detector: DetectorModel,
    pub siamese: SiameseModel,
    pub times: DeskTimes,
}

/// Run the whole protocol under `out_dir`. A detector checkpoint at
/// `detector_cache` is reused when present and written otherwise.
pub fn run(out_dir: &Path, detector_cache: Option<&Path>) -> Result<DeskRun> {
    let mut times = DeskTimes::default();
    let spec = phantom_spec();
    let t = Instant::now();
    let train_cases = load_cases(&generate_dataset_from(&spec, 0, TRAIN_CASES, out_dir.join("data/train"))?)?;
    let test_cases = load_cases(&generate_dataset_from(&spec, TEST_FIRST_SEED, TEST_CASES, out_dir.join("data/test"))?)?;
    times.phantom_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let detector = match detector_cache {
        Some(p) if p.exists() => DetectorModel::load(p)?,
        _ => {
            let mut model = DetectorModel::new(&DEFAULT_ANCHORS_MM, 0)?;
            train_detector(&mut model, &training_scans(&train_cases), &detector_recipe())?;
            if let Some(p) = detector_cache {
                model.save(p)?;
            }
            model
        }
    };
    times.detector_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let backbone = BackboneModel::new(0);
    let mut siamese = SiameseModel::build(&SiameseConfig::from_name(ConfigName::FIFB), &backbone, 0)?;
    let pairs = matching_pairs(&train_cases, &pair_options())?;
    train(&mut siamese, &pairs, &[], &siamese_recipe())?;
    times.siamese_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let output = run_pipeline(&detector, &siamese, &test_cases, &PipelineOptions::default(), out_dir)?;
    times.pipeline_s = t.elapsed().as_secs_f64();
    Ok(DeskRun { output, detector, siamese, times })
}
