//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nodule_reid::detector::{hit, Candidate};
use nodule_reid::metrics::ScanDetections;
use std::sync::Arc;

use nodule_reid::siamese::CasePatches;
use nodule_reid::volume_io::{NoduleAnnotation, Patch, TimePoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best sensitivity at each rate by trying every distinct threshold.
pub fn froc_oracle(scans: &[ScanDetections], rates: &[f64]) -> Vec<f64> {
    let mut thresholds: Vec<f64> = scans.iter().flat_map(|s| s.candidates.iter().map(|c| c.probability)).collect();
    thresholds.push(f64::INFINITY);
    let n_ann: usize = scans.iter().map(|s| s.annotations.len()).sum();
    let n = scans.len() as f64;
    let at = |t: f64| {
        let mut fp = 0usize;
        let mut found = 0usize;
        for s in scans {
            let kept: Vec<&Candidate> = s.candidates.iter().filter(|c| c.probability >= t).collect();
            fp += kept.iter().filter(|c| !s.annotations.iter().any(|a| hit(c, a))).count();
            found += s.annotations.iter().filter(|a| kept.iter().any(|c| hit(c, a))).count();
        }
        (fp, found as f64 / n_ann as f64)
    };
    let table: Vec<(usize, f64)> = thresholds.iter().map(|&t| at(t)).collect();
    rates
        .iter()
        .map(|&r| table.iter().filter(|(fp, _)| *fp as f64 <= r * n).map(|&(_, s)| s).fold(0.0, f64::max))
        .collect()
}

pub fn annotation(x: f64, y: f64, d: f64) -> NoduleAnnotation {
    NoduleAnnotation { series_id: "s".into(), center_world: [x, y, 0.0], diameter: d, time_point: TimePoint::T1 }
}

pub fn candidate(x: f64, y: f64, p: f64) -> Candidate {
    Candidate { center_world: [x, y, 0.0], diameter: 6.0, probability: p }
}

/// Small scans on an integer grid with probabilities in tenths, so hits
/// and probability ties both happen often.
pub fn random_scans(rng: &mut ChaCha8Rng, max_scans: usize, max_cands: usize) -> Vec<ScanDetections> {
    let n = rng.gen_range(1..=max_scans);
    let mut scans: Vec<ScanDetections> = (0..n)
        .map(|_| {
            let annotations = (0..rng.gen_range(0..3)).map(|_| annotation(rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64, rng.gen_range(4..12) as f64)).collect();
            let candidates = (0..rng.gen_range(0..=max_cands))
                .map(|_| candidate(rng.gen_range(0..20) as f64, rng.gen_range(0..20) as f64, rng.gen_range(0..=10) as f64 / 10.0))
                .collect();
            ScanDetections { candidates, annotations }
        })
        .collect();
    if scans.iter().all(|s| s.annotations.is_empty()) {
        scans[0].annotations.push(annotation(5.0, 5.0, 8.0));
    }
    scans
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_patch(rng: &mut ChaCha8Rng) -> Patch {
    let v = (0..32 * 32 * 32).map(|_| rng.gen::<f32>()).collect();
    Patch::new(32, v, true, [0.0; 3]).unwrap()
}

/// A bright ball whose radius and intensity identify the case.
pub fn ball_patch(radius: f64, level: f32, shift: f64) -> Patch {
    let mut v = vec![0.1f32; 32 * 32 * 32];
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let d = ((x as f64 - 15.5 - shift).powi(2) + (y as f64 - 15.5).powi(2) + (z as f64 - 15.5).powi(2)).sqrt();
                if d < radius {
                    v[(z * 32 + y) * 32 + x] = level;
                }
            }
        }
    }
    Patch::new(32, v, true, [0.0; 3]).unwrap()
}

pub fn toy_cases(n: usize) -> Vec<CasePatches> {
    (0..n)
        .map(|i| {
            let r = 3.0 + i as f64 * 1.5;
            let level = 0.5 + 0.1 * (i % 4) as f32;
            CasePatches {
                case_id: format!("case{i:04}"),
                patch_t1: Arc::new(ball_patch(r, level, 0.0)),
                patch_t2: Arc::new(ball_patch(r + 0.3, level, 1.0)),
            }
        })
        .collect()
}
