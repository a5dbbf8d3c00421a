//! Loading a phantom (or any manifest-described) dataset into preprocessed
//! volumes with their annotations, and cutting training patches from it.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LabeledPatch;
use crate::error::{Error, Result};
use crate::phantom::Manifest;
use crate::siamese::{CasePatches, PairSample};
use crate::volume_io::{self, extract_patch, NoduleAnnotation, Patch, Volume, NODULE_PATCH_SIDE};

/// One longitudinal case, volumes resampled to 1 mm and normalized.
#[derive(Debug, Clone)]
pub struct AnnotatedCase {
    pub case_id: String,
    pub volume_t1: Volume,
    pub volume_t2: Volume,
    pub nodule_t1: NoduleAnnotation,
    pub nodule_t2: NoduleAnnotation,
    pub distractors_t1: Vec<NoduleAnnotation>,
    pub distractors_t2: Vec<NoduleAnnotation>,
    pub growth_mm: f64,
}

impl AnnotatedCase {
    /// Every visible nodule at T1 (`second = false`) or T2.
    pub fn all_nodules(&self, second: bool) -> Vec<NoduleAnnotation> {
        let (main, extra) = if second { (&self.nodule_t2, &self.distractors_t2) } else { (&self.nodule_t1, &self.distractors_t1) };
        std::iter::once(main.clone()).chain(extra.iter().cloned()).collect()
    }
}

fn by_series(list: Vec<NoduleAnnotation>, which: &str) -> Result<HashMap<String, NoduleAnnotation>> {
    let mut map = HashMap::new();
    for a in list {
        let id = a.series_id.clone();
        if map.insert(id.clone(), a).is_some() {
            return Err(Error::InvalidArgument(format!("{which}: more than one annotation for {id}")));
        }
    }
    Ok(map)
}

/// Load and preprocess every case of a manifest.
pub fn load_cases(manifest: &Manifest) -> Result<Vec<AnnotatedCase>> {
    let mut t1 = by_series(volume_io::load_annotations(manifest.resolve(&manifest.annotations_t1))?, "T1")?;
    let mut t2 = by_series(volume_io::load_annotations(manifest.resolve(&manifest.annotations_t2))?, "T2")?;
    manifest
        .cases
        .iter()
        .map(|c| {
            let missing = || Error::MissingAnnotation(c.case_id.clone());
            Ok(AnnotatedCase {
                case_id: c.case_id.clone(),
                volume_t1: volume_io::preprocess(&volume_io::read_volume(manifest.resolve(&c.volume_t1))?)?,
                volume_t2: volume_io::preprocess(&volume_io::read_volume(manifest.resolve(&c.volume_t2))?)?,
                nodule_t1: t1.remove(&c.case_id).ok_or_else(missing)?,
                nodule_t2: t2.remove(&c.case_id).ok_or_else(missing)?,
                distractors_t1: c.distractors_t1.clone(),
                distractors_t2: c.distractors_t2.clone(),
                growth_mm: c.growth_mm,
            })
        })
        .collect()
}

/// 32³ patches centred on the tracked nodule at both time points.
pub fn nodule_patches(cases: &[AnnotatedCase]) -> Result<Vec<CasePatches>> {
    cases
        .iter()
        .map(|c| {
            Ok(CasePatches {
                case_id: c.case_id.clone(),
                patch_t1: Arc::new(extract_patch(&c.volume_t1, c.nodule_t1.center_world, NODULE_PATCH_SIDE)?),
                patch_t2: Arc::new(extract_patch(&c.volume_t2, c.nodule_t2.center_world, NODULE_PATCH_SIDE)?),
            })
        })
        .collect()
}

/// Nodule-vs-background patches for classifier pretraining: every nodule of
/// both time points is positive; `background_per_volume` random centres at
/// least one nodule diameter plus half a patch away from all nodules are
/// negative.
pub fn classifier_patches(cases: &[AnnotatedCase], background_per_volume: usize, seed: u64) -> Result<Vec<LabeledPatch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in cases {
        for (second, vol) in [(false, &c.volume_t1), (true, &c.volume_t2)] {
            let nodules = c.all_nodules(second);
            for n in &nodules {
                out.push(LabeledPatch { patch: extract_patch(vol, n.center_world, NODULE_PATCH_SIDE)?, label: true });
            }
            let extent = vol.extent();
            let origin = vol.origin();
            let mut placed = 0;
            let mut attempts = 0;
            while placed < background_per_volume && attempts < 1000 * background_per_volume.max(1) {
                attempts += 1;
                let p: [f64; 3] = [0, 1, 2].map(|a| origin[a] + rng.gen_range(0.0..extent[a].max(1e-9)));
                let clear = nodules.iter().all(|n| {
                    let d2: f64 = (0..3).map(|a| (p[a] - n.center_world[a]).powi(2)).sum();
                    d2.sqrt() > n.diameter + NODULE_PATCH_SIDE as f64 / 2.0
                });
                if clear {
                    out.push(LabeledPatch { patch: extract_patch(vol, p, NODULE_PATCH_SIDE)?, label: false });
                    placed += 1;
                }
            }
        }
    }
    Ok(out)
}

/// How [`matching_pairs`] samples its pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairOptions {
    /// Copies of each case, every one with freshly jittered patch centres.
    pub copies: usize,
    /// Largest centre offset per axis, mimicking detector localization error.
    pub jitter_mm: f64,
    pub seed: u64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self { copies: 4, jitter_mm: 1.5, seed: 0 }
    }
}

/// Balanced pairs resembling what the matcher meets on detector output.
///
/// Each copy of a case adds the tracked nodule at T1 against itself at T2
/// as the positive, and one negative drawn from: the tracked nodule against
/// a distractor of the other time point (either direction), a distractor
/// against a distractor, the tracked nodule against background, and the
/// tracked T1 nodule against another case's tracked T2 nodule.
pub fn matching_pairs(cases: &[AnnotatedCase], opts: &PairOptions) -> Result<Vec<PairSample>> {
    if cases.len() < 2 {
        return Err(Error::InvalidArgument("at least two cases are needed to form negative pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let j = opts.jitter_mm.abs();
    let cut = |vol: &Volume, c: [f64; 3], rng: &mut ChaCha8Rng| -> Result<Arc<Patch>> {
        let p = if j > 0.0 { c.map(|v| v + rng.gen_range(-j..=j)) } else { c };
        Ok(Arc::new(extract_patch(vol, p, NODULE_PATCH_SIDE)?))
    };
    let mut out = Vec::with_capacity(2 * cases.len() * opts.copies);
    for _ in 0..opts.copies {
        for (i, c) in cases.iter().enumerate() {
            let t1 = cut(&c.volume_t1, c.nodule_t1.center_world, &mut rng)?;
            let t2 = cut(&c.volume_t2, c.nodule_t2.center_world, &mut rng)?;
            out.push(PairSample { patch_t1: t1.clone(), patch_t2: t2.clone(), label: true, case_t1: c.case_id.clone(), case_t2: c.case_id.clone() });
            let pick = |list: &[NoduleAnnotation], rng: &mut ChaCha8Rng| list.get(rng.gen_range(0..list.len().max(1))).map(|a| a.center_world);
            let (a, b, other) = match rng.gen_range(0..5) {
                0 => match pick(&c.distractors_t2, &mut rng) {
                    Some(d) => (t1, cut(&c.volume_t2, d, &mut rng)?, None),
                    None => (t1, background(&c.volume_t2, &c.all_nodules(true), &mut rng)?, None),
                },
                1 => match pick(&c.distractors_t1, &mut rng) {
                    Some(d) => (cut(&c.volume_t1, d, &mut rng)?, t2, None),
                    None => (background(&c.volume_t1, &c.all_nodules(false), &mut rng)?, t2, None),
                },
                2 => match (pick(&c.distractors_t1, &mut rng), pick(&c.distractors_t2, &mut rng)) {
                    (Some(d1), Some(d2)) => (cut(&c.volume_t1, d1, &mut rng)?, cut(&c.volume_t2, d2, &mut rng)?, None),
                    _ => (t1, background(&c.volume_t2, &c.all_nodules(true), &mut rng)?, None),
                },
                3 => (t1, background(&c.volume_t2, &c.all_nodules(true), &mut rng)?, None),
                _ => {
                    let mut k = rng.gen_range(0..cases.len() - 1);
                    if k >= i {
                        k += 1;
                    }
                    let o = &cases[k];
                    (t1, cut(&o.volume_t2, o.nodule_t2.center_world, &mut rng)?, Some(o.case_id.clone()))
                }
            };
            out.push(PairSample { patch_t1: a, patch_t2: b, label: false, case_t1: c.case_id.clone(), case_t2: other.unwrap_or_else(|| c.case_id.clone()) });
        }
    }
    Ok(out)
}

/// A patch centred at a random point clear of every nodule.
fn background(vol: &Volume, nodules: &[NoduleAnnotation], rng: &mut ChaCha8Rng) -> Result<Arc<Patch>> {
    let extent = vol.extent();
    let origin = vol.origin();
    let half = NODULE_PATCH_SIDE as f64 / 4.0;
    for _ in 0..10_000 {
        let p: [f64; 3] = [0, 1, 2].map(|a| origin[a] + half + rng.gen_range(0.0..(extent[a] - 2.0 * half).max(1e-9)));
        if nodules.iter().all(|n| crate::detector::distance(p, n.center_world) > n.diameter) {
            return Ok(Arc::new(extract_patch(vol, p, NODULE_PATCH_SIDE)?));
        }
    }
    Err(Error::Generation("no room for a background patch".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomSpec};

    #[test]
    fn loads_cases_and_cuts_patches() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { volume_dims: [64, 64, 64], diameter_range_t1: [5.0, 7.0], growth_range: [-1.0, 2.0], n_distractors: 1, seed: 2, ..Default::default() };
        let m = generate_dataset(&spec, 3, dir.path()).unwrap();
        let cases = load_cases(&m).unwrap();
        assert_eq!(cases.len(), 3);
        let c = &cases[1];
        assert_eq!(c.case_id, m.cases[1].case_id);
        assert!((c.nodule_t2.diameter - c.nodule_t1.diameter - c.growth_mm).abs() < 1e-12);
        assert!(c.volume_t1.voxels().iter().all(|v| (0.0..=1.0).contains(v)));

        let pairs = nodule_patches(&cases).unwrap();
        // The patch centre sits inside the nodule, brighter than lung background.
        let p = &pairs[0].patch_t1;
        assert!(p.get(16, 16, 16) > p.get(0, 0, 0));

        let labeled = classifier_patches(&cases, 2, 0).unwrap();
        assert_eq!(labeled.iter().filter(|l| l.label).count(), 3 * 2 * 2);
        assert_eq!(labeled.iter().filter(|l| !l.label).count(), 3 * 2 * 2);
    }
}
