//! Anchor-based 3D nodule candidate detector.
//!
//! An encoder-decoder network reads 128³ tiles (plus their location grid)
//! and predicts, for every cell of a 1/4-resolution map and each anchor
//! diameter, a nodule logit and a `(dx, dy, dz, log d)` regression. Tiles
//! are decoded to world coordinates and merged by centre-distance NMS.

pub mod anchors;
pub mod net;
mod train;

use std::cmp::Ordering;
use std::path::Path;

use nodule_nn::layers::sigmoid;
use nodule_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::volume_io::{split_overlapping, voxel_to_world, NoduleAnnotation, Vec3, Volume, DETECTOR_PATCH_OVERLAP, DETECTOR_PATCH_SIDE};

pub use anchors::{hard_negatives, step_lr, DEFAULT_ANCHORS_MM};
pub use net::DetectorNet;
pub use train::{train_detector, DetectorEpoch, DetectorRecipe, TrainingScan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub center_world: Vec3,
    pub diameter: f64,
    pub probability: f64,
}

/// Detection hit: centre strictly within the annotated radius.
pub fn hit(c: &Candidate, a: &NoduleAnnotation) -> bool {
    distance(c.center_world, a.center_world) < a.diameter / 2.0
}

pub fn distance(p: Vec3, q: Vec3) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// First `k` candidates of an already sorted list.
pub fn top_k(candidates: &[Candidate], k: usize) -> Vec<Candidate> {
    candidates.iter().take(k).cloned().collect()
}

/// Probability descending, then `x`, `y`, `z` ascending.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then(a.center_world[0].total_cmp(&b.center_world[0]))
        .then(a.center_world[1].total_cmp(&b.center_world[1]))
        .then(a.center_world[2].total_cmp(&b.center_world[2]))
}

pub fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(candidate_order);
}

/// Greedy centre-distance NMS: walking in [`candidate_order`], a candidate
/// is dropped when it lies within `radius` of one already kept.
pub fn nms(mut candidates: Vec<Candidate>, radius: f64) -> Vec<Candidate> {
    sort_candidates(&mut candidates);
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| distance(k.center_world, c.center_world) > radius) {
            kept.push(c);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectOptions {
    /// Candidates below this probability are discarded before NMS.
    pub min_probability: f64,
    /// NMS radius in mm; `None` uses half the largest anchor.
    pub nms_radius_mm: Option<f64>,
    pub tile_side: usize,
    pub tile_overlap: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self { min_probability: 0.01, nms_radius_mm: None, tile_side: DETECTOR_PATCH_SIDE, tile_overlap: DETECTOR_PATCH_OVERLAP }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub net: DetectorNet<f32>,
    pub anchors_mm: Vec<f64>,
    pub seed: u64,
}

pub const CHECKPOINT_KIND: &str = "detector";

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    anchors_mm: Vec<f64>,
    seed: u64,
}

/// Raw per-anchor decode of one output map for a tile starting at voxel
/// `start`; coordinates stay in voxel units of the source volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawDetection {
    pub center_voxel: [f64; 3],
    pub diameter_voxel: f64,
    pub logit: f32,
}

impl DetectorModel {
    pub fn new(anchors_mm: &[f64], seed: u64) -> Result<Self> {
        if anchors_mm.is_empty() || anchors_mm.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::InvalidArgument("anchor diameters must be positive and non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { net: DetectorNet::new(anchors_mm.len(), &mut rng), anchors_mm: anchors_mm.to_vec(), seed })
    }

    pub fn nms_radius(&self, opts: &DetectOptions) -> f64 {
        opts.nms_radius_mm.unwrap_or_else(|| self.anchors_mm.iter().cloned().fold(0.0, f64::max) / 2.0)
    }

    /// Decode one sample of a network output. `spacing` converts anchor
    /// millimetres to voxels.
    pub fn decode_output(&self, out: &[f32], g: usize, start: [isize; 3], spacing: f64, min_logit: f32) -> Vec<RawDetection> {
        let g3 = g * g * g;
        let mut found = Vec::new();
        for (k, &a_mm) in self.anchors_mm.iter().enumerate() {
            let anchor = a_mm / spacing;
            let base = k * net::CHANNELS_PER_ANCHOR * g3;
            for idx in 0..g3 {
                let logit = out[base + idx];
                if logit < min_logit {
                    continue;
                }
                let (z, y, x) = (idx / (g * g), (idx / g) % g, idx % g);
                let cell = [
                    start[0] as f64 + anchors::cell_center(x),
                    start[1] as f64 + anchors::cell_center(y),
                    start[2] as f64 + anchors::cell_center(z),
                ];
                let r = [1, 2, 3, 4].map(|c| out[base + c * g3 + idx] as f64);
                let (center_voxel, diameter_voxel) = anchors::decode(cell, anchor, r);
                found.push(RawDetection { center_voxel, diameter_voxel, logit });
            }
        }
        found
    }

    /// Candidates for a preprocessed volume, sorted by [`candidate_order`].
    pub fn detect(&self, volume: &Volume, opts: &DetectOptions) -> Result<Vec<Candidate>> {
        let side = opts.tile_side;
        if side == 0 || side % net::SIDE_MULTIPLE != 0 {
            return Err(Error::InvalidArgument(format!("tile side must be a positive multiple of {}", net::SIDE_MULTIPLE)));
        }
        let spacing = volume.spacing();
        if (spacing[0] - spacing[1]).abs() > 1e-6 || (spacing[0] - spacing[2]).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("detector expects isotropic voxels, got spacing {spacing:?}")));
        }
        let min_logit = logit_of(opts.min_probability);
        let g = side / net::OUTPUT_STRIDE;
        let mut all = Vec::new();
        for tile in split_overlapping(volume, side, opts.tile_overlap)? {
            let x = Tensor::from_vec(&[1, 1, side, side, side], tile.patch.voxels().to_vec());
            let loc = Tensor::from_vec(&[1, 3, g, g, g], tile.location.values.clone());
            let out = self.net.apply(&x, &loc);
            let start = tile.start.map(|s| s as isize);
            for d in self.decode_output(out.data(), g, start, spacing[0], min_logit) {
                all.push(Candidate {
                    center_world: voxel_to_world(d.center_voxel, volume),
                    diameter: d.diameter_voxel * spacing[0],
                    probability: sigmoid(d.logit) as f64,
                });
            }
        }
        Ok(nms(all, self.nms_radius(opts)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = DetectorMeta { anchors_mm: self.anchors_mm.clone(), seed: self.seed };
        Checkpoint::from_module(CHECKPOINT_KIND, serde_json::to_value(meta).expect("serializable"), &self.net)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let meta: DetectorMeta = ckpt.meta()?;
        let mut model = Self::new(&meta.anchors_mm, meta.seed)?;
        ckpt.load_into(&mut model.net)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Logit threshold equivalent to a probability threshold.
fn logit_of(p: f64) -> f32 {
    if p <= 0.0 {
        f32::NEG_INFINITY
    } else if p >= 1.0 {
        f32::INFINITY
    } else {
        (p / (1.0 - p)).ln() as f32
    }
}

pub const CANDIDATE_HEADER: [&str; 6] = ["series_id", "coord_x", "coord_y", "coord_z", "diameter_mm", "probability"];

/// Candidate CSV, one row per candidate.
pub fn write_candidates(path: impl AsRef<Path>, rows: &[(String, Candidate)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CANDIDATE_HEADER)?;
    for (id, c) in rows {
        w.write_record([
            id.clone(),
            c.center_world[0].to_string(),
            c.center_world[1].to_string(),
            c.center_world[2].to_string(),
            c.diameter.to_string(),
            c.probability.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<(String, Candidate)>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != CANDIDATE_HEADER {
        return Err(Error::Parse { row: 0, column: "header".into(), message: format!("expected {}", CANDIDATE_HEADER.join(",")) });
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].trim().parse().map_err(|_| Error::Parse {
                row: line + 1,
                column: CANDIDATE_HEADER[i].into(),
                message: format!("not a number: {:?}", &rec[i]),
            })
        };
        out.push((
            rec[0].to_string(),
            Candidate { center_world: [num(1)?, num(2)?, num(3)?], diameter: num(4)?, probability: num(5)? },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::TimePoint;
    use proptest::prelude::*;

    fn ann(center: Vec3, d: f64) -> NoduleAnnotation {
        NoduleAnnotation { series_id: "s".into(), center_world: center, diameter: d, time_point: TimePoint::T2 }
    }

    fn cand(center: Vec3, p: f64) -> Candidate {
        Candidate { center_world: center, diameter: 5.0, probability: p }
    }

    #[test]
    fn hit_uses_a_strict_radius() {
        let a = ann([1.0, 2.0, 3.0], 10.0);
        assert!(hit(&cand([1.0, 2.0, 3.0], 0.5), &a));
        assert!(!hit(&cand([6.0, 2.0, 3.0], 0.5), &a));
        assert!(hit(&cand([1.0, 6.9, 3.0], 0.5), &a));
        assert!(!hit(&cand([1.0, 2.0, 8.1], 0.5), &a));
    }

    #[test]
    fn top_k_truncates() {
        let list: Vec<Candidate> = (0..100).map(|i| cand([i as f64, 0.0, 0.0], 1.0 - i as f64 / 100.0)).collect();
        assert_eq!(top_k(&list, 32).len(), 32);
        assert_eq!(top_k(&list, 500).len(), 100);
        assert!(top_k(&list, 0).is_empty());
    }

    #[test]
    fn equal_probabilities_sort_by_coordinates() {
        let mut c = vec![cand([3.0, 0.0, 0.0], 0.7), cand([1.0, 5.0, 0.0], 0.7), cand([1.0, 4.0, 9.0], 0.7), cand([9.0, 9.0, 9.0], 0.9)];
        sort_candidates(&mut c);
        let xs: Vec<Vec3> = c.iter().map(|c| c.center_world).collect();
        assert_eq!(xs, vec![[9.0, 9.0, 9.0], [1.0, 4.0, 9.0], [1.0, 5.0, 0.0], [3.0, 0.0, 0.0]]);
    }

    #[test]
    fn decoding_does_not_depend_on_the_tile() {
        let model = DetectorModel::new(&DEFAULT_ANCHORS_MM, 0).unwrap();
        let g = 8;
        let g3 = g * g * g;
        // Same physical cell seen from two tiles offset by 12 cells.
        let mut out_a = vec![-20.0f32; 15 * g3];
        let mut out_b = out_a.clone();
        let (ia, ib) = ((3 * g + 2) * g + 7, (3 * g + 2) * g + 1);
        for (out, idx) in [(&mut out_a, ia), (&mut out_b, ib)] {
            out[5 * g3 + idx] = 3.0;
            out[(5 + 1) * g3 + idx] = 0.2;
            out[(5 + 2) * g3 + idx] = -0.1;
            out[(5 + 3) * g3 + idx] = 0.05;
            out[(5 + 4) * g3 + idx] = 0.3;
        }
        let a = model.decode_output(&out_a, g, [0, 10, 20], 1.0, 0.0);
        let b = model.decode_output(&out_b, g, [24, 10, 20], 1.0, 0.0);
        assert_eq!(a.len(), 1);
        assert_eq!(a, b);
        assert!((a[0].center_voxel[0] - (anchors::cell_center(7) + 2.0)).abs() < 1e-6);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let rows = vec![("case0001".to_string(), Candidate { center_world: [1.25, -3.5, 7.0], diameter: 6.125, probability: 0.875 })];
        write_candidates(&p, &rows).unwrap();
        assert_eq!(read_candidates(&p).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn nms_shrinks_and_separates(
            pts in prop::collection::vec((0.0f64..60.0, 0.0f64..60.0, 0.0f64..60.0, 0.0f64..1.0), 0..40),
            radius in 0.5f64..15.0,
        ) {
            let c: Vec<Candidate> = pts.iter().map(|&(x, y, z, p)| cand([x, y, z], p)).collect();
            let kept = nms(c.clone(), radius);
            prop_assert!(kept.len() <= c.len());
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    prop_assert!(distance(kept[i].center_world, kept[j].center_world) > radius);
                }
            }
        }

        #[test]
        fn hit_is_translation_invariant(
            c in prop::array::uniform3(-400i32..400),
            a in prop::array::uniform3(-400i32..400),
            t in prop::array::uniform3(-800i32..800),
            d in 1i32..320,
        ) {
            // Eighths of a millimetre keep every difference exact.
            let f = |v: [i32; 3], s: [i32; 3]| [0, 1, 2].map(|i| (v[i] + s[i]) as f64 / 8.0);
            let d = d as f64 / 8.0;
            let before = hit(&cand(f(c, [0; 3]), 0.5), &ann(f(a, [0; 3]), d));
            let after = hit(&cand(f(c, t), 0.5), &ann(f(a, t), d));
            prop_assert_eq!(before, after);
        }
    }
}
