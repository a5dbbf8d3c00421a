//! Synthetic longitudinal CT pairs with known nodule ground truth.
//!
//! Each case holds one tracked nodule seen at T1 and T2 (displaced and
//! resized by the case's growth) plus independent distractor nodules at each
//! time point. Nodules are soft-edged spheres: the intensity profile is a ball
//! convolved with a Gaussian edge, so the half-maximum contour sits exactly on
//! the annotated diameter.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::volume_io::{self, NoduleAnnotation, TimePoint, Vec3, Volume, VoxelType};

/// Diameters and growth are quantized to this step so that differences of
/// generated diameters are exact in binary floating point.
const DIAMETER_QUANTUM: f64 = 1.0 / 64.0;

/// Fraction of cases that grow in a generated dataset.
pub const GROWTH_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub volume_dims: [usize; 3],
    pub spacing: Vec3,
    pub n_true_nodules: usize,
    pub n_distractors: usize,
    pub diameter_range_t1: [f64; 2],
    pub growth_range: [f64; 2],
    /// Cases are drawn with `|growth| >= min_abs_growth` when the range allows it.
    pub min_abs_growth: f64,
    pub background_hu: f32,
    pub background_noise_hu: f32,
    /// Rim density range; the core differs from the rim by up to
    /// `core_contrast_hu` in either direction.
    pub nodule_hu_range: [f32; 2],
    pub core_contrast_hu: f32,
    pub displacement_range: f64,
    pub edge_sigma_mm: f64,
    /// Minimum diameter difference between a distractor and the tracked
    /// nodule at the same time point.
    pub distractor_diameter_gap: f64,
    /// Vessel segments attached to every nodule. Their directions, lengths
    /// and densities belong to the nodule and persist across time points.
    pub vessels_per_nodule: usize,
    pub vessel_length_mm: [f64; 2],
    pub vessel_radius_mm: [f64; 2],
    pub vessel_hu_range: [f32; 2],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            volume_dims: [96, 96, 96],
            spacing: [1.0; 3],
            n_true_nodules: 1,
            n_distractors: 2,
            diameter_range_t1: [6.0, 12.0],
            growth_range: [-3.0, 5.0],
            min_abs_growth: 0.0,
            background_hu: -800.0,
            background_noise_hu: 20.0,
            nodule_hu_range: [-100.0, 100.0],
            core_contrast_hu: 60.0,
            displacement_range: 20.0,
            edge_sigma_mm: 1.0,
            distractor_diameter_gap: 2.0,
            vessels_per_nodule: 2,
            vessel_length_mm: [6.0, 14.0],
            vessel_radius_mm: [0.75, 1.25],
            vessel_hu_range: [-50.0, 50.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Largest diameter any nodule can reach.
    pub fn max_diameter(&self) -> f64 {
        self.diameter_range_t1[1] + self.growth_range[1].max(0.0)
    }

    fn min_diameter(&self) -> f64 {
        (self.diameter_range_t1[0] + self.growth_range[0].min(0.0)).max(3.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if !ordered(self.diameter_range_t1)
            || !ordered(self.growth_range)
            || !ordered(self.vessel_length_mm)
            || !ordered(self.vessel_radius_mm)
            || self.nodule_hu_range[0] > self.nodule_hu_range[1]
            || self.vessel_hu_range[0] > self.vessel_hu_range[1]
        {
            return Err(Error::InvalidArgument("phantom ranges must be ordered".into()));
        }
        if self.diameter_range_t1[0] <= 0.0 || self.vessel_length_mm[0] < 0.0 || self.vessel_radius_mm[0] <= 0.0 {
            return Err(Error::InvalidArgument("nodule diameters must be positive".into()));
        }
        if self.n_true_nodules != 1 {
            return Err(Error::InvalidArgument("exactly one tracked nodule per case is supported".into()));
        }
        if self.displacement_range < 0.0 || self.edge_sigma_mm <= 0.0 || self.min_abs_growth < 0.0 {
            return Err(Error::InvalidArgument("displacement, edge sigma and min growth must be non-negative".into()));
        }
        if self.volume_dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("phantom dims and spacing must be positive".into()));
        }
        let margin = self.max_diameter();
        for a in 0..3 {
            if self.volume_dims[a] as f64 * self.spacing[a] <= 2.0 * margin {
                return Err(Error::Generation(format!(
                    "axis {a} is {} mm long, too short for nodules with a {margin} mm margin",
                    self.volume_dims[a] as f64 * self.spacing[a]
                )));
            }
        }
        Ok(())
    }

    fn origin(&self) -> Vec3 {
        [0, 1, 2].map(|a| -(self.volume_dims[a] as f64 * self.spacing[a]) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub case_id: String,
    pub volume_t1: Volume,
    pub volume_t2: Volume,
    pub true_annotation_t1: NoduleAnnotation,
    pub true_annotation_t2: NoduleAnnotation,
    pub distractors_t1: Vec<NoduleAnnotation>,
    pub distractors_t2: Vec<NoduleAnnotation>,
    pub growth_mm: f64,
}

pub fn case_id(case_seed: u64) -> String {
    format!("case{case_seed:04}")
}

fn quantize(v: f64) -> f64 {
    (v / DIAMETER_QUANTUM).round() * DIAMETER_QUANTUM
}

fn distance(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Which side of zero the growth of a case is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthSign {
    Any,
    Growing,
    NotGrowing,
}

fn sample_growth(spec: &PhantomSpec, sign: GrowthSign, rng: &mut ChaCha8Rng) -> f64 {
    let [lo, hi] = spec.growth_range;
    let m = spec.min_abs_growth;
    let (a, b) = match sign {
        GrowthSign::Growing if hi > 0.0 => (lo.max(m.max(DIAMETER_QUANTUM)), hi),
        GrowthSign::NotGrowing if lo <= 0.0 => (lo, hi.min(-m)),
        _ => (lo, hi),
    };
    let (a, b) = if a <= b { (a, b) } else { (lo, hi) };
    let g = if a == b { a } else { rng.gen_range(a..=b) };
    let g = quantize(g);
    match sign {
        GrowthSign::Growing if g <= 0.0 && hi > 0.0 => DIAMETER_QUANTUM.max(quantize(hi)),
        GrowthSign::NotGrowing if g > 0.0 && lo <= 0.0 => 0.0,
        _ => g,
    }
}

fn sample_center(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec3 {
    let origin = spec.origin();
    let margin = spec.max_diameter();
    [0, 1, 2].map(|a| {
        let len = spec.volume_dims[a] as f64 * spec.spacing[a];
        origin[a] + rng.gen_range(margin..=len - margin)
    })
}

fn inside(spec: &PhantomSpec, p: Vec3) -> bool {
    let origin = spec.origin();
    let margin = spec.max_diameter();
    (0..3).all(|a| {
        let len = spec.volume_dims[a] as f64 * spec.spacing[a];
        p[a] - origin[a] >= margin && p[a] - origin[a] <= len - margin
    })
}

const MAX_ATTEMPTS: usize = 10_000;

/// Fraction of the radius occupied by a nodule's core.
pub const CORE_FRACTION: f64 = 0.5;

/// A soft-edged ball with a core of its own density. The core and rim
/// densities are a nodule's identity and persist across time points.
struct Sphere {
    center: Vec3,
    diameter: f64,
    density: Density,
    vessels: Vec<Vessel>,
}

/// A capsule leaving the nodule surface along `direction`.
#[derive(Debug, Clone, Copy)]
struct Vessel {
    direction: Vec3,
    length: f64,
    radius: f64,
    hu: f32,
}

fn uniform(range: [f64; 2], rng: &mut ChaCha8Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

fn sample_vessels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<Vessel> {
    (0..spec.vessels_per_nodule)
        .map(|_| {
            let direction = loop {
                let o: Vec3 = [0, 1, 2].map(|_| rng.gen_range(-1.0..=1.0));
                let n = distance(o, [0.0; 3]);
                if n > 1e-3 && n <= 1.0 {
                    break o.map(|v| v / n);
                }
            };
            let [lo, hi] = spec.vessel_hu_range;
            Vessel {
                direction,
                length: uniform(spec.vessel_length_mm, rng),
                radius: uniform(spec.vessel_radius_mm, rng),
                hu: if lo == hi { lo } else { rng.gen_range(lo..=hi) },
            }
        })
        .collect()
}

/// Distance from `p` to the segment `a`-`b`.
fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = [0, 1, 2].map(|i| b[i] - a[i]);
    let ap = [0, 1, 2].map(|i| p[i] - a[i]);
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 { 0.0 } else { (ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2 };
    let t = t.clamp(0.0, 1.0);
    distance(p, [0, 1, 2].map(|i| a[i] + t * ab[i]))
}

#[derive(Debug, Clone, Copy)]
struct Density {
    core: f32,
    rim: f32,
}

fn sample_density(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Density {
    let [lo, hi] = spec.nodule_hu_range;
    let rim = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let c = spec.core_contrast_hu.abs();
    let core = rim + if c == 0.0 { 0.0 } else { rng.gen_range(-c..=c) };
    Density { core, rim }
}

fn render(spec: &PhantomSpec, spheres: &[Sphere], rng: &mut ChaCha8Rng) -> Result<Volume> {
    let dims = spec.volume_dims;
    let n: usize = dims.iter().product();
    let noise = Normal::new(0.0, spec.background_noise_hu.max(0.0) as f64).map_err(|e| Error::Generation(e.to_string()))?;
    let raw: Vec<f32> = (0..n).map(|_| noise.sample(rng) as f32).collect();
    // Box-smooth along x then y to give the noise some texture.
    let mut smooth = raw.clone();
    let [nx, ny, _] = dims;
    for (i, v) in smooth.iter_mut().enumerate() {
        let x = i % nx;
        let left = if x > 0 { raw[i - 1] } else { raw[i] };
        let right = if x + 1 < nx { raw[i + 1] } else { raw[i] };
        *v = (left + raw[i] + right) / 3.0;
    }
    let tmp = smooth.clone();
    for (i, v) in smooth.iter_mut().enumerate() {
        let y = (i / nx) % ny;
        let up = if y > 0 { tmp[i - nx] } else { tmp[i] };
        let down = if y + 1 < ny { tmp[i + nx] } else { tmp[i] };
        *v = (up + tmp[i] + down) / 3.0;
    }
    let mut volume = Volume::new(dims, spec.spacing, spec.origin(), smooth)?;
    let bg = spec.background_hu as f64;
    for v in volume.voxels_mut() {
        *v += spec.background_hu;
    }
    let sigma = spec.edge_sigma_mm;
    for s in spheres {
        let radius = s.diameter / 2.0;
        let vessel_reach = s.vessels.iter().map(|v| radius + v.length + v.radius).fold(0.0, f64::max);
        let reach = radius.max(vessel_reach) + 5.0 * sigma;
        let segments: Vec<(Vec3, Vec3, &Vessel)> = s
            .vessels
            .iter()
            .map(|v| {
                let at = |r: f64| [0, 1, 2].map(|i| s.center[i] + v.direction[i] * r);
                (at(radius), at(radius + v.length), v)
            })
            .collect();
        let c = volume_io::world_to_voxel(s.center, &volume);
        let lo = [0, 1, 2].map(|a| ((c[a] - reach / spec.spacing[a]).floor().max(0.0)) as usize);
        let hi = [0, 1, 2].map(|a| ((c[a] + reach / spec.spacing[a]).ceil() as usize).min(dims[a] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = volume_io::voxel_to_world([x as f64, y as f64, z as f64], &volume);
                    let r = distance(p, s.center);
                    if r > reach {
                        continue;
                    }
                    let soft = |d: f64, rad: f64| 0.5 * erfc((d - rad) / (sigma * std::f64::consts::SQRT_2));
                    let (rim, core) = (s.density.rim as f64, s.density.core as f64);
                    let body = soft(r, radius);
                    let mut add = (rim - bg) * body + (core - rim) * soft(r, radius * CORE_FRACTION);
                    // Vessels only fill what the nodule body leaves empty.
                    let vessel = segments
                        .iter()
                        .map(|(a, b, v)| (v.hu as f64 - bg) * soft(segment_distance(p, *a, *b), v.radius))
                        .fold(0.0, f64::max);
                    add += vessel * (1.0 - body);
                    let idx = volume.index(x, y, z);
                    let cur = volume.voxels()[idx] as f64;
                    volume.voxels_mut()[idx] = (cur + add) as f32;
                }
            }
        }
    }
    for v in volume.voxels_mut() {
        *v = v.round().clamp(i16::MIN as f32, i16::MAX as f32);
    }
    Ok(volume)
}

/// Generate one case; deterministic in `(spec, case_seed)`.
pub fn generate_case(spec: &PhantomSpec, case_seed: u64) -> Result<PhantomCase> {
    generate_case_with_sign(spec, case_seed, GrowthSign::Any)
}

pub fn generate_case_with_sign(spec: &PhantomSpec, case_seed: u64, sign: GrowthSign) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_seed);
    let id = case_id(case_seed);

    let growth = sample_growth(spec, sign, &mut rng);
    let [dlo, dhi] = spec.diameter_range_t1;
    let d1_lo = dlo.max(spec.min_diameter() - growth);
    let d1 = if d1_lo >= dhi { quantize(dhi.max(d1_lo)) } else { quantize(rng.gen_range(d1_lo..=dhi)) };
    let d2 = d1 + growth;
    let growth_mm = d2 - d1;
    let density = sample_density(spec, &mut rng);
    let vessels = sample_vessels(spec, &mut rng);

    let c1 = sample_center(spec, &mut rng);
    let mut c2 = None;
    for _ in 0..MAX_ATTEMPTS {
        let offset = loop {
            let o: Vec3 = [0, 1, 2].map(|_| rng.gen_range(-1.0..=1.0));
            if distance(o, [0.0; 3]) <= 1.0 {
                break o.map(|v| v * spec.displacement_range);
            }
        };
        let cand = [0, 1, 2].map(|a| c1[a] + offset[a]);
        if inside(spec, cand) {
            c2 = Some(cand);
            break;
        }
    }
    let c2 = c2.ok_or_else(|| Error::Generation(format!("{id}: no room for the displaced T2 nodule")))?;

    let max_d = spec.max_diameter();
    let min_d = spec.min_diameter();
    let place_distractors = |tracked: Vec3, tracked_d: f64, tp: TimePoint, rng: &mut ChaCha8Rng| -> Result<Vec<Sphere>> {
        let mut out: Vec<Sphere> = Vec::new();
        for _ in 0..spec.n_distractors {
            let mut placed = None;
            for _ in 0..MAX_ATTEMPTS {
                let center = sample_center(spec, rng);
                if distance(center, tracked) < 2.0 * max_d || out.iter().any(|o| distance(o.center, center) < max_d) {
                    continue;
                }
                let d = quantize(rng.gen_range(min_d..=max_d));
                if (d - tracked_d).abs() < spec.distractor_diameter_gap {
                    continue;
                }
                let density = sample_density(spec, rng);
                placed = Some(Sphere { center, diameter: d, density, vessels: sample_vessels(spec, rng) });
                break;
            }
            out.push(placed.ok_or_else(|| Error::Generation(format!("{id}: cannot place distractor at {tp}")))?);
        }
        Ok(out)
    };
    let distractors1 = place_distractors(c1, d1, TimePoint::T1, &mut rng)?;
    let distractors2 = place_distractors(c2, d2, TimePoint::T2, &mut rng)?;

    let annotate = |s: &Sphere, tp: TimePoint| NoduleAnnotation {
        series_id: id.clone(),
        center_world: s.center,
        diameter: s.diameter,
        time_point: tp,
    };
    let tracked1 = Sphere { center: c1, diameter: d1, density, vessels: vessels.clone() };
    let tracked2 = Sphere { center: c2, diameter: d2, density, vessels };
    let true_annotation_t1 = annotate(&tracked1, TimePoint::T1);
    let true_annotation_t2 = annotate(&tracked2, TimePoint::T2);
    let distractors_t1 = distractors1.iter().map(|s| annotate(s, TimePoint::T1)).collect();
    let distractors_t2 = distractors2.iter().map(|s| annotate(s, TimePoint::T2)).collect();

    let mut all1 = vec![tracked1];
    all1.extend(distractors1);
    let mut all2 = vec![tracked2];
    all2.extend(distractors2);
    let volume_t1 = render(spec, &all1, &mut rng)?;
    let volume_t2 = render(spec, &all2, &mut rng)?;
    Ok(PhantomCase {
        case_id: id,
        volume_t1,
        volume_t2,
        true_annotation_t1,
        true_annotation_t2,
        distractors_t1,
        distractors_t2,
        growth_mm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub case_id: String,
    pub volume_t1: PathBuf,
    pub volume_t2: PathBuf,
    pub growth_mm: f64,
    pub distractors_t1: Vec<NoduleAnnotation>,
    pub distractors_t2: Vec<NoduleAnnotation>,
}

/// Index of a dataset on disk. Relative paths are resolved against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub spec: PhantomSpec,
    pub annotations_t1: PathBuf,
    pub annotations_t2: PathBuf,
    pub growth: PathBuf,
    pub cases: Vec<ManifestCase>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROWTH_HEADER: [&str; 4] = ["series_id", "diameter_t1", "diameter_t2", "growth_mm"];

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let mut m: Manifest = serde_json::from_slice(&fs::read(&file)?)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
}

/// Row of the growth ground-truth CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthTruth {
    pub series_id: String,
    pub diameter_t1: f64,
    pub diameter_t2: f64,
    pub growth_mm: f64,
}

pub fn read_growth_truth(path: impl AsRef<Path>) -> Result<Vec<GrowthTruth>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Assign growth signs to `n_cases` with exactly `round(0.6 n)` growing
/// cases, in seeded random order.
pub fn stratified_signs(n_cases: usize, seed: u64) -> Vec<GrowthSign> {
    let n_grow = (GROWTH_FRACTION * n_cases as f64).round() as usize;
    let mut signs: Vec<GrowthSign> = (0..n_cases)
        .map(|i| if i < n_grow { GrowthSign::Growing } else { GrowthSign::NotGrowing })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_6A0E);
    signs.shuffle(&mut rng);
    signs
}

/// Generate cases `first_seed..first_seed + n_cases` into `out_dir`.
pub fn generate_dataset(spec: &PhantomSpec, n_cases: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    generate_dataset_from(spec, 0, n_cases, out_dir)
}

pub fn generate_dataset_from(spec: &PhantomSpec, first_seed: u64, n_cases: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let root = out_dir.as_ref().to_path_buf();
    fs::create_dir_all(root.join("volumes"))?;
    let signs = stratified_signs(n_cases, spec.seed.wrapping_add(first_seed));
    let mut ann1 = Vec::new();
    let mut ann2 = Vec::new();
    let mut growth_rows = Vec::new();
    let mut cases = Vec::new();
    for (i, sign) in signs.into_iter().enumerate() {
        let case = generate_case_with_sign(spec, first_seed + i as u64, sign)?;
        let v1 = PathBuf::from("volumes").join(format!("{}_T1.vol", case.case_id));
        let v2 = PathBuf::from("volumes").join(format!("{}_T2.vol", case.case_id));
        volume_io::write_volume(root.join(&v1), &case.volume_t1, VoxelType::I16)?;
        volume_io::write_volume(root.join(&v2), &case.volume_t2, VoxelType::I16)?;
        growth_rows.push(GrowthTruth {
            series_id: case.case_id.clone(),
            diameter_t1: case.true_annotation_t1.diameter,
            diameter_t2: case.true_annotation_t2.diameter,
            growth_mm: case.growth_mm,
        });
        ann1.push(case.true_annotation_t1.clone());
        ann2.push(case.true_annotation_t2.clone());
        cases.push(ManifestCase {
            case_id: case.case_id,
            volume_t1: v1,
            volume_t2: v2,
            growth_mm: case.growth_mm,
            distractors_t1: case.distractors_t1,
            distractors_t2: case.distractors_t2,
        });
    }
    volume_io::write_annotations(root.join("annotations_t1.csv"), &ann1)?;
    volume_io::write_annotations(root.join("annotations_t2.csv"), &ann2)?;
    let mut w = csv::Writer::from_path(root.join("growth.csv"))?;
    w.write_record(GROWTH_HEADER)?;
    for row in &growth_rows {
        w.write_record([row.series_id.clone(), row.diameter_t1.to_string(), row.diameter_t2.to_string(), row.growth_mm.to_string()])?;
    }
    w.flush()?;
    let manifest = Manifest {
        root: root.clone(),
        spec: spec.clone(),
        annotations_t1: "annotations_t1.csv".into(),
        annotations_t2: "annotations_t2.csv".into(),
        growth: "growth.csv".into(),
        cases,
    };
    fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec { volume_dims: [64, 64, 64], diameter_range_t1: [5.0, 8.0], growth_range: [-2.0, 3.0], n_distractors: 1, vessels_per_nodule: 0, seed: 11, ..Default::default() }
    }

    #[test]
    fn degenerate_growth_range_is_exact() {
        let spec = PhantomSpec { growth_range: [2.0, 2.0], ..small_spec() };
        for s in 0..5 {
            let c = generate_case(&spec, s).unwrap();
            assert_eq!(c.growth_mm, 2.0);
            assert_eq!(c.true_annotation_t2.diameter - c.true_annotation_t1.diameter, c.growth_mm);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate_case(&spec, 3).unwrap(), generate_case(&spec, 3).unwrap());
        assert_ne!(generate_case(&spec, 3).unwrap().volume_t1, generate_case(&spec, 4).unwrap().volume_t1);
    }

    /// Measure full width at half maximum along x through the nodule centre,
    /// interpolating the two half-level crossings linearly.
    fn fwhm_x(v: &Volume, a: &NoduleAnnotation, background: f64) -> f64 {
        let c = volume_io::world_to_voxel(a.center_world, v);
        let (y, z) = (c[1].round() as usize, c[2].round() as usize);
        let profile: Vec<f64> = (0..v.dims()[0]).map(|x| v.get(x, y, z) as f64).collect();
        let cx = c[0].round() as usize;
        let peak = profile[cx - 1..=cx + 1].iter().sum::<f64>() / 3.0;
        let half = (peak + background) / 2.0;
        let mut left = cx as f64;
        for x in (1..=cx).rev() {
            if profile[x - 1] < half && profile[x] >= half {
                left = x as f64 - 1.0 + (half - profile[x - 1]) / (profile[x] - profile[x - 1]);
                break;
            }
        }
        let mut right = cx as f64;
        for x in cx..profile.len() - 1 {
            if profile[x] >= half && profile[x + 1] < half {
                right = x as f64 + (profile[x] - half) / (profile[x] - profile[x + 1]);
                break;
            }
        }
        (right - left) * v.spacing()[0]
    }

    #[test]
    fn rendered_diameter_matches_annotation() {
        let spec = PhantomSpec { volume_dims: [96, 96, 96], diameter_range_t1: [6.0, 14.0], ..small_spec() };
        for s in 0..6 {
            let c = generate_case(&spec, s).unwrap();
            for (v, a) in [(&c.volume_t1, &c.true_annotation_t1), (&c.volume_t2, &c.true_annotation_t2)] {
                let w = fwhm_x(v, a, spec.background_hu as f64);
                assert!((w - a.diameter).abs() <= 1.0, "case {s}: fwhm {w} vs diameter {}", a.diameter);
            }
        }
    }

    #[test]
    fn distractors_keep_their_distance() {
        let spec = small_spec();
        for s in 0..10 {
            let c = generate_case(&spec, s).unwrap();
            for (t, ds) in [(&c.true_annotation_t1, &c.distractors_t1), (&c.true_annotation_t2, &c.distractors_t2)] {
                for d in ds {
                    assert!(distance(d.center_world, t.center_world) >= 2.0 * spec.max_diameter());
                    assert_ne!(d.diameter, t.diameter);
                }
            }
            assert!(distance(c.true_annotation_t1.center_world, c.true_annotation_t2.center_world) <= spec.displacement_range + 1e-9);
        }
    }

    /// Offsets (whole voxels from the nodule centre) of bright voxels in a
    /// shell around the nodule, where only its vessels can be.
    fn shell_offsets(v: &Volume, a: &NoduleAnnotation, inner: f64, outer: f64) -> std::collections::BTreeSet<[i64; 3]> {
        let c = volume_io::world_to_voxel(a.center_world, v).map(|x| x.round() as i64);
        let r = outer.ceil() as i64;
        let mut out = std::collections::BTreeSet::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    let p = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if d < inner || d > outer || (0..3).any(|i| p[i] < 0 || p[i] >= v.dims()[i] as i64) {
                        continue;
                    }
                    if v.get(p[0] as usize, p[1] as usize, p[2] as usize) > -400.0 {
                        out.insert([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    /// Fraction of offsets in either set with a neighbour in the other.
    /// Centres round to whole voxels, so one voxel of slack is allowed.
    fn overlap(a: &std::collections::BTreeSet<[i64; 3]>, b: &std::collections::BTreeSet<[i64; 3]>) -> f64 {
        let near = |x: &[i64; 3], set: &std::collections::BTreeSet<[i64; 3]>| {
            (-1..=1).any(|i| (-1..=1).any(|j| (-1..=1).any(|k| set.contains(&[x[0] + i, x[1] + j, x[2] + k]))))
        };
        let hit = a.iter().filter(|x| near(x, b)).count() + b.iter().filter(|x| near(x, a)).count();
        hit as f64 / (a.len() + b.len()).max(1) as f64
    }

    #[test]
    fn tracked_vessels_persist_between_time_points() {
        let spec = PhantomSpec {
            volume_dims: [96, 96, 96],
            n_distractors: 0,
            vessels_per_nodule: 2,
            vessel_length_mm: [10.0, 10.0],
            vessel_radius_mm: [1.25, 1.25],
            ..small_spec()
        };
        for s in 0..5 {
            let c = generate_case(&spec, s).unwrap();
            let (r1, r2) = (c.true_annotation_t1.diameter / 2.0, c.true_annotation_t2.diameter / 2.0);
            let (inner, outer) = (r1.max(r2) + 2.5, r1.min(r2) + 8.0);
            let a = shell_offsets(&c.volume_t1, &c.true_annotation_t1, inner, outer);
            let b = shell_offsets(&c.volume_t2, &c.true_annotation_t2, inner, outer);
            assert!(!a.is_empty(), "case {s}: no vessel voxels");
            let same = overlap(&a, &b);
            assert!(same > 0.9, "case {s}: overlap {same}");
            // A different nodule has different vessels.
            let o = generate_case(&spec, s + 100).unwrap();
            let other = shell_offsets(&o.volume_t1, &o.true_annotation_t1, inner, outer);
            assert!(overlap(&a, &other) < 0.6, "case {s}: unrelated overlap {}", overlap(&a, &other));
        }
    }

    #[test]
    fn cramped_volume_is_a_generation_error() {
        let spec = PhantomSpec { volume_dims: [20, 64, 64], ..small_spec() };
        assert!(matches!(generate_case(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn stratified_mix_for_38_cases() {
        let signs = stratified_signs(38, 7);
        let growing = signs.iter().filter(|s| **s == GrowthSign::Growing).count();
        // Binomial expectation 38 * 0.6 = 22.8.
        assert!((21..=25).contains(&growing));
    }

    #[test]
    fn empty_dataset_has_headers() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small_spec(), 0, dir.path()).unwrap();
        assert!(m.cases.is_empty());
        assert!(volume_io::load_annotations(dir.path().join("annotations_t1.csv")).unwrap().is_empty());
        assert!(read_growth_truth(dir.path().join("growth.csv")).unwrap().is_empty());
    }

    #[test]
    fn dataset_round_trips_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let m = generate_dataset(&spec, 5, dir.path()).unwrap();
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded.cases, m.cases);
        let ann1 = volume_io::load_annotations(dir.path().join("annotations_t1.csv")).unwrap();
        let ann2 = volume_io::load_annotations(dir.path().join("annotations_t2.csv")).unwrap();
        let growth = read_growth_truth(dir.path().join("growth.csv")).unwrap();
        let signs = stratified_signs(5, spec.seed);
        for (i, mc) in m.cases.iter().enumerate() {
            let case = generate_case_with_sign(&spec, i as u64, signs[i]).unwrap();
            assert_eq!(ann1[i], case.true_annotation_t1);
            assert_eq!(ann2[i], case.true_annotation_t2);
            assert_eq!(growth[i].growth_mm, case.growth_mm);
            assert_eq!(growth[i].growth_mm > 0.0, ann2[i].diameter - ann1[i].diameter > 0.0);
            assert_eq!(volume_io::read_volume(loaded.resolve(&mc.volume_t1)).unwrap(), case.volume_t1);
        }
    }
}
