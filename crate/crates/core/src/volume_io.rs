//! CT volumes, annotations and the preprocessing chain that turns a scan
//! into network-ready patches.
//!
//! Voxels are stored x-fastest: the value at `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. Coordinates (`Vec3`) are always `(x, y, z)` and,
//! in world space, millimetres.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Lower and upper bounds of the HU window.
pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 600.0;

/// Side of the patches consumed by the classifier and siamese networks.
pub const NODULE_PATCH_SIDE: usize = 32;
/// Side of the patches consumed by the detector.
pub const DETECTOR_PATCH_SIDE: usize = 128;
/// Overlap between consecutive detector patches.
pub const DETECTOR_PATCH_OVERLAP: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: Vec3, origin: Vec3, voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::Shape(format!("{} voxels for dims {dims:?} ({n} expected)", voxels.len())));
        }
        Ok(Self { dims, spacing, origin, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: Vec3, origin: Vec3, value: f32) -> Result<Self> {
        Self::new(dims, spacing, origin, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Value at integer coordinates, or `fill` outside the grid.
    #[inline]
    pub fn get_or(&self, x: isize, y: isize, z: isize, fill: f32) -> f32 {
        let [nx, ny, nz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
            fill
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    /// Physical size along each axis (`dims * spacing`).
    pub fn extent(&self) -> Vec3 {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// Trilinear sample at a continuous voxel coordinate, clamped to the grid.
    pub fn sample_clamped(&self, p: Vec3) -> f32 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut f = [0f32; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let c = p[a].clamp(0.0, hi);
            let fl = c.floor();
            i0[a] = fl as usize;
            i1[a] = (i0[a] + 1).min(self.dims[a] - 1);
            f[a] = (c - fl) as f32;
        }
        let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let c00 = lerp(self.get(i0[0], i0[1], i0[2]), self.get(i1[0], i0[1], i0[2]), f[0]);
        let c10 = lerp(self.get(i0[0], i1[1], i0[2]), self.get(i1[0], i1[1], i0[2]), f[0]);
        let c01 = lerp(self.get(i0[0], i0[1], i1[2]), self.get(i1[0], i0[1], i1[2]), f[0]);
        let c11 = lerp(self.get(i0[0], i1[1], i1[2]), self.get(i1[0], i1[1], i1[2]), f[0]);
        lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimePoint {
    T1,
    T2,
}

impl fmt::Display for TimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimePoint::T1 => "T1",
            TimePoint::T2 => "T2",
        })
    }
}

impl FromStr for TimePoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "T1" | "t1" => Ok(TimePoint::T1),
            "T2" | "t2" => Ok(TimePoint::T2),
            other => Err(format!("expected T1 or T2, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub series_id: String,
    pub center_world: Vec3,
    pub diameter: f64,
    pub time_point: TimePoint,
}

/// Cubic crop of a volume, x-fastest like [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    voxels: Vec<f32>,
    normalized: bool,
    source_center_world: Vec3,
}

impl Patch {
    pub fn new(side: usize, voxels: Vec<f32>, normalized: bool, source_center_world: Vec3) -> Result<Self> {
        if voxels.len() != side * side * side {
            return Err(Error::Shape(format!("{} voxels for a patch of side {side}", voxels.len())));
        }
        Ok(Self { side, voxels, normalized, source_center_world })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn source_center_world(&self) -> Vec3 {
        self.source_center_world
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[x + self.side * (y + self.side * z)]
    }
}

/// Resample to `target_spacing` with trilinear interpolation.
///
/// Output dims are `round(dim * spacing / target)` per axis; voxel `i` of the
/// output sits at the same world position as continuous input index
/// `i * target / spacing`, so the origin is unchanged.
pub fn resample_isotropic(v: &Volume, target_spacing: Vec3) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target_spacing:?}")));
    }
    let dims = [0, 1, 2].map(|a| ((v.dims[a] as f64 * v.spacing[a] / target_spacing[a]).round() as usize).max(1));
    let scale = [0, 1, 2].map(|a| target_spacing[a] / v.spacing[a]);
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out.push(v.sample_clamped([x as f64 * scale[0], y as f64 * scale[1], z as f64 * scale[2]]));
            }
        }
    }
    Volume::new(dims, target_spacing, v.origin, out)
}

/// Clip to `[-1000, 600]` HU and map linearly onto `[0, 1]`.
#[inline]
pub fn normalize_hu_value(hu: f32) -> f32 {
    if hu.is_nan() {
        return 0.0;
    }
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

pub fn normalize_hu(v: &Volume) -> Volume {
    let mut out = v.clone();
    out.voxels.iter_mut().for_each(|x| *x = normalize_hu_value(*x));
    out
}

/// Resample to 1 mm isotropic and normalize.
pub fn preprocess(v: &Volume) -> Result<Volume> {
    let iso = if v.spacing == [1.0; 3] { v.clone() } else { resample_isotropic(v, [1.0; 3])? };
    Ok(normalize_hu(&iso))
}

pub fn world_to_voxel(p_world: Vec3, v: &Volume) -> Vec3 {
    [0, 1, 2].map(|a| (p_world[a] - v.origin[a]) / v.spacing[a])
}

pub fn voxel_to_world(p_voxel: Vec3, v: &Volume) -> Vec3 {
    [0, 1, 2].map(|a| v.origin[a] + p_voxel[a] * v.spacing[a])
}

/// Integer voxel bounds `[start, start + side)` per axis of the cube centred
/// on `center_world`.
pub fn patch_start(v: &Volume, center_world: Vec3, side: usize) -> [isize; 3] {
    let c = world_to_voxel(center_world, v);
    [0, 1, 2].map(|a| c[a].floor() as isize - (side / 2) as isize)
}

/// Cubic crop of `side` voxels around `center_world`; outside voxels are 0
/// (normalized air).
pub fn extract_patch(v: &Volume, center_world: Vec3, side: usize) -> Result<Patch> {
    if side < 1 {
        return Err(Error::InvalidArgument("patch side must be >= 1".into()));
    }
    let start = patch_start(v, center_world, side);
    let mut voxels = Vec::with_capacity(side * side * side);
    for z in 0..side as isize {
        for y in 0..side as isize {
            for x in 0..side as isize {
                voxels.push(v.get_or(start[0] + x, start[1] + y, start[2] + z, 0.0));
            }
        }
    }
    let normalized = voxels.iter().all(|x| (0.0..=1.0).contains(x));
    Patch::new(side, voxels, normalized, center_world)
}

/// Tile start offsets along one axis: stride `side - overlap`, with the last
/// tile shifted back so it ends on the boundary. Axes shorter than `side`
/// get a single tile at 0 (padded).
pub fn tile_starts(dim: usize, side: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap >= side {
        return Err(Error::InvalidArgument(format!("overlap {overlap} must be smaller than side {side}")));
    }
    if dim <= side {
        return Ok(vec![0]);
    }
    let stride = side - overlap;
    let count = 1 + (dim - side).div_ceil(stride);
    Ok((0..count).map(|i| (i * stride).min(dim - side)).collect())
}

/// One tile of [`split_overlapping`].
#[derive(Debug, Clone)]
pub struct PatchTile {
    pub patch: Patch,
    /// Voxel offset of the tile's `(0, 0, 0)` corner in the volume, `(x, y, z)`.
    pub start: [usize; 3],
    pub location: LocationGrid,
}

/// Relative scan coordinates of a tile at 1/4 resolution, scaled to `[-1, 1]`.
/// Stored channels-first: `[3][g][g][g]` with channels `(x, y, z)` and the
/// grid laid out z-major, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationGrid {
    pub side: usize,
    pub values: Vec<f32>,
}

/// Downsampling factor between a detector tile and its location grid.
pub const LOCATION_GRID_STRIDE: usize = 4;

pub fn location_grid(dims: [usize; 3], start: [usize; 3], side: usize) -> LocationGrid {
    location_grid_at(dims, start.map(|s| s as isize), side)
}

/// [`location_grid`] for a window that may start outside the volume.
pub fn location_grid_at(dims: [usize; 3], start: [isize; 3], side: usize) -> LocationGrid {
    let g = side / LOCATION_GRID_STRIDE;
    let mut values = vec![0f32; 3 * g * g * g];
    for axis in 0..3 {
        let denom = (dims[axis].max(2) - 1) as f64;
        for k in 0..g {
            for j in 0..g {
                for i in 0..g {
                    let cell = [i, j, k][axis];
                    let pos = start[axis] as f64 + (cell * LOCATION_GRID_STRIDE) as f64 + (LOCATION_GRID_STRIDE as f64 - 1.0) / 2.0;
                    let rel = (pos / denom * 2.0 - 1.0).clamp(-1.0, 1.0);
                    values[axis * g * g * g + (k * g + j) * g + i] = rel as f32;
                }
            }
        }
    }
    LocationGrid { side: g, values }
}

/// Overlapping cubic tiles covering the whole volume, each with its location grid.
pub fn split_overlapping(v: &Volume, side: usize, overlap: usize) -> Result<Vec<PatchTile>> {
    let starts: Vec<Vec<usize>> = (0..3).map(|a| tile_starts(v.dims[a], side, overlap)).collect::<Result<_>>()?;
    let mut tiles = Vec::new();
    for &sz in &starts[2] {
        for &sy in &starts[1] {
            for &sx in &starts[0] {
                let start = [sx, sy, sz];
                let mut voxels = Vec::with_capacity(side * side * side);
                for z in 0..side {
                    for y in 0..side {
                        for x in 0..side {
                            voxels.push(v.get_or((sx + x) as isize, (sy + y) as isize, (sz + z) as isize, 0.0));
                        }
                    }
                }
                let center = voxel_to_world([0, 1, 2].map(|a| (start[a] + side / 2) as f64), v);
                let normalized = voxels.iter().all(|x| (0.0..=1.0).contains(x));
                tiles.push(PatchTile {
                    patch: Patch::new(side, voxels, normalized, center)?,
                    start,
                    location: location_grid(v.dims, start, side),
                });
            }
        }
    }
    Ok(tiles)
}

pub const ANNOTATION_HEADER: [&str; 6] = ["series_id", "coord_x", "coord_y", "coord_z", "diameter_mm", "time_point"];

/// Read a LUNA-style annotation CSV.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<NoduleAnnotation>> {
    read_annotations(File::open(path)?)
}

pub fn read_annotations<R: Read>(reader: R) -> Result<Vec<NoduleAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut columns = [0usize; 6];
    for (slot, name) in columns.iter_mut().zip(ANNOTATION_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse { row: 0, column: name.into(), message: "missing column".into() })?;
    }
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| -> Result<&str> {
            record.get(columns[c]).ok_or_else(|| Error::Parse {
                row,
                column: ANNOTATION_HEADER[c].into(),
                message: "missing field".into(),
            })
        };
        let number = |c: usize| -> Result<f64> {
            let raw = field(c)?;
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: ANNOTATION_HEADER[c].into(),
                message: format!("`{raw}` is not a number"),
            })
        };
        let diameter = number(4)?;
        if !(diameter > 0.0) {
            return Err(Error::Parse { row, column: "diameter_mm".into(), message: "diameter must be positive".into() });
        }
        let time_point = field(5)?
            .parse::<TimePoint>()
            .map_err(|message| Error::Parse { row, column: "time_point".into(), message })?;
        out.push(NoduleAnnotation {
            series_id: field(0)?.to_string(),
            center_world: [number(1)?, number(2)?, number(3)?],
            diameter,
            time_point,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &[NoduleAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ANNOTATION_HEADER)?;
    for a in annotations {
        w.write_record([
            a.series_id.clone(),
            a.center_world[0].to_string(),
            a.center_world[1].to_string(),
            a.center_world[2].to_string(),
            a.diameter.to_string(),
            a.time_point.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Element type of a volume container payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoxelType {
    F32,
    I16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    pub dtype: VoxelType,
}

/// Write the container: one line of JSON header, `\n`, then the little-endian
/// x-fastest payload. `I16` requires integral values in range.
pub fn write_volume(path: impl AsRef<Path>, v: &Volume, dtype: VoxelType) -> Result<()> {
    let header = VolumeHeader { dims: v.dims, spacing: v.spacing, origin: v.origin, dtype };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    match dtype {
        VoxelType::F32 => {
            for x in &v.voxels {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        VoxelType::I16 => {
            for x in &v.voxels {
                if x.fract() != 0.0 || *x < i16::MIN as f32 || *x > i16::MAX as f32 {
                    return Err(Error::InvalidArgument(format!("{x} cannot be stored as i16")));
                }
                w.write_all(&(*x as i16).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: VolumeHeader = serde_json::from_str(line.trim_end())?;
    let n: usize = header.dims.iter().product();
    let width = match header.dtype {
        VoxelType::F32 => 4,
        VoxelType::I16 => 2,
    };
    let mut raw = Vec::with_capacity(n * width);
    r.read_to_end(&mut raw)?;
    if raw.len() != n * width {
        return Err(Error::Shape(format!("payload has {} bytes, header implies {}", raw.len(), n * width)));
    }
    let voxels = match header.dtype {
        VoxelType::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
        VoxelType::I16 => raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as f32).collect(),
    };
    Volume::new(header.dims, header.spacing, header.origin, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3], spacing: Vec3) -> Volume {
        let n = dims.iter().product();
        Volume::new(dims, spacing, [0.0; 3], (0..n).map(|i| (i % 997) as f32).collect()).unwrap()
    }

    #[test]
    fn rejects_invalid_volumes() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], [0.0; 3], vec![]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3], vec![0.0]).is_err());
        assert!(Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0]).is_err());
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = ramp([100, 100, 100], [1.0; 3]);
        let r = resample_isotropic(&v, [1.0; 3]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn resample_output_dims_follow_physical_extent() {
        let v = ramp([100, 100, 50], [0.7, 0.7, 2.0]);
        let r = resample_isotropic(&v, [1.0; 3]).unwrap();
        // Per-axis extent: 70 mm, 70 mm, 100 mm at 1 mm/voxel.
        let want: Vec<usize> = v.extent().iter().map(|e| (e / 1.0).round() as usize).collect();
        assert_eq!(r.dims().to_vec(), want);
        assert_eq!(r.dims(), [70, 70, 100]);
        assert_eq!(r.spacing(), [1.0; 3]);
    }

    #[test]
    fn resample_rejects_non_positive_spacing() {
        let v = ramp([4, 4, 4], [1.0; 3]);
        assert!(matches!(resample_isotropic(&v, [1.0, 0.0, 1.0]), Err(Error::InvalidArgument(_))));
        assert!(resample_isotropic(&v, [1.0, -2.0, 1.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_hu_value(-1000.0), 0.0);
        assert_eq!(normalize_hu_value(600.0), 1.0);
        assert_eq!(normalize_hu_value(-200.0), 0.5);
        assert_eq!(normalize_hu_value(-3000.0), 0.0);
        assert_eq!(normalize_hu_value(3000.0), 1.0);
    }

    #[test]
    fn world_voxel_examples() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], [0.0; 3], 0.0).unwrap();
        assert_eq!(world_to_voxel([0.0; 3], &v), [0.0; 3]);
        let v2 = Volume::filled([4, 4, 4], [2.0; 3], [0.0; 3], 0.0).unwrap();
        assert_eq!(world_to_voxel([10.0, 20.0, 30.0], &v2), [5.0, 10.0, 15.0]);
    }

    #[test]
    fn patch_at_volume_middle_needs_no_padding() {
        let v = normalize_hu(&ramp([64, 64, 64], [1.0; 3]));
        let p = extract_patch(&v, [32.0, 32.0, 32.0], 32).unwrap();
        assert_eq!(p.side(), 32);
        assert_eq!(p.get(0, 0, 0), v.get(16, 16, 16));
        assert_eq!(p.get(31, 31, 31), v.get(47, 47, 47));
        assert!(p.is_normalized());
    }

    #[test]
    fn corner_patch_is_seven_eighths_padding() {
        let v = Volume::filled([64, 64, 64], [1.0; 3], [0.0; 3], 0.75).unwrap();
        let p = extract_patch(&v, [0.0; 3], 32).unwrap();
        // Oracle: count voxels of [-16, 16)^3 falling outside [0, 64)^3.
        let mut outside = 0;
        for z in -16..16i32 {
            for y in -16..16i32 {
                for x in -16..16i32 {
                    if x < 0 || y < 0 || z < 0 {
                        outside += 1;
                    }
                }
            }
        }
        let zeros = p.voxels().iter().filter(|&&x| x == 0.0).count();
        assert_eq!(zeros, outside);
        assert_eq!(zeros * 8, 32 * 32 * 32 * 7);
    }

    #[test]
    fn patch_rejects_zero_side() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], [0.0; 3], 0.0).unwrap();
        assert!(matches!(extract_patch(&v, [1.0; 3], 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_tile_for_detector_sized_volume() {
        let v = Volume::filled([128, 128, 128], [1.0; 3], [0.0; 3], 0.5).unwrap();
        let tiles = split_overlapping(&v, 128, 32).unwrap();
        assert_eq!(tiles.len(), 1);
        let loc = &tiles[0].location;
        assert_eq!(loc.side, 32);
        assert_eq!(loc.values.len(), 32 * 32 * 32 * 3);
        let min = loc.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = loc.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(min < -0.95 && max > 0.95);
    }

    /// Brute-force 1D tiling: walk forward by the stride, clamping the last
    /// tile onto the boundary, until the axis is covered.
    fn tiling_oracle(dim: usize, side: usize, overlap: usize) -> Vec<usize> {
        let mut starts = vec![0usize];
        while starts.last().unwrap() + side < dim {
            let next = (starts.last().unwrap() + side - overlap).min(dim - side);
            starts.push(next);
        }
        starts
    }

    #[test]
    fn tiles_of_224_volume() {
        assert_eq!(tile_starts(224, 128, 32).unwrap(), tiling_oracle(224, 128, 32));
        assert_eq!(tile_starts(224, 128, 32).unwrap(), vec![0, 96]);
        assert_eq!(tile_starts(225, 128, 32).unwrap(), vec![0, 96, 97]);
        assert!(tile_starts(100, 32, 32).is_err());
    }

    #[test]
    fn annotation_csv_parsing() {
        let empty = "series_id,coord_x,coord_y,coord_z,diameter_mm,time_point\n";
        assert!(read_annotations(empty.as_bytes()).unwrap().is_empty());
        let one = format!("{empty}s1,10.0,-20.5,3.0,6.5,T1\n");
        let a = read_annotations(one.as_bytes()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].center_world, [10.0, -20.5, 3.0]);
        assert_eq!(a[0].diameter, 6.5);
        assert_eq!(a[0].time_point, TimePoint::T1);
        let bad = format!("{empty}s1,10.0,-20.5,3.0,abc,T1\n");
        match read_annotations(bad.as_bytes()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "diameter_mm");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = "series_id,coord_x,coord_y,diameter_mm,time_point\n";
        assert!(matches!(read_annotations(missing.as_bytes()), Err(Error::Parse { column, .. }) if column == "coord_z"));
    }

    #[test]
    fn container_round_trips_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([3, 2, 2], [0.5, 0.75, 2.0], [-10.0, 3.5, 7.25], (0..12).map(|i| i as f32 * 10.0 - 50.0).collect()).unwrap();
        for dtype in [VoxelType::F32, VoxelType::I16] {
            let path = dir.path().join("v.vol");
            write_volume(&path, &v, dtype).unwrap();
            assert_eq!(read_volume(&path).unwrap(), v);
        }
        let frac = Volume::filled([1, 1, 1], [1.0; 3], [0.0; 3], 0.5).unwrap();
        assert!(write_volume(dir.path().join("x.vol"), &frac, VoxelType::I16).is_err());
    }

    proptest! {
        #[test]
        fn normalize_range_and_monotone(a in -5000.0f32..5000.0, b in -5000.0f32..5000.0) {
            let (na, nb) = (normalize_hu_value(a), normalize_hu_value(b));
            prop_assert!((0.0..=1.0).contains(&na));
            if a <= b { prop_assert!(na <= nb); }
        }

        #[test]
        fn constant_volume_resamples_to_constant(
            dims in proptest::array::uniform3(1usize..12),
            sp in proptest::array::uniform3(0.3f64..3.0),
            target in proptest::array::uniform3(0.5f64..2.5),
            value in -1000.0f32..600.0,
        ) {
            let v = Volume::filled(dims, sp, [0.0; 3], value).unwrap();
            let r = resample_isotropic(&v, target).unwrap();
            prop_assert!(r.voxels().iter().all(|&x| x == value));
            for a in 0..3 {
                prop_assert!((r.extent()[a] - v.extent()[a]).abs() <= target[a] * 0.5 + 1e-9 || r.dims()[a] == 1);
            }
        }

        #[test]
        fn voxel_world_round_trip(ix in -512i32..512, iy in -512i32..512, iz in -512i32..512, e in 0i32..3, ox in -64i32..64) {
            let s = 2f64.powi(e - 1);
            let v = Volume::filled([1, 1, 1], [s, s * 2.0, s], [ox as f64, 0.5, -ox as f64], 0.0).unwrap();
            let p = [ix as f64, iy as f64, iz as f64];
            prop_assert_eq!(world_to_voxel(voxel_to_world(p, &v), &v), p);
        }

        #[test]
        fn tiles_cover_every_voxel(dims in proptest::array::uniform3(1usize..70), side in 8usize..40, overlap_frac in 0usize..4) {
            let overlap = side * overlap_frac / 4;
            let v = Volume::filled(dims, [1.0; 3], [0.0; 3], 0.5).unwrap();
            let tiles = split_overlapping(&v, side, overlap).unwrap();
            let mut covered = vec![0u32; dims.iter().product()];
            for t in &tiles {
                for z in t.start[2]..(t.start[2] + side).min(dims[2]) {
                    for y in t.start[1]..(t.start[1] + side).min(dims[1]) {
                        for x in t.start[0]..(t.start[0] + side).min(dims[0]) {
                            covered[v.index(x, y, z)] += 1;
                        }
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c >= 1));
            let per_axis: usize = (0..3).map(|a| tiling_oracle(dims[a], side, overlap).len()).product();
            prop_assert_eq!(tiles.len(), per_axis);
        }

        #[test]
        fn padding_iff_cube_leaves_volume(cx in -10.0f64..50.0, cy in -10.0f64..50.0, cz in -10.0f64..50.0, side in 1usize..20) {
            let v = Volume::filled([40, 40, 40], [1.0; 3], [0.0; 3], 0.5).unwrap();
            let p = extract_patch(&v, [cx, cy, cz], side).unwrap();
            let q = extract_patch(&v, [cx, cy, cz], side).unwrap();
            prop_assert_eq!(&p, &q);
            let start = patch_start(&v, [cx, cy, cz], side);
            let inside = (0..3).all(|a| start[a] >= 0 && start[a] + side as isize <= 40);
            let padded = p.voxels().iter().any(|&x| x == 0.0);
            prop_assert_eq!(padded, !inside);
        }
    }
}
