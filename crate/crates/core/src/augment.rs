//! Random 3D flips, rotations, zoom and intensity jitter for training.
//!
//! Geometric transforms are applied about the grid centre by trilinear
//! resampling; out-of-grid samples read `fill`. A [`Transform`] can also map
//! points, so detector targets follow their crop.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub flip: bool,
    pub rotation: bool,
    pub zoom: bool,
    pub lighting: bool,
    /// Maximum absolute rotation about each axis, degrees.
    pub max_rotation_deg: f64,
    pub zoom_range: [f64; 2],
    /// Multiplicative intensity jitter, e.g. 0.1 for ±10%.
    pub lighting_jitter: f32,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip: true,
            rotation: true,
            zoom: true,
            lighting: false,
            max_rotation_deg: 15.0,
            zoom_range: [0.9, 1.1],
            lighting_jitter: 0.1,
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn inverse(m: &Mat3) -> Mat3 {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Affine map about the grid centre, in voxel units with axes ordered
/// `(x, y, z)`. Output voxel `p` reads input at `c + matrix * (p - c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    matrix: Mat3,
    identity: bool,
}

impl Transform {
    pub fn identity() -> Self {
        Self { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], identity: true }
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn sample<R: Rng + ?Sized>(aug: &Augmentation, rng: &mut R) -> Self {
        let mut m = Self::identity().matrix;
        let mut identity = true;
        if aug.flip {
            for (a, row) in m.iter_mut().enumerate() {
                if rng.gen_bool(0.5) {
                    row[a] = -1.0;
                    identity = false;
                }
            }
        }
        if aug.zoom && aug.zoom_range[0] < aug.zoom_range[1] {
            let s = rng.gen_range(aug.zoom_range[0]..=aug.zoom_range[1]);
            // Reading input at a scaled coordinate zooms by 1/s.
            m = matmul(&[[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]], &m);
            identity = false;
        }
        if aug.rotation && aug.max_rotation_deg > 0.0 {
            let r = aug.max_rotation_deg.to_radians();
            for axis in 0..3 {
                let t: f64 = rng.gen_range(-r..=r);
                let (c, s) = (t.cos(), t.sin());
                let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut rot = Self::identity().matrix;
                rot[i][i] = c;
                rot[i][j] = -s;
                rot[j][i] = s;
                rot[j][j] = c;
                m = matmul(&rot, &m);
            }
            identity = false;
        }
        Self { matrix: m, identity }
    }

    /// Where an input point (voxel coordinates) ends up in the output grid.
    pub fn forward_point(&self, dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
        let c = center(dims);
        let d = apply(&inverse(&self.matrix), [p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        [d[0] + c[0], d[1] + c[1], d[2] + c[2]]
    }

    /// Factor by which lengths grow from input to output.
    pub fn scale(&self) -> f64 {
        let m = &self.matrix;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        1.0 / det.abs().cbrt()
    }

    /// Resample a grid with `dims = [nx, ny, nz]` (x fastest).
    pub fn warp(&self, src: &[f32], dims: [usize; 3], fill: f32) -> Vec<f32> {
        if self.identity {
            return src.to_vec();
        }
        let [nx, ny, nz] = dims;
        let c = center(dims);
        let mut out = Vec::with_capacity(src.len());
        let get = |x: isize, y: isize, z: isize| -> f32 {
            if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
                fill
            } else {
                src[(z as usize * ny + y as usize) * nx + x as usize]
            }
        };
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let q = apply(&self.matrix, [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]]);
                    let q = [q[0] + c[0], q[1] + c[1], q[2] + c[2]];
                    let f = q.map(f64::floor);
                    let t = [q[0] - f[0], q[1] - f[1], q[2] - f[2]].map(|v| v as f32);
                    let (x0, y0, z0) = (f[0] as isize, f[1] as isize, f[2] as isize);
                    let mut acc = 0.0f32;
                    for dz in 0..2 {
                        let wz = if dz == 0 { 1.0 - t[2] } else { t[2] };
                        if wz == 0.0 {
                            continue;
                        }
                        for dy in 0..2 {
                            let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
                            if wy == 0.0 {
                                continue;
                            }
                            for dx in 0..2 {
                                let wx = if dx == 0 { 1.0 - t[0] } else { t[0] };
                                if wx == 0.0 {
                                    continue;
                                }
                                acc += wx * wy * wz * get(x0 + dx, y0 + dy, z0 + dz);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }
}

fn center(dims: [usize; 3]) -> [f64; 3] {
    dims.map(|d| (d as f64 - 1.0) / 2.0)
}

impl Augmentation {
    pub fn none() -> Self {
        Self { flip: false, rotation: false, zoom: false, lighting: false, ..Self::default() }
    }

    pub fn is_active(&self) -> bool {
        self.flip || self.rotation || self.zoom || self.lighting
    }

    /// Augment a normalized cube of side `side`; intensities stay in `[0, 1]`.
    pub fn apply_cube<R: Rng + ?Sized>(&self, voxels: &[f32], side: usize, rng: &mut R) -> Vec<f32> {
        let t = Transform::sample(self, rng);
        let mut out = t.warp(voxels, [side; 3], 0.0);
        self.jitter(&mut out, rng);
        out
    }

    pub fn jitter<R: Rng + ?Sized>(&self, voxels: &mut [f32], rng: &mut R) {
        if self.lighting && self.lighting_jitter > 0.0 {
            let k = 1.0 + rng.gen_range(-self.lighting_jitter..=self.lighting_jitter);
            for v in voxels {
                *v = (*v * k).clamp(0.0, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(side: usize) -> Vec<f32> {
        (0..side * side * side).map(|i| (i % 7) as f32 / 7.0).collect()
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = cube(6);
        assert_eq!(Augmentation::none().apply_cube(&v, 6, &mut rng), v);
    }

    #[test]
    fn flips_are_exact_permutations() {
        let aug = Augmentation { flip: true, ..Augmentation::none() };
        let v = cube(5);
        let mut sorted = v.clone();
        sorted.sort_by(f32::total_cmp);
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = aug.apply_cube(&v, 5, &mut rng);
            out.sort_by(f32::total_cmp);
            assert_eq!(out, sorted);
        }
    }

    #[test]
    fn points_follow_the_warp() {
        // A single bright voxel must land where forward_point says.
        let aug = Augmentation { zoom_range: [0.8, 1.2], ..Augmentation::default() };
        let dims = [17, 17, 17];
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Transform::sample(&aug, &mut rng);
            let p = [6.0, 9.0, 10.0];
            let q = t.forward_point(dims, p);
            let mut src = vec![0.0f32; 17 * 17 * 17];
            src[(10 * 17 + 9) * 17 + 6] = 1.0;
            let out = t.warp(&src, dims, 0.0);
            let (mut best, mut arg) = (0.0, 0);
            for (i, v) in out.iter().enumerate() {
                if *v > best {
                    best = *v;
                    arg = i;
                }
            }
            let found = [(arg % 17) as f64, ((arg / 17) % 17) as f64, (arg / 289) as f64];
            for a in 0..3 {
                assert!((found[a] - q[a]).abs() <= 1.0, "seed {seed}: {found:?} vs {q:?}");
            }
        }
    }

    #[test]
    fn lighting_stays_in_unit_range() {
        let aug = Augmentation { lighting: true, ..Augmentation::none() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = aug.apply_cube(&vec![0.95; 27], 3, &mut rng);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zoom_scale_is_reported() {
        let aug = Augmentation { flip: false, rotation: false, zoom: true, zoom_range: [0.5, 0.5 + 1e-12], ..Augmentation::none() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Transform::sample(&aug, &mut rng);
        assert!((t.scale() - 2.0).abs() < 1e-9);
    }
}
