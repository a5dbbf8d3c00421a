//! Anisotropic scan in, network-ready data out: resample to 1 mm, map HU to
//! [0, 1], cut a 32³ nodule patch and the 128³ detector tiles.
//!
//! cargo run --release --example preprocess_volume

use nodule_reid::phantom::{generate_case, PhantomSpec};
use nodule_reid::volume_io::{extract_patch, preprocess, split_overlapping, Volume};

fn main() -> anyhow::Result<()> {
    let case = generate_case(&PhantomSpec::default(), 0)?;
    // Pretend the scanner used 2 mm slices: keep every other z plane.
    let v = &case.volume_t1;
    let [nx, ny, nz] = v.dims();
    let thick: Vec<f32> = (0..nz / 2).flat_map(|z| (0..ny).flat_map(move |y| (0..nx).map(move |x| v.get(x, y, 2 * z)))).collect();
    let spacing = v.spacing();
    let scan = Volume::new([nx, ny, nz / 2], [spacing[0], spacing[1], 2.0], v.origin(), thick)?;
    println!("raw: dims {:?}, spacing {:?}", scan.dims(), scan.spacing());

    let iso = preprocess(&scan)?;
    let (lo, hi) = iso.voxels().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    println!("preprocessed: dims {:?}, spacing {:?}, values in [{lo:.3}, {hi:.3}]", iso.dims(), iso.spacing());

    let nodule = &case.true_annotation_t1;
    let patch = extract_patch(&iso, nodule.center_world, 32)?;
    let centre = patch.get(16, 16, 16);
    println!("32³ patch at {:?}: centre value {centre:.3} (nodule diameter {:.2} mm)", nodule.center_world, nodule.diameter);

    let tiles = split_overlapping(&iso, 128, 32)?;
    println!("{} detector tile(s) of 128³", tiles.len());
    Ok(())
}
