//! Generate a small seeded longitudinal phantom dataset and show its ground truth.
//!
//! cargo run --release --example phantom_dataset -- [out_dir]

use nodule_reid::phantom::{generate_dataset, read_growth_truth, PhantomSpec};
use nodule_reid::volume_io::load_annotations;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "phantom_out".into());
    let spec = PhantomSpec { seed: 7, ..Default::default() };
    let manifest = generate_dataset(&spec, 5, &out)?;
    println!("wrote {}", manifest.path().display());
    let t1 = load_annotations(manifest.resolve(&manifest.annotations_t1))?;
    for (g, a) in read_growth_truth(manifest.resolve(&manifest.growth))?.iter().zip(&t1) {
        println!(
            "{}: {:.2} -> {:.2} mm (growth {:+.2}), T1 centre {:?}",
            g.series_id, g.diameter_t1, g.diameter_t2, g.growth_mm, a.center_world.map(|c| (c * 10.0).round() / 10.0)
        );
    }
    let distractors: usize = manifest.cases.iter().map(|c| c.distractors_t1.len() + c.distractors_t2.len()).sum();
    println!("{} cases, {distractors} distractor nodules", manifest.cases.len());
    Ok(())
}
