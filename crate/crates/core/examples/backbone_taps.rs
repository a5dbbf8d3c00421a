//! Feature maps of the 3D ResNet at its four taps for one nodule patch, and
//! a checkpoint round trip.
//!
//! cargo run --release --example backbone_taps

use nodule_reid::backbone::{BackboneModel, Tap};
use nodule_reid::phantom::{generate_case, PhantomSpec};
use nodule_reid::volume_io::{extract_patch, preprocess};

fn main() -> anyhow::Result<()> {
    let case = generate_case(&PhantomSpec::default(), 3)?;
    let vol = preprocess(&case.volume_t1)?;
    let patch = extract_patch(&vol, case.true_annotation_t1.center_world, 32)?;

    let model = BackboneModel::new(0);
    let maps = model.extract_features(&patch, &Tap::ALL)?;
    for (tap, t) in &maps {
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        println!("{tap:>8}: shape {:?}, mean activation {mean:.4}", t.shape());
    }
    println!("nodule probability (untrained): {:.3}", model.classify(&patch)?);

    let path = std::env::temp_dir().join("backbone_taps_example.ckpt");
    model.save(&path)?;
    let back = BackboneModel::load(&path)?;
    println!("checkpoint round trip preserves outputs: {}", back.classify(&patch)? == model.classify(&patch)?);
    Ok(())
}
