//! The eight siamese configurations: what each one trains and what it says
//! about a same-nodule pair versus a different-nodule pair.
//!
//! cargo run --release --example siamese_configs

use nodule_reid::backbone::BackboneModel;
use nodule_reid::phantom::{generate_case, PhantomSpec};
use nodule_reid::siamese::{ConfigName, SiameseConfig, SiameseModel};
use nodule_reid::volume_io::{extract_patch, preprocess};

fn main() -> anyhow::Result<()> {
    let case = generate_case(&PhantomSpec::default(), 1)?;
    let (v1, v2) = (preprocess(&case.volume_t1)?, preprocess(&case.volume_t2)?);
    let same_t1 = extract_patch(&v1, case.true_annotation_t1.center_world, 32)?;
    let same_t2 = extract_patch(&v2, case.true_annotation_t2.center_world, 32)?;
    let other = extract_patch(&v2, case.distractors_t2[0].center_world, 32)?;

    let backbone = BackboneModel::new(0);
    println!("{:<5} {:<9} {:<28} {:>12} {:>10} {:>10}", "name", "backbone", "taps", "trainable", "same", "different");
    for name in ConfigName::ALL {
        let config = SiameseConfig::from_name(name);
        let mut model = SiameseModel::build(&config, &backbone, 0)?;
        let taps: Vec<&str> = config.feature_taps.iter().map(|t| t.name()).collect();
        println!(
            "{:<5} {:<9} {:<28} {:>12} {:>10.4} {:>10.4}",
            name.as_str(),
            format!("{:?}", config.pretrained_mode).to_lowercase(),
            taps.join("+"),
            model.num_trainable(),
            model.forward_pair(&same_t1, &same_t2)?,
            model.forward_pair(&same_t1, &other)?
        );
    }
    println!("(untrained heads: distances for BC configurations, probabilities otherwise)");
    Ok(())
}
