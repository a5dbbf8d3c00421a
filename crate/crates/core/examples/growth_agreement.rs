//! Growth outcomes and agreement statistics for predicted versus true
//! diameter changes, with a Bland-Altman plot.
//!
//! cargo run --release --example growth_agreement -- [out_dir]

use nodule_reid::growth::{agreement, bland_altman, confusion, GrowthAssessment, TTestTransform};
use nodule_reid::metrics::derive_scores;
use nodule_reid::plot::bland_altman_svg;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "growth_out".into()));
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Measurements with about 0.7 mm of error on each diameter.
    let rows: Vec<GrowthAssessment> = (0..30)
        .map(|i| {
            let d1: f64 = rng.gen_range(5.0..12.0);
            let g: f64 = rng.gen_range(-3.0..5.0);
            let noise = |r: &mut ChaCha8Rng| r.gen_range(-1.2..1.2);
            GrowthAssessment::new(&format!("case{i:02}"), d1 + noise(&mut rng), d1 + g + noise(&mut rng), g)
        })
        .collect();
    let cm = confusion(&rows);
    let scores = derive_scores(&cm)?;
    println!("TP {} FP {} TN {} FN {}", cm.tp, cm.fp, cm.tn, cm.fn_);
    println!("precision {:.3} recall {:.3} F1 {:.3} accuracy {:.3}", scores.precision, scores.recall, scores.f1, scores.accuracy);

    let pred: Vec<f64> = rows.iter().map(|r| r.delta_pred).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.delta_true).collect();
    let a = agreement(&pred, &truth, TTestTransform::Raw)?;
    println!("mean difference {:.3} mm, limits of agreement [{:.3}, {:.3}]", a.mean_diff, a.loa_low, a.loa_high);
    println!("MAE {:.3} ± {:.3}, MSE {:.3} ± {:.3}, R² {:?}, t-test p {:.3}", a.mae, a.mae_sd, a.mse, a.mse_sd, a.r2, a.t_test_p);
    let path = out.join("bland_altman.svg");
    bland_altman_svg(&pred, &truth, &bland_altman(&pred, &truth)?, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
