//! FROC curve with 95% bootstrap intervals for a simulated detector.
//!
//! cargo run --release --example froc_bootstrap -- [out_dir]

use nodule_reid::detector::Candidate;
use nodule_reid::metrics::{FrocCurve, ScanDetections, DEFAULT_LEVEL, DEFAULT_RESAMPLES, FROC_RATES};
use nodule_reid::plot::froc_svg;
use nodule_reid::volume_io::{NoduleAnnotation, TimePoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "froc_out".into()));
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scans: Vec<ScanDetections> = (0..80)
        .map(|i| {
            let annotations: Vec<NoduleAnnotation> = (0..rng.gen_range(1..3))
                .map(|k| NoduleAnnotation { series_id: format!("scan{i}"), center_world: [k as f64 * 60.0, 0.0, 0.0], diameter: 8.0, time_point: TimePoint::T1 })
                .collect();
            let mut candidates = Vec::new();
            for a in &annotations {
                if rng.gen_bool(0.9) {
                    candidates.push(Candidate { center_world: a.center_world, diameter: a.diameter, probability: rng.gen_range(0.3..1.0) });
                }
            }
            for _ in 0..rng.gen_range(0..8) {
                candidates.push(Candidate { center_world: [30.0, rng.gen_range(20.0..90.0), 0.0], diameter: 6.0, probability: rng.gen_range(0.0..0.8) });
            }
            ScanDetections { candidates, annotations }
        })
        .collect();
    let curve = FrocCurve::compute(&scans, &FROC_RATES, DEFAULT_RESAMPLES, DEFAULT_LEVEL, 0)?;
    println!("{:>8} {:>8} {:>18}", "FP/scan", "sens", "95% interval");
    for p in &curve.points {
        println!("{:>8} {:>8.3} {:>8.3} - {:.3}", p.fp_rate, p.mean, p.lower, p.upper);
    }
    curve.write_csv(out.join("froc.csv"))?;
    froc_svg(&curve, out.join("froc.svg"))?;
    println!("wrote {}", out.join("froc.svg").display());
    Ok(())
}
