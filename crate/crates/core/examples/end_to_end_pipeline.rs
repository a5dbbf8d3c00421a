//! Phantom data in, growth report out: train the detector and a FIFB
//! siamese network on phantom cases, then run the pipeline on held-out ones.
//!
//! cargo run --release --example end_to_end_pipeline -- [out_dir] [detector.ckpt]
//!
//! A detector checkpoint path that already exists is loaded instead of
//! retraining.

use std::path::PathBuf;

use nodule_reid::desk;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().cloned().unwrap_or_else(|| "pipeline_out".into()));
    let det_path = args.get(1).map(PathBuf::from);

    let run = desk::run(&out, det_path.as_deref())?;
    let s = &run.output.summary;
    for m in &run.output.matches {
        println!("{} score {:.3} correct {:?}", m.case_id, m.score, m.correct);
    }
    let t = &run.times;
    println!("phantom {:.0} s, detector {:.0} s, siamese {:.0} s, pipeline {:.0} s", t.phantom_s, t.detector_s, t.siamese_s, t.pipeline_s);
    println!("matching accuracy {:.3} ({} / {})", s.matching.accuracy, s.matching.correct, s.n_cases);
    println!("growth sign accuracy {:?} over {} cases", s.growth.sign_accuracy, s.growth.assessed);
    for f in &run.output.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
