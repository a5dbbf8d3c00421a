//! Train the candidate detector on phantom scans and detect on held-out ones.
//!
//! cargo run --release --example detector_train_detect -- [train_cases] [test_cases] [epochs]

use std::time::Instant;

use nodule_reid::dataset::load_cases;
use nodule_reid::detector::{hit, DetectOptions, DetectorModel, DetectorRecipe, TrainingScan, DEFAULT_ANCHORS_MM};
use nodule_reid::phantom::{generate_dataset_from, PhantomSpec};

fn main() -> anyhow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let n_train = args.first().copied().unwrap_or(12);
    let n_test = args.get(1).copied().unwrap_or(4);
    let epochs = args.get(2).copied().unwrap_or(8);
    let dir = tempfile::tempdir()?;
    let spec = PhantomSpec { seed: 1, ..Default::default() };
    let train = load_cases(&generate_dataset_from(&spec, 0, n_train, dir.path().join("train"))?)?;
    let test = load_cases(&generate_dataset_from(&spec, 1000, n_test, dir.path().join("test"))?)?;

    let scans: Vec<TrainingScan> = train
        .iter()
        .flat_map(|c| {
            [
                TrainingScan { volume: c.volume_t1.clone(), nodules: c.all_nodules(false) },
                TrainingScan { volume: c.volume_t2.clone(), nodules: c.all_nodules(true) },
            ]
        })
        .collect();
    let mut model = DetectorModel::new(&DEFAULT_ANCHORS_MM, 0)?;
    let recipe = DetectorRecipe { epochs, learning_rate: 1e-3, seed: 0, ..Default::default() };
    let t = Instant::now();
    for e in nodule_reid::detector::train_detector(&mut model, &scans, &recipe)? {
        println!("epoch {:>3}  loss {:.4}  cls {:.4}  reg {:.4}  positives {}", e.epoch, e.loss, e.cls_loss, e.reg_loss, e.positives);
    }
    println!("training: {:.1} s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (mut top1, mut any, mut total) = (0, 0, 0);
    let (mut errors, mut signs_ok, mut signs_n) = (Vec::new(), 0, 0);
    for c in &test {
        let mut found = Vec::new();
        for (vol, truth) in [(&c.volume_t1, &c.nodule_t1), (&c.volume_t2, &c.nodule_t2)] {
            let cands = model.detect(vol, &DetectOptions::default())?;
            total += 1;
            let first_hit = cands.iter().position(|k| hit(k, truth));
            if first_hit.is_some() {
                any += 1;
            }
            let n_above = cands.iter().filter(|k| k.probability > 0.5).count();
            match first_hit {
                Some(i) => {
                    if i < 3 {
                        top1 += 1;
                    }
                    let k = &cands[i];
                    errors.push(k.diameter - truth.diameter);
                    found.push(k.diameter);
                    println!(
                        "{} rank {i:>2} p {:.3} d_pred {:5.2} d_true {:5.2}  ({} candidates, {n_above} above 0.5)",
                        truth.series_id,
                        k.probability,
                        k.diameter,
                        truth.diameter,
                        cands.len()
                    );
                }
                None => println!("{} missed ({} candidates)", truth.series_id, cands.len()),
            }
        }
        if let [d1, d2] = found[..] {
            signs_n += 1;
            if ((d2 - d1) > 0.0) == (c.growth_mm > 0.0) {
                signs_ok += 1;
            }
        }
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let sd = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    println!("diameter error {mean:+.2} ± {sd:.2} mm; growth sign {signs_ok}/{signs_n}");
    println!("found {any}/{total}, within top 3: {top1}/{total}; detection {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}
