mod common;

use common::{annotation, candidate, froc_oracle, random_scans, rng};
use nodule_reid::metrics::{bootstrap_ci, froc, scan_outcomes, FrocCurve, ScanDetections, FROC_RATES};

#[test]
fn froc_matches_threshold_sweep() {
    let mut r = rng(3);
    for _ in 0..200 {
        let scans = random_scans(&mut r, 10, 20);
        let got = froc(&scans, &FROC_RATES).unwrap();
        assert_eq!(got, froc_oracle(&scans, &FROC_RATES), "{scans:?}");
        assert!(got.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn reported_training_sensitivities() {
    // 226 nodules, 11 missed; and 74 of 76.
    for (found, total, expected) in [(215usize, 226usize, 0.9513), (74, 76, 0.9736)] {
        let scans: Vec<ScanDetections> = (0..total)
            .map(|i| ScanDetections { candidates: if i < found { vec![candidate(0.0, 0.0, 0.9)] } else { vec![] }, annotations: vec![annotation(0.0, 0.0, 8.0)] })
            .collect();
        let s = froc(&scans, &[1.0]).unwrap()[0];
        assert!((s - expected).abs() < 1e-4, "{s}");
    }
}

#[test]
fn two_scan_bootstrap_matches_enumeration() {
    let scans = vec![
        ScanDetections { candidates: vec![candidate(0.0, 0.0, 0.9)], annotations: vec![annotation(0.0, 0.0, 8.0)] },
        ScanDetections { candidates: vec![], annotations: vec![annotation(0.0, 0.0, 8.0)] },
    ];
    // All four equally likely resamples: {hit,hit}, {hit,miss} twice, {miss,miss}.
    let mut enumerated = vec![];
    for a in 0..2 {
        for b in 0..2 {
            enumerated.push(froc(&[scans[a].clone(), scans[b].clone()], &[1.0]).unwrap()[0]);
        }
    }
    enumerated.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(enumerated, vec![0.0, 0.5, 0.5, 1.0]);
    let lo = nodule_reid::metrics::percentile(&enumerated, 0.025);
    let hi = nodule_reid::metrics::percentile(&enumerated, 0.975);
    let ci = bootstrap_ci(&scan_outcomes(&scans).unwrap(), &[1.0], 1000, 0.95, 9).unwrap();
    assert_eq!(ci, vec![(lo, hi)]);
}

#[test]
fn identical_scans_have_degenerate_intervals() {
    let scan = ScanDetections { candidates: vec![candidate(0.0, 0.0, 0.9), candidate(40.0, 0.0, 0.5)], annotations: vec![annotation(0.0, 0.0, 8.0)] };
    let curve = FrocCurve::compute(&vec![scan; 12], &FROC_RATES, 200, 0.95, 1).unwrap();
    for p in &curve.points {
        assert_eq!((p.lower, p.upper), (p.mean, p.mean));
    }
}

#[test]
fn bootstrap_on_larger_sets() {
    let mut r = rng(17);
    let make = |r: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<ScanDetections> {
        use rand::Rng;
        (0..n)
            .map(|_| {
                let mut c = vec![];
                if r.gen_bool(0.85) {
                    c.push(candidate(0.0, 0.0, r.gen_range(0.2..1.0)));
                }
                for k in 0..r.gen_range(0..6) {
                    c.push(candidate(30.0 + k as f64 * 10.0, 0.0, r.gen_range(0.0..0.9)));
                }
                ScanDetections { candidates: c, annotations: vec![annotation(0.0, 0.0, 8.0)] }
            })
            .collect()
    };
    let scans = make(&mut r, 100);
    let a = FrocCurve::compute(&scans, &FROC_RATES, 1000, 0.95, 5).unwrap();
    let b = FrocCurve::compute(&scans, &FROC_RATES, 1000, 0.95, 5).unwrap();
    assert_eq!(a, b);
    for p in &a.points {
        assert!(p.lower <= p.mean && p.mean <= p.upper, "{p:?}");
    }
    // More scans, narrower intervals at the same seed.
    let big = make(&mut r, 400);
    let wide = a.points.iter().map(|p| p.upper - p.lower).sum::<f64>();
    let narrow = FrocCurve::compute(&big, &FROC_RATES, 1000, 0.95, 5).unwrap().points.iter().map(|p| p.upper - p.lower).sum::<f64>();
    assert!(narrow < wide, "{narrow} vs {wide}");
}

#[test]
fn froc_csv_columns() {
    let scan = ScanDetections { candidates: vec![candidate(0.0, 0.0, 0.9)], annotations: vec![annotation(0.0, 0.0, 8.0)] };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("froc.csv");
    FrocCurve::compute(&[scan], &FROC_RATES, 50, 0.95, 1).unwrap().write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("fp_rate,mean,lower,upper\n0.125,1.0000,1.0000,1.0000\n"), "{text}");
    assert_eq!(text.lines().count(), 8);
}
