mod common;

use std::sync::{Mutex, OnceLock};

use common::{random_patch, toy_cases};

use nodule_nn::Module;
use nodule_reid::backbone::{BackboneModel, Tap};
use nodule_reid::siamese::{
    build_pair_dataset, cross_validate, train, ConfigName, Head, SiameseConfig, SiameseModel, TrainRecipe,
};
use nodule_reid::volume_io::Patch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

static HEAVY: Mutex<()> = Mutex::new(());

fn backbone() -> &'static BackboneModel {
    static B: OnceLock<BackboneModel> = OnceLock::new();
    B.get_or_init(|| BackboneModel::new(11))
}

fn param_values(m: &mut impl Module<f32>) -> Vec<Vec<f32>> {
    m.params_mut().into_iter().map(|p| p.value.data().to_vec()).collect()
}

fn head_values(m: &mut SiameseModel) -> Vec<Vec<f32>> {
    m.head_params_mut().into_iter().map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn every_configuration_is_symmetric() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // 15 patches give 105 unordered pairs per configuration.
    let patches: Vec<Patch> = (0..15).map(|_| random_patch(&mut rng)).collect();
    let refs: Vec<&Patch> = patches.iter().collect();
    for name in ConfigName::ALL {
        let config = SiameseConfig::from_name(name);
        let model = SiameseModel::build(&config, backbone(), 5).unwrap();
        let emb = model.embed(&refs).unwrap();
        let table = model.score_table(&emb, &emb).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                assert_eq!(table[i][j].to_bits(), table[j][i].to_bits(), "{name} ({i},{j})");
            }
            if config.loss == nodule_reid::siamese::LossKind::Bce {
                assert!(table[i][j_any(i)] > 0.0 && table[i][j_any(i)] < 1.0);
                // The head input for (a, a) is all zeros, so the score is the same for every a.
                assert_eq!(table[i][i].to_bits(), table[0][0].to_bits(), "{name}");
            } else {
                assert_eq!(table[i][i], 0.0, "{name}");
            }
        }
    }
}

fn j_any(i: usize) -> usize {
    (i + 7) % 15
}

#[test]
fn forward_pair_agrees_with_the_table_and_rejects_bad_shapes() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (a, b) = (random_patch(&mut rng), random_patch(&mut rng));
    let model = SiameseModel::build(&SiameseConfig::from_name(ConfigName::FIFB), backbone(), 2).unwrap();
    let s = model.forward_pair(&a, &b).unwrap();
    let e = model.embed(&[&a, &b]).unwrap();
    assert_eq!(s, model.score_table(&e, &e).unwrap()[0][1]);
    let small = Patch::new(16, vec![0.0; 16 * 16 * 16], true, [0.0; 3]).unwrap();
    assert!(model.forward_pair(&a, &small).is_err());
}

#[test]
fn head_widths_and_trainable_parameters() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let ucmb = SiameseConfig::from_name(ConfigName::UCMB).with_taps(vec![Tap::Layer1, Tap::Layer2, Tap::Avgpool]).unwrap();
    let mut m = SiameseModel::build(&ucmb, backbone(), 1).unwrap();
    match &m.head {
        Head::Fc(block) => assert_eq!(block.inputs(), 65536 + 16384 + 512),
        other => panic!("unexpected head {other:?}"),
    }
    assert!(m.num_trainable() > 63_000_000);

    let mut fibc = SiameseModel::build(&SiameseConfig::from_name(ConfigName::FIBC), backbone(), 1).unwrap();
    assert!(fibc.is_frozen());
    assert_eq!(fibc.num_trainable(), 0);
}

#[test]
fn same_seed_builds_identical_models() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    for name in [ConfigName::FIFB, ConfigName::FICB, ConfigName::FCMB] {
        let c = SiameseConfig::from_name(name);
        let a = SiameseModel::build(&c, backbone(), 42).unwrap();
        let b = SiameseModel::build(&c, backbone(), 42).unwrap();
        assert_eq!(a.snapshot(), b.snapshot(), "{name}");
        let other = SiameseModel::build(&c, backbone(), 43).unwrap();
        assert_ne!(a.snapshot(), other.snapshot(), "{name}");
    }
}

#[test]
fn frozen_training_leaves_the_backbone_untouched() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let pairs = build_pair_dataset(&toy_cases(4), 0).unwrap();
    let mut model = SiameseModel::build(&SiameseConfig::from_name(ConfigName::FIFB), backbone(), 0).unwrap();
    let before = model.backbone_checksum();
    let head_before = head_values(&mut model);
    let recipe = TrainRecipe { epochs: 3, learning_rate: 1e-3, early_stop_patience: 100, ..TrainRecipe::default() };
    let report = train(&mut model, &pairs, &[], &recipe).unwrap();
    assert_eq!(report.history.len(), 3);
    assert_eq!(model.backbone_checksum(), before);
    assert_ne!(head_values(&mut model), head_before);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let pairs = build_pair_dataset(&toy_cases(2), 0).unwrap();
    let mut model = SiameseModel::build(&SiameseConfig::from_name(ConfigName::UIFB), backbone(), 0).unwrap();
    let before = param_values(&mut model);
    let recipe = TrainRecipe { epochs: 1, learning_rate: 0.0, batch_size: 2, ..TrainRecipe::default() };
    train(&mut model, &pairs, &[], &recipe).unwrap();
    assert_eq!(param_values(&mut model), before);
}

#[test]
fn unfrozen_training_updates_the_backbone() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let pairs = build_pair_dataset(&toy_cases(2), 0).unwrap();
    let mut model = SiameseModel::build(&SiameseConfig::from_name(ConfigName::UIFB), backbone(), 0).unwrap();
    let before = model.backbone_checksum();
    let recipe = TrainRecipe { epochs: 1, learning_rate: 1e-4, batch_size: 4, augmentation: nodule_reid::augment::Augmentation::none(), ..TrainRecipe::default() };
    train(&mut model, &pairs, &[], &recipe).unwrap();
    assert_ne!(model.backbone_checksum(), before);
}

#[test]
fn training_rejects_an_empty_sample_list() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let mut model = SiameseModel::build(&SiameseConfig::from_name(ConfigName::FIBC), backbone(), 0).unwrap();
    assert!(train(&mut model, &[], &[], &TrainRecipe::default()).is_err());
}

#[test]
fn cross_validation_reports_folds_and_round_trips_the_best_model() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let pairs = build_pair_dataset(&toy_cases(6), 1).unwrap();
    let config = SiameseConfig::from_name(ConfigName::FIFB);
    let recipe = TrainRecipe { epochs: 4, learning_rate: 1e-3, augmentation: nodule_reid::augment::Augmentation::none(), ..TrainRecipe::default() };
    let cv = cross_validate(&config, backbone(), &pairs, 3, &recipe).unwrap();
    assert_eq!(cv.folds.len(), 3);
    assert!(cv.summary().starts_with("FIFB: tr_acc "));
    assert!(cv.summary().contains(" ± "));
    let again = cross_validate(&config, backbone(), &pairs, 3, &recipe).unwrap();
    assert_eq!(cv.folds, again.folds);
    assert!(cross_validate(&config, backbone(), &pairs, 7, &recipe).is_err());

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("folds.csv");
    cv.write_csv(&csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("config,layer_set,fold,tr_acc,val_acc\nFIFB,layer1,0,"));

    let ckpt = dir.path().join("fifb.ckpt");
    cv.best_model.save(&ckpt).unwrap();
    let loaded = SiameseModel::load(&ckpt).unwrap();
    let (a, b) = (&pairs[0].patch_t1, &pairs[1].patch_t2);
    assert_eq!(loaded.forward_pair(a, b).unwrap(), cv.best_model.forward_pair(a, b).unwrap());
}
