use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use nodule_nn::optim::Adam;
use nodule_nn::{Mode, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Augmentation;
use crate::backbone::{BackboneModel, Tap, TraceGrads};
use crate::error::{Error, Result};
use crate::volume_io::{Patch, NODULE_PATCH_SIDE};

use super::config::{LossKind, SiameseConfig};
use super::loss::{bce_with_logits_batch, contrastive_batch};
use super::model::{abs_diff, Embeddings, SiameseModel};

/// Nodule patches of one case at both time points.
#[derive(Debug, Clone)]
pub struct CasePatches {
    pub case_id: String,
    pub patch_t1: Arc<Patch>,
    pub patch_t2: Arc<Patch>,
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub patch_t1: Arc<Patch>,
    pub patch_t2: Arc<Patch>,
    pub label: bool,
    pub case_t1: String,
    pub case_t2: String,
}

/// Index plan of the pair dataset: for each case one positive `(i, i)` and
/// one negative `(i, j)` with `j` drawn uniformly from the other cases.
pub fn pair_plan(n_cases: usize, seed: u64) -> Result<Vec<(usize, usize, bool)>> {
    if n_cases < 2 {
        return Err(Error::InvalidArgument("at least two cases are needed to form negative pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(2 * n_cases);
    for i in 0..n_cases {
        plan.push((i, i, true));
        let mut j = rng.gen_range(0..n_cases - 1);
        if j >= i {
            j += 1;
        }
        plan.push((i, j, false));
    }
    Ok(plan)
}

pub fn build_pair_dataset(cases: &[CasePatches], seed: u64) -> Result<Vec<PairSample>> {
    Ok(pair_plan(cases.len(), seed)?
        .into_iter()
        .map(|(i, j, label)| PairSample {
            patch_t1: cases[i].patch_t1.clone(),
            patch_t2: cases[j].patch_t2.clone(),
            label,
            case_t1: cases[i].case_id.clone(),
            case_t2: cases[j].case_id.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub early_stop_patience: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 1e-4,
            batch_size: 8,
            dropout: 0.3,
            early_stop_patience: 10,
            augmentation: Augmentation { lighting: false, ..Augmentation::default() },
            seed: 0,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.early_stop_patience == 0 || !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(
                "batch_size and early_stop_patience must be positive, learning_rate non-negative, dropout in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiameseEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub tr_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<SiameseEpoch>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub tr_acc: f64,
    pub val_acc: f64,
    pub stopped_early: bool,
}

/// Distinct patches of a sample list and each pair's indices into them.
struct PatchPool {
    patches: Vec<Arc<Patch>>,
    pairs: Vec<(usize, usize, bool)>,
}

impl PatchPool {
    fn new(samples: &[PairSample]) -> Self {
        let mut index: HashMap<*const Patch, usize> = HashMap::new();
        let mut patches = Vec::new();
        let mut id = |p: &Arc<Patch>| {
            *index.entry(Arc::as_ptr(p)).or_insert_with(|| {
                patches.push(p.clone());
                patches.len() - 1
            })
        };
        let pairs = samples.iter().map(|s| (id(&s.patch_t1), id(&s.patch_t2), s.label)).collect();
        Self { patches, pairs }
    }

    fn embed(&self, model: &SiameseModel) -> Result<Embeddings> {
        model.embed(&self.patches.iter().map(|p| p.as_ref()).collect::<Vec<_>>())
    }
}

fn check_patch(p: &Patch) -> Result<()> {
    if p.side() != NODULE_PATCH_SIDE {
        return Err(Error::Shape(format!("expected {s}³ patches, got side {}", p.side(), s = NODULE_PATCH_SIDE)));
    }
    Ok(())
}

/// Scores of a sample list under the model in evaluation mode.
pub fn predict(model: &SiameseModel, samples: &[PairSample]) -> Result<Vec<f64>> {
    let pool = PatchPool::new(samples);
    let emb = pool.embed(model)?;
    predict_cached(model, &pool.pairs, &emb)
}

fn predict_cached(model: &SiameseModel, pairs: &[(usize, usize, bool)], emb: &Embeddings) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(32) {
        let ai: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let bi: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        out.extend(model.score_embeddings(&emb.select(&ai), &emb.select(&bi))?);
    }
    Ok(out)
}

pub fn accuracy(config: &SiameseConfig, scores: &[f64], labels: &[bool]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let correct = scores.iter().zip(labels).filter(|(s, y)| config.predicts_match(**s) == **y).count();
    correct as f64 / scores.len() as f64
}

pub fn evaluate(model: &SiameseModel, samples: &[PairSample]) -> Result<f64> {
    let scores = predict(model, samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    Ok(accuracy(&model.config, &scores, &labels))
}

fn stack_augmented(patches: &[&Patch], aug: &Augmentation, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = NODULE_PATCH_SIDE;
    let mut data = Vec::with_capacity(patches.len() * s * s * s);
    for p in patches {
        if aug.is_active() {
            data.extend(aug.apply_cube(p.voxels(), s, rng));
        } else {
            data.extend_from_slice(p.voxels());
        }
    }
    Tensor::from_vec(&[patches.len(), 1, s, s, s], data)
}

fn raw_loss(config: &SiameseConfig, raw: &[f32], labels: &[bool]) -> Result<(f64, Vec<f32>)> {
    let raw64: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    let (loss, grad) = match config.loss {
        LossKind::Contrastive => contrastive_batch(&raw64, labels, config.margin)?,
        LossKind::Bce => bce_with_logits_batch(&raw64, labels),
    };
    Ok((loss, grad.into_iter().map(|g| g as f32).collect()))
}

fn raw_predicts_match(config: &SiameseConfig, raw: f32) -> bool {
    match config.loss {
        LossKind::Contrastive => (raw as f64) < config.margin / 2.0,
        LossKind::Bce => raw >= 0.0,
    }
}

/// Train on `train`, monitoring accuracy on `val` (or on `train` when `val`
/// is empty) for early stopping; the best epoch's parameters are kept.
pub fn train(model: &mut SiameseModel, train: &[PairSample], val: &[PairSample], recipe: &TrainRecipe) -> Result<TrainReport> {
    train_inner(model, train, val, recipe, None)
}

/// Frozen features of every distinct patch, shared across folds.
struct FeatureCache {
    pool: HashMap<*const Patch, usize>,
    emb: Embeddings,
}

fn train_inner(
    model: &mut SiameseModel,
    train: &[PairSample],
    val: &[PairSample],
    recipe: &TrainRecipe,
    cache: Option<&FeatureCache>,
) -> Result<TrainReport> {
    recipe.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    for s in train.iter().chain(val) {
        check_patch(&s.patch_t1)?;
        check_patch(&s.patch_t2)?;
    }
    let config = model.config.clone();
    let frozen = model.is_frozen();
    let aug = recipe.augmentation;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut adam = Adam::new(recipe.learning_rate);

    let train_pool = PatchPool::new(train);
    let val_pool = PatchPool::new(val);
    // Frozen siblings without augmentation see fixed inputs, so their
    // features are computed once.
    let lookup = |pool: &PatchPool| -> Result<Embeddings> {
        match cache {
            Some(c) => {
                let idx: Vec<usize> = pool.patches.iter().map(|p| c.pool[&Arc::as_ptr(p)]).collect();
                Ok(c.emb.select(&idx))
            }
            None => pool.embed(model),
        }
    };
    let train_emb = if frozen && !aug.is_active() { Some(lookup(&train_pool)?) } else { None };
    let val_emb_frozen = if frozen && !val.is_empty() { Some(lookup(&val_pool)?) } else { None };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, f64, Vec<(String, Tensor<f32>)>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_pool.pairs.len()).collect();
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(recipe.batch_size) {
            let n = chunk.len();
            let ai: Vec<usize> = chunk.iter().map(|&i| train_pool.pairs[i].0).collect();
            let bi: Vec<usize> = chunk.iter().map(|&i| train_pool.pairs[i].1).collect();
            let labels: Vec<bool> = chunk.iter().map(|&i| train_pool.pairs[i].2).collect();
            let mode = if n > 1 { Mode::Train } else { Mode::Eval };

            let mut backbone_trace = None;
            let (ea, eb) = if let Some(emb) = &train_emb {
                (emb.select(&ai), emb.select(&bi))
            } else {
                let refs: Vec<&Patch> = ai.iter().chain(&bi).map(|&i| train_pool.patches[i].as_ref()).collect();
                let x = stack_augmented(&refs, &aug, &mut rng);
                let both = if frozen {
                    model.embed_batch(&x)?
                } else {
                    let depth = model.depth();
                    let trace = model.backbone.forward(&x, Mode::Train, depth)?;
                    let e = model.embeddings_from_trace(&trace);
                    backbone_trace = Some(trace);
                    e
                };
                (both.select(&(0..n).collect::<Vec<_>>()), both.select(&(n..2 * n).collect::<Vec<_>>()))
            };
            let (diffs, signs) = abs_diff(&ea, &eb);
            let (raw, head_cache) = model.head.forward(&diffs, mode, &mut rng)?;
            let (loss, dout) = raw_loss(&config, &raw, &labels)?;
            loss_sum += loss * n as f64;
            correct += raw.iter().zip(&labels).filter(|(r, y)| raw_predicts_match(&config, **r) == **y).count();

            for p in model.trainable_params() {
                p.zero_grad();
            }
            let ddiff = model.head.backward(&head_cache, &diffs, &dout);
            if let Some(trace) = &backbone_trace {
                let mut grads = TraceGrads::default();
                for ((tap, dd), sign) in config.feature_taps.iter().zip(&ddiff).zip(&signs) {
                    let per = dd.sample_len();
                    let mut data = vec![0.0f32; 2 * n * per];
                    for (i, (&g, &s)) in dd.data().iter().zip(sign).enumerate() {
                        let v = g * s as f32;
                        data[i] = v;
                        data[n * per + i] = -v;
                    }
                    let mut shape = dd.shape().to_vec();
                    shape[0] = 2 * n;
                    let t = Tensor::from_vec(&shape, data);
                    match tap {
                        Tap::Avgpool => grads.pooled = Some(t),
                        _ => grads.stage_outputs[tap.stage()] = Some(t),
                    }
                }
                model.backbone.backward(trace, grads, true, false);
            }
            let params = model.trainable_params();
            if !params.is_empty() {
                adam.step(params);
            }
        }
        let tr_acc = correct as f64 / order.len() as f64;
        let val_acc = if val.is_empty() {
            tr_acc
        } else {
            let emb = match &val_emb_frozen {
                Some(e) => e.clone(),
                None => val_pool.embed(model)?,
            };
            let scores = predict_cached(model, &val_pool.pairs, &emb)?;
            let labels: Vec<bool> = val_pool.pairs.iter().map(|p| p.2).collect();
            accuracy(&config, &scores, &labels)
        };
        history.push(SiameseEpoch { epoch, loss: loss_sum / order.len() as f64, tr_acc, val_acc });
        if best.as_ref().map_or(true, |b| val_acc > b.0) {
            best = Some((val_acc, epoch, tr_acc, model.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= recipe.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (val_acc, best_epoch, tr_acc) = match best {
        Some((v, e, t, snap)) => {
            model.restore(&snap);
            (v, Some(e), t)
        }
        None => {
            let v = if val.is_empty() { 0.0 } else { evaluate(model, val)? };
            (v, None, 0.0)
        }
    };
    Ok(TrainReport { history, best_epoch, tr_acc, val_acc, stopped_early })
}

/// Fold index per sample; each label is dealt round-robin over the folds
/// after a seeded shuffle.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if k < 2 || k > pos.len().min(neg.len()) {
        return Err(Error::InvalidArgument(format!(
            "cannot stratify {k} folds with {} positive and {} negative samples",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    for mut group in [pos, neg] {
        group.shuffle(&mut rng);
        for (r, i) in group.into_iter().enumerate() {
            fold[i] = r % k;
        }
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub tr_acc: f64,
    pub val_acc: f64,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub config: SiameseConfig,
    pub folds: Vec<FoldResult>,
    pub tr_mean: f64,
    pub tr_std: f64,
    pub val_mean: f64,
    pub val_std: f64,
    /// Model of the fold with the highest validation accuracy (first on ties).
    pub best_model: SiameseModel,
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

impl CvReport {
    /// `mean ± std` for training and validation accuracy.
    pub fn summary(&self) -> String {
        format!("{}: tr_acc {:.3} ± {:.3}, val_acc {:.3} ± {:.3}", self.config.name, self.tr_mean, self.tr_std, self.val_mean, self.val_std)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["config", "layer_set", "fold", "tr_acc", "val_acc"])?;
        for f in &self.folds {
            w.write_record([
                self.config.name.to_string(),
                self.config.layer_set(),
                f.fold.to_string(),
                format!("{:.6}", f.tr_acc),
                format!("{:.6}", f.val_acc),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stratified k-fold cross-validation; every fold starts from the same
/// backbone and a head seeded by `recipe.seed` and the fold index.
pub fn cross_validate(
    config: &SiameseConfig,
    backbone: &BackboneModel,
    samples: &[PairSample],
    k: usize,
    recipe: &TrainRecipe,
) -> Result<CvReport> {
    recipe.validate()?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let folds = stratified_folds(&labels, k, recipe.seed)?;
    let probe = SiameseModel::build_with_dropout(config, backbone, recipe.seed, recipe.dropout)?;
    let cache = if probe.is_frozen() {
        let pool = PatchPool::new(samples);
        let emb = pool.embed(&probe)?;
        let index = pool.patches.iter().enumerate().map(|(i, p)| (Arc::as_ptr(p), i)).collect();
        Some(FeatureCache { pool: index, emb })
    } else {
        None
    };
    drop(probe);
    let mut results = Vec::with_capacity(k);
    let mut best: Option<(f64, SiameseModel)> = None;
    for f in 0..k {
        let tr: Vec<PairSample> = samples.iter().zip(&folds).filter(|(_, &g)| g != f).map(|(s, _)| s.clone()).collect();
        let va: Vec<PairSample> = samples.iter().zip(&folds).filter(|(_, &g)| g == f).map(|(s, _)| s.clone()).collect();
        let fold_seed = recipe.seed.wrapping_add(1 + f as u64);
        let mut model = SiameseModel::build_with_dropout(config, backbone, fold_seed, recipe.dropout)?;
        let fold_recipe = TrainRecipe { seed: fold_seed, ..recipe.clone() };
        let report = train_inner(&mut model, &tr, &va, &fold_recipe, cache.as_ref())?;
        results.push(FoldResult { fold: f, tr_acc: report.tr_acc, val_acc: report.val_acc, best_epoch: report.best_epoch });
        if best.as_ref().map_or(true, |b| report.val_acc > b.0) {
            best = Some((report.val_acc, model));
        }
    }
    let (tr_mean, tr_std) = mean_std(&results.iter().map(|r| r.tr_acc).collect::<Vec<_>>());
    let (val_mean, val_std) = mean_std(&results.iter().map(|r| r.val_acc).collect::<Vec<_>>());
    Ok(CvReport { config: config.clone(), folds: results, tr_mean, tr_std, val_mean, val_std, best_model: best.expect("k >= 2").1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_plan_is_balanced_and_never_self_negative() {
        let plan = pair_plan(151, 4).unwrap();
        assert_eq!(plan.len(), 302);
        assert_eq!(plan.iter().filter(|p| p.2).count(), 151);
        assert!(plan.iter().all(|&(i, j, y)| y == (i == j)));
        assert_eq!(plan, pair_plan(151, 4).unwrap());
    }

    #[test]
    fn two_cases_force_the_negatives() {
        let plan = pair_plan(2, 9).unwrap();
        assert_eq!(plan, vec![(0, 0, true), (0, 1, false), (1, 1, true), (1, 0, false)]);
        assert!(pair_plan(1, 0).is_err());
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let labels = [true, true, false, false];
        let f = stratified_folds(&labels, 2, 1).unwrap();
        for k in 0..2 {
            let members: Vec<usize> = (0..4).filter(|&i| f[i] == k).collect();
            assert_eq!(members.len(), 2);
            assert_eq!(members.iter().filter(|&&i| labels[i]).count(), 1);
        }
        assert_eq!(f, stratified_folds(&labels, 2, 1).unwrap());
        assert!(stratified_folds(&labels, 3, 1).is_err());
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
