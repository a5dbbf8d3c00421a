use nodule_nn::optim::Adam;
use nodule_nn::{Mode, Module, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Augmentation, Transform};
use crate::error::{Error, Result};
use crate::volume_io::{location_grid_at, world_to_voxel, NoduleAnnotation, Volume};

use super::anchors::{self, assign_labels, hard_negatives, smooth_l1, step_lr, AnchorLabel, Target};
use super::net::{CHANNELS_PER_ANCHOR, OUTPUT_STRIDE, SIDE_MULTIPLE};
use super::DetectorModel;

/// A preprocessed volume with every nodule it contains.
#[derive(Debug, Clone)]
pub struct TrainingScan {
    pub volume: Volume,
    pub nodules: Vec<NoduleAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at epoch 0.
    pub learning_rate: f64,
    /// Multiplicative factor applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Negatives kept per step, as a multiple of the batch size.
    pub hard_negative_factor: usize,
    /// Side of the random training crops (multiple of 16).
    pub crop_side: usize,
    /// Share of crops centred near a nodule rather than anywhere.
    pub positive_crop_fraction: f64,
    pub crops_per_scan: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for DetectorRecipe {
    fn default() -> Self {
        Self {
            epochs: 450,
            batch_size: 8,
            learning_rate: 0.1,
            lr_decay: 0.001,
            decay_every: 100,
            hard_negative_factor: 20,
            crop_side: 64,
            positive_crop_fraction: 0.7,
            crops_per_scan: 1,
            augmentation: Augmentation { lighting: false, ..Augmentation::default() },
            seed: 0,
        }
    }
}

impl DetectorRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crops_per_scan == 0 || self.decay_every == 0 || self.hard_negative_factor == 0 {
            return Err(Error::Config("batch_size, crops_per_scan, decay_every and hard_negative_factor must be positive".into()));
        }
        if self.crop_side == 0 || self.crop_side % SIDE_MULTIPLE != 0 {
            return Err(Error::Config(format!("crop_side must be a positive multiple of {SIDE_MULTIPLE}")));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0) || !(0.0..=1.0).contains(&self.positive_crop_fraction) {
            return Err(Error::Config("learning_rate must be >= 0, lr_decay > 0, positive_crop_fraction in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.learning_rate, self.lr_decay, self.decay_every, epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub positives: usize,
}

struct Crop {
    voxels: Vec<f32>,
    loc: Vec<f32>,
    targets: Vec<Target>,
}

fn sample_crop(scan: &TrainingScan, recipe: &DetectorRecipe, rng: &mut ChaCha8Rng) -> Crop {
    let side = recipe.crop_side;
    let v = &scan.volume;
    let dims = v.dims();
    let spacing = v.spacing()[0];
    let center: [f64; 3] = if !scan.nodules.is_empty() && rng.gen_bool(recipe.positive_crop_fraction) {
        let n = &scan.nodules[rng.gen_range(0..scan.nodules.len())];
        let c = world_to_voxel(n.center_world, v);
        let j = side as f64 / 4.0;
        c.map(|x| x + rng.gen_range(-j..=j))
    } else {
        dims.map(|d| rng.gen_range(0.0..d as f64))
    };
    let start = center.map(|c| c.floor() as isize - (side / 2) as isize);
    let mut voxels = Vec::with_capacity(side * side * side);
    for z in 0..side as isize {
        for y in 0..side as isize {
            for x in 0..side as isize {
                voxels.push(v.get_or(start[0] + x, start[1] + y, start[2] + z, 0.0));
            }
        }
    }
    let mut targets: Vec<Target> = scan
        .nodules
        .iter()
        .map(|n| {
            let c = world_to_voxel(n.center_world, v);
            Target { center: [0, 1, 2].map(|a| c[a] - start[a] as f64), diameter: n.diameter / spacing }
        })
        .collect();
    let aug = &recipe.augmentation;
    if aug.is_active() {
        let t = Transform::sample(aug, rng);
        voxels = t.warp(&voxels, [side; 3], 0.0);
        aug.jitter(&mut voxels, rng);
        let s = t.scale();
        for tg in &mut targets {
            tg.center = t.forward_point([side; 3], tg.center);
            tg.diameter *= s;
        }
    }
    targets.retain(|t| t.center.iter().all(|&c| c >= 0.0 && c < side as f64));
    Crop { voxels, loc: location_grid_at(dims, start, side).values, targets }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Loss terms and output gradient for one batch.
pub(crate) struct BatchLoss {
    pub cls: f64,
    pub reg: f64,
    pub positives: usize,
    pub grad: Tensor<f32>,
}

/// Classification: half the mean BCE over positives plus half over the
/// hardest `quota` negatives. Regression: smooth L1 summed over the four
/// components, averaged over positives.
pub(crate) fn batch_loss(out: &Tensor<f32>, targets: &[Vec<Target>], anchors_vox: &[f64], quota: usize) -> BatchLoss {
    let n = out.batch();
    let g = out.spatial()[0];
    let g3 = g * g * g;
    let mut grad = Tensor::zeros(out.shape());
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut neg_losses = Vec::new();
    for (b, tg) in targets.iter().enumerate().take(n) {
        let labels = assign_labels(g, anchors_vox, tg);
        let o = out.sample(b);
        for (i, l) in labels.iter().enumerate() {
            let (k, pos) = (i / g3, i % g3);
            let at = k * CHANNELS_PER_ANCHOR * g3 + pos;
            match *l {
                AnchorLabel::Positive { target } => positives.push((b, k, pos, target)),
                AnchorLabel::Negative => {
                    negatives.push((b, at));
                    neg_losses.push(softplus(o[at] as f64));
                }
                AnchorLabel::Ignore => {}
            }
        }
    }
    let chosen = hard_negatives(&neg_losses, quota);
    let mut cls = 0.0;
    let pos_weight = if positives.is_empty() { 0.0 } else { 0.5 / positives.len() as f64 };
    let neg_weight = if chosen.is_empty() {
        0.0
    } else if positives.is_empty() {
        1.0 / chosen.len() as f64
    } else {
        0.5 / chosen.len() as f64
    };
    for &j in &chosen {
        let (b, at) = negatives[j];
        let z = out.sample(b)[at] as f64;
        cls += neg_weight * softplus(z);
        grad.sample_mut(b)[at] += (neg_weight * sigmoid(z)) as f32;
    }
    let mut reg = 0.0;
    for &(b, k, pos, t) in &positives {
        let base = k * CHANNELS_PER_ANCHOR * g3 + pos;
        let z = out.sample(b)[base] as f64;
        cls += pos_weight * softplus(-z);
        grad.sample_mut(b)[base] += (pos_weight * (sigmoid(z) - 1.0)) as f32;
        let (x, y, zc) = (pos % g, (pos / g) % g, pos / (g * g));
        let cell = [anchors::cell_center(x), anchors::cell_center(y), anchors::cell_center(zc)];
        let want = anchors::encode(cell, anchors_vox[k], &targets[b][t]);
        let w = 1.0 / positives.len() as f64;
        for c in 0..4 {
            let at = base + (c + 1) * g3;
            let (l, d) = smooth_l1(out.sample(b)[at] as f64 - want[c]);
            reg += w * l;
            grad.sample_mut(b)[at] += (w * d) as f32;
        }
    }
    BatchLoss { cls, reg, positives: positives.len(), grad }
}

/// Train from the model's current parameters on random crops.
pub fn train_detector(model: &mut DetectorModel, scans: &[TrainingScan], recipe: &DetectorRecipe) -> Result<Vec<DetectorEpoch>> {
    recipe.validate()?;
    if scans.iter().all(|s| s.nodules.is_empty()) {
        return Err(Error::Empty("no annotated nodules, so no anchor can be positive".into()));
    }
    for s in scans {
        let sp = s.volume.spacing();
        if (sp[0] - sp[1]).abs() > 1e-6 || (sp[0] - sp[2]).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("detector training expects isotropic voxels, got {sp:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut adam = Adam::new(recipe.learning_rate);
    let side = recipe.crop_side;
    let g = side / OUTPUT_STRIDE;
    let quota = recipe.hard_negative_factor * recipe.batch_size;
    let mut history = Vec::with_capacity(recipe.epochs);
    let mut order: Vec<usize> = (0..scans.len()).flat_map(|i| std::iter::repeat(i).take(recipe.crops_per_scan)).collect();
    for epoch in 0..recipe.epochs {
        adam.lr = recipe.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut cls_sum, mut reg_sum, mut positives, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(recipe.batch_size) {
            let crops: Vec<Crop> = chunk.iter().map(|&i| sample_crop(&scans[i], recipe, &mut rng)).collect();
            let n = crops.len();
            let x = Tensor::from_vec(&[n, 1, side, side, side], crops.iter().flat_map(|c| c.voxels.iter().copied()).collect());
            let loc = Tensor::from_vec(&[n, 3, g, g, g], crops.iter().flat_map(|c| c.loc.iter().copied()).collect());
            let spacing = scans[chunk[0]].volume.spacing()[0];
            let anchors_vox: Vec<f64> = model.anchors_mm.iter().map(|a| a / spacing).collect();
            let mode = if n > 1 { Mode::Train } else { Mode::Eval };
            let (out, cache) = model.net.forward(&x, &loc, mode);
            let targets: Vec<Vec<Target>> = crops.into_iter().map(|c| c.targets).collect();
            let loss = batch_loss(&out, &targets, &anchors_vox, quota);
            cls_sum += loss.cls;
            reg_sum += loss.reg;
            positives += loss.positives;
            steps += 1;
            model.net.zero_grad();
            model.net.backward(&cache, &loss.grad);
            adam.step(model.net.params_mut());
        }
        let steps = steps.max(1) as f64;
        history.push(DetectorEpoch {
            epoch,
            lr: adam.lr,
            loss: (cls_sum + reg_sum) / steps,
            cls_loss: cls_sum / steps,
            reg_loss: reg_sum / steps,
            positives,
        });
    }
    Ok(history)
}
