use nodule_nn::layers::{relu, relu_backward, sigmoid, BatchNorm, BatchNormCache, Dropout, DropoutCache, Linear, LinearCache};
use nodule_nn::{Float, Mode, Module, Param, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{batch_patches, collect_taps, BackboneModel, Depth, ResNet3d, Tap, Trace, TraceGrads};
use crate::checkpoint::{parameter_checksum, Checkpoint};
use crate::error::{Error, Result};
use crate::volume_io::Patch;

use super::config::{HeadKind, LossKind, SiameseConfig};

pub const FC_HIDDEN: usize = 64;
pub const DEFAULT_DROPOUT: f64 = 0.3;

/// FC layer, batch norm, ReLU, dropout and a one-unit output layer.
#[derive(Debug, Clone)]
pub struct FcBlock<T> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm<T>,
    pub dropout: Dropout,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct FcCache<T> {
    l1: LinearCache<T>,
    bn: BatchNormCache<T>,
    act: Tensor<T>,
    drop: DropoutCache<T>,
    l2: LinearCache<T>,
}

impl<T: Float> FcBlock<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, hidden: usize, dropout: f64, rng: &mut R) -> Self {
        Self { fc1: Linear::new(inputs, hidden, rng), bn: BatchNorm::new(hidden), dropout: Dropout::new(dropout), fc2: Linear::new(hidden, 1, rng) }
    }

    pub fn inputs(&self) -> usize {
        self.fc1.inputs()
    }

    /// Evaluation-mode logits for `[N, inputs]`.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = relu(&self.bn.apply(&self.fc1.apply(x)));
        self.fc2.apply(&h)
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> (Tensor<T>, FcCache<T>) {
        let (h, l1) = self.fc1.forward(x);
        let (h, bn) = self.bn.forward(&h, mode);
        let act = relu(&h);
        let (h, drop) = self.dropout.forward(&act, mode, rng);
        let (y, l2) = self.fc2.forward(&h);
        (y, FcCache { l1, bn, act, drop, l2 })
    }

    pub fn backward(&mut self, cache: &FcCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.fc2.backward(&cache.l2, dy, true);
        let d = self.dropout.backward(&cache.drop, &d);
        let d = relu_backward(&cache.act, &d);
        let d = self.bn.backward(&cache.bn, &d, true);
        self.fc1.backward(&cache.l1, &d, true)
    }
}

impl<T: Float> Module<T> for FcBlock<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.fc1.params_mut();
        v.extend(self.bn.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.fc1.named_tensors(&format!("{prefix}.fc1"), out);
        self.bn.named_tensors(&format!("{prefix}.bn"), out);
        self.fc2.named_tensors(&format!("{prefix}.fc2"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.fc1.named_tensors_mut(&format!("{prefix}.fc1"), out);
        self.bn.named_tensors_mut(&format!("{prefix}.bn"), out);
        self.fc2.named_tensors_mut(&format!("{prefix}.fc2"), out);
    }
}

/// Comparison head applied to the absolute difference of sibling features.
#[derive(Debug, Clone)]
pub enum Head {
    /// Mean absolute difference; no parameters.
    Basic,
    /// FC block on the flattened (and, for several taps, concatenated) difference.
    Fc(FcBlock<f32>),
    /// A clean residual network entered at the stage after the tap.
    Cnn(Box<ResNet3d>),
}

#[derive(Debug, Clone)]
pub enum HeadCache {
    Basic,
    Fc(FcCache<f32>),
    Cnn(Box<Trace>),
}

/// Per-patch features for the configured taps; `taps[i]` is `[N, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub taps: Vec<Tensor<f32>>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.taps.first().map_or(0, |t| t.batch())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Embeddings {
        Embeddings {
            taps: self
                .taps
                .iter()
                .map(|t| {
                    let mut shape = t.shape().to_vec();
                    shape[0] = idx.len();
                    let mut data = Vec::with_capacity(idx.len() * t.sample_len());
                    for &i in idx {
                        data.extend_from_slice(t.sample(i));
                    }
                    Tensor::from_vec(&shape, data)
                })
                .collect(),
        }
    }

    pub fn concat(parts: &[&Embeddings]) -> Embeddings {
        let n_taps = parts[0].taps.len();
        Embeddings { taps: (0..n_taps).map(|k| Tensor::cat_batch(&parts.iter().map(|p| &p.taps[k]).collect::<Vec<_>>())).collect() }
    }
}

/// `|a - b|` per tap, with the sign of `a - b` kept for backpropagation.
pub fn abs_diff(a: &Embeddings, b: &Embeddings) -> (Vec<Tensor<f32>>, Vec<Vec<i8>>) {
    let mut diffs = Vec::with_capacity(a.taps.len());
    let mut signs = Vec::with_capacity(a.taps.len());
    for (ta, tb) in a.taps.iter().zip(&b.taps) {
        assert_eq!(ta.shape(), tb.shape(), "sibling feature shapes differ");
        let mut s = Vec::with_capacity(ta.len());
        let d = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let v = x - y;
                s.push(if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 });
                v.abs()
            })
            .collect();
        diffs.push(Tensor::from_vec(ta.shape(), d));
        signs.push(s);
    }
    (diffs, signs)
}

fn flatten_concat(diffs: &[Tensor<f32>]) -> Tensor<f32> {
    let n = diffs[0].batch();
    let k: usize = diffs.iter().map(|d| d.sample_len()).sum();
    let mut data = Vec::with_capacity(n * k);
    for b in 0..n {
        for d in diffs {
            data.extend_from_slice(d.sample(b));
        }
    }
    Tensor::from_vec(&[n, k], data)
}

fn split_flat(dx: &Tensor<f32>, like: &[Tensor<f32>]) -> Vec<Tensor<f32>> {
    let n = dx.batch();
    let mut outs: Vec<Vec<f32>> = like.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for b in 0..n {
        let mut off = 0;
        let row = dx.sample(b);
        for (o, t) in outs.iter_mut().zip(like) {
            let k = t.sample_len();
            o.extend_from_slice(&row[off..off + k]);
            off += k;
        }
    }
    outs.into_iter().zip(like).map(|(d, t)| Tensor::from_vec(t.shape(), d)).collect()
}

impl Head {
    fn build(config: &SiameseConfig, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        match config.head {
            HeadKind::Basic => Head::Basic,
            HeadKind::Fc | HeadKind::Mfc => {
                let inputs = config.feature_taps.iter().map(|t| t.len()).sum();
                Head::Fc(FcBlock::new(inputs, FC_HIDDEN, dropout, rng))
            }
            HeadKind::Cnn => Head::Cnn(Box::new(ResNet3d::tail(config.feature_taps[0].stage() + 1, rng.gen()))),
        }
    }

    /// Evaluation-mode output: distances for the basic head, logits otherwise.
    pub fn apply(&self, diffs: &[Tensor<f32>]) -> Result<Vec<f32>> {
        Ok(match self {
            Head::Basic => basic_distance(diffs),
            Head::Fc(block) => block.apply(&flatten_concat(diffs)).into_vec(),
            Head::Cnn(net) => net.infer(&diffs[0], Depth::Logits)?.logits.expect("logits").into_vec(),
        })
    }

    pub fn forward(&mut self, diffs: &[Tensor<f32>], mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Vec<f32>, HeadCache)> {
        Ok(match self {
            Head::Basic => (basic_distance(diffs), HeadCache::Basic),
            Head::Fc(block) => {
                let (y, c) = block.forward(&flatten_concat(diffs), mode, rng);
                (y.into_vec(), HeadCache::Fc(c))
            }
            Head::Cnn(net) => {
                let trace = net.forward(&diffs[0], mode, Depth::Logits)?;
                (trace.logits.clone().expect("logits").into_vec(), HeadCache::Cnn(Box::new(trace)))
            }
        })
    }

    /// Gradient of the loss with respect to each tap's difference tensor,
    /// given the gradient with respect to the head outputs.
    pub fn backward(&mut self, cache: &HeadCache, diffs: &[Tensor<f32>], dout: &[f32]) -> Vec<Tensor<f32>> {
        let n = dout.len();
        match (self, cache) {
            (Head::Basic, HeadCache::Basic) => {
                let k: usize = diffs.iter().map(|d| d.sample_len()).sum();
                diffs
                    .iter()
                    .map(|d| {
                        let per = d.sample_len();
                        let data = (0..n).flat_map(|b| std::iter::repeat(dout[b] / k as f32).take(per)).collect();
                        Tensor::from_vec(d.shape(), data)
                    })
                    .collect()
            }
            (Head::Fc(block), HeadCache::Fc(c)) => {
                let dx = block.backward(c, &Tensor::from_vec(&[n, 1], dout.to_vec()));
                split_flat(&dx, diffs)
            }
            (Head::Cnn(net), HeadCache::Cnn(trace)) => {
                let grads = TraceGrads { logits: Some(Tensor::from_vec(&[n, 1], dout.to_vec())), ..Default::default() };
                vec![net.backward(trace, grads, true, true).expect("input gradient requested")]
            }
            _ => unreachable!("head cache does not match head"),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        match self {
            Head::Basic => Vec::new(),
            Head::Fc(b) => b.params_mut(),
            Head::Cnn(net) => net.params_mut(),
        }
    }

    fn named(&self, out: &mut Vec<(String, Tensor<f32>)>) {
        match self {
            Head::Basic => {}
            Head::Fc(b) => b.named_tensors("head", out),
            Head::Cnn(net) => net.named_tensors("head", out),
        }
    }

    fn named_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor<f32>)>) {
        match self {
            Head::Basic => {}
            Head::Fc(b) => b.named_tensors_mut("head", out),
            Head::Cnn(net) => net.named_tensors_mut("head", out),
        }
    }
}

fn basic_distance(diffs: &[Tensor<f32>]) -> Vec<f32> {
    let n = diffs[0].batch();
    let k: usize = diffs.iter().map(|d| d.sample_len()).sum();
    (0..n)
        .map(|b| {
            let s: f64 = diffs.iter().map(|d| d.sample(b).iter().map(|&v| v as f64).sum::<f64>()).sum();
            (s / k as f64) as f32
        })
        .collect()
}

/// Two weight-sharing siblings (one backbone parameter set) and a head.
#[derive(Debug, Clone)]
pub struct SiameseModel {
    pub config: SiameseConfig,
    pub backbone: ResNet3d,
    pub head: Head,
    backbone_seed: u64,
    head_seed: u64,
    dropout: f64,
}

pub const CHECKPOINT_KIND: &str = "siamese";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SiameseMeta {
    config: SiameseConfig,
    backbone_seed: u64,
    head_seed: u64,
    dropout: f64,
}

impl SiameseModel {
    pub fn build(config: &SiameseConfig, backbone: &BackboneModel, seed: u64) -> Result<Self> {
        Self::build_with_dropout(config, backbone, seed, DEFAULT_DROPOUT)
    }

    pub fn build_with_dropout(config: &SiameseConfig, backbone: &BackboneModel, seed: u64, dropout: f64) -> Result<Self> {
        config.validate()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {dropout}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Head::build(config, dropout, &mut rng);
        Ok(Self { config: config.clone(), backbone: backbone.net.clone(), head, backbone_seed: backbone.seed, head_seed: seed, dropout })
    }

    pub fn taps(&self) -> &[Tap] {
        &self.config.feature_taps
    }

    pub fn depth(&self) -> Depth {
        Depth::for_taps(self.taps())
    }

    pub fn is_frozen(&self) -> bool {
        self.config.is_frozen()
    }

    pub fn backbone_checksum(&self) -> String {
        parameter_checksum(&self.backbone)
    }

    pub fn embeddings_from_trace(&self, trace: &Trace) -> Embeddings {
        let maps = collect_taps(trace, self.taps());
        Embeddings { taps: self.taps().iter().map(|t| maps[t].clone()).collect() }
    }

    /// Evaluation-mode sibling features for a batch `[N, 1, 32, 32, 32]`.
    pub fn embed_batch(&self, x: &Tensor<f32>) -> Result<Embeddings> {
        let trace = self.backbone.infer(x, self.depth())?;
        Ok(self.embeddings_from_trace(&trace))
    }

    pub fn embed(&self, patches: &[&Patch]) -> Result<Embeddings> {
        if patches.is_empty() {
            return Ok(Embeddings { taps: self.taps().iter().map(|t| Tensor::zeros(&[0, t.len()])).collect() });
        }
        // Bounded batches keep peak memory flat for long candidate lists.
        let mut parts = Vec::new();
        for chunk in patches.chunks(16) {
            parts.push(self.embed_batch(&batch_patches(chunk)?)?);
        }
        Ok(Embeddings::concat(&parts.iter().collect::<Vec<_>>()))
    }

    /// Convert raw head outputs to scores: distances pass through, logits
    /// become probabilities.
    pub fn to_score(&self, raw: f32) -> f64 {
        match self.config.loss {
            LossKind::Contrastive => raw as f64,
            LossKind::Bce => sigmoid(raw as f64),
        }
    }

    /// Evaluation-mode scores for pairs `(a[i], b[i])`.
    pub fn score_embeddings(&self, a: &Embeddings, b: &Embeddings) -> Result<Vec<f64>> {
        let (diffs, _) = abs_diff(a, b);
        Ok(self.head.apply(&diffs)?.into_iter().map(|r| self.to_score(r)).collect())
    }

    /// Score every `(a[i], b[j])` pair; result is row-major `|a| x |b|`.
    pub fn score_table(&self, a: &Embeddings, b: &Embeddings) -> Result<Vec<Vec<f64>>> {
        let (na, nb) = (a.len(), b.len());
        let mut rows = vec![Vec::with_capacity(nb); na];
        let pairs: Vec<(usize, usize)> = (0..na).flat_map(|i| (0..nb).map(move |j| (i, j))).collect();
        for chunk in pairs.chunks(32) {
            let ai: Vec<usize> = chunk.iter().map(|p| p.0).collect();
            let bi: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let scores = self.score_embeddings(&a.select(&ai), &b.select(&bi))?;
            for (&(i, _), s) in chunk.iter().zip(scores) {
                rows[i].push(s);
            }
        }
        Ok(rows)
    }

    /// Similarity score for one pair: match probability for BCE heads,
    /// distance for the basic head.
    pub fn forward_pair(&self, a: &Patch, b: &Patch) -> Result<f64> {
        let e = self.embed(&[a, b])?;
        Ok(self.score_embeddings(&e.select(&[0]), &e.select(&[1]))?[0])
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.head.params_mut()
    }

    /// Parameters updated by training: the head, plus the backbone when unfrozen.
    pub fn trainable_params(&mut self) -> Vec<&mut Param<f32>> {
        let frozen = self.is_frozen();
        let mut v = self.head.params_mut();
        if !frozen {
            v.extend(self.backbone.params_mut());
        }
        v
    }

    pub fn num_trainable(&mut self) -> usize {
        self.trainable_params().iter().map(|p| p.value.len()).sum()
    }

    /// Copies of every tensor training may change.
    pub fn snapshot(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        if !self.is_frozen() {
            self.backbone.named_tensors("backbone", &mut out);
        }
        self.head.named(&mut out);
        out
    }

    pub fn restore(&mut self, snap: &[(String, Tensor<f32>)]) {
        let frozen = self.is_frozen();
        let mut targets = Vec::new();
        if !frozen {
            self.backbone.named_tensors_mut("backbone", &mut targets);
        }
        self.head.named_mut(&mut targets);
        assert_eq!(targets.len(), snap.len(), "snapshot does not match model");
        for ((_, dst), (_, src)) in targets.into_iter().zip(snap) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = SiameseMeta { config: self.config.clone(), backbone_seed: self.backbone_seed, head_seed: self.head_seed, dropout: self.dropout };
        let mut named = Vec::new();
        self.backbone.named_tensors("backbone", &mut named);
        self.head.named(&mut named);
        Checkpoint::from_named(CHECKPOINT_KIND, serde_json::to_value(meta).expect("serializable"), named)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let meta: SiameseMeta = ckpt.meta()?;
        let backbone = BackboneModel::new(meta.backbone_seed);
        let mut model = Self::build_with_dropout(&meta.config, &backbone, meta.head_seed, meta.dropout)?;
        ckpt.load_into(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Module<f32> for SiameseModel {
    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.trainable_params()
    }

    fn named_tensors(&self, _prefix: &str, out: &mut Vec<(String, Tensor<f32>)>) {
        self.backbone.named_tensors("backbone", out);
        self.head.named(out);
    }

    fn named_tensors_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f32>)>) {
        self.backbone.named_tensors_mut("backbone", out);
        self.head.named_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::siamese::loss::bce_with_logits_batch;

    /// End-to-end FC head check in f64: loss w.r.t. head parameters and
    /// inputs against central finite differences.
    #[test]
    fn fc_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let (n, k) = (4, 6);
            let mut block = FcBlock::<f64>::new(k, 5, 0.3, &mut rng);
            let x = Tensor::from_vec(&[n, k], (0..n * k).map(|_| rng.gen_range(0.0..1.0)).collect());
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let mask_seed = 100 + trial;
            let loss_of = |b: &FcBlock<f64>, x: &Tensor<f64>| {
                let mut b = b.clone();
                let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                let (y, _) = b.forward(x, Mode::Train, &mut r);
                bce_with_logits_batch(y.data(), &labels).0
            };
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            let (y, cache) = block.clone().forward(&x, Mode::Train, &mut r);
            let (_, dl) = bce_with_logits_batch(y.data(), &labels);
            let dx = block.backward(&cache, &Tensor::from_vec(&[n, 1], dl));
            let h = 1e-6;
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-7);
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss_of(&block, &xp) - loss_of(&block, &xm)) / (2.0 * h);
                assert!(rel(fd, dx.data()[i]) < 1e-4 || (fd - dx.data()[i]).abs() < 1e-9, "input {i}: {fd} vs {}", dx.data()[i]);
            }
            let grads: Vec<Tensor<f64>> = block.clone().params_mut().iter().map(|p| p.grad.clone()).collect();
            for (pi, g) in grads.iter().enumerate() {
                for i in 0..g.len() {
                    let bump = |delta: f64| {
                        let mut b = block.clone();
                        b.params_mut()[pi].value.data_mut()[i] += delta;
                        loss_of(&b, &x)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    assert!(rel(fd, g.data()[i]) < 1e-4 || (fd - g.data()[i]).abs() < 1e-9, "param {pi}[{i}]: {fd} vs {}", g.data()[i]);
                }
            }
        }
    }

    #[test]
    fn abs_diff_is_symmetric_with_opposite_signs() {
        let a = Embeddings { taps: vec![Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5])] };
        let b = Embeddings { taps: vec![Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.5])] };
        let (d1, s1) = abs_diff(&a, &b);
        let (d2, s2) = abs_diff(&b, &a);
        assert_eq!(d1, d2);
        assert_eq!(s1[0], vec![1, -1, 0]);
        assert_eq!(s2[0], vec![-1, 1, 0]);
    }
}
