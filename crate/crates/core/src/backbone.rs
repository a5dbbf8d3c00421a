//! 3D ResNet-34 classifier for 32³ nodule patches, with feature taps.
//!
//! Stem: 7³ convolution with stride (1, 2, 2) over (D, H, W), batch norm,
//! ReLU and a 3³/2 max pool. Four stages of basic residual blocks
//! ([3, 4, 6, 3] blocks, 64/128/256/512 channels, stride 2 from the second
//! stage on) follow, then global average pooling and a one-logit linear layer.
//! For a 32³ input the stage outputs are 64×(16,8,8), 128×(8,4,4),
//! 256×(4,2,2) and 512×(2,1,1).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nodule_nn::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm, BatchNormCache, Conv3d, ConvCache, Linear,
    LinearCache, MaxPool3d, MaxPoolCache,
};
use nodule_nn::optim::Adam;
use nodule_nn::{Mode, Module, Param, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Augmentation;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::volume_io::{Patch, NODULE_PATCH_SIDE};

pub const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const STEM_WIDTH: usize = 64;

/// Named feature tap of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Layer1,
    Layer2,
    Layer3,
    Avgpool,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::Layer1, Tap::Layer2, Tap::Layer3, Tap::Avgpool];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Layer1 => "layer1",
            Tap::Layer2 => "layer2",
            Tap::Layer3 => "layer3",
            Tap::Avgpool => "avgpool",
        }
    }

    /// Index of the stage whose output this tap reads (avgpool pools stage 4).
    pub fn stage(self) -> usize {
        match self {
            Tap::Layer1 => 0,
            Tap::Layer2 => 1,
            Tap::Layer3 => 2,
            Tap::Avgpool => 3,
        }
    }

    /// Per-sample shape for a 32³ input: `[C, D, H, W]` or `[512]`.
    pub fn shape(self) -> Vec<usize> {
        match self {
            Tap::Layer1 => vec![64, 16, 8, 8],
            Tap::Layer2 => vec![128, 8, 4, 4],
            Tap::Layer3 => vec![256, 4, 2, 2],
            Tap::Avgpool => vec![512],
        }
    }

    pub fn len(self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_spatial(self) -> bool {
        self != Tap::Avgpool
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownTap(s.to_string()))
    }
}

/// Feature maps keyed by tap; each tensor is `[N, ...tap shape]`.
pub type FeatureMapSet = BTreeMap<Tap, Tensor<f32>>;

#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv3d<f32>,
    bn1: BatchNorm<f32>,
    conv2: Conv3d<f32>,
    bn2: BatchNorm<f32>,
    downsample: Option<(Conv3d<f32>, BatchNorm<f32>)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    c1: ConvCache<f32>,
    b1: BatchNormCache<f32>,
    h1: Tensor<f32>,
    c2: ConvCache<f32>,
    b2: BatchNormCache<f32>,
    down: Option<(ConvCache<f32>, BatchNormCache<f32>)>,
    out: Tensor<f32>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let downsample = (stride != 1 || cin != cout)
            .then(|| (Conv3d::cubic(cin, cout, 1, stride, 0, false, rng), BatchNorm::new(cout)));
        Self {
            conv1: Conv3d::cubic(cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(cout),
            conv2: Conv3d::cubic(cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(cout),
            downsample,
        }
    }

    fn apply(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let h = relu(&self.bn1.apply(&self.conv1.apply(x)));
        let mut y = self.bn2.apply(&self.conv2.apply(&h));
        match &self.downsample {
            Some((c, b)) => y.add_assign(&b.apply(&c.apply(x))),
            None => y.add_assign(x),
        }
        relu(&y)
    }

    fn forward(&mut self, x: &Tensor<f32>, mode: Mode) -> (Tensor<f32>, BlockCache) {
        let (a, c1) = self.conv1.forward(x);
        let (a, b1) = self.bn1.forward(&a, mode);
        let h1 = relu(&a);
        let (a, c2) = self.conv2.forward(&h1);
        let (mut y, b2) = self.bn2.forward(&a, mode);
        let down = match &mut self.downsample {
            Some((c, b)) => {
                let (s, cc) = c.forward(x);
                let (s, bc) = b.forward(&s, mode);
                y.add_assign(&s);
                Some((cc, bc))
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        let out = relu(&y);
        (out.clone(), BlockCache { c1, b1, h1, c2, b2, down, out })
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor<f32>, param_grads: bool, need_input_grad: bool) -> Option<Tensor<f32>> {
        let dy = relu_backward(&cache.out, dy);
        let d = self.bn2.backward(&cache.b2, &dy, param_grads);
        let d = self.conv2.backward(&cache.c2, &d, param_grads, true).expect("input grad requested");
        let d = relu_backward(&cache.h1, &d);
        let d = self.bn1.backward(&cache.b1, &d, param_grads);
        let dx = self.conv1.backward(&cache.c1, &d, param_grads, need_input_grad);
        let dshort = match (&mut self.downsample, &cache.down) {
            (Some((c, b)), Some((cc, bc))) => {
                let d = b.backward(bc, &dy, param_grads);
                c.backward(cc, &d, param_grads, need_input_grad)
            }
            _ => need_input_grad.then(|| dy.clone()),
        };
        match (dx, dshort) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    fn visit<'a>(&'a mut self, out: &mut Vec<&'a mut Param<f32>>) {
        out.extend(self.conv1.params_mut());
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        if let Some((c, b)) = &mut self.downsample {
            out.extend(c.params_mut());
            out.extend(b.params_mut());
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor<f32>)>) {
        self.conv1.named_tensors(&format!("{prefix}.conv1"), out);
        self.bn1.named_tensors(&format!("{prefix}.bn1"), out);
        self.conv2.named_tensors(&format!("{prefix}.conv2"), out);
        self.bn2.named_tensors(&format!("{prefix}.bn2"), out);
        if let Some((c, b)) = &self.downsample {
            c.named_tensors(&format!("{prefix}.downsample.conv"), out);
            b.named_tensors(&format!("{prefix}.downsample.bn"), out);
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f32>)>) {
        self.conv1.named_tensors_mut(&format!("{prefix}.conv1"), out);
        self.bn1.named_tensors_mut(&format!("{prefix}.bn1"), out);
        self.conv2.named_tensors_mut(&format!("{prefix}.conv2"), out);
        self.bn2.named_tensors_mut(&format!("{prefix}.bn2"), out);
        if let Some((c, b)) = &mut self.downsample {
            c.named_tensors_mut(&format!("{prefix}.downsample.conv"), out);
            b.named_tensors_mut(&format!("{prefix}.downsample.bn"), out);
        }
    }
}

#[derive(Debug, Clone)]
struct Stem {
    conv: Conv3d<f32>,
    bn: BatchNorm<f32>,
    pool: MaxPool3d,
}

#[derive(Debug, Clone)]
struct StemCache {
    conv: ConvCache<f32>,
    bn: BatchNormCache<f32>,
    act: Tensor<f32>,
    pool: MaxPoolCache,
}

/// A ResNet-34 or its tail starting at a given stage (used as a clean
/// comparison network on distance maps).
#[derive(Debug, Clone)]
pub struct ResNet3d {
    stem: Option<Stem>,
    first_stage: usize,
    stages: Vec<Vec<BasicBlock>>,
    fc: Linear<f32>,
}

/// How far a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    /// Stop after the output of stage `k` (0-based).
    Stage(usize),
    /// Through global pooling, without the classifier.
    Pooled,
    /// Through the final linear layer.
    Logits,
}

impl Depth {
    pub fn for_taps(taps: &[Tap]) -> Self {
        match taps.iter().max() {
            Some(Tap::Avgpool) => Depth::Pooled,
            Some(t) => Depth::Stage(t.stage()),
            None => Depth::Stage(0),
        }
    }

    fn last_stage(self) -> usize {
        match self {
            Depth::Stage(k) => k,
            _ => 3,
        }
    }
}

/// Everything needed to backpropagate one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    stem: Option<StemCache>,
    blocks: Vec<Vec<BlockCache>>,
    /// Outputs of the computed stages, indexed from `first_stage`.
    pub stage_outputs: Vec<Tensor<f32>>,
    pub pooled: Option<Tensor<f32>>,
    fc: Option<LinearCache<f32>>,
    pub logits: Option<Tensor<f32>>,
}

/// Upstream gradients for a [`Trace`]; `stage_outputs[k]` is for absolute stage `k`.
#[derive(Debug, Clone, Default)]
pub struct TraceGrads {
    pub stage_outputs: [Option<Tensor<f32>>; 4],
    pub pooled: Option<Tensor<f32>>,
    pub logits: Option<Tensor<f32>>,
}

impl ResNet3d {
    /// Full network for single-channel input.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Stem {
            conv: Conv3d::new(1, STEM_WIDTH, [7; 3], [1, 2, 2], [3; 3], false, &mut rng),
            bn: BatchNorm::new(STEM_WIDTH),
            pool: MaxPool3d::new(3, 2, 1),
        };
        Self::build(Some(stem), 0, STEM_WIDTH, &mut rng)
    }

    /// Stages `first_stage..4` plus pooling and classifier; the input must
    /// have the channel count of the previous stage's output.
    pub fn tail(first_stage: usize, seed: u64) -> Self {
        assert!((1..4).contains(&first_stage), "tail must start at stage 1, 2 or 3");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(None, first_stage, STAGE_WIDTHS[first_stage - 1], &mut rng)
    }

    fn build(stem: Option<Stem>, first_stage: usize, mut cin: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        for s in first_stage..4 {
            let cout = STAGE_WIDTHS[s];
            let mut blocks = Vec::new();
            for b in 0..STAGE_BLOCKS[s] {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, cout, stride, rng));
                cin = cout;
            }
            stages.push(blocks);
        }
        let mut fc = Linear::new(cin, 1, rng);
        fc.bias.value.fill(0.0);
        Self { stem, first_stage, stages, fc }
    }

    pub fn first_stage(&self) -> usize {
        self.first_stage
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<()> {
        if self.stem.is_some() {
            let s = NODULE_PATCH_SIDE;
            if x.shape().len() != 5 || x.shape()[1..] != [1, s, s, s] {
                return Err(Error::Shape(format!("backbone expects [N, 1, {s}, {s}, {s}] input, got {:?}", x.shape())));
            }
        }
        Ok(())
    }

    /// Evaluation-mode forward pass without caches.
    pub fn infer(&self, x: &Tensor<f32>, depth: Depth) -> Result<Trace> {
        self.check_input(x)?;
        let mut h = match &self.stem {
            Some(stem) => stem.pool.forward(&relu(&stem.bn.apply(&stem.conv.apply(x)))).0,
            None => x.clone(),
        };
        let mut stage_outputs = Vec::new();
        for (i, blocks) in self.stages.iter().enumerate() {
            if self.first_stage + i > depth.last_stage() {
                break;
            }
            for b in blocks {
                h = b.apply(&h);
            }
            stage_outputs.push(h.clone());
        }
        let (pooled, logits) = self.head_forward(&stage_outputs, depth, None);
        Ok(Trace { stem: None, blocks: Vec::new(), stage_outputs, pooled, fc: None, logits })
    }

    fn head_forward(
        &self,
        stage_outputs: &[Tensor<f32>],
        depth: Depth,
        fc_cache: Option<&mut Option<LinearCache<f32>>>,
    ) -> (Option<Tensor<f32>>, Option<Tensor<f32>>) {
        if matches!(depth, Depth::Stage(_)) {
            return (None, None);
        }
        let pooled = global_avg_pool(stage_outputs.last().expect("at least one stage"));
        let logits = (depth == Depth::Logits).then(|| match fc_cache {
            Some(slot) => {
                let (y, c) = self.fc.forward(&pooled);
                *slot = Some(c);
                y
            }
            None => self.fc.apply(&pooled),
        });
        (Some(pooled), logits)
    }

    /// Forward pass recording caches for [`ResNet3d::backward`]. Training
    /// mode updates batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor<f32>, mode: Mode, depth: Depth) -> Result<Trace> {
        self.check_input(x)?;
        let (mut h, stem_cache) = match &mut self.stem {
            Some(stem) => {
                let (a, conv) = stem.conv.forward(x);
                let (a, bn) = stem.bn.forward(&a, mode);
                let act = relu(&a);
                let (p, pool) = stem.pool.forward(&act);
                (p, Some(StemCache { conv, bn, act, pool }))
            }
            None => (x.clone(), None),
        };
        let mut blocks_cache = Vec::new();
        let mut stage_outputs = Vec::new();
        for (i, blocks) in self.stages.iter_mut().enumerate() {
            if self.first_stage + i > depth.last_stage() {
                break;
            }
            let mut caches = Vec::with_capacity(blocks.len());
            for b in blocks.iter_mut() {
                let (y, c) = b.forward(&h, mode);
                caches.push(c);
                h = y;
            }
            blocks_cache.push(caches);
            stage_outputs.push(h.clone());
        }
        let mut fc = None;
        let (pooled, logits) = self.head_forward(&stage_outputs, depth, Some(&mut fc));
        Ok(Trace { stem: stem_cache, blocks: blocks_cache, stage_outputs, pooled, fc, logits })
    }

    /// Backpropagate; returns the input gradient when requested.
    pub fn backward(&mut self, trace: &Trace, grads: TraceGrads, param_grads: bool, need_input_grad: bool) -> Option<Tensor<f32>> {
        let TraceGrads { stage_outputs: mut stage_grads, pooled, logits } = grads;
        let mut dpooled = pooled;
        if let (Some(dl), Some(cache)) = (logits, &trace.fc) {
            let d = self.fc.backward(cache, &dl, param_grads);
            dpooled = Some(match dpooled {
                Some(mut p) => {
                    p.add_assign(&d);
                    p
                }
                None => d,
            });
        }
        let computed = trace.blocks.len();
        if computed == 0 {
            return None;
        }
        let mut g: Option<Tensor<f32>> =
            dpooled.map(|dp| global_avg_pool_backward(trace.stage_outputs[computed - 1].shape(), &dp));
        for i in (0..computed).rev() {
            let abs = self.first_stage + i;
            if let Some(t) = stage_grads[abs].take() {
                g = Some(match g {
                    Some(mut a) => {
                        a.add_assign(&t);
                        a
                    }
                    None => t,
                });
            }
            let Some(mut cur) = g.take() else { continue };
            let is_first_block = |j: usize| i == 0 && j == 0;
            let last_needed = self.stem.is_some() || need_input_grad;
            for (j, (block, cache)) in self.stages[i].iter_mut().zip(&trace.blocks[i]).enumerate().rev() {
                let want = !is_first_block(j) || last_needed;
                match block.backward(cache, &cur, param_grads, want) {
                    Some(d) => cur = d,
                    None => return None,
                }
            }
            g = Some(cur);
        }
        let g = g?;
        match (&mut self.stem, &trace.stem) {
            (Some(stem), Some(cache)) => {
                let d = stem.pool.backward(&cache.pool, &g);
                let d = relu_backward(&cache.act, &d);
                let d = stem.bn.backward(&cache.bn, &d, param_grads);
                stem.conv.backward(&cache.conv, &d, param_grads, need_input_grad)
            }
            _ => need_input_grad.then_some(g),
        }
    }
}

impl Module<f32> for ResNet3d {
    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut out = Vec::new();
        if let Some(stem) = &mut self.stem {
            out.extend(stem.conv.params_mut());
            out.extend(stem.bn.params_mut());
        }
        for blocks in &mut self.stages {
            for b in blocks {
                b.visit(&mut out);
            }
        }
        out.extend(self.fc.params_mut());
        out
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<f32>)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        if let Some(stem) = &self.stem {
            stem.conv.named_tensors(&p("conv1"), out);
            stem.bn.named_tensors(&p("bn1"), out);
        }
        for (i, blocks) in self.stages.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                b.named(&p(&format!("layer{}.{j}", self.first_stage + i + 1)), out);
            }
        }
        self.fc.named_tensors(&p("fc"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f32>)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        if let Some(stem) = &mut self.stem {
            stem.conv.named_tensors_mut(&p("conv1"), out);
            stem.bn.named_tensors_mut(&p("bn1"), out);
        }
        let first = self.first_stage;
        for (i, blocks) in self.stages.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                b.named_mut(&p(&format!("layer{}.{j}", first + i + 1)), out);
            }
        }
        self.fc.named_tensors_mut(&p("fc"), out);
    }
}

/// The pretrained 34-layer classifier whose taps feed the siamese networks.
#[derive(Debug, Clone)]
pub struct BackboneModel {
    pub net: ResNet3d,
    pub seed: u64,
}

pub const CHECKPOINT_KIND: &str = "backbone";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BackboneMeta {
    seed: u64,
    patch_side: usize,
    taps: BTreeMap<String, Vec<usize>>,
}

/// Stack patches into an `[N, 1, s, s, s]` batch.
pub fn batch_patches(patches: &[&Patch]) -> Result<Tensor<f32>> {
    let s = NODULE_PATCH_SIDE;
    let mut data = Vec::with_capacity(patches.len() * s * s * s);
    for p in patches {
        if p.side() != s {
            return Err(Error::Shape(format!("expected a {s}³ patch, got side {}", p.side())));
        }
        data.extend_from_slice(p.voxels());
    }
    Ok(Tensor::from_vec(&[patches.len(), 1, s, s, s], data))
}

impl BackboneModel {
    pub fn new(seed: u64) -> Self {
        Self { net: ResNet3d::new(seed), seed }
    }

    /// Probability that each patch is a nodule.
    pub fn classify_batch(&self, patches: &[&Patch]) -> Result<Vec<f32>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let x = batch_patches(patches)?;
        let trace = self.net.infer(&x, Depth::Logits)?;
        Ok(trace.logits.expect("logits computed").data().iter().map(|&z| nodule_nn::layers::sigmoid(z)).collect())
    }

    pub fn classify(&self, patch: &Patch) -> Result<f32> {
        Ok(self.classify_batch(&[patch])?[0])
    }

    /// Evaluation-mode features for a batch; only the requested taps are returned.
    pub fn extract_batch(&self, x: &Tensor<f32>, taps: &[Tap]) -> Result<FeatureMapSet> {
        if taps.is_empty() {
            return Err(Error::InvalidArgument("no feature taps requested".into()));
        }
        let trace = self.net.infer(x, Depth::for_taps(taps))?;
        Ok(collect_taps(&trace, taps))
    }

    pub fn extract_features(&self, patch: &Patch, taps: &[Tap]) -> Result<FeatureMapSet> {
        self.extract_batch(&batch_patches(&[patch])?, taps)
    }

    pub fn tap_shapes() -> BTreeMap<String, Vec<usize>> {
        Tap::ALL.iter().map(|t| (t.name().to_string(), t.shape())).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = BackboneMeta { seed: self.seed, patch_side: NODULE_PATCH_SIDE, taps: Self::tap_shapes() };
        Checkpoint::from_module(CHECKPOINT_KIND, serde_json::to_value(meta).expect("serializable"), &self.net)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let meta: BackboneMeta = ckpt.meta()?;
        let mut model = Self::new(meta.seed);
        ckpt.load_into(&mut model.net)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Pick tap tensors out of a trace whose stage outputs start at stage 0.
pub fn collect_taps(trace: &Trace, taps: &[Tap]) -> FeatureMapSet {
    taps.iter()
        .map(|&t| {
            let v = match t {
                Tap::Avgpool => trace.pooled.clone().expect("pooled features computed"),
                _ => trace.stage_outputs[t.stage()].clone(),
            };
            (t, v)
        })
        .collect()
}

/// Weighted binary cross-entropy on logits, averaged over the batch.
/// Returns the loss and its gradient with respect to each logit.
pub fn weighted_bce_with_logits(logits: &[f64], labels: &[bool], w_pos: f64, w_neg: f64) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let w = if y { w_pos } else { w_neg };
        let t = if y { 1.0 } else { 0.0 };
        // softplus(z) - t z, computed stably.
        let sp = z.max(0.0) + (-z.abs()).exp().ln_1p();
        loss += w * (sp - t * z);
        let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
        grad.push(w * (p - t) / n);
    }
    (loss / n, grad)
}

/// Inverse-frequency class weights `N / (2 n_class)`.
pub fn class_weights(labels: &[bool]) -> Result<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("class weights are undefined for single-class training data".into()));
    }
    let n = labels.len() as f64;
    Ok((n / (2.0 * n_pos as f64), n / (2.0 * n_neg as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Inverse-frequency weighting of the BCE loss.
    pub class_weighting: bool,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for ClassifierRecipe {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            class_weighting: true,
            augmentation: Augmentation { lighting: true, ..Augmentation::default() },
            seed: 0,
        }
    }
}

impl ClassifierRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::Config("batch_size must be positive and learning_rate non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Train the classifier from `model`'s current parameters.
pub fn train_classifier(model: &mut BackboneModel, data: &[LabeledPatch], recipe: &ClassifierRecipe) -> Result<Vec<EpochStats>> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no training patches".into()));
    }
    let labels: Vec<bool> = data.iter().map(|d| d.label).collect();
    let (w_pos, w_neg) = if recipe.class_weighting { class_weights(&labels)? } else { (1.0, 1.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut adam = Adam::new(recipe.learning_rate);
    let side = NODULE_PATCH_SIDE;
    let mut history = Vec::with_capacity(recipe.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(recipe.batch_size) {
            let mut x = Vec::with_capacity(chunk.len() * side * side * side);
            for &i in chunk {
                let p = &data[i].patch;
                if p.side() != side {
                    return Err(Error::Shape(format!("expected a {side}³ patch, got side {}", p.side())));
                }
                if recipe.augmentation.is_active() {
                    x.extend(recipe.augmentation.apply_cube(p.voxels(), side, &mut rng));
                } else {
                    x.extend_from_slice(p.voxels());
                }
            }
            let x = Tensor::from_vec(&[chunk.len(), 1, side, side, side], x);
            // Batch norm needs more than one value per channel in training mode.
            let mode = if chunk.len() > 1 { Mode::Train } else { Mode::Eval };
            let trace = model.net.forward(&x, mode, Depth::Logits)?;
            let logits: Vec<f64> = trace.logits.as_ref().unwrap().data().iter().map(|&v| v as f64).collect();
            let y: Vec<bool> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grad) = weighted_bce_with_logits(&logits, &y, w_pos, w_neg);
            loss_sum += loss * chunk.len() as f64;
            correct += logits.iter().zip(&y).filter(|(z, t)| (**z > 0.0) == **t).count();
            model.net.zero_grad();
            let dl = Tensor::from_vec(&[chunk.len(), 1], grad.into_iter().map(|g| g as f32).collect());
            model.net.backward(&trace, TraceGrads { logits: Some(dl), ..Default::default() }, true, false);
            adam.step(model.net.params_mut());
        }
        history.push(EpochStats { epoch, loss: loss_sum / data.len() as f64, accuracy: correct as f64 / data.len() as f64 });
    }
    Ok(history)
}
