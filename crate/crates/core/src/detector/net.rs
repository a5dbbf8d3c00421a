use nodule_nn::layers::{
    concat_channels, relu, relu_backward, split_channels, upsample2, upsample2_backward, BatchNorm, BatchNormCache, Conv3d, ConvCache,
};
use nodule_nn::{Float, Mode, Module, Param, Tensor};
use rand::Rng;

use crate::volume_io::LOCATION_GRID_STRIDE;

/// Output channels per anchor: one logit and four regression values.
pub const CHANNELS_PER_ANCHOR: usize = 5;
/// Spatial reduction from input to output map.
pub const OUTPUT_STRIDE: usize = LOCATION_GRID_STRIDE;
/// Inputs must be a multiple of this side.
pub const SIDE_MULTIPLE: usize = 16;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub struct CbrCache<T> {
    conv: ConvCache<T>,
    bn: BatchNormCache<T>,
    out: Tensor<T>,
}

impl<T: Float> ConvBnRelu<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        Self { conv: Conv3d::cubic(cin, cout, k, stride, k / 2, false, rng), bn: BatchNorm::new(cout) }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        relu(&self.bn.apply(&self.conv.apply(x)))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, CbrCache<T>) {
        let (c, conv) = self.conv.forward(x);
        let (b, bn) = self.bn.forward(&c, mode);
        let out = relu(&b);
        (out.clone(), CbrCache { conv, bn, out })
    }

    pub fn backward(&mut self, cache: &CbrCache<T>, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let db = relu_backward(&cache.out, dy);
        let dc = self.bn.backward(&cache.bn, &db, true);
        self.conv.backward(&cache.conv, &dc, true, need_input_grad)
    }
}

impl<T: Float> Module<T> for ConvBnRelu<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.conv.named_tensors(&join(prefix, "conv"), out);
        self.bn.named_tensors(&join(prefix, "bn"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.conv.named_tensors_mut(&join(prefix, "conv"), out);
        self.bn.named_tensors_mut(&join(prefix, "bn"), out);
    }
}

/// Encoder-decoder with skip links at 1/4 and 1/8 resolution. The location
/// grid joins the decoder at 1/4 resolution, where both heads read a shared
/// feature map.
#[derive(Debug, Clone)]
pub struct DetectorNet<T> {
    pub enc1: ConvBnRelu<T>,
    pub enc2: ConvBnRelu<T>,
    pub enc3: ConvBnRelu<T>,
    pub enc4: ConvBnRelu<T>,
    pub enc5: ConvBnRelu<T>,
    pub enc6: ConvBnRelu<T>,
    pub enc7: ConvBnRelu<T>,
    pub dec1: ConvBnRelu<T>,
    pub fuse: ConvBnRelu<T>,
    pub dec2: ConvBnRelu<T>,
    pub head: Conv3d<T>,
    pub cls: Conv3d<T>,
    pub reg: Conv3d<T>,
    pub n_anchors: usize,
}

pub struct NetCache<T> {
    c: Vec<CbrCache<T>>,
    head: ConvCache<T>,
    head_out: Tensor<T>,
    cls: ConvCache<T>,
    reg: ConvCache<T>,
}

const W1: usize = 16;
const W2: usize = 32;
const W3: usize = 64;
const HEAD: usize = 32;

impl<T: Float> DetectorNet<T> {
    pub fn new<R: Rng + ?Sized>(n_anchors: usize, rng: &mut R) -> Self {
        let mut cls = Conv3d::cubic(HEAD, n_anchors, 1, 1, 0, true, rng);
        // Start from a low foreground prior so the many negatives do not
        // dominate the first updates.
        let prior = T::from_f64c(-(99.0f64).ln());
        cls.bias.as_mut().unwrap().value.fill(prior);
        cls.weight.value = cls.weight.value.map(|w| w * T::from_f64c(0.1));
        let mut reg = Conv3d::cubic(HEAD, 4 * n_anchors, 1, 1, 0, true, rng);
        reg.weight.value = reg.weight.value.map(|w| w * T::from_f64c(0.1));
        Self {
            enc1: ConvBnRelu::new(1, W1, 3, 2, rng),
            enc2: ConvBnRelu::new(W1, W2, 3, 2, rng),
            enc3: ConvBnRelu::new(W2, W2, 3, 1, rng),
            enc4: ConvBnRelu::new(W2, W3, 3, 2, rng),
            enc5: ConvBnRelu::new(W3, W3, 3, 1, rng),
            enc6: ConvBnRelu::new(W3, W3, 3, 2, rng),
            enc7: ConvBnRelu::new(W3, W3, 3, 1, rng),
            dec1: ConvBnRelu::new(2 * W3, W3, 3, 1, rng),
            fuse: ConvBnRelu::new(W3 + W2 + 3, HEAD, 1, 1, rng),
            dec2: ConvBnRelu::new(HEAD, HEAD, 3, 1, rng),
            head: Conv3d::cubic(HEAD, HEAD, 1, 1, 0, true, rng),
            cls,
            reg,
            n_anchors,
        }
    }

    const BLOCK_NAMES: [&'static str; 10] = ["enc1", "enc2", "enc3", "enc4", "enc5", "enc6", "enc7", "dec1", "fuse", "dec2"];

    fn blocks(&self) -> [&ConvBnRelu<T>; 10] {
        [&self.enc1, &self.enc2, &self.enc3, &self.enc4, &self.enc5, &self.enc6, &self.enc7, &self.dec1, &self.fuse, &self.dec2]
    }

    /// Merge logits `[N, A, g³]` and regression `[N, 4A, g³]` into the
    /// per-anchor layout `[N, 5A, g³]` (logit, dx, dy, dz, dd per anchor).
    fn interleave(&self, cls: &Tensor<T>, reg: &Tensor<T>) -> Tensor<T> {
        let a = self.n_anchors;
        let n = cls.batch();
        let [d, h, w] = cls.spatial();
        let g = d * h * w;
        let mut out = Tensor::zeros(&[n, CHANNELS_PER_ANCHOR * a, d, h, w]);
        for b in 0..n {
            let (c, r) = (cls.sample(b), reg.sample(b));
            let o = out.sample_mut(b);
            for k in 0..a {
                o[k * 5 * g..(k * 5 + 1) * g].copy_from_slice(&c[k * g..(k + 1) * g]);
                o[(k * 5 + 1) * g..(k * 5 + 5) * g].copy_from_slice(&r[k * 4 * g..(k + 1) * 4 * g]);
            }
        }
        out
    }

    fn deinterleave(&self, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let a = self.n_anchors;
        let n = dy.batch();
        let [d, h, w] = dy.spatial();
        let g = d * h * w;
        let mut cls = Tensor::zeros(&[n, a, d, h, w]);
        let mut reg = Tensor::zeros(&[n, 4 * a, d, h, w]);
        for b in 0..n {
            let s = dy.sample(b);
            for k in 0..a {
                cls.sample_mut(b)[k * g..(k + 1) * g].copy_from_slice(&s[k * 5 * g..(k * 5 + 1) * g]);
                reg.sample_mut(b)[k * 4 * g..(k + 1) * 4 * g].copy_from_slice(&s[(k * 5 + 1) * g..(k * 5 + 5) * g]);
            }
        }
        (cls, reg)
    }

    /// Evaluation-mode forward; `x` is `[N, 1, S, S, S]`, `loc` is
    /// `[N, 3, S/4, S/4, S/4]`, the result `[N, 5A, S/4, S/4, S/4]`.
    pub fn apply(&self, x: &Tensor<T>, loc: &Tensor<T>) -> Tensor<T> {
        let e1 = self.enc1.apply(x);
        let e2 = self.enc2.apply(&e1);
        let e3 = self.enc3.apply(&e2);
        let e4 = self.enc4.apply(&e3);
        let e5 = self.enc5.apply(&e4);
        let e6 = self.enc6.apply(&e5);
        let e7 = self.enc7.apply(&e6);
        let d1 = self.dec1.apply(&concat_channels(&[&upsample2(&e7), &e5]));
        let f = self.fuse.apply(&concat_channels(&[&upsample2(&d1), &e3, loc]));
        let d2 = self.dec2.apply(&f);
        let h = relu(&self.head.apply(&d2));
        self.interleave(&self.cls.apply(&h), &self.reg.apply(&h))
    }

    pub fn forward(&mut self, x: &Tensor<T>, loc: &Tensor<T>, mode: Mode) -> (Tensor<T>, NetCache<T>) {
        let mut c = Vec::with_capacity(10);
        let mut step = |blk: &mut ConvBnRelu<T>, input: &Tensor<T>| {
            let (y, cache) = blk.forward(input, mode);
            c.push(cache);
            y
        };
        let e1 = step(&mut self.enc1, x);
        let e2 = step(&mut self.enc2, &e1);
        let e3 = step(&mut self.enc3, &e2);
        let e4 = step(&mut self.enc4, &e3);
        let e5 = step(&mut self.enc5, &e4);
        let e6 = step(&mut self.enc6, &e5);
        let e7 = step(&mut self.enc7, &e6);
        let d1 = step(&mut self.dec1, &concat_channels(&[&upsample2(&e7), &e5]));
        let f = step(&mut self.fuse, &concat_channels(&[&upsample2(&d1), &e3, loc]));
        let d2 = step(&mut self.dec2, &f);
        let (h, head) = self.head.forward(&d2);
        let head_out = relu(&h);
        let (cl, cls) = self.cls.forward(&head_out);
        let (rg, reg) = self.reg.forward(&head_out);
        let out = self.interleave(&cl, &rg);
        (out, NetCache { c, head, head_out, cls, reg })
    }

    /// Accumulate parameter gradients for `dy` (same layout as the output).
    pub fn backward(&mut self, cache: &NetCache<T>, dy: &Tensor<T>) {
        let (dcls, dreg) = self.deinterleave(dy);
        let mut dh = self.cls.backward(&cache.cls, &dcls, true, true).unwrap();
        dh.add_assign(&self.reg.backward(&cache.reg, &dreg, true, true).unwrap());
        let dh = relu_backward(&cache.head_out, &dh);
        let dd2 = self.head.backward(&cache.head, &dh, true, true).unwrap();
        let c = &cache.c;
        let df = self.dec2.backward(&c[9], &dd2, true).unwrap();
        let dfuse_in = self.fuse.backward(&c[8], &df, true).unwrap();
        let parts = split_channels(&dfuse_in, &[W3, W2, 3]);
        let dd1 = upsample2_backward(&parts[0]);
        let mut de3 = parts[1].clone();
        let ddec1_in = self.dec1.backward(&c[7], &dd1, true).unwrap();
        let parts = split_channels(&ddec1_in, &[W3, W3]);
        let de7 = upsample2_backward(&parts[0]);
        let mut de5 = parts[1].clone();
        let de6 = self.enc7.backward(&c[6], &de7, true).unwrap();
        de5.add_assign(&self.enc6.backward(&c[5], &de6, true).unwrap());
        let de4 = self.enc5.backward(&c[4], &de5, true).unwrap();
        de3.add_assign(&self.enc4.backward(&c[3], &de4, true).unwrap());
        let de2 = self.enc3.backward(&c[2], &de3, true).unwrap();
        let de1 = self.enc2.backward(&c[1], &de2, true).unwrap();
        self.enc1.backward(&c[0], &de1, false);
    }
}

impl<T: Float> Module<T> for DetectorNet<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let DetectorNet { enc1, enc2, enc3, enc4, enc5, enc6, enc7, dec1, fuse, dec2, head, cls, reg, .. } = self;
        let mut p = Vec::new();
        for b in [enc1, enc2, enc3, enc4, enc5, enc6, enc7, dec1, fuse, dec2] {
            p.extend(b.params_mut());
        }
        p.extend(head.params_mut());
        p.extend(cls.params_mut());
        p.extend(reg.params_mut());
        p
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (b, name) in self.blocks().into_iter().zip(Self::BLOCK_NAMES) {
            b.named_tensors(&join(prefix, name), out);
        }
        self.head.named_tensors(&join(prefix, "head"), out);
        self.cls.named_tensors(&join(prefix, "cls"), out);
        self.reg.named_tensors(&join(prefix, "reg"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        let DetectorNet { enc1, enc2, enc3, enc4, enc5, enc6, enc7, dec1, fuse, dec2, head, cls, reg, .. } = self;
        for (b, name) in [enc1, enc2, enc3, enc4, enc5, enc6, enc7, dec1, fuse, dec2].into_iter().zip(Self::BLOCK_NAMES) {
            b.named_tensors_mut(&join(prefix, name), out);
        }
        head.named_tensors_mut(&join(prefix, "head"), out);
        cls.named_tensors_mut(&join(prefix, "cls"), out);
        reg.named_tensors_mut(&join(prefix, "reg"), out);
    }
}
