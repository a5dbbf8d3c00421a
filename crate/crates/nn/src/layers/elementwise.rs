use rand::Rng;

use crate::{Float, Mode, Tensor};

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU backward, using the ReLU *output* as the mask.
pub fn relu_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data)
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct DropoutCache<T> {
    scale: Option<Vec<T>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate }
    }

    pub fn forward<T: Float, R: Rng + ?Sized>(&self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> (Tensor<T>, DropoutCache<T>) {
        if mode == Mode::Eval || self.rate == 0.0 {
            return (x.clone(), DropoutCache { scale: None });
        }
        let keep = T::from_f64c(1.0 / (1.0 - self.rate));
        let scale: Vec<T> = (0..x.len()).map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep }).collect();
        let data = x.data().iter().zip(&scale).map(|(&a, &s)| a * s).collect();
        (Tensor::from_vec(x.shape(), data), DropoutCache { scale: Some(scale) })
    }

    pub fn backward<T: Float>(&self, cache: &DropoutCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        match &cache.scale {
            None => dy.clone(),
            Some(scale) => {
                let data = dy.data().iter().zip(scale).map(|(&g, &s)| g * s).collect();
                Tensor::from_vec(dy.shape(), data)
            }
        }
    }
}

/// Nearest-neighbour upsampling by 2 along every spatial axis.
pub fn upsample2<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let [d, h, w] = x.spatial();
    let (n, c) = (x.batch(), x.channels());
    let mut y = Tensor::zeros(&[n, c, 2 * d, 2 * h, 2 * w]);
    let (oh, ow) = (2 * h, 2 * w);
    for b in 0..n {
        let src = x.sample(b);
        let dst = y.sample_mut(b);
        for ch in 0..c {
            let s = &src[ch * d * h * w..(ch + 1) * d * h * w];
            let o = &mut dst[ch * 8 * d * h * w..(ch + 1) * 8 * d * h * w];
            for z in 0..2 * d {
                for yy in 0..oh {
                    let line = &s[((z / 2) * h + yy / 2) * w..((z / 2) * h + yy / 2 + 1) * w];
                    let out = &mut o[(z * oh + yy) * ow..(z * oh + yy + 1) * ow];
                    for (xx, v) in out.iter_mut().enumerate() {
                        *v = line[xx / 2];
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let [od, oh, ow] = dy.spatial();
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let (n, c) = (dy.batch(), dy.channels());
    let mut dx = Tensor::zeros(&[n, c, d, h, w]);
    for b in 0..n {
        let src = dy.sample(b);
        let dst = dx.sample_mut(b);
        for ch in 0..c {
            let s = &src[ch * od * oh * ow..(ch + 1) * od * oh * ow];
            let o = &mut dst[ch * d * h * w..(ch + 1) * d * h * w];
            for z in 0..od {
                for yy in 0..oh {
                    let line = &s[(z * oh + yy) * ow..(z * oh + yy + 1) * ow];
                    let base = ((z / 2) * h + yy / 2) * w;
                    for (xx, &g) in line.iter().enumerate() {
                        o[base + xx / 2] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let n = parts[0].batch();
    let tail = &parts[0].shape()[2..];
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut shape = vec![n, c];
    shape.extend_from_slice(tail);
    let mut data = Vec::with_capacity(shape.iter().product());
    for b in 0..n {
        for p in parts {
            assert_eq!(p.batch(), n, "concat batch mismatch");
            assert_eq!(&p.shape()[2..], tail, "concat spatial mismatch");
            data.extend_from_slice(p.sample(b));
        }
    }
    Tensor::from_vec(&shape, data)
}

/// Split a channel-concatenated gradient back into parts of the given widths.
pub fn split_channels<T: Float>(dy: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let n = dy.batch();
    let tail = &dy.shape()[2..];
    let s: usize = tail.iter().product();
    let mut outs: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(n * w * s)).collect();
    for b in 0..n {
        let mut off = 0;
        let src = dy.sample(b);
        for (i, w) in widths.iter().enumerate() {
            outs[i].extend_from_slice(&src[off..off + w * s]);
            off += w * s;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &w)| {
            let mut shape = vec![n, w];
            shape.extend_from_slice(tail);
            Tensor::from_vec(&shape, d)
        })
        .collect()
}
