use crate::{Float, Tensor};

/// 3D max pooling with cubic kernel; padded positions never win.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool3d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    /// Flat input index (within the `[C, D, H, W]` sample) of each output's maximum.
    argmax: Vec<usize>,
}

impl MaxPool3d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    pub fn output_spatial(&self, ins: [usize; 3]) -> [usize; 3] {
        ins.map(|d| (d + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    pub fn forward<T: Float>(&self, x: &Tensor<T>) -> (Tensor<T>, MaxPoolCache) {
        let n = x.batch();
        let c = x.channels();
        let ins = x.spatial();
        let outs = self.output_spatial(ins);
        let mut y = Tensor::zeros(&[n, c, outs[0], outs[1], outs[2]]);
        let mut argmax = Vec::with_capacity(y.len());
        let plane = ins[0] * ins[1] * ins[2];
        for b in 0..n {
            let src = x.sample(b);
            let mut o = 0;
            let out = y.sample_mut(b);
            for ch in 0..c {
                for z in 0..outs[0] {
                    for yy in 0..outs[1] {
                        for xx in 0..outs[2] {
                            let mut best = T::neg_infinity();
                            let mut best_idx = usize::MAX;
                            for kz in 0..self.kernel {
                                let iz = (z * self.stride + kz) as isize - self.padding as isize;
                                if iz < 0 || iz >= ins[0] as isize {
                                    continue;
                                }
                                for ky in 0..self.kernel {
                                    let iy = (yy * self.stride + ky) as isize - self.padding as isize;
                                    if iy < 0 || iy >= ins[1] as isize {
                                        continue;
                                    }
                                    for kx in 0..self.kernel {
                                        let ix = (xx * self.stride + kx) as isize - self.padding as isize;
                                        if ix < 0 || ix >= ins[2] as isize {
                                            continue;
                                        }
                                        let idx = ch * plane + (iz as usize * ins[1] + iy as usize) * ins[2] + ix as usize;
                                        if src[idx] > best || best_idx == usize::MAX {
                                            best = src[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            out[o] = best;
                            argmax.push(best_idx);
                            o += 1;
                        }
                    }
                }
            }
        }
        (y, MaxPoolCache { input_shape: x.shape().to_vec(), argmax })
    }

    pub fn backward<T: Float>(&self, cache: &MaxPoolCache, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(&cache.input_shape);
        let per = dy.sample_len();
        for b in 0..dy.batch() {
            let g = dy.sample(b);
            let out = dx.sample_mut(b);
            for (i, &d) in g.iter().enumerate() {
                out[cache.argmax[b * per + i]] += d;
            }
        }
        dx
    }
}

/// Mean over all spatial positions: `[N, C, D, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.batch();
    let c = x.channels();
    let s = x.sample_len() / c;
    let inv = T::one() / T::from_f64c(s as f64);
    let mut y = Tensor::zeros(&[n, c]);
    for b in 0..n {
        for (ch, chunk) in x.sample(b).chunks(s).enumerate() {
            y.data_mut()[b * c + ch] = chunk.iter().copied().sum::<T>() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Float>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let c = input_shape[1];
    let s: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::from_f64c(s as f64);
    for b in 0..input_shape[0] {
        let out = dx.sample_mut(b);
        for ch in 0..c {
            let v = dy.data()[b * c + ch] * inv;
            out[ch * s..(ch + 1) * s].iter_mut().for_each(|x| *x = v);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let pool = MaxPool3d::new(2, 2, 0);
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2, 2], vec![1.0, 5.0, 2.0, 3.0, 0.0, -1.0, 4.0, 2.5]);
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.data(), &[5.0]);
        let dx = pool.backward(&cache, &Tensor::from_vec(&[1, 1, 1, 1, 1], vec![2.0]));
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_maxpool_output_shape() {
        let pool = MaxPool3d::new(3, 2, 1);
        assert_eq!(pool.output_spatial([32, 16, 16]), [16, 8, 8]);
    }

    #[test]
    fn avg_pool_and_backward() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 1, 2], vec![1.0, 3.0, -2.0, 4.0]);
        let y = global_avg_pool(&x);
        assert_eq!(y.data(), &[2.0, 1.0]);
        let dx = global_avg_pool_backward(x.shape(), &Tensor::from_vec(&[1, 2], vec![1.0, 4.0]));
        assert_eq!(dx.data(), &[0.5, 0.5, 2.0, 2.0]);
    }
}
