use rand::Rng;

use crate::{gemm, init, join, Float, Module, Param, Tensor};

/// 3D convolution over `[N, C, D, H, W]` tensors, via im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

/// Saved input for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input: Tensor<T>,
}

impl<T: Float> Conv3d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let k: usize = kernel.iter().product();
        let fan_in = in_channels * k;
        let weight = init::kaiming_normal(&[out_channels, in_channels, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        let bias = bias.then(|| Param::new(Tensor::zeros(&[out_channels])));
        Self { weight: Param::new(weight), bias, in_channels, out_channels, kernel, stride, padding }
    }

    /// Cubic kernel with uniform stride and padding.
    pub fn cubic<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, rng: &mut R) -> Self {
        Self::new(cin, cout, [k; 3], [stride; 3], [pad; 3], bias, rng)
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            assert!(padded >= self.kernel[a], "conv kernel larger than padded input on axis {a}");
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let y = self.apply(x);
        (y, ConvCache { input: x.clone() })
    }

    /// Forward pass without keeping a cache.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channel mismatch");
        let n = x.batch();
        let ins = x.spatial();
        let outs = self.output_spatial(ins);
        let p: usize = outs.iter().product();
        let rows = self.col_rows();
        let mut y = Tensor::zeros(&[n, self.out_channels, outs[0], outs[1], outs[2]]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
        for b in 0..n {
            let src: &[T] = if self.is_pointwise() {
                x.sample(b)
            } else {
                im2col(x.sample(b), self.in_channels, ins, outs, self.kernel, self.stride, self.padding, &mut col);
                &col
            };
            let out = y.sample_mut(b);
            if let Some(bias) = &self.bias {
                for (c, chunk) in out.chunks_mut(p).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias.value.data()[c]);
                }
            }
            let beta = if self.bias.is_some() { T::one() } else { T::zero() };
            gemm(false, false, self.out_channels, p, rows, T::one(), self.weight.value.data(), src, beta, out);
        }
        y
    }

    /// Accumulates weight gradients (unless `param_grads` is false) and
    /// returns the input gradient when `need_input_grad` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        param_grads: bool,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let x = &cache.input;
        let n = x.batch();
        let ins = x.spatial();
        let outs = self.output_spatial(ins);
        let p: usize = outs.iter().product();
        let rows = self.col_rows();
        assert_eq!(dy.shape(), &[n, self.out_channels, outs[0], outs[1], outs[2]], "conv grad shape mismatch");
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); rows * p] };
        let mut dcol = if pointwise { Vec::new() } else { vec![T::zero(); rows * p] };
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for b in 0..n {
            let g = dy.sample(b);
            if param_grads {
                let src: &[T] = if pointwise {
                    x.sample(b)
                } else {
                    im2col(x.sample(b), self.in_channels, ins, outs, self.kernel, self.stride, self.padding, &mut col);
                    &col
                };
                gemm(false, true, self.out_channels, rows, p, T::one(), g, src, T::one(), self.weight.grad.data_mut());
                if let Some(bias) = &mut self.bias {
                    for (c, chunk) in g.chunks(p).enumerate() {
                        bias.grad.data_mut()[c] += chunk.iter().copied().sum();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    gemm(true, false, rows, p, self.out_channels, T::one(), self.weight.value.data(), g, T::zero(), dx.sample_mut(b));
                } else {
                    gemm(true, false, rows, p, self.out_channels, T::one(), self.weight.value.data(), g, T::zero(), &mut dcol);
                    col2im(&dcol, self.in_channels, ins, outs, self.kernel, self.stride, self.padding, dx.sample_mut(b));
                }
            }
        }
        dx
    }
}

impl<T: Float> Module<T> for Conv3d<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.value.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.value.clone()));
        }
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight.value));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), &mut b.value));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    channels: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    col: &mut [T],
) {
    let [id, ih, iw] = ins;
    let [od, oh, ow] = outs;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kernel[0] {
            for ky in 0..kernel[1] {
                for kx in 0..kernel[2] {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let iz = (z * stride[0] + kz) as isize - pad[0] as isize;
                        for y in 0..oh {
                            let iy = (y * stride[1] + ky) as isize - pad[1] as isize;
                            let run = &mut dst[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                run.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            let line = &xc[base..base + iw];
                            for (xo, v) in run.iter_mut().enumerate() {
                                let ix = (xo * stride[2] + kx) as isize - pad[2] as isize;
                                *v = if ix >= 0 && (ix as usize) < iw { line[ix as usize] } else { T::zero() };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    col: &[T],
    channels: usize,
    ins: [usize; 3],
    outs: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dx: &mut [T],
) {
    let [id, ih, iw] = ins;
    let [od, oh, ow] = outs;
    let p = od * oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kernel[0] {
            for ky in 0..kernel[1] {
                for kx in 0..kernel[2] {
                    let src = &col[row * p..(row + 1) * p];
                    let mut o = 0;
                    for z in 0..od {
                        let iz = (z * stride[0] + kz) as isize - pad[0] as isize;
                        for y in 0..oh {
                            let iy = (y * stride[1] + ky) as isize - pad[1] as isize;
                            let run = &src[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for (xo, &v) in run.iter().enumerate() {
                                let ix = (xo * stride[2] + kx) as isize - pad[2] as isize;
                                if ix >= 0 && (ix as usize) < iw {
                                    xc[base + ix as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
