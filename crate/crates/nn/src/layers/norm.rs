use crate::{join, Float, Mode, Module, Param, Tensor};

/// Batch normalization over `[N, C, ...]`; statistics are per channel,
/// pooled over the batch and all trailing axes.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training mode updates the running statistics, hence `&mut self`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BatchNormCache<T>) {
        let c = self.channels();
        assert_eq!(x.shape()[1], c, "batch norm channel mismatch");
        let n = x.batch();
        let s = x.sample_len() / c;
        let m = n * s;
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for (ch, chunk) in x.sample(b).chunks(s).enumerate() {
                        mean[ch] += chunk.iter().map(|v| v.to_f64c()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for b in 0..n {
                    for (ch, chunk) in x.sample(b).chunks(s).enumerate() {
                        var[ch] += chunk.iter().map(|v| (v.to_f64c() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let unbiased = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::from_f64c((1.0 - self.momentum) * rm.to_f64c() + self.momentum * mean[ch]);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = T::from_f64c((1.0 - self.momentum) * rv.to_f64c() + self.momentum * var[ch] * unbiased);
                }
                let inv = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Eval => (
                self.running_mean.data().iter().map(|v| v.to_f64c()).collect(),
                self.running_var.data().iter().map(|v| 1.0 / (v.to_f64c() + self.eps).sqrt()).collect(),
            ),
        };
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            let src = x.sample(b);
            let xh = xhat.sample_mut(b);
            for ch in 0..c {
                let (mu, is) = (T::from_f64c(mean[ch]), T::from_f64c(inv_std[ch]));
                for i in ch * s..(ch + 1) * s {
                    xh[i] = (src[i] - mu) * is;
                }
            }
            let out = y.sample_mut(b);
            for ch in 0..c {
                let (g, be) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                for i in ch * s..(ch + 1) * s {
                    out[i] = xh[i] * g + be;
                }
            }
        }
        let inv_std = inv_std.into_iter().map(T::from_f64c).collect();
        (y, BatchNormCache { xhat, inv_std, mode })
    }

    /// Evaluation-mode forward with running statistics; no cache, no mutation.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        assert_eq!(x.shape()[1], c, "batch norm channel mismatch");
        let s = x.sample_len() / c;
        let mut y = x.clone();
        for b in 0..x.batch() {
            let out = y.sample_mut(b);
            for ch in 0..c {
                let (mu, be) = (T::from_f64c(self.running_mean.data()[ch].to_f64c()), self.beta.value.data()[ch]);
                let inv = T::from_f64c(1.0 / (self.running_var.data()[ch].to_f64c() + self.eps).sqrt());
                let g = self.gamma.value.data()[ch];
                for v in &mut out[ch * s..(ch + 1) * s] {
                    *v = (*v - mu) * inv * g + be;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let c = self.channels();
        let n = dy.batch();
        let s = dy.sample_len() / c;
        let m = (n * s) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for b in 0..n {
            let g = dy.sample(b);
            let xh = cache.xhat.sample(b);
            for ch in 0..c {
                for i in ch * s..(ch + 1) * s {
                    sum_dy[ch] += g[i].to_f64c();
                    sum_dy_xhat[ch] += (g[i] * xh[i]).to_f64c();
                }
            }
        }
        if param_grads {
            for ch in 0..c {
                self.gamma.grad.data_mut()[ch] += T::from_f64c(sum_dy_xhat[ch]);
                self.beta.grad.data_mut()[ch] += T::from_f64c(sum_dy[ch]);
            }
        }
        let mut dx = Tensor::zeros(dy.shape());
        for b in 0..n {
            let g = dy.sample(b);
            let xh = cache.xhat.sample(b);
            let out = dx.sample_mut(b);
            for ch in 0..c {
                let gamma = self.gamma.value.data()[ch];
                let is = cache.inv_std[ch];
                match cache.mode {
                    Mode::Train => {
                        let mean_dy = T::from_f64c(sum_dy[ch] / m);
                        let mean_dy_xhat = T::from_f64c(sum_dy_xhat[ch] / m);
                        for i in ch * s..(ch + 1) * s {
                            out[i] = gamma * is * (g[i] - mean_dy - xh[i] * mean_dy_xhat);
                        }
                    }
                    Mode::Eval => {
                        for i in ch * s..(ch + 1) * s {
                            out[i] = gamma * is * g[i];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Float> Module<T> for BatchNorm<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "gamma"), self.gamma.value.clone()));
        out.push((join(prefix, "beta"), self.beta.value.clone()));
        out.push((join(prefix, "running_mean"), self.running_mean.clone()));
        out.push((join(prefix, "running_var"), self.running_var.clone()));
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma.value));
        out.push((join(prefix, "beta"), &mut self.beta.value));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
