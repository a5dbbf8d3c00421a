use rand::Rng;

use crate::{gemm, init, join, Float, Module, Param, Tensor};

/// Fully connected layer on `[N, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LinearCache<T> {
    input: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(init::fan_in_uniform(&[outputs, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LinearCache<T>) {
        (self.apply(x), LinearCache { input: x.clone() })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.inputs(), "linear input width mismatch");
        let (i, o) = (self.inputs(), self.outputs());
        let mut y = Tensor::zeros(&[n, o]);
        for row in y.data_mut().chunks_mut(o) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(false, true, n, o, i, T::one(), x.data(), self.weight.value.data(), T::one(), y.data_mut());
        y
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let x = &cache.input;
        let n = x.batch();
        let (i, o) = (self.inputs(), self.outputs());
        if param_grads {
            gemm(true, false, o, i, n, T::one(), dy.data(), x.data(), T::one(), self.weight.grad.data_mut());
            for row in dy.data().chunks(o) {
                for (g, &d) in self.bias.grad.data_mut().iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, i]);
        gemm(false, false, n, i, o, T::one(), dy.data(), self.weight.value.data(), T::zero(), dx.data_mut());
        dx.reshape(x.shape())
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((join(prefix, "weight"), self.weight.value.clone()));
        out.push((join(prefix, "bias"), self.bias.value.clone()));
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight.value));
        out.push((join(prefix, "bias"), &mut self.bias.value));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        lin.weight.value = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        lin.bias.value = Tensor::from_vec(&[2], vec![0.1, -0.2]);
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -1.0, 2.0]);
        let (y, cache) = lin.forward(&x);
        assert_eq!(y.data(), &[1.0 - 2.0 + 6.0 + 0.1, -1.0 - 0.5 - 0.2]);
        let dy = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let dx = lin.backward(&cache, &dy, true);
        assert_eq!(dx.data(), &[1.0 - 2.0, 2.0 + 1.0, 3.0]);
        assert_eq!(lin.weight.grad.data(), &[1.0, -1.0, 2.0, 2.0, -2.0, 4.0]);
        assert_eq!(lin.bias.grad.data(), &[1.0, 2.0]);
    }
}
