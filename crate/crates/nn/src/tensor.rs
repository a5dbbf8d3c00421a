use crate::Float;

/// Dense row-major tensor. Convolutional layers use `[N, C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size mismatch");
        self.shape = shape.to_vec();
        self
    }

    /// Batch size (leading dimension).
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-dimension entry.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Spatial dims `[D, H, W]` of a 5-D tensor.
    pub fn spatial(&self) -> [usize; 3] {
        assert_eq!(self.shape.len(), 5, "expected [N, C, D, H, W], got {:?}", self.shape);
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&inner);
        Self { shape, data }
    }

    /// Concatenate batched tensors along axis 0.
    pub fn cat_batch(items: &[&Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot concatenate zero tensors");
        let tail = items[0].shape[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            assert_eq!(&t.shape[1..], &tail[..], "cat_batch shape mismatch");
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&tail);
        Self { shape, data }
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let s = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self { shape, data: self.data[start * s..end * s].to_vec() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Elementwise conversion between float widths.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64c(x.to_f64c())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_slice_round_trip() {
        let a = Tensor::<f32>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f32>::full(&[2, 3], 7.0);
        let s = Tensor::stack(&[&a, &b]);
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.slice_batch(1, 2).reshape(&[2, 3]), b);
        let c = Tensor::cat_batch(&[&a, &b]);
        assert_eq!(c.shape(), &[4, 3]);
        assert_eq!(c.slice_batch(0, 2), a);
    }
}
