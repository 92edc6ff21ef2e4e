use crate::Scalar;

/// Dense row-major n-dimensional array.
///
/// A tensor may also be a *meta* tensor: it carries a shape but no storage.
/// Every operation accepts meta inputs and produces a meta output of the
/// correct shape without touching data, which lets full-size architectures be
/// shape-checked on machines that could never evaluate them.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    meta: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape: shape.to_vec(), data, meta: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)], meta: false }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value], meta: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Self { shape: shape.to_vec(), data, meta: false }
    }

    pub fn meta(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: Vec::new(), meta: true }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> &[T] {
        assert!(!self.meta, "meta tensor has no data");
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        assert!(!self.meta, "meta tensor has no data");
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        assert!(!self.meta, "meta tensor has no data");
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data()[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.numel(), "cannot reshape {:?} to {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        if self.meta {
            return self.clone();
        }
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), meta: false }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        if self.meta || other.meta {
            return Self::meta(&self.shape);
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data, meta: false }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulation");
        if self.meta || other.meta {
            return;
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> T {
        self.data().iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        if self.meta {
            return Tensor::meta(&self.shape);
        }
        Tensor::new(&self.shape, self.data.iter().map(|&v| U::of(v.f64())).collect())
    }

    /// Mirror along every axis in `axes`.
    pub fn flip(&self, axes: &[usize]) -> Self {
        if self.meta || axes.is_empty() {
            return self.clone();
        }
        let nd = self.ndim();
        let strides = contiguous_strides(&self.shape);
        let mut flip = vec![false; nd];
        for &a in axes {
            assert!(a < nd, "flip axis {a} out of range for {nd}-d tensor");
            flip[a] = !flip[a];
        }
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        for _ in 0..self.data.len() {
            let mut src = 0;
            for d in 0..nd {
                let i = if flip[d] { self.shape[d] - 1 - idx[d] } else { idx[d] };
                src += i * strides[d];
            }
            out.push(self.data[src]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { shape: self.shape.clone(), data: out, meta: false }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Self]) -> Self {
        assert!(!items.is_empty(), "stack of zero tensors");
        let shape = items[0].shape.clone();
        let mut out_shape = vec![items.len()];
        out_shape.extend_from_slice(&shape);
        if items.iter().any(|t| t.meta) {
            return Self::meta(&out_shape);
        }
        let mut data = Vec::with_capacity(numel(&out_shape));
        for t in items {
            assert_eq!(t.shape, shape, "stack of mismatched shapes");
            data.extend_from_slice(&t.data);
        }
        Self::new(&out_shape, data)
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn index_first(&self, index: usize) -> Self {
        assert!(self.ndim() >= 1 && index < self.shape[0], "index out of range");
        let inner = &self.shape[1..];
        if self.meta {
            return Self::meta(inner);
        }
        let n = numel(inner);
        Self::new(inner, self.data[index * n..(index + 1) * n].to_vec())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let f = t.flip(&[0, 2]);
        assert_ne!(f, t);
        assert_eq!(f.data()[0], t.data()[(1 * 3 + 0) * 4 + 3]);
        assert_eq!(f.flip(&[0, 2]), t);
    }

    #[test]
    fn meta_tensors_carry_shape_only() {
        let m = Tensor::<f32>::meta(&[4, 128, 128, 96]);
        assert!(m.is_meta());
        assert_eq!(m.numel(), 4 * 128 * 128 * 96);
        assert!(m.flip(&[1]).is_meta());
    }
}
