use crate::{Graph, Scalar, Tensor, Var};

/// Linear interpolation taps for resizing `input` samples to `output`
/// samples with half-pixel centers (no corner alignment): for each output
/// index, the two source indices and their weights.
pub fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    assert!(input > 0 && output > 0, "resize of empty axis");
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

fn resize_axis_forward<T: Scalar>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    taps: &[(usize, usize, f64, f64)],
) -> Vec<T> {
    let out_len = taps.len();
    let mut y = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        for (t, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            let src0 = &x[(o * len + i0) * inner..(o * len + i0 + 1) * inner];
            let src1 = &x[(o * len + i1) * inner..(o * len + i1 + 1) * inner];
            let dst = &mut y[(o * out_len + t) * inner..(o * out_len + t + 1) * inner];
            for ((d, &a), &b) in dst.iter_mut().zip(src0).zip(src1) {
                *d = a * w0 + b * w1;
            }
        }
    }
    y
}

fn resize_axis_backward<T: Scalar>(
    g: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    taps: &[(usize, usize, f64, f64)],
) -> Vec<T> {
    let out_len = taps.len();
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for (t, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            let src = &g[(o * out_len + t) * inner..(o * out_len + t + 1) * inner];
            for (j, &gv) in src.iter().enumerate() {
                dx[(o * len + i0) * inner + j] += gv * w0;
                dx[(o * len + i1) * inner + j] += gv * w1;
            }
        }
    }
    dx
}

impl<T: Scalar> Graph<T> {
    /// Linearly resample `axis` of `x` to `size` samples.
    pub fn resize_axis(&self, x: Var, axis: usize, size: usize) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape[axis] == size {
            return x;
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = size;
        if xv.is_meta() {
            return self.emit(Tensor::meta(&out_shape), &[x], |_| |_: &Tensor<T>| Vec::new());
        }
        let taps = linear_taps(len, size);
        let y = resize_axis_forward(xv.data(), outer, len, inner, &taps);
        self.emit(Tensor::new(&out_shape, y), &[x], move |_| {
            move |g: &Tensor<T>| vec![Some(Tensor::new(&shape, resize_axis_backward(g.data(), outer, len, inner, &taps)))]
        })
    }

    /// Trilinear resize of the three trailing axes of `x [n, c, d, h, w]`.
    pub fn resize_trilinear(&self, x: Var, size: [usize; 3]) -> Var {
        assert_eq!(self.shape(x).len(), 5, "trilinear resize expects a 5-d tensor");
        let y = self.resize_axis(x, 2, size[0]);
        let y = self.resize_axis(y, 3, size[1]);
        self.resize_axis(y, 4, size[2])
    }

    /// Trilinear 2x upsampling.
    pub fn upsample2x(&self, x: Var) -> Var {
        let s = self.shape(x);
        self.resize_trilinear(x, [2 * s[2], 2 * s[3], 2 * s[4]])
    }
}
