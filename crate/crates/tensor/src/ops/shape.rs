use crate::tensor::{contiguous_strides, numel};
use crate::{Graph, Scalar, Tensor, Var};

/// Split `shape` around `axis` into (outer, len, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if t.is_meta() {
        return Tensor::meta(&out_shape);
    }
    let in_strides = contiguous_strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let nd = perm.len();
    let data = t.data();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let av = self.value(a);
        let in_shape = av.shape().to_vec();
        if in_shape == shape {
            return a;
        }
        let out = if av.is_meta() {
            assert_eq!(numel(shape), av.numel(), "cannot reshape {in_shape:?} to {shape:?}");
            Tensor::meta(shape)
        } else {
            (*av).clone().reshape(shape)
        };
        self.emit(out, &[a], move |_| move |g: &Tensor<T>| vec![Some(g.clone().reshape(&in_shape))])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(perm.len(), av.ndim(), "permutation rank mismatch");
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out = permute_tensor(&av, perm);
        self.emit(out, &[a], move |_| move |g: &Tensor<T>| vec![Some(permute_tensor(g, &inverse))])
    }

    pub fn concat(&self, vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty(), "concat of nothing");
        if vars.len() == 1 {
            return vars[0];
        }
        let values: Vec<_> = vars.iter().map(|&v| self.value(v)).collect();
        let first = values[0].shape().to_vec();
        let mut lens = Vec::with_capacity(values.len());
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for d in 0..s.len() {
                assert!(d == axis || s[d] == first[d], "concat shape mismatch {:?} vs {:?}", s, first);
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = around(&first, axis);
        let out = if self.any_meta(vars) {
            Tensor::meta(&out_shape)
        } else {
            let mut data = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for (v, &len) in values.iter().zip(&lens) {
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Tensor::new(&out_shape, data)
        };
        drop(values);
        self.emit(out, vars, move |_| {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (buf, &len) in grads.iter_mut().zip(&lens) {
                        buf.extend_from_slice(&gd[off..off + len * inner]);
                        off += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&lens)
                    .map(|(buf, &len)| {
                        let mut s = first.clone();
                        s[axis] = len;
                        Some(Tensor::new(&s, buf))
                    })
                    .collect()
            }
        })
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        assert!(start <= end && end <= shape[axis], "slice {start}..{end} out of range for axis of {}", shape[axis]);
        if start == 0 && end == shape[axis] {
            return a;
        }
        let (outer, len, inner) = around(&shape, axis);
        let width = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let out = if av.is_meta() {
            Tensor::meta(&out_shape)
        } else {
            let d = av.data();
            let mut data = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&d[base..base + width * inner]);
            }
            Tensor::new(&out_shape, data)
        };
        self.emit(out, &[a], move |_| {
            move |g: &Tensor<T>| {
                let mut full = vec![T::zero(); outer * len * inner];
                let gd = g.data();
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    full[base..base + width * inner].copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(Tensor::new(&shape, full))]
            }
        })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let (outer, len, inner) = around(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let inv = T::one() / T::of(len as f64);
        let out = if av.is_meta() {
            Tensor::meta(&out_shape)
        } else {
            let d = av.data();
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let acc = &mut data[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (s, &v) in acc.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                for s in acc.iter_mut() {
                    *s *= inv;
                }
            }
            Tensor::new(&out_shape, data)
        };
        self.emit(out, &[a], move |_| {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let mut full = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut full[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (x, &v) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *x = v * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(&shape, full))]
            }
        })
    }

    pub fn flip(&self, a: Var, axes: &[usize]) -> Var {
        let out = self.value(a).flip(axes);
        let axes = axes.to_vec();
        self.emit(out, &[a], move |_| move |g: &Tensor<T>| vec![Some(g.flip(&axes))])
    }
}
