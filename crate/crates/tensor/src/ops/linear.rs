use crate::scalar::{gemm, MatRef};
use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// `x [m, k] · wᵀ + b` with `w [o, k]` and `b [o]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        assert_eq!(xs.len(), 2, "linear input must be 2-d, got {xs:?}");
        assert_eq!(ws.len(), 2, "linear weight must be 2-d, got {ws:?}");
        assert_eq!(xs[1], ws[1], "linear: input features {} vs weight {}", xs[1], ws[1]);
        let (m, k, o) = (xs[0], xs[1], ws[0]);
        let bv = b.map(|b| self.value(b));
        if let Some(bv) = &bv {
            assert_eq!(bv.shape(), [o], "linear bias shape");
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        if self.any_meta(&parents) {
            return self.emit(Tensor::meta(&[m, o]), &parents, |_| |_: &Tensor<T>| Vec::new());
        }
        let mut out = vec![T::zero(); m * o];
        if let Some(bv) = &bv {
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if bv.is_some() { T::one() } else { T::zero() };
        gemm(MatRef::new(xv.data(), m, k), MatRef::transposed(wv.data(), k, o), beta, &mut out, o);
        let has_bias = b.is_some();
        self.emit(Tensor::new(&[m, o], out), &parents, move |_| {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let mut dx = vec![T::zero(); m * k];
                gemm(MatRef::new(gd, m, o), MatRef::new(wv.data(), o, k), T::zero(), &mut dx, k);
                let mut dw = vec![T::zero(); o * k];
                gemm(MatRef::transposed(gd, o, m), MatRef::new(xv.data(), m, k), T::zero(), &mut dw, k);
                let mut grads = vec![Some(Tensor::new(&[m, k], dx)), Some(Tensor::new(&[o, k], dw))];
                if has_bias {
                    let mut db = vec![T::zero(); o];
                    for row in gd.chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    grads.push(Some(Tensor::new(&[o], db)));
                }
                grads
            }
        })
    }
}
