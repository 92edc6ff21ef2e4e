use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// Normalized weighted fusion of equally shaped inputs:
    /// `Σ relu(w_i) x_i / (Σ relu(w_j) + eps)` with `weights [k]`.
    pub fn weighted_fuse(&self, inputs: &[Var], weights: Var, eps: f64) -> Var {
        let k = inputs.len();
        assert!(k > 0, "fusion of nothing");
        let wv = self.value(weights);
        assert_eq!(wv.shape(), [k], "fusion weights must have one entry per input");
        let shape = self.shape(inputs[0]);
        let mut parents = inputs.to_vec();
        parents.push(weights);
        if self.any_meta(&parents) {
            return self.emit(Tensor::meta(&shape), &parents, |_| |_: &Tensor<T>| Vec::new());
        }
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        for v in &values {
            assert_eq!(v.shape(), shape.as_slice(), "fusion inputs must share a shape");
        }
        let raw: Vec<f64> = wv.data().iter().map(|w| w.f64()).collect();
        let w: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
        let denom = w.iter().sum::<f64>() + eps;
        let coef: Vec<T> = w.iter().map(|&v| T::of(v / denom)).collect();
        let mut out = vec![T::zero(); values[0].numel()];
        for (v, &c) in values.iter().zip(&coef) {
            for (o, &x) in out.iter_mut().zip(v.data()) {
                *o += c * x;
            }
        }
        self.emit(Tensor::new(&shape, out), &parents, move |y| {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let gy: f64 = gd.iter().zip(y.data()).map(|(a, b)| a.f64() * b.f64()).sum();
                let mut grads: Vec<Option<Tensor<T>>> =
                    coef.iter().map(|&c| Some(g.map(|d| d * c))).collect();
                let dw: Vec<T> = values
                    .iter()
                    .zip(&raw)
                    .map(|(v, &r)| {
                        if r <= 0.0 {
                            return T::zero();
                        }
                        let gx: f64 = gd.iter().zip(v.data()).map(|(a, b)| a.f64() * b.f64()).sum();
                        T::of((gx - gy) / denom)
                    })
                    .collect();
                grads.push(Some(Tensor::new(&[k], dw)));
                grads
            }
        })
    }
}
