use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    /// 2x2x2 max pooling with stride 2 over `x [n, c, d, h, w]`; odd trailing
    /// planes are dropped.
    pub fn max_pool3d_2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        assert_eq!(shape.len(), 5, "max_pool3d_2x input must be 5-d, got {shape:?}");
        let [n, c, d, h, w] = [shape[0], shape[1], shape[2], shape[3], shape[4]];
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let out_shape = [n, c, od, oh, ow];
        if xv.is_meta() {
            return self.emit(Tensor::meta(&out_shape), &[x], |_| |_: &Tensor<T>| Vec::new());
        }
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for i in 0..od {
                for j in 0..oh {
                    for k in 0..ow {
                        let mut best = base + ((2 * i) * h + 2 * j) * w + 2 * k;
                        for (a, b, e) in (0..8).map(|t| (t >> 2, (t >> 1) & 1, t & 1)) {
                            let idx = base + ((2 * i + a) * h + 2 * j + b) * w + 2 * k + e;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let numel = xd.len();
        self.emit(Tensor::new(&out_shape, out), &[x], move |_| {
            move |g: &Tensor<T>| {
                let mut dx = vec![T::zero(); numel];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                vec![Some(Tensor::new(&shape, dx))]
            }
        })
    }
}
