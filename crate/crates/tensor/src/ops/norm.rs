use crate::{Graph, Scalar, Tensor, Var};

/// Per-channel statistics of a batch-norm forward in training mode.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Vec<T>,
}

/// Normalize each group of `count` values located by `index(group, j)`.
/// Returns (x_hat, rstd per group, biased variance per group).
fn normalize_groups<T: Scalar>(
    x: &[T],
    groups: usize,
    count: usize,
    eps: f64,
    index: impl Fn(usize, usize) -> usize,
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(groups);
    let mut vars = Vec::with_capacity(groups);
    for gi in 0..groups {
        let mut sum = 0.0;
        for j in 0..count {
            sum += x[index(gi, j)].f64();
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for j in 0..count {
            let d = x[index(gi, j)].f64() - mean;
            ss += d * d;
        }
        let var = ss / count as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..count {
            let i = index(gi, j);
            xhat[i] = T::of((x[i].f64() - mean) * rstd);
        }
        rstds.push(rstd);
        vars.push(var);
    }
    (xhat, rstds, vars)
}

/// Adjoint of the normalization step for one group.
fn normalize_backward<T: Scalar>(
    dxhat: &[T],
    xhat: &[T],
    rstds: &[f64],
    count: usize,
    index: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    let m = count as f64;
    for (gi, &rstd) in rstds.iter().enumerate() {
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..count {
            let i = index(gi, j);
            s1 += dxhat[i].f64();
            s2 += dxhat[i].f64() * xhat[i].f64();
        }
        for j in 0..count {
            let i = index(gi, j);
            dx[i] = T::of(rstd / m * (m * dxhat[i].f64() - s1 - xhat[i].f64() * s2));
        }
    }
    dx
}

/// Per-channel affine `y = x_hat * gamma[c] + beta[c]` and its gradients.
struct Affine {
    n: usize,
    c: usize,
    spatial: usize,
}

impl Affine {
    fn channel(&self, i: usize) -> usize {
        (i / self.spatial) % self.c
    }

    fn apply<T: Scalar>(&self, xhat: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
        xhat.iter().enumerate().map(|(i, &v)| v * gamma[self.channel(i)] + beta[self.channel(i)]).collect()
    }

    /// Returns (d x_hat, d gamma, d beta).
    fn backward<T: Scalar>(&self, g: &[T], xhat: &[T], gamma: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut dgamma = vec![T::zero(); self.c];
        let mut dbeta = vec![T::zero(); self.c];
        let mut dxhat = vec![T::zero(); g.len()];
        for i in 0..g.len() {
            let ch = self.channel(i);
            dgamma[ch] += g[i] * xhat[i];
            dbeta[ch] += g[i];
            dxhat[i] = g[i] * gamma[ch];
        }
        debug_assert_eq!(g.len(), self.n * self.c * self.spatial);
        (dxhat, dgamma, dbeta)
    }
}

fn split_shape(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "normalization input must be [n, c, ...], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Graph<T> {
    /// Group normalization over `x [n, c, ...]` with `groups` channel groups
    /// and per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c, spatial) = split_shape(&shape);
        assert!(groups > 0 && c % groups == 0, "group_norm: {groups} groups do not divide {c} channels");
        let parents = [x, gamma, beta];
        if self.any_meta(&parents) {
            return self.emit(Tensor::meta(&shape), &parents, |_| |_: &Tensor<T>| Vec::new());
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        assert_eq!(gv.shape(), [c], "group_norm gamma shape");
        let cpg = c / groups;
        let count = cpg * spatial;
        // Groups are contiguous in memory: group gi of sample s starts at gi * count.
        let index = move |gi: usize, j: usize| gi * count + j;
        let (xhat, rstds, _) = normalize_groups(xv.data(), n * groups, count, eps, index);
        let affine = Affine { n, c, spatial };
        let y = affine.apply(&xhat, gv.data(), bv.data());
        self.emit(Tensor::new(&shape, y), &parents, move |_| {
            move |g: &Tensor<T>| {
                let (dxhat, dgamma, dbeta) = affine.backward(g.data(), &xhat, gv.data());
                let dx = normalize_backward(&dxhat, &xhat, &rstds, count, index);
                vec![Some(Tensor::new(&shape, dx)), Some(Tensor::new(&[c], dgamma)), Some(Tensor::new(&[c], dbeta))]
            }
        })
    }

    /// Batch normalization with batch statistics (training mode). Returns the
    /// output and the observed statistics for running-average updates.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Option<BatchNormState<T>>) {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c, spatial) = split_shape(&shape);
        let parents = [x, gamma, beta];
        if self.any_meta(&parents) {
            return (self.emit(Tensor::meta(&shape), &parents, |_| |_: &Tensor<T>| Vec::new()), None);
        }
        let count = n * spatial;
        assert!(count > 1, "batch_norm_train needs more than one value per channel");
        let index = move |ch: usize, j: usize| ((j / spatial) * c + ch) * spatial + j % spatial;
        let (xhat, rstds, vars) = normalize_groups(xv.data(), c, count, eps, index);
        let mut mean = Vec::with_capacity(c);
        for ch in 0..c {
            let s: f64 = (0..count).map(|j| xv.data()[index(ch, j)].f64()).sum();
            mean.push(T::of(s / count as f64));
        }
        let unbiased = count as f64 / (count - 1) as f64;
        let state = BatchNormState { mean, var_unbiased: vars.iter().map(|&v| T::of(v * unbiased)).collect() };
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let affine = Affine { n, c, spatial };
        let y = affine.apply(&xhat, gv.data(), bv.data());
        let out = self.emit(Tensor::new(&shape, y), &parents, move |_| {
            move |g: &Tensor<T>| {
                let (dxhat, dgamma, dbeta) = affine.backward(g.data(), &xhat, gv.data());
                let dx = normalize_backward(&dxhat, &xhat, &rstds, count, index);
                vec![Some(Tensor::new(&shape, dx)), Some(Tensor::new(&[c], dgamma)), Some(Tensor::new(&[c], dbeta))]
            }
        });
        (out, Some(state))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &Tensor<T>, var: &Tensor<T>, eps: f64) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (n, c, spatial) = split_shape(&shape);
        let parents = [x, gamma, beta];
        if self.any_meta(&parents) || mean.is_meta() {
            return self.emit(Tensor::meta(&shape), &parents, |_| |_: &Tensor<T>| Vec::new());
        }
        let rstd: Vec<T> = var.data().iter().map(|&v| T::of(1.0 / (v.f64() + eps).sqrt())).collect();
        let mean = mean.data().to_vec();
        let xhat: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / spatial) % c;
                (v - mean[ch]) * rstd[ch]
            })
            .collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let affine = Affine { n, c, spatial };
        let y = affine.apply(&xhat, gv.data(), bv.data());
        self.emit(Tensor::new(&shape, y), &parents, move |_| {
            move |g: &Tensor<T>| {
                let (dxhat, dgamma, dbeta) = affine.backward(g.data(), &xhat, gv.data());
                let dx: Vec<T> =
                    dxhat.iter().enumerate().map(|(i, &d)| d * rstd[(i / spatial) % c]).collect();
                vec![Some(Tensor::new(&shape, dx)), Some(Tensor::new(&[c], dgamma)), Some(Tensor::new(&[c], dbeta))]
            }
        })
    }
}
