use rand::Rng;

use crate::{Graph, Scalar, Tensor, Var};

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.emit(out, &[a, b], |_| |g: &Tensor<T>| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.emit(out, &[a, b], |_| |g: &Tensor<T>| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x * y);
        self.emit(out, &[a, b], move |_| {
            move |g: &Tensor<T>| vec![Some(g.zip_map(&bv, |d, y| d * y)), Some(g.zip_map(&av, |d, x| d * x))]
        })
    }

    pub fn scale(&self, a: Var, factor: T) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.emit(out, &[a], move |_| move |g: &Tensor<T>| vec![Some(g.map(|d| d * factor))])
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.emit(out, &[a], |_| |g: &Tensor<T>| vec![Some(g.clone())])
    }

    /// Sum of equally shaped variables.
    pub fn add_all(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_all of nothing");
        vars[1..].iter().fold(vars[0], |acc, &v| self.add(acc, v))
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|x| if x > T::zero() { x } else { T::zero() });
        self.emit(out, &[a], move |_| {
            move |g: &Tensor<T>| vec![Some(g.zip_map(&av, |d, x| if x > T::zero() { d } else { T::zero() }))]
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.emit(out, &[a], |y| move |g: &Tensor<T>| vec![Some(g.zip_map(&y, |d, s| d * s * (T::one() - s)))])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.emit(out, &[a], |y| move |g: &Tensor<T>| vec![Some(g.zip_map(&y, |d, t| d * (T::one() - t * t)))])
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = if av.is_meta() { Tensor::meta(&[]) } else { Tensor::scalar(av.sum()) };
        self.emit(out, &[a], move |_| move |g: &Tensor<T>| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Inverted dropout: zero each element with probability `p` and rescale
    /// survivors by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout(&self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        if p == 0.0 || self.is_meta(a) {
            return a;
        }
        let av = self.value(a);
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(av.shape(), |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        let out = av.zip_map(&mask, |x, m| x * m);
        self.emit(out, &[a], move |_| move |g: &Tensor<T>| vec![Some(g.zip_map(&mask, |d, m| d * m))])
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
