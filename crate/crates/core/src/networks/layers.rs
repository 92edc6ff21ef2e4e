//! Parameterized building blocks shared by both architectures.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segcls_tensor::{Conv3dSpec, ConvTranspose1dSpec, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut inner = Builder { store: &mut *self.store, rng: &mut *self.rng, prefix };
        f(&mut inner)
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn param(&mut self, leaf: &str, shape: &[usize], init: Init) -> ParamId {
        let name = self.name(leaf);
        self.store.add(&name, shape, init, self.rng)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.name(leaf);
        self.store.add_buffer(&name, value)
    }

    pub fn conv3d(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv3d {
        self.scope(name, |b| Conv3d {
            weight: b.param("weight", &[cout, cin, kernel, kernel, kernel], Init::KaimingNormal { fan_in: cin * kernel.pow(3) }),
            bias: b.param("bias", &[cout], Init::Zeros),
            spec: Conv3dSpec::new(stride, kernel / 2),
        })
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> GroupNorm {
        self.scope(name, |b| GroupNorm {
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
            groups,
        })
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        self.scope(name, |b| BatchNorm {
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::ones(&[channels])),
        })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        let bound = 1.0 / (fin as f64).sqrt();
        self.scope(name, |b| Linear {
            weight: b.param("weight", &[fout, fin], Init::Uniform { bound }),
            bias: b.param("bias", &[fout], Init::Uniform { bound }),
        })
    }

    pub fn conv_transpose1d(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, spec: ConvTranspose1dSpec) -> ConvTranspose1d {
        self.scope(name, |b| ConvTranspose1d {
            weight: b.param("weight", &[cin, cout, kernel], Init::KaimingNormal { fan_in: cin * kernel }),
            bias: b.param("bias", &[cout], Init::Zeros),
            spec,
        })
    }

    pub fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> LstmCell {
        let bound = 1.0 / (hidden as f64).sqrt();
        let init = Init::Uniform { bound };
        self.scope(name, |b| LstmCell {
            w_ih: b.param("weight_ih", &[4 * hidden, input], init),
            b_ih: b.param("bias_ih", &[4 * hidden], init),
            w_hh: b.param("weight_hh", &[4 * hidden, hidden], init),
            b_hh: b.param("bias_hh", &[4 * hidden], init),
            hidden,
        })
    }
}

/// State of one forward pass.
pub struct ForwardCtx<'a, T: Scalar> {
    pub graph: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
    rng: RefCell<ChaCha8Rng>,
    trace: Option<RefCell<Vec<(String, Vec<usize>)>>>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, train: bool, seed: u64) -> Self {
        Self { graph, store, train, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)), trace: None }
    }

    /// Record the shape of every named checkpoint of the forward pass.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn dropout(&self, x: Var, p: f64) -> Var {
        if !self.train || p == 0.0 {
            return x;
        }
        self.graph.dropout(x, p, &mut *self.rng.borrow_mut())
    }

    pub fn mark(&self, name: impl Into<String>, x: Var) {
        if let Some(t) = &self.trace {
            t.borrow_mut().push((name.into(), self.graph.shape(x)));
        }
    }

    pub fn take_trace(&self) -> Vec<(String, Vec<usize>)> {
        self.trace.as_ref().map(|t| std::mem::take(&mut *t.borrow_mut())).unwrap_or_default()
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        ctx.graph.conv3d(x, ctx.p(self.weight), Some(ctx.p(self.bias)), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        ctx.graph.group_norm(x, ctx.p(self.gamma), ctx.p(self.beta), self.groups, NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if !ctx.train {
            let mean = ctx.store.value(self.running_mean);
            let var = ctx.store.value(self.running_var);
            return ctx.graph.batch_norm_eval(x, g, b, mean, var, NORM_EPS);
        }
        let (y, state) = ctx.graph.batch_norm_train(x, g, b, NORM_EPS);
        if let Some(state) = state {
            let blend = |old: &Tensor<T>, new: &[T]| {
                let m = T::of(BN_MOMENTUM);
                Tensor::new(old.shape(), old.data().iter().zip(new).map(|(&o, &n)| o * (T::one() - m) + n * m).collect())
            };
            let mean = blend(ctx.store.value(self.running_mean), &state.mean);
            let var = blend(ctx.store.value(self.running_var), &state.var_unbiased);
            ctx.graph.stage_buffer_update(self.running_mean, mean);
            ctx.graph.stage_buffer_update(self.running_var, var);
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `x [m, fin] → [m, fout]`.
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        ctx.graph.linear(x, ctx.p(self.weight), Some(ctx.p(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvTranspose1dSpec,
}

impl ConvTranspose1d {
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        ctx.graph.conv_transpose1d(x, ctx.p(self.weight), Some(ctx.p(self.bias)), self.spec)
    }
}

/// Single-direction LSTM with PyTorch gate order (i, f, g, o).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    /// `x [n, t, f] → [n, t, hidden]`, scanning backwards when `reverse`.
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var, reverse: bool) -> Var {
        let g = ctx.graph;
        let s = g.shape(x);
        let (n, steps, f) = (s[0], s[1], s[2]);
        let h = self.hidden;
        let flat = g.reshape(x, &[n * steps, f]);
        let proj = g.linear(flat, ctx.p(self.w_ih), Some(ctx.p(self.b_ih)));
        let proj = g.reshape(proj, &[n, steps, 4 * h]);
        let (w_hh, b_hh) = (ctx.p(self.w_hh), ctx.p(self.b_hh));
        let mut hs: Vec<Option<Var>> = vec![None; steps];
        let mut hp = g.constant(Tensor::zeros(&[n, h]));
        let mut cp = hp;
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let xt = g.reshape(g.slice(proj, 1, t, t + 1), &[n, 4 * h]);
            let gates = g.add(xt, g.linear(hp, w_hh, Some(b_hh)));
            let i = g.sigmoid(g.slice(gates, 1, 0, h));
            let fg = g.sigmoid(g.slice(gates, 1, h, 2 * h));
            let cand = g.tanh(g.slice(gates, 1, 2 * h, 3 * h));
            let o = g.sigmoid(g.slice(gates, 1, 3 * h, 4 * h));
            cp = g.add(g.mul(fg, cp), g.mul(i, cand));
            hp = g.mul(o, g.tanh(cp));
            hs[t] = Some(g.reshape(hp, &[n, 1, h]));
        }
        let hs: Vec<Var> = hs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.concat(&hs, 1)
    }
}

/// Stacked bidirectional LSTM with dropout between layers.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub dropout: f64,
}

impl BiLstm {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, input: usize, hidden: usize, layers: usize, dropout: f64) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let fin = if l == 0 { input } else { 2 * hidden };
                (b.lstm(&format!("l{l}.fwd"), fin, hidden), b.lstm(&format!("l{l}.bwd"), fin, hidden))
            })
            .collect();
        Self { layers, dropout }
    }

    /// `x [n, t, f] → [n, t, 2 * hidden]`.
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        let mut h = x;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                h = ctx.dropout(h, self.dropout);
            }
            let a = fwd.forward(ctx, h, false);
            let b = bwd.forward(ctx, h, true);
            h = ctx.graph.concat(&[a, b], 2);
        }
        h
    }
}
