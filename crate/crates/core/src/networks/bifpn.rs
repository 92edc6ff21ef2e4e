use segcls_tensor::{Init, ParamId, Scalar, Var};

use super::layers::{Builder, Conv3d, ForwardCtx, GroupNorm};

/// Fusion node: normalized weighted sum of its inputs, then conv-GN-ReLU.
#[derive(Clone, Debug)]
struct Node {
    weights: ParamId,
    conv: Conv3d,
    norm: GroupNorm,
}

impl Node {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, inputs: usize, channels: usize, groups: usize) -> Self {
        Self {
            weights: b.param("fusion_weights", &[inputs], Init::Ones),
            conv: b.conv3d("conv", channels, channels, 3, 1),
            norm: b.group_norm("gn", channels, groups),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, inputs: &[Var], eps: f64) -> Var {
        let fused = ctx.graph.weighted_fuse(inputs, ctx.p(self.weights), eps);
        ctx.graph.relu(self.norm.forward(ctx, self.conv.forward(ctx, fused)))
    }
}

/// One bidirectional layer over `L` levels (finest first). The top-down pass
/// builds intermediate nodes for levels `L-2 .. 0`; the bottom-up pass emits
/// outputs for levels `1 .. L-1`, where interior levels also take their
/// original input as a skip. Level 0's output is its top-down node.
#[derive(Clone, Debug)]
pub struct BifpnLayer {
    top_down: Vec<Node>,
    bottom_up: Vec<Node>,
    eps: f64,
}

impl BifpnLayer {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, levels: usize, channels: usize, groups: usize, eps: f64) -> Self {
        assert!(levels >= 2, "a pyramid needs at least two levels");
        let top_down = (0..levels - 1).map(|k| b.scope(&format!("td{k}"), |b| Node::build(b, 2, channels, groups))).collect();
        let bottom_up = (1..levels)
            .map(|k| {
                let inputs = if k == levels - 1 { 2 } else { 3 };
                b.scope(&format!("bu{k}"), |b| Node::build(b, inputs, channels, groups))
            })
            .collect();
        Self { top_down, bottom_up, eps }
    }

    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, p: &[Var]) -> Vec<Var> {
        let g = ctx.graph;
        let levels = p.len();
        let mut td = p.to_vec();
        for k in (0..levels - 1).rev() {
            let up = g.upsample2x(td[k + 1]);
            td[k] = self.top_down[k].forward(ctx, &[p[k], up], self.eps);
        }
        let mut out = vec![td[0]];
        for k in 1..levels {
            let down = g.max_pool3d_2x(out[k - 1]);
            let inputs = if k == levels - 1 { vec![p[k], down] } else { vec![p[k], td[k], down] };
            out.push(self.bottom_up[k - 1].forward(ctx, &inputs, self.eps));
        }
        out
    }
}

/// Lateral 1x1x1 projections to the pyramid width followed by stacked
/// bidirectional layers.
#[derive(Clone, Debug)]
pub struct Bifpn {
    laterals: Vec<Conv3d>,
    layers: Vec<BifpnLayer>,
}

impl Bifpn {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, encoder: &[usize], channels: usize, layers: usize, groups: usize, eps: f64) -> Self {
        let laterals = encoder.iter().enumerate().map(|(k, &c)| b.conv3d(&format!("lateral{k}"), c, channels, 1, 1)).collect();
        let layers = (0..layers).map(|l| b.scope(&format!("layer{l}"), |b| BifpnLayer::build(b, encoder.len(), channels, groups, eps))).collect();
        Self { laterals, layers }
    }

    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, levels: &[Var]) -> Vec<Var> {
        let mut p: Vec<Var> = levels.iter().zip(&self.laterals).map(|(&x, conv)| conv.forward(ctx, x)).collect();
        for (l, layer) in self.layers.iter().enumerate() {
            p = layer.forward(ctx, &p);
            for (k, &v) in p.iter().enumerate() {
                ctx.mark(format!("bifpn.layer{}.level{}", l + 1, k + 1), v);
            }
        }
        p
    }
}
