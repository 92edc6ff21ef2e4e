use segcls_tensor::{Scalar, Var};

use super::layers::{Builder, Conv3d, ForwardCtx, GroupNorm};

/// conv-GN-ReLU twice.
#[derive(Clone, Debug)]
struct VggBlock {
    conv1: Conv3d,
    gn1: GroupNorm,
    conv2: Conv3d,
    gn2: GroupNorm,
}

impl VggBlock {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, cin: usize, cout: usize, groups: usize) -> Self {
        Self {
            conv1: b.conv3d("conv1", cin, cout, 3, 1),
            gn1: b.group_norm("gn1", cout, groups),
            conv2: b.conv3d("conv2", cout, cout, 3, 1),
            gn2: b.group_norm("gn2", cout, groups),
        }
    }

    fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        let g = ctx.graph;
        let h = g.relu(self.gn1.forward(ctx, self.conv1.forward(ctx, x)));
        g.relu(self.gn2.forward(ctx, self.conv2.forward(ctx, h)))
    }
}

/// Per-branch head: ReLU, two convolutions, resize to the input extent.
#[derive(Clone, Debug)]
struct Head {
    conv1: Conv3d,
    conv2: Conv3d,
}

/// Nested U-Net with dense skip pathways. Node `(i, j)` sits at depth `i`
/// (stride `2^i`) and column `j`.
#[derive(Clone, Debug)]
pub struct NestedUnet {
    nodes: Vec<Vec<VggBlock>>,
    heads: Vec<Head>,
    deep_supervision: bool,
}

pub struct NestedOutput {
    pub logits: Var,
    pub features: Var,
}

impl NestedUnet {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        cin: usize,
        channels: &[usize],
        groups: usize,
        regions: usize,
        deep_supervision: bool,
    ) -> Self {
        let depth = channels.len();
        assert!(depth >= 2, "nested U-Net needs at least two depths");
        let nodes = (0..depth)
            .map(|i| {
                (0..depth - i)
                    .map(|j| {
                        let input = match (i, j) {
                            (0, 0) => cin,
                            (_, 0) => channels[i - 1],
                            _ => j * channels[i] + channels[i + 1],
                        };
                        b.scope(&format!("x{i}_{j}"), |b| VggBlock::build(b, input, channels[i], groups))
                    })
                    .collect()
            })
            .collect();
        let c0 = channels[0];
        let heads = (1..depth)
            .filter(|&j| deep_supervision || j == depth - 1)
            .map(|j| {
                b.scope(&format!("head{j}"), |b| Head {
                    conv1: b.conv3d("conv1", c0, c0, 3, 1),
                    conv2: b.conv3d("conv2", c0, regions, 3, 1),
                })
            })
            .collect();
        Self { nodes, heads, deep_supervision }
    }

    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> NestedOutput {
        let g = ctx.graph;
        let depth = self.nodes.len();
        let in_shape = g.shape(x);
        let mut grid: Vec<Vec<Var>> = vec![Vec::new(); depth];
        for i in 0..depth {
            let input = if i == 0 { x } else { g.max_pool3d_2x(grid[i - 1][0]) };
            let v = self.nodes[i][0].forward(ctx, input);
            ctx.mark(format!("nested.x{i}_0"), v);
            grid[i].push(v);
        }
        for j in 1..depth {
            for i in 0..depth - j {
                let mut inputs = grid[i][..j].to_vec();
                inputs.push(g.upsample2x(grid[i + 1][j - 1]));
                let v = self.nodes[i][j].forward(ctx, g.concat(&inputs, 1));
                ctx.mark(format!("nested.x{i}_{j}"), v);
                grid[i].push(v);
            }
        }
        let top = &grid[0][1..];
        let features = g.concat(top, 1);
        ctx.mark("nested.features", features);
        let branches: Vec<Var> = if self.deep_supervision { top.to_vec() } else { vec![top[top.len() - 1]] };
        let size = [in_shape[2], in_shape[3], in_shape[4]];
        let outs: Vec<Var> = branches
            .iter()
            .zip(&self.heads)
            .map(|(&h, head)| {
                let y = head.conv2.forward(ctx, head.conv1.forward(ctx, g.relu(h)));
                g.resize_trilinear(y, size)
            })
            .collect();
        let logits = if outs.len() == 1 {
            outs[0]
        } else {
            g.scale(g.add_all(&outs), T::one() / T::of(outs.len() as f64))
        };
        NestedOutput { logits, features }
    }
}
