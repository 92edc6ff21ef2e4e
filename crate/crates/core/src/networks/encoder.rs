use segcls_tensor::{Scalar, Var};

use super::layers::{Builder, Conv3d, ForwardCtx, GroupNorm};

/// Residual downsampling unit: two conv-GN-dropout-ReLU stages, the first
/// with stride 2, plus a strided convolutional shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv3d,
    gn1: GroupNorm,
    conv2: Conv3d,
    gn2: GroupNorm,
    shortcut: Conv3d,
    dropout: f64,
}

impl ResidualBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, cin: usize, cout: usize, groups: usize, dropout: f64) -> Self {
        Self {
            conv1: b.conv3d("conv1", cin, cout, 3, 2),
            gn1: b.group_norm("gn1", cout, groups),
            conv2: b.conv3d("conv2", cout, cout, 3, 1),
            gn2: b.group_norm("gn2", cout, groups),
            shortcut: b.conv3d("shortcut", cin, cout, 3, 2),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Var {
        let g = ctx.graph;
        let h = self.gn1.forward(ctx, self.conv1.forward(ctx, x));
        let h = g.relu(ctx.dropout(h, self.dropout));
        let h = self.gn2.forward(ctx, self.conv2.forward(ctx, h));
        let h = g.relu(ctx.dropout(h, self.dropout));
        g.add(h, self.shortcut.forward(ctx, x))
    }
}

/// Stack of residual blocks; level `k` has stride `2^(k+1)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<ResidualBlock>,
}

impl Encoder {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, cin: usize, channels: &[usize], groups: usize, dropout: f64) -> Self {
        let mut prev = cin;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let block = b.scope(&format!("block{k}"), |b| ResidualBlock::build(b, prev, c, groups, dropout));
                prev = c;
                block
            })
            .collect();
        Self { blocks }
    }

    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (k, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, h);
            ctx.mark(format!("encoder.level{}", k + 1), h);
            levels.push(h);
        }
        levels
    }
}
