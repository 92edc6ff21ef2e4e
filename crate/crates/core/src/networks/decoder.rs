use segcls_tensor::{Scalar, Var};

use super::layers::{Builder, Conv3d, ForwardCtx, GroupNorm};

#[derive(Clone, Debug)]
struct UpBlock {
    conv: Conv3d,
    norm: GroupNorm,
}

/// Brings every pyramid level to half input resolution with
/// conv-GN-ReLU-upsample blocks, concatenates them, and maps to region
/// logits at full resolution.
#[derive(Clone, Debug)]
pub struct Decoder {
    paths: Vec<Vec<UpBlock>>,
    head: Conv3d,
}

/// Decoder output: full-resolution logits and the concatenated
/// half-resolution features.
pub struct DecoderOutput {
    pub logits: Var,
    pub features: Var,
}

impl Decoder {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, levels: usize, channels: usize, groups: usize, regions: usize) -> Self {
        let paths = (0..levels)
            .map(|k| {
                (0..k)
                    .map(|u| {
                        b.scope(&format!("level{k}.up{u}"), |b| UpBlock {
                            conv: b.conv3d("conv", channels, channels, 3, 1),
                            norm: b.group_norm("gn", channels, groups),
                        })
                    })
                    .collect()
            })
            .collect();
        let head = b.conv3d("head", levels * channels, regions, 1, 1);
        Self { paths, head }
    }

    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, pyramid: &[Var]) -> DecoderOutput {
        let g = ctx.graph;
        let maps: Vec<Var> = pyramid
            .iter()
            .zip(&self.paths)
            .map(|(&x, path)| {
                path.iter().fold(x, |h, blk| g.upsample2x(g.relu(blk.norm.forward(ctx, blk.conv.forward(ctx, h)))))
            })
            .collect();
        let features = g.concat(&maps, 1);
        ctx.mark("decoder.concat", features);
        let logits = g.upsample2x(self.head.forward(ctx, features));
        DecoderOutput { logits, features }
    }
}
