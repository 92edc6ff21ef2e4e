use segcls_tensor::{ConvTranspose1dSpec, Scalar, Var};

use super::layers::{BatchNorm, BiLstm, Builder, Conv3d, ConvTranspose1d, ForwardCtx, GroupNorm, Linear};

#[derive(Clone, Debug)]
enum Norm {
    Group(GroupNorm),
    Batch(BatchNorm),
}

/// Slice-wise region classifier: conv-norm-ReLU, average over the two
/// in-plane axes, optional transposed convolution restoring the axial
/// extent, stacked BiLSTM and a per-slice linear layer.
#[derive(Clone, Debug)]
pub struct SliceClassifier {
    conv: Conv3d,
    norm: Norm,
    restore: Option<(ConvTranspose1d, GroupNorm)>,
    lstm: BiLstm,
    out: Linear,
}

pub struct ClassifierSpec {
    pub in_channels: usize,
    pub channels: usize,
    pub lstm_layers: usize,
    pub regions: usize,
    pub groups: usize,
    pub dropout: f64,
    /// Half-resolution input whose axial extent is doubled before the LSTM.
    pub restore_axial: bool,
    pub batch_norm: bool,
}

impl SliceClassifier {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, s: &ClassifierSpec) -> Self {
        let conv = b.conv3d("conv", s.in_channels, s.channels, 3, 1);
        let norm = if s.batch_norm { Norm::Batch(b.batch_norm("bn", s.channels)) } else { Norm::Group(b.group_norm("gn", s.channels, s.groups)) };
        let restore = s.restore_axial.then(|| {
            let spec = ConvTranspose1dSpec { stride: 2, padding: 1, output_padding: 1 };
            (b.conv_transpose1d("restore", s.channels, s.channels, 3, spec), b.group_norm("restore_gn", s.channels, s.groups))
        });
        let lstm = b.scope("lstm", |b| BiLstm::build(b, s.channels, s.channels, s.lstm_layers, s.dropout));
        let out = b.linear("out", 2 * s.channels, s.regions);
        Self { conv, norm, restore, lstm, out }
    }

    /// `features [n, c, x, y, z] → logits [n, regions, z']`, where `z'` is
    /// `2z` when the axial extent is restored and `z` otherwise.
    pub fn forward<T: Scalar>(&self, ctx: &ForwardCtx<'_, T>, features: Var) -> Var {
        let g = ctx.graph;
        let h = self.conv.forward(ctx, features);
        let h = match &self.norm {
            Norm::Group(gn) => gn.forward(ctx, h),
            Norm::Batch(bn) => bn.forward(ctx, h),
        };
        let h = g.relu(h);
        ctx.mark("classifier.conv", h);
        let s = g.shape(h);
        let (n, c, z) = (s[0], s[1], s[4]);
        let pooled = g.mean_axis(g.reshape(h, &[n, c, s[2] * s[3], z]), 2);
        ctx.mark("classifier.pooled", pooled);
        let seq = match &self.restore {
            Some((tconv, gn)) => {
                let r = g.relu(gn.forward(ctx, tconv.forward(ctx, pooled)));
                ctx.mark("classifier.restored", r);
                r
            }
            None => pooled,
        };
        let steps = g.shape(seq)[2];
        let h = self.lstm.forward(ctx, g.permute(seq, &[0, 2, 1]));
        ctx.mark("classifier.lstm", g.permute(h, &[0, 2, 1]));
        let width = g.shape(h)[2];
        let logits = self.out.forward(ctx, g.reshape(h, &[n * steps, width]));
        let regions = g.shape(logits)[1];
        let logits = g.permute(g.reshape(logits, &[n, steps, regions]), &[0, 2, 1]);
        ctx.mark("classifier.logits", logits);
        logits
    }
}
