//! The BiFPN and nested U-Net segmentation networks with their slice
//! classification branch.

mod bifpn;
mod checkpoint;
mod classifier;
mod decoder;
mod encoder;
pub mod layers;
mod nested;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segcls_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use bifpn::{Bifpn, BifpnLayer};
pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_SCHEMA_VERSION};
pub use classifier::{ClassifierSpec, SliceClassifier};
pub use decoder::{Decoder, DecoderOutput};
pub use encoder::{Encoder, ResidualBlock};
pub use layers::{Builder, ForwardCtx};
pub use nested::{NestedOutput, NestedUnet};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "bifpn")]
    Bifpn,
    #[serde(rename = "unetpp", alias = "nested_unet")]
    NestedUnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub architecture: Architecture,
    pub in_channels: usize,
    /// Channels of the residual encoder stages (BiFPN variant).
    pub encoder_channels: Vec<usize>,
    /// Channels per depth of the nested U-Net.
    pub nested_channels: Vec<usize>,
    pub pyramid_channels: usize,
    pub bifpn_layers: usize,
    pub norm_groups: usize,
    pub num_regions: usize,
    /// Width of the classifier convolution and of each LSTM direction.
    pub classifier_channels: usize,
    pub lstm_layers: usize,
    pub dropout_rate: f64,
    pub deep_supervision: bool,
    pub fusion_epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::bifpn()
    }
}

impl NetworkConfig {
    pub fn bifpn() -> Self {
        Self {
            architecture: Architecture::Bifpn,
            in_channels: 4,
            encoder_channels: vec![16, 32, 64, 128],
            nested_channels: vec![32, 64, 128, 256, 512],
            pyramid_channels: 256,
            bifpn_layers: 3,
            norm_groups: 8,
            num_regions: 3,
            classifier_channels: 512,
            lstm_layers: 2,
            dropout_rate: 0.2,
            deep_supervision: false,
            fusion_epsilon: 1e-4,
        }
    }

    pub fn nested_unet() -> Self {
        Self {
            architecture: Architecture::NestedUnet,
            classifier_channels: 256,
            lstm_layers: 3,
            deep_supervision: true,
            ..Self::bifpn()
        }
    }

    /// Small BiFPN variant for desk-scale experiments.
    pub fn bifpn_reduced() -> Self {
        Self {
            encoder_channels: vec![8, 16, 32, 64],
            pyramid_channels: 16,
            bifpn_layers: 1,
            classifier_channels: 16,
            dropout_rate: 0.0,
            ..Self::bifpn()
        }
    }

    /// Small nested U-Net variant for desk-scale experiments.
    pub fn nested_unet_reduced() -> Self {
        Self {
            nested_channels: vec![8, 16, 32],
            classifier_channels: 16,
            lstm_layers: 1,
            dropout_rate: 0.0,
            ..Self::nested_unet()
        }
    }

    /// Every spatial extent of the input must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        match self.architecture {
            Architecture::Bifpn => 1 << self.encoder_channels.len(),
            Architecture::NestedUnet => 1 << (self.nested_channels.len() - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("network.{field}"), msg));
        if self.num_regions != 3 {
            return err("num_regions", format!("must be 3 (WT, TC, ET), got {}", self.num_regions));
        }
        if self.in_channels == 0 {
            return err("in_channels", "must be positive".into());
        }
        if self.norm_groups == 0 {
            return err("norm_groups", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err("dropout_rate", format!("{} outside [0, 1)", self.dropout_rate));
        }
        if !(self.fusion_epsilon > 0.0) {
            return err("fusion_epsilon", "must be positive".into());
        }
        if self.lstm_layers == 0 {
            return err("lstm_layers", "must be at least 1".into());
        }
        let (field, chans, min) = match self.architecture {
            Architecture::Bifpn => ("encoder_channels", &self.encoder_channels, 2),
            Architecture::NestedUnet => ("nested_channels", &self.nested_channels, 2),
        };
        if chans.len() < min {
            return err(field, format!("needs at least {min} entries"));
        }
        if chans.windows(2).any(|w| w[1] != 2 * w[0]) {
            return err(field, format!("{chans:?} must double at every stage"));
        }
        let mut normalized: Vec<(&str, usize)> = chans.iter().map(|&c| (field, c)).collect();
        if self.architecture == Architecture::Bifpn {
            if self.bifpn_layers == 0 {
                return err("bifpn_layers", "must be at least 1".into());
            }
            normalized.push(("pyramid_channels", self.pyramid_channels));
            normalized.push(("classifier_channels", self.classifier_channels));
        }
        for (f, c) in normalized {
            if c == 0 || c % self.norm_groups != 0 {
                return err(f, format!("{c} channels not divisible by norm_groups = {}", self.norm_groups));
            }
        }
        if self.classifier_channels == 0 {
            return err("classifier_channels", "must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Body {
    Bifpn { encoder: Encoder, bifpn: Bifpn, decoder: Decoder },
    Nested(NestedUnet),
}

/// Parameters plus module structure.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    config: NetworkConfig,
    store: ParamStore<T>,
    body: Body,
    classifier: SliceClassifier,
}

/// Variables produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    /// `[n, regions, x, y, z]`.
    pub seg_logits: Var,
    /// `[n, regions, z]`.
    pub slice_logits: Var,
    /// Classifier input map.
    pub features: Var,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::with_store(config, ParamStore::new(), seed)
    }

    /// Shape-only network for architecture checks at any size.
    pub fn meta(config: NetworkConfig) -> Result<Self> {
        Self::with_store(config, ParamStore::new_meta(), 0)
    }

    fn with_store(config: NetworkConfig, mut store: ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let c = &config;
        let (body, features) = match c.architecture {
            Architecture::Bifpn => {
                let encoder = b.scope("encoder", |b| Encoder::build(b, c.in_channels, &c.encoder_channels, c.norm_groups, c.dropout_rate));
                let bifpn = b.scope("bifpn", |b| {
                    Bifpn::build(b, &c.encoder_channels, c.pyramid_channels, c.bifpn_layers, c.norm_groups, c.fusion_epsilon)
                });
                let levels = c.encoder_channels.len();
                let decoder = b.scope("decoder", |b| Decoder::build(b, levels, c.pyramid_channels, c.norm_groups, c.num_regions));
                (Body::Bifpn { encoder, bifpn, decoder }, levels * c.pyramid_channels)
            }
            Architecture::NestedUnet => {
                let unet = b.scope("unetpp", |b| {
                    NestedUnet::build(b, c.in_channels, &c.nested_channels, c.norm_groups, c.num_regions, c.deep_supervision)
                });
                (Body::Nested(unet), (c.nested_channels.len() - 1) * c.nested_channels[0])
            }
        };
        let spec = ClassifierSpec {
            in_channels: features,
            channels: c.classifier_channels,
            lstm_layers: c.lstm_layers,
            regions: c.num_regions,
            groups: c.norm_groups,
            dropout: c.dropout_rate,
            restore_axial: c.architecture == Architecture::Bifpn,
            batch_norm: c.architecture == Architecture::NestedUnet,
        };
        let classifier = b.scope("classifier", |b| SliceClassifier::build(b, &spec));
        Ok(Self { config, store, body, classifier })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.store)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected input [n, {}, x, y, z], got {shape:?}",
                self.config.in_channels
            )));
        }
        let m = self.config.required_multiple();
        if shape[0] == 0 || shape[2..].iter().any(|&d| d == 0 || d % m != 0) {
            return Err(Error::shape(format!("spatial extents {:?} must be positive multiples of {m}", &shape[2..])));
        }
        Ok(())
    }

    /// Run the network on `x [n, in_channels, x, y, z]` recorded on `ctx`.
    pub fn forward(&self, ctx: &ForwardCtx<'_, T>, x: Var) -> Result<NetworkOutput> {
        self.check_input(&ctx.graph.shape(x))?;
        let (seg_logits, features) = match &self.body {
            Body::Bifpn { encoder, bifpn, decoder } => {
                let levels = encoder.forward(ctx, x);
                let pyramid = bifpn.forward(ctx, &levels);
                let out = decoder.forward(ctx, &pyramid);
                (out.logits, out.features)
            }
            Body::Nested(unet) => {
                let out = unet.forward(ctx, x);
                (out.logits, out.features)
            }
        };
        ctx.mark("seg_logits", seg_logits);
        let slice_logits = self.classifier.forward(ctx, features);
        Ok(NetworkOutput { seg_logits, slice_logits, features })
    }

    /// Evaluation-mode forward without gradient recording. Returns
    /// (segmentation logits, slice logits).
    pub fn infer(&self, x: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let graph = Graph::no_grad();
        let ctx = ForwardCtx::new(&graph, &self.store, false, 0);
        let xv = graph.constant(x);
        let out = self.forward(&ctx, xv)?;
        Ok(((*graph.value(out.seg_logits)).clone(), (*graph.value(out.slice_logits)).clone()))
    }

    /// Named output shapes of an evaluation forward on `input_shape`.
    pub fn trace_shapes(&self, input_shape: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
        let graph = Graph::no_grad();
        let ctx = ForwardCtx::new(&graph, &self.store, false, 0).with_trace();
        let x = if self.store.is_meta() { Tensor::meta(input_shape) } else { Tensor::zeros(input_shape) };
        let xv = graph.constant(x);
        self.forward(&ctx, xv)?;
        Ok(ctx.take_trace())
    }
}

/// Exact number of trainable scalars.
pub fn count_parameters<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count_trainable()
}
