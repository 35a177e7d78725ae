//! Triplet-encoder U-Net with latent fusion and axial-only skips.
//!
//! One shared convolutional encoder processes up to three view slices
//! of the same patient position. The per-view latent maps are fused by
//! an element-wise mean and compressed by a bottleneck block, and a
//! decoder mirrors the encoder using skip connections taken
//! exclusively from the axial pass, so the output probability map
//! always lives on the axial grid. Because fusion is an arity-agnostic
//! mean, a checkpoint trained with three views can run inference with
//! one, two or three views without any structural change.

mod checkpoint;
mod tunet;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_tensors, save_checkpoint, CheckpointMeta,
};
pub use tunet::{EncodeOutput, ForwardOutput, TunetGraph, ViewInputs};

use crate::error::{Error, Result};
use crate::phantom::View;
use crate::rng::{stream, tags};
use crate::tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input channels per slice (grayscale images: 1).
    pub in_channels: usize,
    /// Channel width of the first encoder block.
    pub base_channels: usize,
    /// Per-block channel multipliers (5 encoder blocks).
    pub multipliers: [usize; 5],
    /// Dropout rate in axial encoder blocks 4-5 during training.
    pub dropout: f32,
    /// Square input extent; must be divisible by 64 (five encoder
    /// pools plus the bottleneck pool halve it six times).
    pub input_hw: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            multipliers: [1, 2, 4, 8, 16],
            dropout: 0.5,
            input_hw: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.multipliers.iter().any(|m| *m == 0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        if self.input_hw == 0 || self.input_hw % 64 != 0 {
            return Err(Error::Config(format!(
                "input extent must be a positive multiple of 64, got {}",
                self.input_hw
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Output channels of encoder block `i` (1-based).
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels * self.multipliers[i - 1]
    }

    /// Channels of the latent map (and of the embeddings).
    pub fn latent_channels(&self) -> usize {
        self.block_channels(5)
    }

    /// Convolutions per encoder block: two in the first two blocks,
    /// three in the remaining three (mirrored by the decoder).
    pub fn convs_in_block(i: usize) -> usize {
        if i <= 2 {
            2
        } else {
            3
        }
    }
}

/// A pooled per-view latent vector together with its view role.
#[derive(Debug, Clone)]
pub struct ViewEmbedding {
    pub role: View,
    pub values: Vec<f32>,
}

/// The full parameter state of the network: one shared encoder,
/// the fusion bottleneck, and the decoder.
#[derive(Debug, Clone)]
pub struct TunetParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Tensor shapes in registration order. The single source of truth for
/// initialization, checkpoint layout and optimizer state.
fn template_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    fn conv(out: &mut Vec<(String, Vec<usize>)>, name: String, cout: usize, cin: usize) {
        out.push((format!("{name}.w"), vec![cout, cin, 3, 3]));
        out.push((format!("{name}.b"), vec![cout]));
    }
    let mut out = Vec::new();

    // Shared encoder: five blocks.
    let mut cin = config.in_channels;
    for i in 1..=5 {
        let cout = config.block_channels(i);
        for j in 0..ModelConfig::convs_in_block(i) {
            conv(&mut out, format!("enc.b{i}.c{j}"), cout, if j == 0 { cin } else { cout });
        }
        cin = cout;
    }

    // Bottleneck: three convolutions at latent width.
    let lat = config.latent_channels();
    for j in 0..3 {
        conv(&mut out, format!("bott.c{j}"), lat, lat);
    }

    // Decoder: one upsample undoing the bottleneck pool, then five
    // mirrored stages.
    out.push(("dec.up0.w".into(), vec![lat, lat, 2, 2]));
    out.push(("dec.up0.b".into(), vec![lat]));
    let mut cur = lat;
    for i in (1..=5).rev() {
        let cout = config.block_channels(i);
        out.push((format!("dec.s{i}.up.w"), vec![cur, cout, 2, 2]));
        out.push((format!("dec.s{i}.up.b"), vec![cout]));
        for j in 0..ModelConfig::convs_in_block(i) {
            // The first conv sees the upsampled features concatenated
            // with the axial skip of equal width.
            let conv_in = if j == 0 { cout * 2 } else { cout };
            conv(&mut out, format!("dec.s{i}.c{j}"), cout, conv_in);
        }
        cur = cout;
    }

    // Segmentation head: 1x1 conv to a single probability channel.
    out.push(("head.w".into(), vec![1, config.block_channels(1)]));
    out.push(("head.b".into(), vec![1]));
    out
}

impl TunetParams {
    /// He-normal initialization (std = sqrt(2 / fan_in)) with zero
    /// biases, drawn in registration order from a dedicated stream so
    /// the same seed always produces the same network.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, tags::MODEL_INIT);
        let mut params = ParamSet::new();
        for (name, shape) in template_shapes(&config) {
            let tensor = if shape.len() == 1 {
                Tensor::zeros(shape)?
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt() as f32;
                Tensor::randn(shape, std, &mut rng)?
            };
            params.push(name, tensor)?;
        }
        Ok(Self { config, params })
    }

    /// All-zero parameters in template order (used when loading).
    pub fn template(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in template_shapes(&config) {
            params.push(name, Tensor::zeros(shape)?)?;
        }
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in self.params.iter() {
            t.validate_finite(&format!("parameter {name}"))?;
        }
        Ok(())
    }
}
