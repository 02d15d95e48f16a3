use serde::{Deserialize, Serialize};

/// Sketch transformer, feature pyramids and flow decoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceConfig {
    /// Width of the transformer's residual trunk (its output feature image).
    pub transformer_channels: usize,
    /// One dilated residual block per entry.
    pub dilations: Vec<usize>,
    /// Channels of pyramid level 0, 1, ...; the length is the pyramid depth.
    pub pyramid_channels: Vec<usize>,
    pub search_radius: usize,
    /// Finest pyramid level that runs a flow decoder; flows are upsampled from there.
    pub finest_level: usize,
    pub decoder_channels: Vec<usize>,
    pub context_channels: usize,
    pub context_dilations: Vec<usize>,
}

impl CorrespondenceConfig {
    pub fn levels(&self) -> usize {
        self.pyramid_channels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    /// Hidden widths; a final 1-channel layer and sigmoid follow.
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    /// Frames per clip, keyframes included.
    pub frames: usize,
    pub unet: UNetConfig,
}

/// Full architecture description, stored alongside every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub correspondence: CorrespondenceConfig,
    pub blend: BlendConfig,
    pub refine: UNetConfig,
    pub temporal: TemporalConfig,
}

impl ModelConfig {
    /// Full-size defaults.
    pub fn standard() -> Self {
        Self {
            correspondence: CorrespondenceConfig {
                transformer_channels: 32,
                dilations: vec![1, 2, 4, 8, 4, 2],
                pyramid_channels: vec![16, 32, 64, 96, 128],
                search_radius: 4,
                finest_level: 2,
                decoder_channels: vec![96, 64, 32],
                context_channels: 32,
                context_dilations: vec![1, 2, 4],
            },
            blend: BlendConfig { hidden: vec![32, 32] },
            refine: UNetConfig { base: 32, depth: 4 },
            temporal: TemporalConfig { frames: 7, unet: UNetConfig { base: 32, depth: 4 } },
        }
    }

    /// Narrow variant sized for single-core CPU training at about 96×160.
    pub fn compact() -> Self {
        Self {
            correspondence: CorrespondenceConfig {
                transformer_channels: 12,
                dilations: vec![1, 2, 4, 8, 4, 2],
                pyramid_channels: vec![8, 16, 24, 32, 48],
                search_radius: 4,
                finest_level: 2,
                decoder_channels: vec![48, 32, 16],
                context_channels: 16,
                context_dilations: vec![1, 2, 4],
            },
            blend: BlendConfig { hidden: vec![32, 32] },
            refine: UNetConfig { base: 8, depth: 4 },
            temporal: TemporalConfig { frames: 7, unet: UNetConfig { base: 8, depth: 4 } },
        }
    }

    /// Spatial multiple every input must be padded to.
    pub fn size_multiple(&self) -> usize {
        let pyramid = 1 << (self.correspondence.levels() - 1);
        let unet = 1 << self.refine.depth.max(self.temporal.unet.depth);
        pyramid.max(unet)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard()
    }
}
