use serde::{Deserialize, Serialize};

use crate::autodiff::ConvSpec;
use crate::error::{Error, Result};

/// Which heads a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    SingleTaskClassify,
    SingleTaskMask,
    MultiTask,
}

impl ModelMode {
    pub const ALL: [ModelMode; 3] = [
        ModelMode::SingleTaskClassify,
        ModelMode::SingleTaskMask,
        ModelMode::MultiTask,
    ];

    pub fn has_classifier(self) -> bool {
        self != ModelMode::SingleTaskMask
    }

    pub fn has_decoder(self) -> bool {
        self != ModelMode::SingleTaskClassify
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::SingleTaskClassify => "single_task_classify",
            ModelMode::SingleTaskMask => "single_task_mask",
            ModelMode::MultiTask => "multi_task",
        }
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dilation rates cycled through the encoder blocks.
pub const DILATIONS: [usize; 3] = [1, 2, 4];

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub encoder_filters: Vec<usize>,
    pub embedding_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
    pub decoder_filters: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            input_channels: 3,
            encoder_filters: vec![8, 16, 32, 64],
            embedding_dim: 32,
            classifier_hidden: vec![64, 64, 32, 32],
            num_classes: 3,
            decoder_filters: vec![64, 32, 16, 8],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || self.input_channels == 0 || self.embedding_dim == 0 {
            return bad("input_size, input_channels and embedding_dim must be positive".into());
        }
        if self.encoder_filters.is_empty()
            || self.encoder_filters[0] == 0
            || self.encoder_filters.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "encoder_filters must be a nonempty, strictly ascending list of positive counts, got {:?}",
                self.encoder_filters
            ));
        }
        if self.classifier_hidden.len() != 4 || self.classifier_hidden.contains(&0) {
            return bad(format!(
                "classifier_hidden needs exactly 4 positive widths, got {:?}",
                self.classifier_hidden
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.decoder_filters.is_empty()
            || self.decoder_filters.contains(&0)
            || self.decoder_filters.windows(2).any(|w| w[0] < w[1])
        {
            return bad(format!(
                "decoder_filters must be a nonempty, non-increasing list of positive counts, got {:?}",
                self.decoder_filters
            ));
        }
        self.encoder_spatial()?;
        self.decoder_grid()?;
        Ok(())
    }

    /// Convolution settings of encoder block `i`.
    pub fn encoder_conv(&self, i: usize) -> ConvSpec {
        let d = DILATIONS[i % DILATIONS.len()];
        ConvSpec::new(2, d, d)
    }

    /// Spatial side of the last encoder feature map.
    pub fn encoder_spatial(&self) -> Result<usize> {
        let mut side = self.input_size;
        for i in 0..self.encoder_filters.len() {
            if side < 2 {
                return Err(Error::Config(format!(
                    "encoder block {i} would downsample a {side}×{side} map; \
                     too many blocks for input_size {}",
                    self.input_size
                )));
            }
            side = self
                .encoder_conv(i)
                .output_extent(side, 3)
                .expect("padding equals dilation");
        }
        Ok(side)
    }

    /// Side of the decoder's starting grid; each block doubles it.
    pub fn decoder_grid(&self) -> Result<usize> {
        let factor = 1usize
            .checked_shl(self.decoder_filters.len() as u32)
            .filter(|&f| f <= self.input_size)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{} decoder blocks overshoot input_size {}",
                    self.decoder_filters.len(),
                    self.input_size
                ))
            })?;
        if !self.input_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{} for the decoder",
                self.input_size,
                self.decoder_filters.len()
            )));
        }
        Ok(self.input_size / factor)
    }
}
