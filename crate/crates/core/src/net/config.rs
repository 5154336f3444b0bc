use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::traj::{ContextKind, TargetSpace, BASE_WIDTH};

/// How a context payload is turned into a feature vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextEncoding {
    /// Lookup table with `vocab` rows.
    Categorical { vocab: usize },
    /// Affine map of one scalar.
    Scalar,
    /// Affine map of a fixed-width vector.
    Vector { width: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub kind: ContextKind,
    pub dim: usize,
    pub encoding: ContextEncoding,
}

/// Architecture of the denoiser, the state-propagation cells and the
/// context embedders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Number of UNet scales, which is also the number of state features.
    pub blocks: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub kernel_size: usize,
    pub step_embed_dim: usize,
    pub contexts: Vec<ContextSpec>,
    /// Nominal sequence length; any length divisible by `2^(blocks-1)` runs.
    pub seq_len: usize,
    /// `false` builds the plain conditional denoiser without state fusion or
    /// propagation cells.
    pub state_propagation: bool,
    /// Space the query block is diffused in.
    #[serde(default)]
    pub target: TargetSpace,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            blocks: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 8],
            kernel_size: 5,
            step_embed_dim: 64,
            contexts: Vec::new(),
            seq_len: 512,
            state_propagation: true,
            target: TargetSpace::Absolute,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(invalid("at least one UNet block is required"));
        }
        if self.channel_multipliers.len() != self.blocks {
            return Err(invalid(format!(
                "{} channel multipliers for {} blocks",
                self.channel_multipliers.len(),
                self.blocks
            )));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return Err(invalid("channel widths must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(invalid("kernel size must be odd"));
        }
        if self.step_embed_dim == 0 || self.step_embed_dim % 2 != 0 {
            return Err(invalid("step embedding dimension must be positive and even"));
        }
        for c in &self.contexts {
            if c.dim == 0 {
                return Err(invalid(format!("context {} has zero width", c.kind.label())));
            }
            if matches!(c.encoding, ContextEncoding::Categorical { vocab: 0 } | ContextEncoding::Vector { width: 0 }) {
                return Err(invalid(format!("context {} has an empty encoding", c.kind.label())));
            }
        }
        self.check_len(self.seq_len)
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        let unit = 1usize << (self.blocks - 1);
        if len == 0 || len % unit != 0 {
            return Err(invalid(format!(
                "sequence length {len} must be a positive multiple of {unit}"
            )));
        }
        Ok(())
    }

    /// Channel width `c_i` at scale `i` (0-based).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels * self.channel_multipliers[i]
    }

    /// Sequence length at scale `i` for an input of length `len`.
    pub fn scale_len(&self, i: usize, len: usize) -> usize {
        len >> i
    }

    /// Width `D` of the conditioning tensor.
    pub fn input_width(&self) -> usize {
        BASE_WIDTH + self.contexts.iter().map(|c| c.dim).sum::<usize>()
    }

    pub fn pad(&self) -> usize {
        self.kernel_size / 2
    }
}

/// Number of normalization groups for a channel count.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}
