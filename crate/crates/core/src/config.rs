use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which network is built from a [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Task token inserted at the deepest decoder level.
    MoCtrans,
    /// Identical network without the task token.
    Base,
}

/// Training regime: the task-conditioned model, one token-free model per
/// dataset, or one token-free multi-class model over the union of datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MoCtrans,
    BaseSingle,
    BaseMulti,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MoCtrans, Variant::BaseSingle, Variant::BaseMulti];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MoCtrans => "mo_ctrans",
            Variant::BaseSingle => "base_single",
            Variant::BaseMulti => "base_multi",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::MoCtrans => Architecture::MoCtrans,
            _ => Architecture::Base,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected mo_ctrans, base_single or base_multi)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub c_base: usize,
    /// Channel reduction ratio applied by the pyramid feature fusion.
    pub m: usize,
    pub levels: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub n_tasks: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub image_hw: usize,
    pub architecture: Architecture,
}

impl ModelConfig {
    /// Small configuration used for local experiments and tests.
    pub fn desk() -> Self {
        Self {
            c_base: 16,
            m: 4,
            levels: 4,
            heads: 4,
            ffn_expansion: 2,
            n_tasks: 4,
            n_classes: 2,
            in_channels: 3,
            image_hw: 64,
            architecture: Architecture::MoCtrans,
        }
    }

    /// Full-size configuration (C = 64, m = 4, four levels, 256 x 256).
    pub fn full() -> Self {
        Self { c_base: 64, heads: 8, image_hw: 256, ..Self::desk() }
    }

    pub fn has_task_token(&self) -> bool {
        self.architecture == Architecture::MoCtrans
    }

    /// Encoder channels at `level`.
    pub fn enc_channels(&self, level: usize) -> usize {
        self.c_base << level
    }

    /// Channels after the fusion 1x1 reduction at `level`.
    pub fn reduced_channels(&self, level: usize) -> usize {
        (self.c_base << level) / self.m
    }

    /// Side of the square patch that becomes one token at `level`.
    pub fn patch_side(&self, level: usize) -> usize {
        1 << (self.levels - 1 - level)
    }

    /// Token size at `level`: `2^(2L-2-i) * C / m`.
    pub fn token_dim(&self, level: usize) -> usize {
        self.patch_side(level) * self.patch_side(level) * self.reduced_channels(level)
    }

    /// Side of the deepest feature map, i.e. of the token grid.
    pub fn grid_side(&self) -> usize {
        self.image_hw >> (self.levels - 1)
    }

    /// Image tokens per sample, identical at every level.
    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Rows of the deepest-level sequence (image tokens plus the task token).
    pub fn seq_len(&self) -> usize {
        self.n_tokens() + usize::from(self.has_task_token())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.levels < 1 || self.c_base == 0 || self.m == 0 || self.heads == 0 || self.ffn_expansion == 0 {
            return fail("levels, c_base, m, heads and ffn_expansion must be positive".into());
        }
        if self.c_base % self.m != 0 {
            return fail(format!("c_base {} not divisible by m {}", self.c_base, self.m));
        }
        let stride = 1 << (self.levels - 1);
        if self.image_hw == 0 || self.image_hw % stride != 0 {
            return fail(format!("image_hw {} not divisible by 2^(levels-1) = {stride}", self.image_hw));
        }
        for level in 0..self.levels {
            let d = self.token_dim(level);
            if d % self.heads != 0 {
                return fail(format!("level {level}: token size {d} not divisible by {} heads", self.heads));
            }
        }
        if self.n_classes < 2 {
            return fail("n_classes must be at least 2".into());
        }
        if self.has_task_token() && self.n_tasks == 0 {
            return fail("task-conditioned model needs at least one task".into());
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        Ok(())
    }
}
