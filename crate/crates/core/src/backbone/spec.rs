use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Activation;

/// Number of layout categories predicted by the head.
pub const NUM_CLASSES: usize = 21;

/// One depthwise-separable block: depthwise `L×L` over `M` channels, then a
/// pointwise `1×1` projection from `M` to `N` channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub use_se: bool,
    pub activation: Activation,
}

impl BlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, use_se: bool) -> Self {
        BlockSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            use_se,
            activation: Activation::HSwish,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd and ≥ 1", self.kernel)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("stride {} must be 1 or 2", self.stride)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channels must be ≥ 1".into()));
        }
        Ok(())
    }

    /// `L·L·1·M + 1·1·M·N`: kernel weights of the depthwise and pointwise convs.
    pub fn separable_weight_count(&self) -> usize {
        let (l, m, n) = (self.kernel, self.in_channels, self.out_channels);
        l * l * m + m * n
    }

    /// `L·L·M·N`: kernel weights of a standard convolution with the same shape.
    pub fn standard_weight_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels
    }

    /// Separable/standard cost ratio as an unreduced rational `(num, den)`.
    pub fn cost_ratio(&self) -> (usize, usize) {
        (self.separable_weight_count(), self.standard_weight_count())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub boxes_per_cell: usize,
}

impl HeadSpec {
    /// Objectness, class logits, then `(dx, dy, log w, log h)`.
    pub fn channels(&self) -> usize {
        1 + self.num_classes + 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub neck_channels: usize,
    pub head: HeadSpec,
    pub width_multiplier: f64,
    pub se_reduction: usize,
    pub activation: Activation,
}

/// Rounds `channels` to the nearest multiple of `divisor`, never below `divisor`.
pub fn make_divisible(channels: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    (((channels + d / 2.0) / d).floor() as usize * divisor).max(divisor)
}

impl ModelSpec {
    /// Default desk-scale student: stem 3×3/2 (1→16), five separable blocks, 64-channel neck.
    pub fn student() -> Self {
        let blocks = vec![
            BlockSpec::new(16, 24, 2, false),
            BlockSpec::new(24, 32, 1, false),
            BlockSpec::new(32, 48, 2, true),
            BlockSpec::new(48, 64, 1, true),
            BlockSpec::new(64, 64, 1, true),
        ];
        ModelSpec {
            name: "student".into(),
            stem: StemSpec {
                in_channels: 1,
                out_channels: 16,
                kernel: 3,
                stride: 2,
            },
            blocks,
            neck_channels: 64,
            head: HeadSpec {
                num_classes: NUM_CLASSES,
                boxes_per_cell: 1,
            },
            width_multiplier: 1.0,
            se_reduction: 4,
            activation: Activation::HSwish,
        }
    }

    /// Same topology as [`ModelSpec::student`] at width multiplier 2.0.
    pub fn teacher() -> Self {
        let mut t = Self::student().scaled(2.0);
        t.name = "teacher".into();
        t
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "student" => Ok(Self::student()),
            "teacher" => Ok(Self::teacher()),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected \"teacher\" or \"student\")"
            ))),
        }
    }

    /// Multiplies every internal channel count by `multiplier`, rounding to a
    /// multiple of the SE reduction. Image input channels are untouched.
    pub fn scaled(&self, multiplier: f64) -> Self {
        let r = self.se_reduction;
        let c = |v: usize| make_divisible(v as f64 * multiplier, r);
        let mut out = self.clone();
        out.stem.out_channels = c(self.stem.out_channels);
        for b in &mut out.blocks {
            b.in_channels = c(b.in_channels);
            b.out_channels = c(b.out_channels);
        }
        out.neck_channels = c(self.neck_channels);
        out.width_multiplier = self.width_multiplier * multiplier;
        out
    }

    pub fn total_stride(&self) -> usize {
        self.stem.stride * self.blocks.iter().map(|b| b.stride).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem.kernel % 2 == 0 || self.stem.in_channels == 0 || self.stem.out_channels == 0 {
            return Err(Error::Config("stem needs an odd kernel and positive channels".into()));
        }
        if self.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be ≥ 1".into()));
        }
        let mut channels = self.stem.out_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != channels {
                return Err(Error::Config(format!(
                    "block {i} expects {} input channels but receives {channels}",
                    b.in_channels
                )));
            }
            if b.use_se && b.out_channels % self.se_reduction != 0 {
                return Err(Error::Config(format!(
                    "block {i}: {} channels not divisible by SE reduction {}",
                    b.out_channels, self.se_reduction
                )));
            }
            channels = b.out_channels;
        }
        if self.neck_channels == 0 || self.head.num_classes == 0 || self.head.boxes_per_cell != 1 {
            return Err(Error::Config(
                "neck channels and classes must be positive; one box per cell".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form separable kernel-weight count summed over all blocks.
    pub fn separable_weight_count(&self) -> usize {
        self.blocks.iter().map(BlockSpec::separable_weight_count).sum()
    }
}
