use crate::attention::AttentionConfig;
use crate::error::{invalid, Result};
use crate::tensor::InterpMode;

/// How a resolution-aware downsampler reaches factor `α`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RadVariant {
    /// Stock 3×3 downsampler weights run with stride `α` and matching padding/dilation.
    ReparamConv,
    /// Stock stride-2 downsampler followed by adaptive average pooling by `α/2`.
    ConvThenPool,
}

/// Which execution plan the U-Net runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlanVariant {
    Vanilla,
    RauNet,
    ProgressiveRauNet,
}

impl PlanVariant {
    pub const ALL: [PlanVariant; 3] = [
        PlanVariant::Vanilla,
        PlanVariant::RauNet,
        PlanVariant::ProgressiveRauNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlanVariant::Vanilla => "vanilla",
            PlanVariant::RauNet => "raunet",
            PlanVariant::ProgressiveRauNet => "progressive_raunet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(PlanVariant::Vanilla),
            "raunet" => Ok(PlanVariant::RauNet),
            "progressive_raunet" | "progressive" => Ok(PlanVariant::ProgressiveRauNet),
            other => Err(invalid!("unknown plan variant {other:?}")),
        }
    }
}

impl std::fmt::Display for PlanVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelConfig {
    pub channels: usize,
    /// Transformer sub-block after each ResNet sub-block when present.
    pub attention: Option<AttentionConfig>,
}

impl LevelConfig {
    pub fn plain(channels: usize) -> Self {
        Self {
            channels,
            attention: None,
        }
    }

    pub fn with_attention(channels: usize, attention: AttentionConfig) -> Self {
        Self {
            channels,
            attention: Some(attention),
        }
    }
}

/// Desk-scale Stable-Diffusion-like U-Net.
///
/// Levels are numbered from 1 (the top, full-resolution block) to `depth`.
/// Every level but the deepest ends in a downsampler; the mirrored up level
/// starts with an upsampler. RAD/RAU replace the sampler pair of level
/// `rad_placement` (and `rad_placement + 1` in the progressive plan).
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Feature extent the model was "trained" at; the vanilla plan's entry extent.
    pub base_res: (usize, usize),
    pub levels: Vec<LevelConfig>,
    pub resnet_layers: usize,
    pub mid_attention: Option<AttentionConfig>,
    pub rad_placement: usize,
    pub alpha: usize,
    pub beta: usize,
    pub rad_variant: RadVariant,
    /// Interpolation used by both the stock upsampler and RAU.
    pub interp_mode: InterpMode,
    pub norm_eps: f64,
}

fn is_supported_factor(f: usize) -> bool {
    matches!(f, 2 | 4 | 8)
}

impl UNetConfig {
    /// Four latent channels, one resnet per level, RAD/RAU ×4 at level 1,
    /// bilinear upsampling, no mid attention.
    pub fn with_levels(levels: Vec<LevelConfig>, base_res: (usize, usize)) -> Self {
        Self {
            latent_channels: 4,
            base_res,
            levels,
            resnet_layers: 1,
            mid_attention: None,
            rad_placement: 1,
            alpha: 4,
            beta: 4,
            rad_variant: RadVariant::ReparamConv,
            interp_mode: InterpMode::Bilinear,
            norm_eps: 1e-5,
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.levels[level - 1].channels
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.levels[0].channels
    }

    /// GroupNorm group count: 32 when it divides `channels`, else the
    /// largest power of two that does.
    pub fn groups(channels: usize) -> usize {
        if channels == 0 {
            return 1;
        }
        1 << channels.trailing_zeros().min(5)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.levels.len() < 2 {
            problems.push(format!("depth must be >= 2, got {}", self.levels.len()));
        }
        if self.latent_channels == 0 {
            problems.push("latent_channels must be >= 1".to_string());
        }
        if self.resnet_layers == 0 {
            problems.push("resnet_layers must be >= 1".to_string());
        }
        for (i, lvl) in self.levels.iter().enumerate() {
            let c = lvl.channels;
            if c == 0 {
                problems.push(format!("level {} has no channels", i + 1));
            }
            if let Some(a) = &lvl.attention {
                if a.heads == 0 || c % a.heads != 0 {
                    problems.push(format!("level {} channels {c} not divisible by {} heads", i + 1, a.heads));
                }
            }
        }
        if let (Some(a), Some(last)) = (&self.mid_attention, self.levels.last()) {
            if a.heads == 0 || last.channels % a.heads != 0 {
                problems.push(format!("mid channels {} not divisible by {} heads", last.channels, a.heads));
            }
        }
        if self.levels.first().is_some_and(|l| l.channels % 2 != 0) {
            problems.push("level 1 channels must be even for the timestep embedding".to_string());
        }
        if self.rad_placement < 1 || self.rad_placement >= self.levels.len().max(1) {
            problems.push(format!(
                "rad_placement {} must name a level with a downsampler (1..{})",
                self.rad_placement,
                self.levels.len()
            ));
        }
        if !is_supported_factor(self.alpha) || !is_supported_factor(self.beta) {
            problems.push(format!(
                "alpha/beta must be one of 2, 4, 8 (got {}/{})",
                self.alpha, self.beta
            ));
        } else if self.alpha != self.beta {
            problems.push(format!(
                "alpha {} and beta {} must match for skip extents to align",
                self.alpha, self.beta
            ));
        }
        if self.norm_eps.is_nan() || self.norm_eps < 0.0 {
            problems.push("norm_eps must be >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid!("{}", problems.join("; ")))
        }
    }
}

/// Step thresholds at which the plan changes during denoising.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchConfig {
    pub t1: usize,
    pub t2: Option<usize>,
    /// Plan per phase: two entries without `t2`, three with it.
    pub variants: Vec<PlanVariant>,
}

impl SwitchConfig {
    /// RAU-Net for `i < t1`, vanilla afterwards.
    pub fn two_phase(t1: usize) -> Self {
        Self {
            t1,
            t2: None,
            variants: vec![PlanVariant::RauNet, PlanVariant::Vanilla],
        }
    }

    /// Progressive for `i < t1`, RAU-Net for `t1 <= i <= t2`, vanilla after.
    pub fn three_phase(t1: usize, t2: usize) -> Self {
        Self {
            t1,
            t2: Some(t2),
            variants: vec![
                PlanVariant::ProgressiveRauNet,
                PlanVariant::RauNet,
                PlanVariant::Vanilla,
            ],
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let phases = if self.t2.is_some() { 3 } else { 2 };
        if self.variants.len() != phases {
            return Err(invalid!(
                "switch with {phases} phases needs {phases} variants, got {}",
                self.variants.len()
            ));
        }
        if self.t1 > steps {
            return Err(invalid!("t1 = {} exceeds {steps} steps", self.t1));
        }
        if let Some(t2) = self.t2 {
            if t2 < self.t1 || t2 > steps {
                return Err(invalid!(
                    "need t1 <= t2 <= steps, got t1={} t2={t2} steps={steps}",
                    self.t1
                ));
            }
        }
        Ok(())
    }
}

/// The plan used at denoising step `step_index` (0 = noisiest).
pub fn select_variant(step_index: usize, switch: &SwitchConfig) -> PlanVariant {
    let phase = match switch.t2 {
        None => usize::from(step_index >= switch.t1),
        Some(t2) => {
            if step_index < switch.t1 {
                0
            } else if step_index <= t2 {
                1
            } else {
                2
            }
        }
    };
    switch.variants[phase]
}
