//! JSON run configuration.
//!
//! Every key outside the schema is collected and reported together. Defaults
//! apply only to the keys marked optional below.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use hidiff_core::attention::{AttentionConfig, ShiftPolicy, ShiftSchedule};
use hidiff_core::raunet::{LevelConfig, PlanVariant, RadVariant, SwitchConfig, UNetConfig};
use hidiff_core::sampler::{make_schedule, SamplerConfig, ScheduleKind};
use hidiff_core::tensor::InterpMode;
use hidiff_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct RunConfig {
    pub unet: UnetSection,
    pub attention: AttentionSection,
    pub sampler: SamplerSection,
    pub switch: SwitchSection,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, Deserialize)]
pub struct UnetSection {
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    pub base_res: [usize; 2],
    /// Channels per level, level 1 first.
    pub channels: Vec<usize>,
    /// 1-based levels with transformer sub-blocks.
    #[serde(default)]
    pub attention_levels: Vec<usize>,
    #[serde(default)]
    pub mid_attention: bool,
    #[serde(default = "one")]
    pub resnet_layers: usize,
    pub rad_placement: usize,
    pub alpha: usize,
    pub beta: usize,
    #[serde(default)]
    pub rad_variant: RadVariantName,
    #[serde(default)]
    pub interp_mode: InterpName,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadVariantName {
    #[default]
    ReparamConv,
    ConvThenPool,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpName {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AttentionSection {
    pub heads: usize,
    /// Levels whose attention is windowed; the others stay global.
    #[serde(default)]
    pub msw_levels: Vec<usize>,
    pub window: [usize; 2],
    pub shift_strides: Vec<[usize; 2]>,
    #[serde(default)]
    pub shift_policy: PolicyName,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    #[default]
    Cycle,
    SeededRandom,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SamplerSection {
    pub steps: usize,
    pub schedule: ScheduleName,
    pub guidance_scale: f32,
    /// Latent extent sampled at.
    pub latent_res: [usize; 2],
    #[serde(default = "one")]
    pub batch: usize,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    LinearBeta,
    Cosine,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SwitchSection {
    pub t1: usize,
    #[serde(default)]
    pub t2: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct BenchSection {
    /// Square extents benchmarked by `bench-attn`.
    #[serde(default = "default_bench_extents")]
    pub extents: Vec<usize>,
    #[serde(default = "default_bench_channels")]
    pub channels: usize,
    #[serde(default = "default_bench_heads")]
    pub heads: usize,
    /// Window for `bench-attn`; half the extent when absent.
    #[serde(default)]
    pub window: Option<[usize; 2]>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            extents: default_bench_extents(),
            channels: default_bench_channels(),
            heads: default_bench_heads(),
            window: None,
            repeats: default_repeats(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct AnalysisSection {
    /// Denoising step indices analyzed.
    #[serde(default = "default_analysis_steps")]
    pub steps: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            steps: default_analysis_steps(),
        }
    }
}

fn default_latent_channels() -> usize {
    4
}
fn one() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-5
}
fn default_bench_extents() -> Vec<usize> {
    vec![128]
}
fn default_bench_channels() -> usize {
    64
}
fn default_bench_heads() -> usize {
    8
}
fn default_repeats() -> usize {
    2
}
fn default_analysis_steps() -> Vec<usize> {
    vec![0]
}

fn invalid(msg: String) -> Error {
    Error::InvalidSpec(msg)
}

impl RunConfig {
    /// Parses and validates; unknown keys and invariant violations are all listed.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Format(format!("config: {e}")))?;
        if !unknown.is_empty() {
            return Err(invalid(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn attention_for(&self, level: usize) -> AttentionConfig {
        let a = &self.attention;
        if a.msw_levels.contains(&level) {
            let schedule = ShiftSchedule {
                strides: a.shift_strides.iter().map(|s| (s[0], s[1])).collect(),
                policy: match a.shift_policy {
                    PolicyName::Cycle => ShiftPolicy::Cycle,
                    PolicyName::SeededRandom => ShiftPolicy::SeededRandom,
                },
                seed: self.seed,
            };
            AttentionConfig::windowed(a.heads, (a.window[0], a.window[1]), schedule)
        } else {
            AttentionConfig::global(a.heads)
        }
    }

    pub fn unet(&self) -> UNetConfig {
        let u = &self.unet;
        let levels = u
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LevelConfig {
                channels: c,
                attention: u.attention_levels.contains(&(i + 1)).then(|| self.attention_for(i + 1)),
            })
            .collect();
        UNetConfig {
            latent_channels: u.latent_channels,
            base_res: (u.base_res[0], u.base_res[1]),
            levels,
            resnet_layers: u.resnet_layers,
            mid_attention: u.mid_attention.then(|| AttentionConfig::global(self.attention.heads)),
            rad_placement: u.rad_placement,
            alpha: u.alpha,
            beta: u.beta,
            rad_variant: match u.rad_variant {
                RadVariantName::ReparamConv => RadVariant::ReparamConv,
                RadVariantName::ConvThenPool => RadVariant::ConvThenPool,
            },
            interp_mode: match u.interp_mode {
                InterpName::Nearest => InterpMode::Nearest,
                InterpName::Bilinear => InterpMode::Bilinear,
            },
            norm_eps: u.norm_eps,
        }
    }

    pub fn unet_arc(&self) -> Arc<UNetConfig> {
        Arc::new(self.unet())
    }

    pub fn switch(&self) -> SwitchConfig {
        match self.switch.t2 {
            None => SwitchConfig::two_phase(self.switch.t1),
            Some(t2) => SwitchConfig::three_phase(self.switch.t1, t2),
        }
    }

    pub fn schedule_kind(&self) -> ScheduleKind {
        match self.sampler.schedule {
            ScheduleName::LinearBeta => ScheduleKind::LinearBeta,
            ScheduleName::Cosine => ScheduleKind::Cosine,
        }
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            schedule: make_schedule(self.sampler.steps, self.schedule_kind())?,
            switch: self.switch(),
            guidance_scale: self.sampler.guidance_scale,
            seed: self.seed,
        })
    }

    /// Plans the switching schedule can select.
    pub fn variants(&self) -> Vec<PlanVariant> {
        self.switch().variants
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        let s = &self.sampler;
        [s.batch, self.unet.latent_channels, s.latent_res[0], s.latent_res[1]]
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let depth = self.unet.channels.len();
        for (name, levels) in [
            ("unet.attention_levels", &self.unet.attention_levels),
            ("attention.msw_levels", &self.attention.msw_levels),
        ] {
            if let Some(l) = levels.iter().find(|&&l| l == 0 || l > depth) {
                problems.push(format!("{name}: level {l} outside 1..={depth}"));
            }
        }
        if let Some(l) = self
            .attention
            .msw_levels
            .iter()
            .find(|l| !self.unet.attention_levels.contains(l))
        {
            problems.push(format!("attention.msw_levels: level {l} has no attention"));
        }
        if let Err(e) = self.unet().validate() {
            problems.push(format!("unet: {e}"));
        }
        if !self.attention.msw_levels.is_empty() {
            let a = self.attention_for(self.attention.msw_levels[0]);
            if a.window.0 == 0 || a.window.1 == 0 {
                problems.push("attention.window must be positive".to_string());
            } else if let Err(e) = a.schedule.validate(a.window) {
                problems.push(format!("attention: {e}"));
            }
        }
        if self.sampler.batch == 0 {
            problems.push("sampler.batch must be >= 1".to_string());
        }
        match self.sampler() {
            Ok(s) => {
                if let Err(e) = s.validate() {
                    problems.push(format!("sampler/switch: {e}"));
                }
            }
            Err(e) => problems.push(format!("sampler: {e}")),
        }
        if let Some(&s) = self.analysis.steps.iter().find(|&&s| s >= self.sampler.steps) {
            problems.push(format!("analysis.steps: step {s} outside 0..{}", self.sampler.steps));
        }
        let b = &self.bench;
        if b.repeats == 0 || b.extents.is_empty() || b.channels == 0 || b.heads == 0 || !b.channels.is_multiple_of(b.heads) {
            problems.push("bench: need repeats >= 1, extents, and channels divisible by heads".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TINY: &str = r#"{
        "unet": {"base_res": [8, 8], "channels": [8, 16], "attention_levels": [1, 2],
                 "mid_attention": true, "rad_placement": 1, "alpha": 2, "beta": 2},
        "attention": {"heads": 2, "msw_levels": [1], "window": [4, 4], "shift_strides": [[0, 0], [2, 2]]},
        "sampler": {"steps": 4, "schedule": "cosine", "guidance_scale": 7.5, "latent_res": [8, 8]},
        "switch": {"t1": 2},
        "seed": 1,
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_json(TINY).unwrap();
        let u = c.unet();
        assert_eq!(u.depth(), 2);
        assert_eq!(u.levels[0].attention.as_ref().unwrap().window, (4, 4));
        assert_eq!(u.levels[1].attention.as_ref().unwrap().window, (0, 0));
        assert_eq!(c.latent_shape(), [1, 4, 8, 8]);
        assert_eq!(c.variants(), vec![PlanVariant::RauNet, PlanVariant::Vanilla]);
        assert_eq!(c.bench.extents, vec![128]);
    }

    #[test]
    fn lists_every_unknown_key() {
        let text = TINY.replace("\"seed\": 1", "\"seed\": 1, \"colour\": 3").replace("\"t1\": 2", "\"t1\": 2, \"t3\": 9");
        let err = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("colour") && err.contains("switch.t3"), "{err}");
    }

    #[test]
    fn lists_every_invariant_violation() {
        let text = TINY.replace("\"alpha\": 2", "\"alpha\": 3").replace("\"t1\": 2", "\"t1\": 9");
        let err = RunConfig::from_json(&text).unwrap_err();
        assert_eq!(err.code(), "invalid_spec");
        let msg = err.to_string();
        assert!(msg.contains("alpha") && msg.contains("t1"), "{msg}");
    }

    #[test]
    fn malformed_json_is_a_format_error() {
        assert_eq!(RunConfig::from_json("{").unwrap_err().code(), "format_error");
        let missing = TINY.replace("\"seed\": 1,", "");
        assert_eq!(RunConfig::from_json(&missing).unwrap_err().code(), "format_error");
    }
}
