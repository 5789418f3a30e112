use std::collections::BTreeSet;
use std::sync::Arc;

use super::blocks::{resnet, time_features, transformer, Ctx};
use super::params::{parameter_specs, Topology};
use super::samplers::rad_spec;
use super::{PlanVariant, RadVariant, UNetConfig};
use crate::error::{shape_err, Error, Result};
use crate::observe::{Observer, OpKind, Silent};
use crate::tensor::{adaptive_avg_pool, conv_out_size, interp, ConvSpec, Tensor};
use crate::weights::ParameterStore;

/// The downsampler a plan runs at the end of a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downsampler {
    /// `C_{3,1,2,1}`.
    Stock,
    /// Resolution-aware, factor `alpha`.
    Rad { alpha: usize, variant: RadVariant },
}

/// The upsampler a plan runs at the start of an up level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsampler {
    /// Interpolate ×2 then `C_{3,1,1,1}`.
    Stock,
    /// Interpolate ×`beta` then `C_{3,1,1,1}`.
    Rau { beta: usize },
}

/// An execution plan over a shared parameter store for one input extent.
#[derive(Debug, Clone)]
pub struct UNetPlan {
    cfg: Arc<UNetConfig>,
    variant: PlanVariant,
    store: Arc<ParameterStore>,
    topo: Topology,
    extents: Vec<(usize, usize)>,
    down: Vec<Downsampler>,
    up: Vec<Upsampler>,
    keys: BTreeSet<String>,
}

fn plan_err(msg: impl Into<String>) -> Error {
    Error::Plan(msg.into())
}

fn down_extent(h: usize, sampler: Downsampler) -> Result<usize> {
    match sampler {
        Downsampler::Stock => conv_out_size(h, ConvSpec::DOWNSAMPLE),
        Downsampler::Rad { alpha, variant } => {
            if !h.is_multiple_of(alpha) {
                return Err(plan_err(format!(
                    "extent {h} is not divisible by downsampling factor {alpha}"
                )));
            }
            match variant {
                RadVariant::ReparamConv => conv_out_size(h, rad_spec(alpha)?),
                RadVariant::ConvThenPool => {
                    Ok(conv_out_size(h, ConvSpec::DOWNSAMPLE)? / (alpha / 2))
                }
            }
        }
    }
}

fn up_factor(sampler: Upsampler) -> usize {
    match sampler {
        Upsampler::Stock => 2,
        Upsampler::Rau { beta } => beta,
    }
}

/// Downsampler per level (index `l-1`) for `variant`; the deepest level has none.
pub fn sampler_layout(cfg: &UNetConfig, variant: PlanVariant) -> Result<(Vec<Downsampler>, Vec<Upsampler>)> {
    let n = cfg.depth() - 1;
    let mut down = vec![Downsampler::Stock; n];
    let mut up = vec![Upsampler::Stock; n];
    let p = cfg.rad_placement;
    match variant {
        PlanVariant::Vanilla => {}
        PlanVariant::RauNet => {
            down[p - 1] = Downsampler::Rad {
                alpha: cfg.alpha,
                variant: cfg.rad_variant,
            };
            up[p - 1] = Upsampler::Rau { beta: cfg.beta };
        }
        PlanVariant::ProgressiveRauNet => {
            if p + 1 > n {
                return Err(plan_err(format!(
                    "progressive plan needs a downsampler at level {}, depth is {}",
                    p + 1,
                    cfg.depth()
                )));
            }
            for l in [p, p + 1] {
                down[l - 1] = Downsampler::Rad {
                    alpha: 4,
                    variant: cfg.rad_variant,
                };
                up[l - 1] = Upsampler::Rau { beta: 4 };
            }
        }
    }
    Ok((down, up))
}

/// Feature extent entering each level when the plan runs at `input`.
///
/// Fails when a skip connection would join tensors of different extents.
pub fn level_extents(
    cfg: &UNetConfig,
    variant: PlanVariant,
    input: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    let (down, up) = sampler_layout(cfg, variant)?;
    let mut extents = vec![input];
    for (l, &d) in down.iter().enumerate() {
        let (h, w) = extents[l];
        let next = (down_extent(h, d)?, down_extent(w, d)?);
        extents.push(next);
    }
    for (l, &u) in up.iter().enumerate() {
        let f = up_factor(u);
        let (h, w) = extents[l + 1];
        if (h * f, w * f) != extents[l] {
            return Err(plan_err(format!(
                "{variant}: level {} upsamples {h}x{w} by {f} but its skip connections are {}x{}",
                l + 1,
                extents[l].0,
                extents[l].1
            )));
        }
    }
    Ok(extents)
}

/// Resolves `variant` of `cfg` against `store` for inputs of extent `input`.
///
/// Checks that every parameter the plan reads exists with the expected
/// dims, that skip connections line up, and that every windowed attention
/// level divides its feature extent.
pub fn build_plan(
    cfg: Arc<UNetConfig>,
    variant: PlanVariant,
    store: Arc<ParameterStore>,
    input: (usize, usize),
) -> Result<UNetPlan> {
    cfg.validate()?;
    let mut keys = BTreeSet::new();
    for spec in parameter_specs(&cfg) {
        store.expect(&spec.name, &spec.dims)?;
        keys.insert(spec.name);
    }
    let extents = level_extents(&cfg, variant, input)?;
    for (l, lvl) in cfg.levels.iter().enumerate() {
        if let Some(a) = &lvl.attention {
            let (h, w) = extents[l];
            a.validate(lvl.channels, h, w)
                .map_err(|e| plan_err(format!("{variant}: level {} attention: {e}", l + 1)))?;
        }
    }
    if let Some(a) = &cfg.mid_attention {
        let (h, w) = *extents.last().expect("depth >= 2");
        a.validate(cfg.levels.last().expect("depth >= 2").channels, h, w)
            .map_err(|e| plan_err(format!("{variant}: mid attention: {e}")))?;
    }
    let (down, up) = sampler_layout(&cfg, variant)?;
    Ok(UNetPlan {
        topo: Topology::new(&cfg),
        cfg,
        variant,
        store,
        extents,
        down,
        up,
        keys,
    })
}

impl UNetPlan {
    pub fn variant(&self) -> PlanVariant {
        self.variant
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &Arc<ParameterStore> {
        &self.store
    }

    pub fn input_extent(&self) -> (usize, usize) {
        self.extents[0]
    }

    /// Extent entering each level, level 1 first.
    pub fn extents(&self) -> &[(usize, usize)] {
        &self.extents
    }

    pub fn downsamplers(&self) -> &[Downsampler] {
        &self.down
    }

    pub fn upsamplers(&self) -> &[Upsampler] {
        &self.up
    }

    /// Names of every stored parameter the plan reads.
    pub fn parameter_keys(&self) -> &BTreeSet<String> {
        &self.keys
    }

    /// Predicted noise for latent `x` at denoising step `step_index`.
    pub fn forward(&self, x: &Tensor, step_index: usize, cond: Option<&[f32]>) -> Result<Tensor> {
        self.forward_observed(x, step_index, cond, &mut Silent)
    }

    pub fn forward_observed(
        &self,
        x: &Tensor,
        step_index: usize,
        cond: Option<&[f32]>,
        obs: &mut dyn Observer,
    ) -> Result<Tensor> {
        let cfg = &*self.cfg;
        let (h0, w0) = self.extents[0];
        if x.c() != cfg.latent_channels || x.h() != h0 || x.w() != w0 {
            return Err(shape_err!(
                "plan expects (n, {}, {h0}, {w0}) latents, got {:?}",
                cfg.latent_channels,
                x.shape()
            ));
        }
        let depth = cfg.depth();
        let mut ctx = Ctx::new(&self.store, cfg, obs);
        let temb = time_features(&mut ctx, step_index, cond)?;

        let mut h = ctx.conv(x, "conv_in", cfg.channels(1), ConvSpec::SAME3, "conv_in")?;
        let mut skips = vec![h.clone()];

        for l in 1..=depth {
            let level = &cfg.levels[l - 1];
            for (r, &(_, c_out)) in self.topo.down[l - 1].iter().enumerate() {
                h = resnet(&mut ctx, &h, &temb, &format!("down.{l}.res.{r}"), c_out)?;
                if let Some(a) = &level.attention {
                    h = transformer(&mut ctx, &h, a, step_index, &format!("down.{l}.attn.{r}"))?;
                }
                skips.push(h.clone());
            }
            if l < depth {
                h = self.downsample(&mut ctx, &h, l)?;
                skips.push(h.clone());
            }
            ctx.obs.block_output(&format!("down.{l}"), &h);
        }

        h = resnet(&mut ctx, &h, &temb, "mid.res.0", self.topo.mid)?;
        if let Some(a) = &cfg.mid_attention {
            h = transformer(&mut ctx, &h, a, step_index, "mid.attn")?;
        }
        h = resnet(&mut ctx, &h, &temb, "mid.res.1", self.topo.mid)?;
        ctx.obs.block_output("mid", &h);

        for l in (1..=depth).rev() {
            let level = &cfg.levels[l - 1];
            if l < depth {
                h = self.upsample(&mut ctx, &h, l)?;
            }
            for (r, &(_, c_out)) in self.topo.up[l - 1].iter().enumerate() {
                let skip = skips.pop().expect("skip stack balanced by topology");
                let path = format!("up.{l}.res.{r}");
                let cat = ctx.op(&path, OpKind::LinearOther, 0, |_| h.concat_channels(&skip))?;
                h = resnet(&mut ctx, &cat, &temb, &path, c_out)?;
                if let Some(a) = &level.attention {
                    h = transformer(&mut ctx, &h, a, step_index, &format!("up.{l}.attn.{r}"))?;
                }
            }
            ctx.obs.block_output(&format!("up.{l}"), &h);
        }

        let h = ctx.group_norm_silu(&h, "out_norm", "out")?;
        ctx.conv(&h, "conv_out", cfg.latent_channels, ConvSpec::SAME3, "conv_out")
    }

    fn downsample(&self, ctx: &mut Ctx<'_>, x: &Tensor, level: usize) -> Result<Tensor> {
        let path = format!("down.{level}.downsampler");
        let c = x.c();
        match self.down[level - 1] {
            Downsampler::Stock => ctx.conv(x, &path, c, ConvSpec::DOWNSAMPLE, &path),
            Downsampler::Rad {
                alpha,
                variant: RadVariant::ReparamConv,
            } => ctx.conv(x, &path, c, rad_spec(alpha)?, &path),
            Downsampler::Rad {
                alpha,
                variant: RadVariant::ConvThenPool,
            } => {
                let y = ctx.conv(x, &path, c, ConvSpec::DOWNSAMPLE, &path)?;
                let k = alpha / 2;
                ctx.op(&path, OpKind::Pool, 0, |_| adaptive_avg_pool(&y, y.h() / k, y.w() / k))
            }
        }
    }

    fn upsample(&self, ctx: &mut Ctx<'_>, x: &Tensor, level: usize) -> Result<Tensor> {
        let path = format!("up.{level}.upsampler");
        let factor = up_factor(self.up[level - 1]);
        let mode = self.cfg.interp_mode;
        let y = ctx.op(&path, OpKind::Interp, 0, |_| interp(x, factor as f64, mode))?;
        ctx.conv(&y, &path, x.c(), ConvSpec::SAME3, &path)
    }
}
