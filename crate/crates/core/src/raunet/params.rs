//! Parameter layout of the U-Net and seeded synthetic initialization.

use std::collections::BTreeSet;

use super::UNetConfig;
use crate::error::Result;
use crate::weights::{Param, ParameterStore};

/// Initialization of one stored tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `±1/√fan_in`.
    Uniform { fan_in: usize },
    Constant(f32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

/// Channel bookkeeping shared by parameter enumeration and the forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Topology {
    /// `(c_in, c_out)` per ResNet sub-block, per down level.
    pub down: Vec<Vec<(usize, usize)>>,
    pub mid: usize,
    /// `(c_in, c_out)` per ResNet sub-block, per up level (index 0 = level 1).
    pub up: Vec<Vec<(usize, usize)>>,
    /// Channels entering the upsampler at the start of each up level `< depth`.
    pub up_sampler: Vec<usize>,
}

impl Topology {
    pub fn new(cfg: &UNetConfig) -> Self {
        let depth = cfg.depth();
        let mut skips = vec![cfg.channels(1)];
        let mut cur = cfg.channels(1);
        let mut down = Vec::with_capacity(depth);
        for l in 1..=depth {
            let c = cfg.channels(l);
            let mut blocks = Vec::new();
            for _ in 0..cfg.resnet_layers {
                blocks.push((cur, c));
                cur = c;
                skips.push(c);
            }
            if l < depth {
                skips.push(cur);
            }
            down.push(blocks);
        }
        let mid = cur;
        let mut up = vec![Vec::new(); depth];
        let mut up_sampler = vec![0; depth];
        for l in (1..=depth).rev() {
            if l < depth {
                up_sampler[l - 1] = cur;
            }
            let c = cfg.channels(l);
            for _ in 0..=cfg.resnet_layers {
                let s = skips.pop().expect("skip stack balanced by construction");
                up[l - 1].push((cur + s, c));
                cur = c;
            }
        }
        debug_assert!(skips.is_empty());
        Self {
            down,
            mid,
            up,
            up_sampler,
        }
    }
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, dims: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, dims, init });
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        let fan_in = c_in * k * k;
        self.push(format!("{prefix}.weight"), vec![c_out, c_in, k, k], Init::Uniform { fan_in });
        self.push(format!("{prefix}.bias"), vec![c_out], Init::Uniform { fan_in });
    }

    fn linear(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        let fan_in = c_in;
        self.push(format!("{prefix}.weight"), vec![c_in, c_out], Init::Uniform { fan_in });
        self.push(format!("{prefix}.bias"), vec![c_out], Init::Uniform { fan_in });
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), vec![c], Init::Constant(1.0));
        self.push(format!("{prefix}.beta"), vec![c], Init::Constant(0.0));
    }

    fn resnet(&mut self, prefix: &str, c_in: usize, c_out: usize, temb: usize) {
        self.norm(&format!("{prefix}.norm1"), c_in);
        self.conv(&format!("{prefix}.conv1"), c_out, c_in, 3);
        self.linear(&format!("{prefix}.time_proj"), temb, c_out);
        self.norm(&format!("{prefix}.norm2"), c_out);
        self.conv(&format!("{prefix}.conv2"), c_out, c_out, 3);
        if c_in != c_out {
            self.conv(&format!("{prefix}.skip"), c_out, c_in, 1);
        }
    }

    fn transformer(&mut self, prefix: &str, c: usize) {
        self.norm(&format!("{prefix}.norm"), c);
        for p in ["q", "k", "v", "out"] {
            self.linear(&format!("{prefix}.{p}"), c, c);
        }
        self.norm(&format!("{prefix}.ff_norm"), c);
        self.linear(&format!("{prefix}.ff1"), c, 2 * c);
        self.linear(&format!("{prefix}.ff2"), 2 * c, c);
    }
}

/// Every parameter the model reads, in a fixed order. Plan-independent:
/// RAD/RAU reuse the stock sampler weights.
pub fn parameter_specs(cfg: &UNetConfig) -> Vec<ParamSpec> {
    let topo = Topology::new(cfg);
    let temb = cfg.time_embed_dim();
    let c1 = cfg.channels(1);
    let depth = cfg.depth();
    let mut s = Specs(Vec::new());

    s.linear("time_embed.linear1", c1, temb);
    s.linear("time_embed.linear2", temb, temb);
    s.conv("conv_in", c1, cfg.latent_channels, 3);

    for l in 1..=depth {
        let attn = cfg.levels[l - 1].attention.is_some();
        for (r, &(ci, co)) in topo.down[l - 1].iter().enumerate() {
            s.resnet(&format!("down.{l}.res.{r}"), ci, co, temb);
            if attn {
                s.transformer(&format!("down.{l}.attn.{r}"), co);
            }
        }
        if l < depth {
            let c = cfg.channels(l);
            s.conv(&format!("down.{l}.downsampler"), c, c, 3);
        }
    }

    s.resnet("mid.res.0", topo.mid, topo.mid, temb);
    if cfg.mid_attention.is_some() {
        s.transformer("mid.attn", topo.mid);
    }
    s.resnet("mid.res.1", topo.mid, topo.mid, temb);

    for l in (1..=depth).rev() {
        if l < depth {
            let c = topo.up_sampler[l - 1];
            s.conv(&format!("up.{l}.upsampler"), c, c, 3);
        }
        let attn = cfg.levels[l - 1].attention.is_some();
        for (r, &(ci, co)) in topo.up[l - 1].iter().enumerate() {
            s.resnet(&format!("up.{l}.res.{r}"), ci, co, temb);
            if attn {
                s.transformer(&format!("up.{l}.attn.{r}"), co);
            }
        }
    }

    s.norm("out_norm", c1);
    s.conv("conv_out", cfg.latent_channels, c1, 3);
    s.0
}

pub fn parameter_keys(cfg: &UNetConfig) -> BTreeSet<String> {
    parameter_specs(cfg).into_iter().map(|s| s.name).collect()
}

/// Seeded synthetic weights for every parameter of `cfg`.
///
/// Each tensor draws from its own stream keyed by its name, so values do not
/// depend on enumeration order.
pub fn synthesize(cfg: &UNetConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    for spec in parameter_specs(cfg) {
        let len: usize = spec.dims.iter().product();
        let data = match spec.init {
            Init::Uniform { fan_in } => crate::rng::uniform(
                seed,
                crate::rng::name_stream(&spec.name),
                len,
                1.0 / (fan_in as f32).sqrt(),
            ),
            Init::Constant(v) => vec![v; len],
        };
        store.insert(spec.name, Param::new(spec.dims, data)?);
    }
    Ok(store)
}
