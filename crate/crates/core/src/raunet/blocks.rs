//! ResNet and transformer sub-blocks, the timestep embedding, and the
//! timing context threaded through them.

use std::time::Instant;

use super::UNetConfig;
use crate::attention::{self_attention, AttentionConfig, AttentionWeights};
use crate::error::{shape_err, Result};
use crate::observe::{Observer, OpKind};
use crate::tensor::{conv2d, gelu, group_norm, layer_norm, linear, silu, ConvSpec, Matrix, Tensor};
use crate::weights::ParameterStore;

pub(crate) struct Ctx<'a> {
    pub store: &'a ParameterStore,
    pub cfg: &'a UNetConfig,
    pub obs: &'a mut dyn Observer,
    timing: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParameterStore, cfg: &'a UNetConfig, obs: &'a mut dyn Observer) -> Self {
        let timing = obs.timing();
        Self {
            store,
            cfg,
            obs,
            timing,
        }
    }

    /// Runs `f`, reporting its wall time under `(path, kind)` when timing.
    pub fn op<T>(&mut self, path: &str, kind: OpKind, pairs: u64, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        if !self.timing {
            return f(self);
        }
        let start = Instant::now();
        let out = f(self)?;
        let elapsed = start.elapsed();
        self.obs.op(path, kind, elapsed, pairs);
        Ok(out)
    }

    fn norm_params(&self, prefix: &str, c: usize) -> Result<(&'a [f32], &'a [f32])> {
        Ok((
            self.store.vector(&format!("{prefix}.gamma"), c)?,
            self.store.vector(&format!("{prefix}.beta"), c)?,
        ))
    }

    pub fn group_norm_silu(&mut self, x: &Tensor, prefix: &str, path: &str) -> Result<Tensor> {
        let c = x.c();
        let (g, b) = self.norm_params(prefix, c)?;
        let eps = self.cfg.norm_eps;
        self.op(path, OpKind::Norm, 0, |_| Ok(group_norm(x, UNetConfig::groups(c), g, b, eps)?.map(silu)))
    }

    pub fn conv(&mut self, x: &Tensor, prefix: &str, c_out: usize, spec: ConvSpec, path: &str) -> Result<Tensor> {
        let w = self.store.conv(prefix, c_out, x.c(), spec.k)?;
        self.op(path, OpKind::Conv, 0, |_| conv2d(x, &w, spec))
    }
}

/// `[cos(t·f_k) …, sin(t·f_k) …]`, `f_k = 10000^(-k/half)`.
pub fn timestep_embedding(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f32> = freqs.iter().map(|f| (f64::from(t) * f).cos() as f32).collect();
    out.extend(freqs.iter().map(|f| (f64::from(t) * f).sin() as f32));
    out
}

/// Timestep MLP output plus the optional conditioning vector, already passed through SiLU.
pub(crate) fn time_features(ctx: &mut Ctx<'_>, step_index: usize, cond: Option<&[f32]>) -> Result<Matrix> {
    let c1 = ctx.cfg.channels(1);
    let temb = ctx.cfg.time_embed_dim();
    let store = ctx.store;
    ctx.op("time_embed", OpKind::LinearOther, 0, |_| {
        let e = Matrix::new(1, c1, timestep_embedding(step_index as f32, c1))?;
        let h = linear(&e, &store.matrix("time_embed.linear1.weight", c1, temb)?, store.vector("time_embed.linear1.bias", temb)?)?
            .map(silu);
        let mut h = linear(&h, &store.matrix("time_embed.linear2.weight", temb, temb)?, store.vector("time_embed.linear2.bias", temb)?)?;
        if let Some(cond) = cond {
            if cond.len() != temb {
                return Err(shape_err!("conditioning vector has {} entries, model expects {temb}", cond.len()));
            }
            h.data_mut().iter_mut().zip(cond).for_each(|(a, b)| *a += b);
        }
        Ok(h.map(silu))
    })
}

pub(crate) fn resnet(ctx: &mut Ctx<'_>, x: &Tensor, temb: &Matrix, path: &str, c_out: usize) -> Result<Tensor> {
    let c_in = x.c();
    let h = ctx.group_norm_silu(x, &format!("{path}.norm1"), path)?;
    let mut h = ctx.conv(&h, &format!("{path}.conv1"), c_out, ConvSpec::SAME3, path)?;
    let store = ctx.store;
    let tdim = temb.cols();
    ctx.op(path, OpKind::LinearOther, 0, |_| {
        let proj = linear(
            temb,
            &store.matrix(&format!("{path}.time_proj.weight"), tdim, c_out)?,
            store.vector(&format!("{path}.time_proj.bias"), c_out)?,
        )?;
        let n = h.n();
        let bias = Matrix::new(n, c_out, proj.data().repeat(n))?;
        h.add_channel_bias(&bias)
    })?;
    let h = ctx.group_norm_silu(&h, &format!("{path}.norm2"), path)?;
    let h = ctx.conv(&h, &format!("{path}.conv2"), c_out, ConvSpec::SAME3, path)?;
    let skip = if c_in != c_out {
        ctx.conv(x, &format!("{path}.skip"), c_out, ConvSpec::POINTWISE, path)?
    } else {
        x.clone()
    };
    ctx.op(path, OpKind::LinearOther, 0, |_| h.add(&skip))
}

/// Pre-norm transformer sub-block: `x + attn(LN(x))`, then `x + FF(LN(x))`.
pub(crate) fn transformer(
    ctx: &mut Ctx<'_>,
    x: &Tensor,
    attn_cfg: &AttentionConfig,
    step_index: usize,
    path: &str,
) -> Result<Tensor> {
    let c = x.c();
    let eps = ctx.cfg.norm_eps;
    let (g, b) = ctx.norm_params(&format!("{path}.norm"), c)?;
    let h = ctx.op(path, OpKind::Norm, 0, |_| layer_norm(x, g, b, eps))?;
    let weights = AttentionWeights::from_store(ctx.store, path, c, attn_cfg.heads)?;
    let pairs = attn_cfg
        .token_pairs(x.h(), x.w())
        .map_err(|e| shape_err!("{path}: {e}"))?
        * (attn_cfg.heads * x.n()) as u64;
    let a = ctx.op(path, OpKind::SelfAttn, pairs, |ctx| {
        self_attention(&h, &weights, attn_cfg, step_index, &mut *ctx.obs, path)
    })?;
    let x = ctx.op(path, OpKind::LinearOther, 0, |_| x.add(&a))?;

    let (g, b) = ctx.norm_params(&format!("{path}.ff_norm"), c)?;
    let h = ctx.op(path, OpKind::Norm, 0, |_| layer_norm(&x, g, b, eps))?;
    let store = ctx.store;
    let ff = ctx.op(path, OpKind::LinearOther, 0, |_| {
        let toks: Vec<Matrix> = (0..h.n())
            .map(|n| {
                let t = linear(
                    &h.to_tokens(n),
                    &store.matrix(&format!("{path}.ff1.weight"), c, 2 * c)?,
                    store.vector(&format!("{path}.ff1.bias"), 2 * c)?,
                )?
                .map(gelu);
                linear(
                    &t,
                    &store.matrix(&format!("{path}.ff2.weight"), 2 * c, c)?,
                    store.vector(&format!("{path}.ff2.bias"), c)?,
                )
            })
            .collect::<Result<_>>()?;
        Tensor::from_tokens(&toks, h.h(), h.w())?.add(&x)
    })?;
    Ok(ff)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(0.0, 8);
        assert_eq!(e, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let e = timestep_embedding(3.0, 8);
        assert!((e[0] - 3f32.cos()).abs() < 1e-6);
        assert!((e[4] - 3f32.sin()).abs() < 1e-6);
        assert_ne!(timestep_embedding(0.0, 16), timestep_embedding(10.0, 16));
    }
}
