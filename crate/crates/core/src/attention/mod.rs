//! Multi-head self-attention over NCHW feature maps.
//!
//! [`mhsa_global`] attends over every spatial position. [`msw_msa`] rolls the
//! feature by a step-dependent stride, attends independently inside large
//! non-overlapping windows, rolls back and adds the residual. No masking is
//! applied across the wrapped border.

mod cost;
mod schedule;
mod window;

pub use cost::attn_token_pairs;
pub use schedule::{shift_stride, ShiftPolicy, ShiftSchedule};
pub use window::{window_merge, window_partition, WindowLayout};

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::observe::{AttentionSite, Observer};
use crate::tensor::{dot, linear, softmax_in_place, Matrix, Tensor};
use crate::weights::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Global,
    Windowed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub mode: AttentionMode,
    pub window: (usize, usize),
    pub schedule: ShiftSchedule,
}

impl AttentionConfig {
    pub fn global(heads: usize) -> Self {
        Self {
            heads,
            mode: AttentionMode::Global,
            window: (0, 0),
            schedule: ShiftSchedule::none(),
        }
    }

    pub fn windowed(heads: usize, window: (usize, usize), schedule: ShiftSchedule) -> Self {
        Self {
            heads,
            mode: AttentionMode::Windowed,
            window,
            schedule,
        }
    }

    /// Checks the config against a feature of `channels × h × w`.
    pub fn validate(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if self.heads == 0 || !channels.is_multiple_of(self.heads) {
            return Err(invalid!(
                "{channels} channels cannot be split into {} heads",
                self.heads
            ));
        }
        if self.mode == AttentionMode::Windowed {
            let (wh, ww) = self.window;
            if wh == 0 || ww == 0 || !h.is_multiple_of(wh) || !w.is_multiple_of(ww) {
                return Err(invalid!(
                    "feature {h}x{w} is not divisible into {wh}x{ww} windows"
                ));
            }
            self.schedule.validate(self.window)?;
        }
        Ok(())
    }

    pub fn token_pairs(&self, h: usize, w: usize) -> Result<u64> {
        attn_token_pairs(h, w, self.mode, self.window)
    }
}

/// Fused `c × c` projections (input-major, applied as `x·W + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub wq: Matrix,
    pub bq: Vec<f32>,
    pub wk: Matrix,
    pub bk: Vec<f32>,
    pub wv: Matrix,
    pub bv: Vec<f32>,
    pub wo: Matrix,
    pub bo: Vec<f32>,
}

impl AttentionWeights {
    pub fn new(heads: usize, projections: [(Matrix, Vec<f32>); 4]) -> Result<Self> {
        let [(wq, bq), (wk, bk), (wv, bv), (wo, bo)] = projections;
        let c = wq.rows();
        for (m, b) in [(&wq, &bq), (&wk, &bk), (&wv, &bv), (&wo, &bo)] {
            if m.rows() != c || m.cols() != c || b.len() != c {
                return Err(shape_err!("attention projections must all be {c}x{c}"));
            }
        }
        if heads == 0 || c % heads != 0 {
            return Err(shape_err!("{c} channels cannot be split into {heads} heads"));
        }
        Ok(Self {
            heads,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    /// Seeded synthetic weights, uniform on `±1/√c`.
    pub fn random(channels: usize, heads: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (channels as f32).sqrt();
        let mk = |s: u64| {
            (
                Matrix::new(
                    channels,
                    channels,
                    crate::rng::uniform(seed, 2 * s, channels * channels, bound),
                )
                .expect("square"),
                crate::rng::uniform(seed, 2 * s + 1, channels, bound),
            )
        };
        Self::new(heads, [mk(0), mk(1), mk(2), mk(3)])
    }

    pub fn zeros(channels: usize, heads: usize) -> Result<Self> {
        let z = || (Matrix::zeros(channels, channels), vec![0.0; channels]);
        Self::new(heads, [z(), z(), z(), z()])
    }

    /// Reads `{prefix}.{q,k,v,out}.{weight,bias}`.
    pub fn from_store(store: &ParameterStore, prefix: &str, channels: usize, heads: usize) -> Result<Self> {
        let get = |name: &str| -> Result<(Matrix, Vec<f32>)> {
            Ok((
                store.matrix(&format!("{prefix}.{name}.weight"), channels, channels)?,
                store.vector(&format!("{prefix}.{name}.bias"), channels)?.to_vec(),
            ))
        };
        Self::new(heads, [get("q")?, get("k")?, get("v")?, get("out")?])
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// Streams attention probabilities to an observer while attending.
pub struct Probe<'a, 'o> {
    pub observer: &'o mut dyn Observer,
    pub site: AttentionSite<'a>,
}

/// Rows of one head's projection, transposed to `(head_dim × tokens)`.
fn head_columns(m: &Matrix, head: usize, dh: usize) -> Vec<f32> {
    let t = m.rows();
    let mut out = vec![0f32; dh * t];
    for j in 0..t {
        let row = &m.row(j)[head * dh..(head + 1) * dh];
        for (d, &v) in row.iter().enumerate() {
            out[d * t + j] = v;
        }
    }
    out
}

/// Attention probabilities of `query` against all keys, written into `scores`.
#[inline]
fn query_probs(q: &[f32], kt: &[f32], t: usize, scale: f32, scores: &mut [f32]) {
    scores.iter_mut().for_each(|s| *s = 0.0);
    for (d, &qd) in q.iter().enumerate() {
        let qd = qd * scale;
        for (s, &k) in scores.iter_mut().zip(&kt[d * t..(d + 1) * t]) {
            *s += qd * k;
        }
    }
    softmax_in_place(scores);
}

/// Scaled dot-product attention of a `(tokens × c)` sequence with output projection.
pub fn attend(tokens: &Matrix, weights: &AttentionWeights, mut probe: Option<Probe<'_, '_>>) -> Result<Matrix> {
    let c = weights.channels();
    if tokens.cols() != c {
        return Err(shape_err!(
            "attention over {} features with {c}-channel weights",
            tokens.cols()
        ));
    }
    let t = tokens.rows();
    let dh = weights.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let q = linear(tokens, &weights.wq, &weights.bq)?;
    let k = linear(tokens, &weights.wk, &weights.bk)?;
    let v = linear(tokens, &weights.wv, &weights.bv)?;

    let mut concat = Matrix::zeros(t, c);
    for h in 0..weights.heads {
        let kt = head_columns(&k, h, dh);
        let vt = head_columns(&v, h, dh);
        let mut head_out = vec![0f32; t * dh];
        let run = |i: usize, out: &mut [f32], scores: &mut [f32]| {
            query_probs(&q.row(i)[h * dh..(h + 1) * dh], &kt, t, scale, scores);
            for (d, o) in out.iter_mut().enumerate() {
                *o = dot(scores, &vt[d * t..(d + 1) * t]);
            }
        };
        match probe.as_mut() {
            Some(p) => {
                let mut scores = vec![0f32; t];
                for (i, out) in head_out.chunks_mut(dh).enumerate() {
                    run(i, out, &mut scores);
                    p.observer.attention_row(&p.site, h, i, &scores);
                }
            }
            None => {
                head_out
                    .par_chunks_mut(dh * 16)
                    .enumerate()
                    .for_each_init(
                        || vec![0f32; t],
                        |scores, (blk, chunk)| {
                            for (r, out) in chunk.chunks_mut(dh).enumerate() {
                                run(blk * 16 + r, out, scores);
                            }
                        },
                    );
            }
        }
        let dst = concat.data_mut();
        for (i, row) in head_out.chunks(dh).enumerate() {
            dst[i * c + h * dh..i * c + (h + 1) * dh].copy_from_slice(row);
        }
    }
    linear(&concat, &weights.wo, &weights.bo)
}

fn attend_tensor(
    x: &Tensor,
    weights: &AttentionWeights,
    observer: Option<(&mut dyn Observer, &str, usize)>,
) -> Result<Tensor> {
    let [n, _, h, w] = x.shape();
    let mut outs = Vec::with_capacity(n);
    let mut observer = observer;
    for b in 0..n {
        let tokens = x.to_tokens(b);
        let probe = observer.as_mut().map(|(obs, path, nwin)| Probe {
            observer: &mut **obs,
            site: AttentionSite {
                path,
                sample: b / *nwin,
                window: b % *nwin,
                grid: (h, w),
                heads: weights.heads,
            },
        });
        outs.push(attend(&tokens, weights, probe)?);
    }
    Tensor::from_tokens(&outs, h, w)
}

fn check_channels(x: &Tensor, weights: &AttentionWeights) -> Result<()> {
    if x.c() != weights.channels() {
        return Err(shape_err!(
            "feature has {} channels, attention weights expect {}",
            x.c(),
            weights.channels()
        ));
    }
    Ok(())
}

/// Global multi-head self-attention. No residual is added.
pub fn mhsa_global(x: &Tensor, weights: &AttentionWeights) -> Result<Tensor> {
    check_channels(x, weights)?;
    attend_tensor(x, weights, None)
}

/// Self-attention as configured, without the residual.
///
/// Windowed mode partitions with `shift_stride(step_index)`, attends per
/// window and merges back. When `observer` wants attention at `path`, the
/// probabilities of every query are streamed to it.
pub fn self_attention(
    x: &Tensor,
    weights: &AttentionWeights,
    cfg: &AttentionConfig,
    step_index: usize,
    observer: &mut dyn Observer,
    path: &str,
) -> Result<Tensor> {
    check_channels(x, weights)?;
    if cfg.heads != weights.heads {
        return Err(shape_err!(
            "config has {} heads, weights have {}",
            cfg.heads,
            weights.heads
        ));
    }
    cfg.validate(x.c(), x.h(), x.w()).map_err(|e| match e {
        crate::Error::InvalidSpec(m) => crate::Error::Shape(m),
        other => other,
    })?;
    let wants = observer.wants_attention(path);
    match cfg.mode {
        AttentionMode::Global => {
            attend_tensor(x, weights, wants.then_some((observer, path, 1)))
        }
        AttentionMode::Windowed => {
            let shift = shift_stride(step_index, &cfg.schedule);
            let (windows, layout) = window_partition(x, cfg.window, shift)?;
            let nwin = layout.windows_per_sample();
            let attended = attend_tensor(&windows, weights, wants.then_some((observer, path, nwin)))?;
            window_merge(&attended, &layout)
        }
    }
}

/// `MSW-MSA(x, w, s(t)) + x`.
pub fn msw_msa(x: &Tensor, weights: &AttentionWeights, cfg: &AttentionConfig, step_index: usize) -> Result<Tensor> {
    let y = self_attention(x, weights, cfg, step_index, &mut crate::observe::Silent, "")?;
    y.add(x)
}
