//! Instrumentation hooks threaded through the U-Net forward pass.
//!
//! The default [`Observer`] methods do nothing; the analysis module supplies
//! observers that time operators, keep block outputs, or stream attention
//! probabilities. Observers never change numerics.

use std::time::Duration;

use crate::tensor::Tensor;

/// Operator category used by the latency breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv,
    SelfAttn,
    Norm,
    Interp,
    Pool,
    LinearOther,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::SelfAttn => "self_attn",
            OpKind::Norm => "norm",
            OpKind::Interp => "interp",
            OpKind::Pool => "pool",
            OpKind::LinearOther => "linear_other",
        }
    }
}

/// Where a streamed attention row comes from.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSite<'a> {
    /// Block path of the transformer sub-block, e.g. `down.1.attn.0`.
    pub path: &'a str,
    pub sample: usize,
    /// Window index in row-major window order; 0 for global attention.
    pub window: usize,
    /// Spatial extent of the token grid the probabilities range over.
    pub grid: (usize, usize),
    pub heads: usize,
}

pub trait Observer {
    /// Whether the forward pass should time operators.
    fn timing(&self) -> bool {
        false
    }

    fn op(&mut self, _path: &str, _kind: OpKind, _elapsed: Duration, _token_pairs: u64) {}

    fn block_output(&mut self, _path: &str, _x: &Tensor) {}

    /// Whether attention at `path` should stream its probability rows.
    fn wants_attention(&self, _path: &str) -> bool {
        false
    }

    /// One query's probabilities over all keys of its grid, for one head.
    fn attention_row(&mut self, _site: &AttentionSite<'_>, _head: usize, _query: usize, _probs: &[f32]) {}
}

/// Observer that records nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct Silent;

impl Observer for Silent {}
