use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use crate::error::{invalid, Error, Result};
use crate::observe::{OpKind, Observer};
use crate::raunet::UNetPlan;
use crate::tensor::Tensor;

/// One `(block, op)` aggregate of a profiled forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyRow {
    pub block: String,
    pub op: OpKind,
    /// Calls per forward pass.
    pub calls: u64,
    /// Minimum over repeats of the per-pass total.
    pub min_ns: u64,
    pub token_pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    pub const CSV_HEADER: &'static str = "block,op,calls,min_ns,token_pairs";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.block, r.op.as_str(), r.calls, r.min_ns, r.token_pairs);
        }
        s
    }

    pub fn total_ns(&self) -> u64 {
        self.rows.iter().map(|r| r.min_ns).sum()
    }

    /// Summed minimum time per op kind.
    pub fn by_op(&self) -> BTreeMap<OpKind, u64> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            *m.entry(r.op).or_insert(0) += r.min_ns;
        }
        m
    }

    /// Fraction of the total spent in `op`.
    pub fn share(&self, op: OpKind) -> f64 {
        let total = self.total_ns();
        if total == 0 {
            return 0.0;
        }
        self.by_op().get(&op).copied().unwrap_or(0) as f64 / total as f64
    }
}

#[derive(Default)]
struct Timer {
    pass: BTreeMap<(String, OpKind), (u64, u64, u64)>,
}

impl Observer for Timer {
    fn timing(&self) -> bool {
        true
    }

    fn op(&mut self, path: &str, kind: OpKind, elapsed: Duration, token_pairs: u64) {
        let e = self.pass.entry((path.to_string(), kind)).or_insert((0, 0, 0));
        e.0 += 1;
        e.1 += u64::try_from(elapsed.as_nanos()).unwrap_or(u64::MAX);
        e.2 += token_pairs;
    }
}

/// Times every operator of one forward pass, single-threaded.
pub fn profile_forward(plan: &UNetPlan, x: &Tensor, step_index: usize, repeats: usize) -> Result<LatencyReport> {
    profile_forward_with(plan, x, step_index, repeats, false)
}

/// As [`profile_forward`]; `parallel` keeps the engine's internal threading,
/// which makes per-op times wall-clock spans of parallel kernels.
pub fn profile_forward_with(
    plan: &UNetPlan,
    x: &Tensor,
    step_index: usize,
    repeats: usize,
    parallel: bool,
) -> Result<LatencyReport> {
    if repeats == 0 {
        return Err(invalid!("repeats must be at least 1"));
    }
    let run = || -> Result<LatencyReport> {
        let mut best: BTreeMap<(String, OpKind), (u64, u64, u64)> = BTreeMap::new();
        for _ in 0..repeats {
            let mut t = Timer::default();
            plan.forward_observed(x, step_index, None, &mut t)?;
            for (k, v) in t.pass {
                best.entry(k)
                    .and_modify(|b| b.1 = b.1.min(v.1))
                    .or_insert(v);
            }
        }
        let rows = best
            .into_iter()
            .map(|((block, op), (calls, min_ns, token_pairs))| LatencyRow {
                block,
                op,
                calls,
                min_ns,
                token_pairs,
            })
            .collect();
        Ok(LatencyReport { rows })
    };
    if parallel {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidSpec(format!("thread pool: {e}")))?
        .install(run)
}
