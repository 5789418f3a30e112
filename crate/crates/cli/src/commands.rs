//! Subcommand implementations. Every file is written atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use hidiff_core::analysis::{
    duplication_score, dump_feature_pgm, profile_forward_with, ChannelReduce, DistanceAccumulator,
};
use hidiff_core::attention::{self_attention, AttentionConfig, AttentionWeights, ShiftSchedule};
use hidiff_core::io::write_atomic;
use hidiff_core::observe::{AttentionSite, Observer, Silent};
use hidiff_core::raunet::{select_variant, synthesize, PlanSet, PlanVariant};
use hidiff_core::sampler::{sample, Denoiser, StepContext};
use hidiff_core::weights::ParameterStore;
use hidiff_core::{rng, Error, Result, Tensor};
use serde::Serialize;

use crate::config::RunConfig;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dump_features: bool,
    pub parallel: bool,
}

/// A loaded configuration with command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub weights: PathBuf,
    pub dump_features: bool,
    pub parallel: bool,
}

impl Run {
    pub fn new(mut cfg: RunConfig, opts: Options) -> Self {
        if let Some(seed) = opts.seed {
            cfg.seed = seed;
        }
        let out = opts.out.unwrap_or_else(|| cfg.output_dir.clone());
        let weights = opts.weights.unwrap_or_else(|| out.join("weights.hidw"));
        Self {
            cfg,
            out,
            weights,
            dump_features: opts.dump_features,
            parallel: opts.parallel,
        }
    }
}

/// Worker threads: `HIDIFF_THREADS` when set, else all cores; one unless `parallel`.
pub fn thread_count(parallel: bool) -> usize {
    let cap = std::env::var("HIDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if parallel {
        cap
    } else {
        1
    }
}

pub fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidSpec(format!("thread pool: {e}")))?
        .install(f)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn load_plans(run: &Run, store: ParameterStore) -> Result<PlanSet> {
    let r = run.cfg.sampler.latent_res;
    PlanSet::build(run.cfg.unet_arc(), Arc::new(store), (r[0], r[1]), run.cfg.variants())
}

/// Seeded synthetic parameters written as `HIDW`.
pub fn gen_weights(run: &Run) -> Result<PathBuf> {
    let store = synthesize(&run.cfg.unet(), run.cfg.seed)?;
    store.save(&run.weights)?;
    Ok(run.weights.clone())
}

/// One row of the attention benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBenchRow {
    pub extent: usize,
    pub channels: usize,
    pub heads: usize,
    pub mode: &'static str,
    pub window: (usize, usize),
    pub token_pairs: u64,
    pub min_ns: u64,
    /// Global token pairs over this row's.
    pub pair_ratio: f64,
    /// Global time over this row's.
    pub time_ratio: f64,
}

pub const ATTN_BENCH_HEADER: &str =
    "extent,channels,heads,mode,window_h,window_w,token_pairs,min_ns,pair_ratio,time_ratio";

pub fn attn_bench_csv(rows: &[AttnBenchRow]) -> String {
    let mut s = format!("{ATTN_BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.6},{:.6}",
            r.extent, r.channels, r.heads, r.mode, r.window.0, r.window.1, r.token_pairs, r.min_ns, r.pair_ratio, r.time_ratio
        );
    }
    s
}

fn min_time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    let mut best = u64::MAX;
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        best = best.min(u64::try_from(t.elapsed().as_nanos()).unwrap_or(u64::MAX));
    }
    Ok(best)
}

/// Global against windowed self-attention on a seeded `1 × c × e × e` feature.
pub fn bench_attention(
    extent: usize,
    channels: usize,
    heads: usize,
    window: (usize, usize),
    repeats: usize,
    seed: u64,
) -> Result<Vec<AttnBenchRow>> {
    let x = Tensor::randn([1, channels, extent, extent], seed, 0);
    let w = AttentionWeights::random(channels, heads, seed)?;
    let global = AttentionConfig::global(heads);
    let windowed = AttentionConfig::windowed(heads, window, ShiftSchedule::none());
    let mut rows = Vec::new();
    for (mode, cfg) in [("global", &global), ("windowed", &windowed)] {
        cfg.validate(channels, extent, extent)?;
        let ns = min_time(repeats, || self_attention(&x, &w, cfg, 0, &mut Silent, "bench").map(drop))?;
        rows.push(AttnBenchRow {
            extent,
            channels,
            heads,
            mode,
            window: if mode == "global" { (extent, extent) } else { window },
            token_pairs: cfg.token_pairs(extent, extent)? * heads as u64,
            min_ns: ns.max(1),
            pair_ratio: 0.0,
            time_ratio: 0.0,
        });
    }
    let (gp, gt) = (rows[0].token_pairs as f64, rows[0].min_ns as f64);
    for r in &mut rows {
        r.pair_ratio = gp / r.token_pairs as f64;
        r.time_ratio = gt / r.min_ns as f64;
    }
    Ok(rows)
}

pub fn bench_attn(run: &Run) -> Result<PathBuf> {
    let b = &run.cfg.bench;
    let rows = in_pool(thread_count(run.parallel), || {
        let mut rows = Vec::new();
        for &e in &b.extents {
            let window = b.window.map_or((e / 2, e / 2), |w| (w[0], w[1]));
            rows.extend(bench_attention(e, b.channels, b.heads, window, b.repeats, run.cfg.seed)?);
        }
        Ok(rows)
    })?;
    let path = run.out.join("bench_attn.csv");
    write_text(&path, &attn_bench_csv(&rows))?;
    Ok(path)
}

/// Per-variant latency breakdown; parameters come from `--weights` when that file exists.
pub fn bench_unet(run: &Run) -> Result<Vec<PathBuf>> {
    let store = if run.weights.exists() {
        ParameterStore::load(&run.weights)?
    } else {
        synthesize(&run.cfg.unet(), run.cfg.seed)?
    };
    let plans = load_plans(run, store)?;
    let x = Tensor::randn(run.cfg.latent_shape(), run.cfg.seed, 1);
    let mut paths = Vec::new();
    for v in plans.variants() {
        let report = in_pool(thread_count(run.parallel), || {
            profile_forward_with(plans.get(v)?, &x, 0, run.cfg.bench.repeats, run.parallel)
        })?;
        let path = run.out.join(format!("latency_{v}.csv"));
        write_text(&path, &report.to_csv())?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Default)]
struct BlockCapture {
    blocks: Vec<(String, Tensor)>,
}

impl Observer for BlockCapture {
    fn block_output(&mut self, path: &str, x: &Tensor) {
        self.blocks.push((path.to_string(), x.clone()));
    }
}

/// Routes to the selected plan and, when dumping, keeps the block outputs
/// of the conditional branch of each step.
struct RoutedDenoiser<'a> {
    plans: &'a PlanSet,
    dump: Option<&'a Path>,
    error: Mutex<Option<Error>>,
}

impl Denoiser for RoutedDenoiser<'_> {
    fn predict_noise(&self, x: &Tensor, step: &StepContext, cond: Option<&[f32]>) -> Result<Tensor> {
        let variant = step.variant.unwrap_or(PlanVariant::Vanilla);
        let plan = self.plans.get(variant)?;
        let Some(dir) = self.dump.filter(|_| cond.is_some()) else {
            return plan.forward(x, step.step_index, cond);
        };
        let mut cap = BlockCapture::default();
        let eps = plan.forward_observed(x, step.step_index, cond, &mut cap)?;
        for (block, t) in &cap.blocks {
            let p = dir.join(format!("step_{:03}_{block}.pgm", step.step_index));
            if let Err(e) = dump_feature_pgm(t, ChannelReduce::Mean, &p) {
                self.error.lock().expect("dump error slot").get_or_insert(e);
            }
        }
        Ok(eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetadata {
    pub seed: u64,
    pub steps: usize,
    pub schedule: String,
    pub guidance_scale: f32,
    pub latent_shape: [usize; 4],
    pub t1: usize,
    pub t2: Option<usize>,
    /// Plan used at each denoising step, step 0 first.
    pub variants: Vec<String>,
    pub variant_counts: BTreeMap<String, usize>,
    pub image: String,
}

/// Seeded conditioning vector standing in for a prompt embedding.
pub fn prompt_embedding(run: &Run) -> Vec<f32> {
    rng::normal(run.cfg.seed, rng::name_stream("prompt"), run.cfg.unet().time_embed_dim())
}

pub fn sample_cmd(run: &Run) -> Result<SampleMetadata> {
    let store = ParameterStore::load(&run.weights)?;
    let plans = load_plans(run, store)?;
    let sampler = run.cfg.sampler()?;
    let cond = prompt_embedding(run);
    let features = run.out.join("features");
    let den = RoutedDenoiser {
        plans: &plans,
        dump: run.dump_features.then_some(features.as_path()),
        error: Mutex::new(None),
    };
    let traj = in_pool(thread_count(true), || {
        sample(&den, &sampler, run.cfg.latent_shape(), Some(&cond), true, |_, _| {})
    })?;
    if let Some(e) = den.error.into_inner().expect("dump error slot") {
        return Err(e);
    }
    let image = run.out.join("sample.pgm");
    dump_feature_pgm(&traj.sample, ChannelReduce::Mean, &image)?;
    let variants: Vec<String> = traj.variants.iter().map(|v| v.to_string()).collect();
    let mut variant_counts = BTreeMap::new();
    for v in &variants {
        *variant_counts.entry(v.clone()).or_insert(0) += 1;
    }
    let meta = SampleMetadata {
        seed: run.cfg.seed,
        steps: sampler.schedule.steps(),
        schedule: format!("{:?}", run.cfg.sampler.schedule).to_lowercase(),
        guidance_scale: sampler.guidance_scale,
        latent_shape: run.cfg.latent_shape(),
        t1: sampler.switch.t1,
        t2: sampler.switch.t2,
        variants,
        variant_counts,
        image: "sample.pgm".into(),
    };
    write_json(&run.out.join("metadata.json"), &meta)?;
    Ok(meta)
}

/// `(step, variant, block, per-head distances)`.
pub type DistanceRow = (usize, PlanVariant, String, Vec<f64>);

pub const DISTANCE_HEADER: &str = "step,variant,block,head,mean_distance";
pub const DUPLICATION_HEADER: &str = "step,variant,block,score";

pub fn distance_csv(rows: &[DistanceRow]) -> String {
    let mut s = format!("{DISTANCE_HEADER}\n");
    for (step, v, block, heads) in rows {
        for (h, d) in heads.iter().enumerate() {
            let _ = writeln!(s, "{step},{v},{block},{h},{d:.9}");
        }
    }
    s
}

pub fn duplication_csv(rows: &[(usize, PlanVariant, String, f64)]) -> String {
    let mut s = format!("{DUPLICATION_HEADER}\n");
    for (step, v, block, score) in rows {
        let _ = writeln!(s, "{step},{v},{block},{score:.9}");
    }
    s
}

/// Attention sites measured by `analyze`: the first transformer of each
/// attention level plus the middle block.
pub fn instrumented_paths(run: &Run) -> Vec<String> {
    let u = run.cfg.unet();
    let mut paths: Vec<String> = u
        .levels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.attention.is_some())
        .map(|(i, _)| format!("down.{}.attn.0", i + 1))
        .collect();
    if u.mid_attention.is_some() {
        paths.push("mid.attn".into());
    }
    paths
}

struct AnalysisObserver {
    distances: DistanceAccumulator,
    blocks: BlockCapture,
}

impl Observer for AnalysisObserver {
    fn block_output(&mut self, path: &str, x: &Tensor) {
        self.blocks.block_output(path, x);
    }

    fn wants_attention(&self, path: &str) -> bool {
        self.distances.wants_attention(path)
    }

    fn attention_row(&mut self, site: &AttentionSite<'_>, head: usize, query: usize, probs: &[f32]) {
        self.distances.attention_row(site, head, query, probs);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub distances: Vec<DistanceRow>,
    pub duplication: Vec<(usize, PlanVariant, String, f64)>,
    pub files: Vec<PathBuf>,
}

/// Attention distance, duplication and feature maps at each configured step.
pub fn analyze(run: &Run) -> Result<AnalysisOutput> {
    let store = ParameterStore::load(&run.weights)?;
    let plans = load_plans(run, store)?;
    let switch = run.cfg.switch();
    let paths = instrumented_paths(run);
    let mut out = AnalysisOutput {
        distances: Vec::new(),
        duplication: Vec::new(),
        files: Vec::new(),
    };
    for &step in &run.cfg.analysis.steps {
        let variant = select_variant(step, &switch);
        let x = Tensor::randn(run.cfg.latent_shape(), run.cfg.seed, 1 + step as u64);
        let mut obs = AnalysisObserver {
            distances: DistanceAccumulator::only(paths.clone()),
            blocks: BlockCapture::default(),
        };
        in_pool(thread_count(true), || plans.get(variant)?.forward_observed(&x, step, None, &mut obs))?;
        let results = obs.distances.results();
        for p in &paths {
            let heads = results
                .get(p)
                .cloned()
                .ok_or_else(|| Error::Plan(format!("attention site {p} was not executed")))?;
            out.distances.push((step, variant, p.clone(), heads));
        }
        for (block, t) in &obs.blocks.blocks {
            if t.h() >= 4 && t.w() >= 4 {
                out.duplication.push((step, variant, block.clone(), duplication_score(t)?));
            }
            let f = run.out.join("features").join(format!("step_{step:03}_{block}.pgm"));
            dump_feature_pgm(t, ChannelReduce::Mean, &f)?;
            out.files.push(f);
        }
    }
    let d = run.out.join("attention_distance.csv");
    write_text(&d, &distance_csv(&out.distances))?;
    let s = run.out.join("duplication.csv");
    write_text(&s, &duplication_csv(&out.duplication))?;
    out.files.extend([d, s]);
    Ok(out)
}
