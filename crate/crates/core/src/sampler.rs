//! Noise schedules, deterministic DDIM stepping, classifier-free guidance,
//! and the closed-form denoiser for Gaussian data used to validate them.
//!
//! Step indices `i` count denoising iterations from the noisiest state
//! (`i = 0`); the diffusion index is `j = N - 1 - i`, and `ᾱ_{-1} = 1`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{invalid, shape_err, Result};
use crate::raunet::{select_variant, PlanSet, PlanVariant, SwitchConfig};
use crate::tensor::Tensor;

/// Virtual training horizon the schedules are defined over.
pub const TRAIN_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    /// `β` linear from `1e-4` to `2e-2`.
    LinearBeta,
    /// Squared-cosine `ᾱ(t) = f(t)/f(0)`, `f(t) = cos²((t/T + s)/(1 + s) · π/2)`, `s = 0.008`,
    /// with per-step `β` capped at 0.999.
    Cosine,
}

/// Cumulative signal coefficients `ᾱ_j` for `j = 0..N`, least noisy first.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(invalid!("schedule needs at least one step"));
        }
        if alpha_bar.iter().any(|a| !(a.is_finite() && *a > 0.0 && *a <= 1.0)) {
            return Err(invalid!("every alpha_bar must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid!("alpha_bar must be strictly decreasing"));
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, j: usize) -> f64 {
        self.alpha_bar[j]
    }

    /// `ᾱ_{j-1}`, with `ᾱ_{-1} = 1`.
    pub fn alpha_bar_prev(&self, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.alpha_bar[j - 1]
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn training_alpha_bar(kind: ScheduleKind) -> Vec<f64> {
    let betas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta => (0..TRAIN_STEPS)
            .map(|t| 1e-4 + (2e-2 - 1e-4) * t as f64 / (TRAIN_STEPS - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| ((t / TRAIN_STEPS as f64 + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
            (0..TRAIN_STEPS)
                .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).min(0.999))
                .collect()
        }
    };
    let mut acc = 1.0;
    betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

/// `N`-step schedule subsampled from the 1000-step training schedule.
///
/// Step `k` takes training index `⌊(k+1)·1000/N⌋ - 1`, so the noisiest step
/// is always the last training index and `N = 1000` is the full schedule.
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 || steps > TRAIN_STEPS {
        return Err(invalid!("step count must be in 1..={TRAIN_STEPS}, got {steps}"));
    }
    let full = training_alpha_bar(kind);
    let alpha_bar = (0..steps)
        .map(|k| full[(k + 1) * TRAIN_STEPS / steps - 1])
        .collect();
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// One deterministic DDIM update (`η = 0`) from diffusion index `j` to `j - 1`.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, j: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
    check_same(x_t, eps)?;
    if j >= schedule.steps() {
        return Err(invalid!("diffusion index {j} outside {} steps", schedule.steps()));
    }
    let a = schedule.alpha_bar(j);
    let a_prev = schedule.alpha_bar_prev(j);
    let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
    let (sp, s1p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    x_t.zip_with(eps, |x, e| {
        let (x, e) = (f64::from(x), f64::from(e));
        let x0 = (x - s1a * e) / sa;
        (sp * x0 + s1p * e) as f32
    })
}

/// `ε_u + s·(ε_c − ε_u)`, evaluated in f64 so that `s = 1` returns `ε_c` exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Result<Tensor> {
    let s = f64::from(scale);
    eps_uncond.zip_with(eps_cond, |u, c| {
        let (u, c) = (f64::from(u), f64::from(c));
        (u + s * (c - u)) as f32
    })
}

/// Data distribution `N(μ, σ² I)`; the optimal noise predictor is closed-form.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianModel {
    /// Mean, `(1, c, h, w)` to broadcast over the batch or full-shaped.
    pub mean: Tensor,
    pub sigma: f64,
}

/// `ε̂ = (x_t − √ᾱ·E[x0|x_t]) / √(1−ᾱ)` for Gaussian data.
pub fn analytic_gaussian_eps(
    x_t: &Tensor,
    j: usize,
    schedule: &NoiseSchedule,
    model: &AnalyticGaussianModel,
) -> Result<Tensor> {
    if j >= schedule.steps() {
        return Err(invalid!("diffusion index {j} outside {} steps", schedule.steps()));
    }
    analytic_eps_at(x_t, schedule.alpha_bar(j), model)
}

fn analytic_eps_at(x_t: &Tensor, a: f64, model: &AnalyticGaussianModel) -> Result<Tensor> {
    if a >= 1.0 {
        return Err(invalid!("noise prediction undefined at alpha_bar = 1"));
    }
    let mu = &model.mean;
    let [n, c, h, w] = x_t.shape();
    let [mn, mc, mh, mw] = mu.shape();
    if (mc, mh, mw) != (c, h, w) || (mn != 1 && mn != n) {
        return Err(shape_err!(
            "model mean {:?} does not broadcast to {:?}",
            mu.shape(),
            x_t.shape()
        ));
    }
    let s2 = model.sigma * model.sigma;
    let (sa, s1a) = (a.sqrt(), (1.0 - a).sqrt());
    let denom = a * s2 + 1.0 - a;
    let per = c * h * w;
    let out = x_t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let m = f64::from(mu.data()[if mn == 1 { i % per } else { i }]);
            let x = f64::from(x);
            let x0 = (s2 * sa * x + (1.0 - a) * m) / denom;
            ((x - sa * x0) / s1a) as f32
        })
        .collect();
    Tensor::new(x_t.shape(), out)
}

/// Per-iteration context handed to a [`Denoiser`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepContext {
    pub step_index: usize,
    pub diffusion_index: usize,
    pub alpha_bar: f64,
    /// Plan chosen by the switching schedule, when routing is enabled.
    pub variant: Option<PlanVariant>,
}

/// Anything that predicts the noise in `x` at a step.
pub trait Denoiser {
    fn predict_noise(&self, x: &Tensor, step: &StepContext, cond: Option<&[f32]>) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, &StepContext, Option<&[f32]>) -> Result<Tensor>,
{
    fn predict_noise(&self, x: &Tensor, step: &StepContext, cond: Option<&[f32]>) -> Result<Tensor> {
        self(x, step, cond)
    }
}

impl Denoiser for AnalyticGaussianModel {
    fn predict_noise(&self, x: &Tensor, step: &StepContext, _cond: Option<&[f32]>) -> Result<Tensor> {
        analytic_eps_at(x, step.alpha_bar, self)
    }
}

/// Routes each step to the plan named by its context (vanilla when unrouted).
impl Denoiser for PlanSet {
    fn predict_noise(&self, x: &Tensor, step: &StepContext, cond: Option<&[f32]>) -> Result<Tensor> {
        let v = step.variant.unwrap_or(PlanVariant::Vanilla);
        self.get(v)?.forward(x, step.step_index, cond)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub switch: SwitchConfig,
    pub guidance_scale: f32,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(invalid!("guidance scale must be finite and >= 0"));
        }
        self.switch.validate(self.schedule.steps())
    }
}

/// Result of a sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub sample: Tensor,
    /// Plan used at each step when routing; empty otherwise.
    pub variants: Vec<PlanVariant>,
}

/// Runs DDIM from seeded noise of `shape` down to an `x0` estimate.
///
/// With `route`, each step's context names `select_variant(i, switch)`. With
/// a conditioning vector, the conditional prediction is used, combined with
/// the unconditional one by `cfg_combine` unless the guidance scale is 1.
/// `on_step` sees the latent after every update.
pub fn sample(
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    shape: [usize; 4],
    cond: Option<&[f32]>,
    route: bool,
    mut on_step: impl FnMut(usize, &Tensor),
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.schedule.steps();
    let mut x = Tensor::randn(shape, cfg.seed, 0);
    let mut variants = Vec::new();
    for i in 0..n {
        let j = n - 1 - i;
        let variant = route.then(|| select_variant(i, &cfg.switch));
        variants.extend(variant);
        let ctx = StepContext {
            step_index: i,
            diffusion_index: j,
            alpha_bar: cfg.schedule.alpha_bar(j),
            variant,
        };
        let eps = match cond {
            None => denoiser.predict_noise(&x, &ctx, None)?,
            Some(c) if cfg.guidance_scale == 1.0 => denoiser.predict_noise(&x, &ctx, Some(c))?,
            Some(c) => {
                let u = denoiser.predict_noise(&x, &ctx, None)?;
                let k = denoiser.predict_noise(&x, &ctx, Some(c))?;
                cfg_combine(&u, &k, cfg.guidance_scale)?
            }
        };
        x = ddim_step(&x, &eps, j, &cfg.schedule)?;
        on_step(i, &x);
    }
    Ok(Trajectory {
        sample: x,
        variants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::new([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn schedule_shapes_and_monotonicity() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            let s = make_schedule(1, kind).unwrap();
            assert_eq!(s.steps(), 1);
            assert!(s.alpha_bar(0) > 0.0 && s.alpha_bar(0) < 1.0);
            let s = make_schedule(50, kind).unwrap();
            assert!(s.values().windows(2).all(|w| w[1] < w[0]));
        }
        let full = make_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        assert!((full.alpha_bar(0) - 0.9999).abs() < 1e-12);
        assert!(make_schedule(0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn schedule_rejects_non_monotone() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.2]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.0]).is_err());
    }

    #[test]
    fn ddim_zero_eps_scales() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.64, 0.25]).unwrap();
        let x = Tensor::randn([1, 2, 3, 3], 1, 0);
        let y = ddim_step(&x, &Tensor::zeros(x.shape()), 1, &s).unwrap();
        let k = (0.64f64 / 0.25).sqrt() as f32;
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - k * b).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_hand_example() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.64, 0.25]).unwrap();
        let y = ddim_step(&scalar(1.0), &scalar(1.0), 1, &s).unwrap();
        assert!((y.data()[0] - 0.814_359).abs() < 1e-5);
        // at j = 0 the update returns x̂0
        let s = NoiseSchedule::from_alpha_bar(vec![0.25]).unwrap();
        let x0 = 0.3f64;
        let xt = (0.5 * x0 + 0.75f64.sqrt() * 0.7) as f32;
        let y = ddim_step(&scalar(xt), &scalar(0.7), 0, &s).unwrap();
        assert!((f64::from(y.data()[0]) - x0).abs() < 1e-6);
    }

    #[test]
    fn ddim_shape_mismatch() {
        let s = make_schedule(4, ScheduleKind::Cosine).unwrap();
        assert!(ddim_step(&Tensor::zeros([1, 1, 2, 2]), &Tensor::zeros([1, 1, 2, 1]), 0, &s).is_err());
        assert!(ddim_step(&scalar(0.0), &scalar(0.0), 4, &s).is_err());
    }

    #[test]
    fn guidance_examples() {
        let u = Tensor::randn([1, 2, 2, 2], 1, 0);
        let c = Tensor::randn([1, 2, 2, 2], 2, 0);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &u, 7.5).unwrap(), u);
        let z = Tensor::zeros(c.shape());
        assert_eq!(cfg_combine(&z, &c, 7.5).unwrap(), c.map(|v| 7.5 * v));
        assert!(cfg_combine(&u, &Tensor::zeros([1, 1, 1, 1]), 2.0).is_err());
    }

    #[test]
    fn analytic_limits() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.81, 0.36]).unwrap();
        let mu = Tensor::new([1, 1, 1, 2], vec![0.5, -1.0]).unwrap();
        let x = Tensor::new([1, 1, 1, 2], vec![0.2, 0.9]).unwrap();
        let delta = AnalyticGaussianModel { mean: mu.clone(), sigma: 0.0 };
        let e = analytic_gaussian_eps(&x, 1, &s, &delta).unwrap();
        for k in 0..2 {
            let want = (x.data()[k] - 0.6 * mu.data()[k]) / 0.8;
            assert!((e.data()[k] - want).abs() < 1e-6);
        }
        let wide = AnalyticGaussianModel { mean: mu.clone(), sigma: 2.0 };
        let at_mode = mu.map(|m| 0.6 * m);
        let e = analytic_gaussian_eps(&at_mode, 1, &s, &wide).unwrap();
        assert!(e.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn analytic_undefined_at_clean_signal() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5]).unwrap();
        let m = AnalyticGaussianModel { mean: scalar(0.0), sigma: 1.0 };
        assert!(matches!(
            analytic_gaussian_eps(&scalar(0.0), 0, &s, &m),
            Err(crate::Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn routing_records_variants() {
        let cfg = SamplerConfig {
            schedule: make_schedule(6, ScheduleKind::Cosine).unwrap(),
            switch: SwitchConfig::two_phase(2),
            guidance_scale: 1.0,
            seed: 3,
        };
        let seen = std::cell::RefCell::new(Vec::new());
        let den = |x: &Tensor, s: &StepContext, _: Option<&[f32]>| {
            seen.borrow_mut().push((s.step_index, s.diffusion_index, s.variant));
            Ok(Tensor::zeros(x.shape()))
        };
        let t = sample(&den, &cfg, [1, 1, 1, 1], None, true, |_, _| {}).unwrap();
        assert_eq!(t.variants.len(), 6);
        assert_eq!(t.variants[..2], [PlanVariant::RauNet; 2]);
        assert_eq!(t.variants[2..], [PlanVariant::Vanilla; 4]);
        assert_eq!(seen.borrow()[0], (0, 5, Some(PlanVariant::RauNet)));
        assert_eq!(seen.borrow()[5].1, 0);
    }

    #[test]
    fn guidance_calls_both_branches() {
        let cfg = SamplerConfig {
            schedule: make_schedule(3, ScheduleKind::LinearBeta).unwrap(),
            switch: SwitchConfig::two_phase(0),
            guidance_scale: 7.5,
            seed: 1,
        };
        let calls = std::cell::Cell::new((0, 0));
        let den = |x: &Tensor, _: &StepContext, c: Option<&[f32]>| {
            let (u, k) = calls.get();
            calls.set(if c.is_some() { (u, k + 1) } else { (u + 1, k) });
            Ok(Tensor::zeros(x.shape()))
        };
        sample(&den, &cfg, [1, 1, 2, 2], Some(&[1.0]), false, |_, _| {}).unwrap();
        assert_eq!(calls.get(), (3, 3));
        let mut unit = cfg.clone();
        unit.guidance_scale = 1.0;
        calls.set((0, 0));
        sample(&den, &unit, [1, 1, 2, 2], Some(&[1.0]), false, |_, _| {}).unwrap();
        assert_eq!(calls.get(), (0, 3));
    }
}
