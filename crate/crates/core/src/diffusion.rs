//! Noise schedules, forward noising, the deterministic Euler sampler and the
//! denoiser contract with a few analytic toy denoisers.
//!
//! The sampler works in the variance-exploding parameterization
//! `x = x0 + sigma * eps` where `sigma_t = sqrt((1 - alpha_bar_t) / alpha_bar_t)`.
//! A denoiser predicts `eps`; one Euler step from `sigma_t` to `sigma_next` is
//! `x' = x + (sigma_next - sigma_t) * eps_hat`. No noise is injected.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{cross_frame_attention, self_attention, KvCache, TokenMatrix};
use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// Named beta schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `T` betas spaced linearly from `beta_start` to `beta_end`.
    Linear { beta_start: f64, beta_end: f64 },
    /// A linear ramp over `train_steps` fine steps, read at `T` evenly spaced
    /// indices. Each coarse step's beta is `1 - alpha_bar_t / alpha_bar_{t-1}`.
    StridedLinear {
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::StridedLinear {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

/// Betas, cumulative `alpha_bar` and sampler noise levels for `T` steps.
///
/// Steps are 1-based: `beta(t)` and `alpha_bar(t)` for `t = 1..=T`, and
/// `sigma(t)` for `t = 0..=T` with `sigma(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Validation(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let mut sigmas = vec![0.0];
        sigmas.extend(alpha_bar.iter().map(|ab| ((1.0 - ab) / ab).sqrt()));
        if sigmas.windows(2).any(|w| w[1] <= w[0] || w[1].is_nan()) || sigmas.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("noise levels are not strictly increasing".into()));
        }
        Ok(Self {
            betas,
            alpha_bar,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Noise levels indexed by step, `sigmas()[0] == 0`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Validation("step count must be at least 1".into()));
    }
    let ramp = |n: usize, start: f64, end: f64| -> Vec<f64> {
        if n == 1 {
            return vec![start];
        }
        (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect()
    };
    let betas = match kind {
        ScheduleKind::Linear { beta_start, beta_end } => ramp(steps, beta_start, beta_end),
        ScheduleKind::StridedLinear {
            train_steps,
            beta_start,
            beta_end,
        } => {
            if train_steps < steps {
                return Err(Error::Validation(format!(
                    "{train_steps} fine steps cannot be strided into {steps}"
                )));
            }
            let fine = ramp(train_steps, beta_start, beta_end);
            if let Some(b) = fine.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
                return Err(Error::Validation(format!("beta {b} outside (0, 1)")));
            }
            let mut fine_bar = Vec::with_capacity(train_steps);
            let mut acc = 1.0;
            for b in &fine {
                acc *= 1.0 - b;
                fine_bar.push(acc);
            }
            let mut prev = 1.0;
            (1..=steps)
                .map(|t| {
                    let ab = fine_bar[t * train_steps / steps - 1];
                    let beta = 1.0 - ab / prev;
                    prev = ab;
                    beta
                })
                .collect()
        }
    };
    NoiseSchedule::from_betas(betas)
}

fn check_shape(a: &LatentGrid, b: &LatentGrid, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!("{what}: shape {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Closed-form marginal `z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) noise`.
pub fn forward_noise(z0: &LatentGrid, t: usize, noise: &LatentGrid, schedule: &NoiseSchedule) -> Result<LatentGrid> {
    check_shape(z0, noise, "forward_noise")?;
    if t == 0 || t > schedule.steps() {
        return Err(Error::Validation(format!("step {t} outside 1..={}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(noise, |z, n| (a * z as f64 + b * n as f64) as f32)
}

/// One transition of the forward kernel: `z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) noise`.
pub fn forward_step(z_prev: &LatentGrid, t: usize, noise: &LatentGrid, schedule: &NoiseSchedule) -> Result<LatentGrid> {
    check_shape(z_prev, noise, "forward_step")?;
    if t == 0 || t > schedule.steps() {
        return Err(Error::Validation(format!("step {t} outside 1..={}", schedule.steps())));
    }
    let beta = schedule.beta(t);
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    z_prev.zip_map(noise, |z, n| (a * z as f64 + b * n as f64) as f32)
}

/// Standard-normal grid drawn from a seeded ChaCha8 stream.
pub fn standard_normal_grid(channels: usize, height: usize, width: usize, seed: u64) -> Result<LatentGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentGrid::from_fn(channels, height, width, |_, _, _| {
        let n: f64 = StandardNormal.sample(&mut rng);
        n as f32
    })
}

/// Conditioning handed to every denoiser call: a name plus numeric
/// parameters the toy denoisers interpret.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConditionToken {
    pub name: String,
    pub params: Vec<f32>,
}

impl ConditionToken {
    pub fn new(name: impl Into<String>, params: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            params,
        }
    }

    /// Per-channel `(gain, bias)`: empty params mean identity, two params are
    /// shared by all channels, `2 * channels` params are per channel.
    pub fn style(&self, channels: usize) -> Result<Vec<(f32, f32)>> {
        match self.params.len() {
            0 => Ok(vec![(1.0, 0.0); channels]),
            2 => Ok(vec![(self.params[0], self.params[1]); channels]),
            n if n == 2 * channels => Ok(self.params.chunks(2).map(|p| (p[0], p[1])).collect()),
            n => Err(Error::Contract(format!(
                "condition '{}' has {n} params, expected 0, 2 or {}",
                self.name,
                2 * channels
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Every frame attends to its own tokens.
    SelfOnly,
    /// Every frame attends to the anchor frame's cached keys and values.
    #[default]
    CrossFrame,
}

/// Per-call context. The sampler updates `timestep` before each call.
#[derive(Debug)]
pub struct StepContext<'a> {
    /// Position of the frame in translation order; `0` is the anchor.
    pub frame_index: usize,
    pub timestep: usize,
    pub attention: AttentionMode,
    /// Structure signal for the current frame, at latent resolution.
    pub control: Option<&'a LatentGrid>,
    pub kv_cache: Option<&'a mut KvCache>,
}

impl<'a> StepContext<'a> {
    pub fn new(frame_index: usize) -> Self {
        Self {
            frame_index,
            timestep: 0,
            attention: AttentionMode::default(),
            control: None,
            kv_cache: None,
        }
    }

    pub fn with_attention(mut self, mode: AttentionMode) -> Self {
        self.attention = mode;
        self
    }

    pub fn with_control(mut self, control: &'a LatentGrid) -> Self {
        self.control = Some(control);
        self
    }

    pub fn with_kv_cache(mut self, cache: &'a mut KvCache) -> Self {
        self.kv_cache = Some(cache);
        self
    }

    pub fn is_anchor(&self) -> bool {
        self.frame_index == 0
    }
}

/// Predicts the noise component of `z` at noise level `sigma`.
///
/// Implementations must be deterministic and return a finite grid shaped
/// like `z`.
pub trait Denoiser {
    fn evaluate(
        &self,
        z: &LatentGrid,
        sigma: f64,
        cond: &ConditionToken,
        ctx: &mut StepContext<'_>,
    ) -> Result<LatentGrid>;
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn evaluate(
        &self,
        z: &LatentGrid,
        sigma: f64,
        cond: &ConditionToken,
        ctx: &mut StepContext<'_>,
    ) -> Result<LatentGrid> {
        (**self).evaluate(z, sigma, cond, ctx)
    }
}

pub fn euler_step(
    denoiser: &dyn Denoiser,
    z: &LatentGrid,
    sigma_t: f64,
    sigma_next: f64,
    cond: &ConditionToken,
    ctx: &mut StepContext<'_>,
) -> Result<LatentGrid> {
    if !(sigma_t > sigma_next && sigma_next >= 0.0) {
        return Err(Error::Validation(format!(
            "Euler step needs sigma_t > sigma_next >= 0, got {sigma_t} -> {sigma_next}"
        )));
    }
    let eps = denoiser.evaluate(z, sigma_t, cond, ctx)?;
    if !eps.same_shape(z) {
        return Err(Error::Contract(format!(
            "denoiser returned {:?} for latent {:?}",
            eps.dims(),
            z.dims()
        )));
    }
    let dt = sigma_next - sigma_t;
    z.zip_map(&eps, |x, e| (x as f64 + dt * e as f64) as f32)
}

/// Latents indexed by step: `at(t)` for `t = T..=1` is the latent fed to the
/// denoiser at step `t` (after any hook replacement); `at(0)` is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<LatentGrid>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn at(&self, t: usize) -> &LatentGrid {
        &self.states[t]
    }

    pub fn final_latent(&self) -> &LatentGrid {
        &self.states[0]
    }

    pub fn into_final(mut self) -> LatentGrid {
        self.states.swap_remove(0)
    }
}

/// Runs the Euler sampler from `sigma_T` down to `0`.
///
/// Before each denoiser call at step `t`, `hook(t, z)` may return a
/// replacement for the working latent; the replacement is both denoised and
/// stepped from.
pub fn sample<H>(
    denoiser: &dyn Denoiser,
    z_init: &LatentGrid,
    schedule: &NoiseSchedule,
    cond: &ConditionToken,
    ctx: &mut StepContext<'_>,
    mut hook: H,
) -> Result<Trajectory>
where
    H: FnMut(usize, LatentGrid) -> Result<LatentGrid>,
{
    let steps = schedule.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut z = z_init.clone();
    for t in (1..=steps).rev() {
        let replaced = hook(t, z)?;
        if !replaced.same_shape(z_init) {
            return Err(Error::Contract(format!(
                "hook at step {t} returned {:?}, expected {:?}",
                replaced.dims(),
                z_init.dims()
            )));
        }
        ctx.timestep = t;
        z = euler_step(denoiser, &replaced, schedule.sigma(t), schedule.sigma(t - 1), cond, ctx)?;
        states.push(replaced);
    }
    states.push(z);
    states.reverse();
    Ok(Trajectory { states })
}

/// Hook that leaves the latent untouched.
pub fn no_hook(_: usize, z: LatentGrid) -> Result<LatentGrid> {
    Ok(z)
}

/// Predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn evaluate(&self, z: &LatentGrid, _: f64, _: &ConditionToken, _: &mut StepContext<'_>) -> Result<LatentGrid> {
        LatentGrid::zeros(z.channels(), z.height(), z.width())
    }
}

/// Knows the clean latent and predicts `(z - clean) / sigma`.
#[derive(Debug, Clone)]
pub struct CleanOracle {
    pub clean: LatentGrid,
}

impl Denoiser for CleanOracle {
    fn evaluate(&self, z: &LatentGrid, sigma: f64, _: &ConditionToken, _: &mut StepContext<'_>) -> Result<LatentGrid> {
        check_shape(z, &self.clean, "oracle")?;
        z.zip_map(&self.clean, |x, c| ((x as f64 - c as f64) / sigma) as f32)
    }
}

/// Exact noise prediction for data distributed `N(target, variance)` per cell.
#[inline]
fn gaussian_eps(x: f64, target: f64, variance: f64, sigma: f64) -> f64 {
    (x - target) * sigma / (variance + sigma * sigma)
}

/// Optimal denoiser for i.i.d. Gaussian data `N(mean, variance)`.
#[derive(Debug, Clone, Copy)]
pub struct AnalyticGaussian {
    pub mean: f32,
    pub variance: f32,
}

impl Denoiser for AnalyticGaussian {
    fn evaluate(&self, z: &LatentGrid, sigma: f64, _: &ConditionToken, _: &mut StepContext<'_>) -> Result<LatentGrid> {
        let (m, v) = (self.mean as f64, self.variance as f64);
        z.map(|x| gaussian_eps(x as f64, m, v, sigma) as f32)
    }
}

/// Per-channel styled target `gain * control + bias` (or just `bias` without control).
fn styled_target(z: &LatentGrid, cond: &ConditionToken, control: Option<&LatentGrid>) -> Result<LatentGrid> {
    let style = cond.style(z.channels())?;
    match control {
        Some(c) => {
            if !c.same_shape(z) {
                return Err(Error::Contract(format!(
                    "control {:?} does not match latent {:?}",
                    c.dims(),
                    z.dims()
                )));
            }
            LatentGrid::from_fn(z.channels(), z.height(), z.width(), |ch, y, x| {
                let (g, b) = style[ch];
                g * c.get(ch, y, x) + b
            })
        }
        None => LatentGrid::from_fn(z.channels(), z.height(), z.width(), |ch, _, _| style[ch].1),
    }
}

/// Pointwise denoiser pulling every cell toward a styled copy of the control
/// signal; `detail_variance` is the spread it allows around that target.
#[derive(Debug, Clone, Copy)]
pub struct PatternPull {
    pub detail_variance: f32,
}

impl Denoiser for PatternPull {
    fn evaluate(
        &self,
        z: &LatentGrid,
        sigma: f64,
        cond: &ConditionToken,
        ctx: &mut StepContext<'_>,
    ) -> Result<LatentGrid> {
        let target = styled_target(z, cond, ctx.control)?;
        let v = self.detail_variance as f64;
        z.zip_map(&target, |x, m| gaussian_eps(x as f64, m as f64, v, sigma) as f32)
    }
}

/// Settings for [`AttentionToy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionToyParams {
    pub detail_variance: f32,
    /// Weight of the attended detail in the clean-latent prediction, in
    /// units of the detail standard deviation.
    pub gain: f32,
    /// Standard deviation multiplier of the query and key projections;
    /// larger values give sharper attention.
    pub sharpness: f32,
    /// Weight of the cell's own posterior-mean detail.
    pub local_weight: f32,
    pub seed: u64,
}

impl Default for AttentionToyParams {
    fn default() -> Self {
        Self {
            detail_variance: 0.01,
            gain: 2.0,
            sharpness: 30.0,
            local_weight: 0.5,
            seed: 17,
        }
    }
}

/// Clean-latent prediction
/// `target + local_weight * shrink * (z - target) + gain * sqrt(detail_variance) * attended`
/// with `shrink = detail_variance / (detail_variance + sigma^2)`. One attention block over latent cells matches cells by their
/// target features and returns a convex combination of normalized detail
/// `(z - target) / sqrt(detail_variance + sigma^2)`.
///
/// In cross-frame mode keys and values come from the anchor frame, so the
/// detail of every frame is looked up in the anchor by structure. Without
/// positional terms the block is permutation-equivariant over tokens.
#[derive(Debug, Clone)]
pub struct AttentionToy {
    params: AttentionToyParams,
    channels: usize,
    query: TokenMatrix,
    key: TokenMatrix,
}

impl AttentionToy {
    pub fn new(channels: usize, params: AttentionToyParams) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Validation("attention toy needs at least one channel".into()));
        }
        let finite_pos = |v: f32| v.is_finite() && v > 0.0;
        if !finite_pos(params.detail_variance)
            || !finite_pos(params.sharpness)
            || !params.gain.is_finite()
            || !(0.0..=1.0).contains(&params.local_weight)
        {
            return Err(Error::Validation(format!("invalid attention toy settings {params:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let std = params.sharpness as f64 / (channels as f64).sqrt();
        let mut random = || {
            let data = (0..channels * channels)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (n * std) as f32
                })
                .collect();
            TokenMatrix::new(channels, channels, data)
        };
        let query = random()?;
        let key = random()?;
        Ok(Self {
            params,
            channels,
            query,
            key,
        })
    }

    pub fn params(&self) -> &AttentionToyParams {
        &self.params
    }

    /// Target features and normalized detail, one row per cell.
    fn tokens(&self, z: &LatentGrid, target: &LatentGrid, sigma: f64) -> Result<(TokenMatrix, TokenMatrix)> {
        let (c, h, w) = z.dims();
        let norm = (self.params.detail_variance as f64 + sigma * sigma).sqrt();
        let mut features = Vec::with_capacity(h * w * c);
        let mut values = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let m = target.get(ch, y, x);
                    features.push(m);
                    values.push(((z.get(ch, y, x) - m) as f64 / norm) as f32);
                }
            }
        }
        Ok((
            TokenMatrix::new(h * w, c, features)?,
            TokenMatrix::new(h * w, c, values)?,
        ))
    }
}

impl Denoiser for AttentionToy {
    fn evaluate(
        &self,
        z: &LatentGrid,
        sigma: f64,
        cond: &ConditionToken,
        ctx: &mut StepContext<'_>,
    ) -> Result<LatentGrid> {
        if z.channels() != self.channels {
            return Err(Error::Contract(format!(
                "attention toy built for {} channels, got {}",
                self.channels,
                z.channels()
            )));
        }
        let target = styled_target(z, cond, ctx.control)?;
        let (features, values) = self.tokens(z, &target, sigma)?;
        let q = features.matmul(&self.query)?;
        let k = features.matmul(&self.key)?;
        let attended = match ctx.attention {
            AttentionMode::SelfOnly => self_attention(&q, &k, &values)?,
            AttentionMode::CrossFrame => {
                let anchor = ctx.is_anchor();
                let cache = ctx
                    .kv_cache
                    .as_deref_mut()
                    .ok_or_else(|| Error::Contract("cross-frame attention needs a key/value cache".into()))?;
                if anchor {
                    cache.insert(ctx.timestep, 0, k, values)?;
                }
                cross_frame_attention(&q, cache, ctx.timestep, 0)?
            }
        };
        let (c, h, w) = z.dims();
        let v = self.params.detail_variance as f64;
        let local = self.params.local_weight as f64 * v / (v + sigma * sigma);
        let amp = self.params.gain as f64 * v.sqrt();
        LatentGrid::from_fn(c, h, w, |ch, y, x| {
            let (xv, m) = (z.get(ch, y, x) as f64, target.get(ch, y, x) as f64);
            let clean = m + local * (xv - m) + amp * attended.row(y * w + x)[ch] as f64;
            ((xv - clean) / sigma) as f32
        })
    }
}
