//! Hint-guided latent diffusion: noise schedule, forward process,
//! condition dropout, three-condition classifier-free guidance and the
//! deterministic DDIM sampler.
//!
//! The denoiser sees three conditions: the foreground latent (inside the
//! editing region), the background latent (outside it) and the text
//! embedding of the sub-prompt. Guidance nests them, so only four presence
//! patterns are ever evaluated: nothing, foreground, foreground+background,
//! and all three.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::TextEmbedder;
use crate::error::{Error, Result};
use crate::image::{split_foreground, Image, Latent, Mask};
use crate::plan::SubPrompt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear beta schedule. `alpha_bar(0)` is 1 by definition.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule> {
    if train_steps == 0 {
        return Err(Error::validation("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::validation(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if train_steps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (train_steps - 1) as f64;
        (0..train_steps)
            .map(|i| beta_start + step * i as f64)
            .collect()
    };
    let mut alpha_bars = Vec::with_capacity(train_steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars.last().is_some_and(|&a| a <= 0.0) {
        return Err(Error::Numeric("alpha_bar underflowed".into()));
    }
    Ok(DiffusionSchedule {
        params: ScheduleParams {
            train_steps,
            beta_start,
            beta_end,
        },
        betas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        make_schedule(p.train_steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products for `t = 1..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.train_steps() {
            Err(Error::validation(format!(
                "timestep {t} outside 1..={}",
                self.train_steps()
            )))
        } else {
            Ok(())
        }
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::from_params(ScheduleParams::default()).expect("default schedule is valid")
    }
}

/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(
    z0: &Latent,
    t: usize,
    eps: &Latent,
    sched: &DiffusionSchedule,
) -> Result<Latent> {
    sched.check_step(t)?;
    z0.ensure_same_shape(eps, "forward_noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_with(eps, |z, e| a * z + b * e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales {
    /// Foreground-image condition.
    #[serde(rename = "s_f")]
    pub fg: f64,
    /// Background-image condition.
    #[serde(rename = "s_b")]
    pub bg: f64,
    /// Text condition.
    #[serde(rename = "s_p")]
    pub text: f64,
}

impl GuidanceScales {
    pub fn new(fg: f64, bg: f64, text: f64) -> Result<Self> {
        let s = Self { fg, bg, text };
        s.validate()?;
        Ok(s)
    }

    pub fn unit() -> Self {
        Self {
            fg: 1.0,
            bg: 1.0,
            text: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fg", self.fg), ("bg", self.bg), ("text", self.text)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!(
                    "guidance scale {name}={v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            fg: 1.5,
            bg: 1.5,
            text: 7.5,
        }
    }
}

/// Which conditions are present. Only the four nested patterns exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Presence {
    None,
    Fg,
    FgBg,
    Full,
}

impl Presence {
    pub const ALL: [Presence; 4] = [Presence::None, Presence::Fg, Presence::FgBg, Presence::Full];

    pub fn index(self) -> usize {
        self as usize
    }

    fn has_fg(self) -> bool {
        self != Presence::None
    }

    fn has_bg(self) -> bool {
        matches!(self, Presence::FgBg | Presence::Full)
    }

    fn has_text(self) -> bool {
        self == Presence::Full
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionSet {
    pub text: Option<Vec<f64>>,
    pub fg: Option<Latent>,
    pub bg: Option<Latent>,
}

impl ConditionSet {
    pub fn full(fg: Latent, bg: Latent, text: Vec<f64>) -> Self {
        Self {
            text: Some(text),
            fg: Some(fg),
            bg: Some(bg),
        }
    }

    pub fn presence(&self) -> Result<Presence> {
        match (self.fg.is_some(), self.bg.is_some(), self.text.is_some()) {
            (false, false, false) => Ok(Presence::None),
            (true, false, false) => Ok(Presence::Fg),
            (true, true, false) => Ok(Presence::FgBg),
            (true, true, true) => Ok(Presence::Full),
            _ => Err(Error::validation(
                "condition pattern is not one of the four guidance branches",
            )),
        }
    }

    /// Drops the conditions absent from `pattern`. Requires a full set for
    /// any condition the pattern keeps.
    pub fn restrict(&self, pattern: Presence) -> Result<ConditionSet> {
        let pick = |keep: bool, v: &Option<Latent>| -> Result<Option<Latent>> {
            match (keep, v) {
                (false, _) => Ok(None),
                (true, Some(l)) => Ok(Some(l.clone())),
                (true, None) => Err(Error::validation("cannot keep a condition that is absent")),
            }
        };
        let text = match (pattern.has_text(), &self.text) {
            (false, _) => None,
            (true, Some(t)) => Some(t.clone()),
            (true, None) => {
                return Err(Error::validation("cannot keep a condition that is absent"))
            }
        };
        Ok(ConditionSet {
            text,
            fg: pick(pattern.has_fg(), &self.fg)?,
            bg: pick(pattern.has_bg(), &self.bg)?,
        })
    }
}

/// Training-time condition dropout, in three mutually exclusive bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub drop_text: f64,
    pub drop_text_and_bg: f64,
    pub drop_all: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            drop_text: 0.05,
            drop_text_and_bg: 0.05,
            drop_all: 0.05,
        }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.drop_text, self.drop_text_and_bg, self.drop_all];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 {
            return Err(Error::validation(
                "dropout probabilities must lie in [0,1] and sum to at most 1",
            ));
        }
        Ok(())
    }
}

/// Maps a uniform draw in `[0, 1)` to a presence pattern:
/// `[0, p1)` drops text, `[p1, p1+p2)` drops text and background,
/// `[p1+p2, p1+p2+p3)` drops everything, the rest keeps all.
pub fn sample_dropout(policy: &DropoutPolicy, draw: f64) -> Presence {
    let b1 = policy.drop_text;
    let b2 = b1 + policy.drop_text_and_bg;
    let b3 = b2 + policy.drop_all;
    if draw < b1 {
        Presence::FgBg
    } else if draw < b2 {
        Presence::Fg
    } else if draw < b3 {
        Presence::None
    } else {
        Presence::Full
    }
}

/// The ε-prediction contract.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &ConditionSet) -> Result<Latent>;
}

/// Three-condition guidance:
///
/// `u + s_f (f - u) + s_b (fb - f) + s_p (full - fb)`
///
/// where `u`, `f`, `fb`, `full` are the predictions with no condition, the
/// foreground only, foreground and background, and all three. `s_b` scales
/// the background delta and `s_p` the text delta.
///
/// Evaluated in the regrouped form
/// `s_p full + (s_b - s_p) fb + (s_f - s_b) f + (1 - s_f) u`, which returns
/// `full` exactly for unit scales and `u` exactly for zero scales.
pub fn cfg_combine(
    uncond: &Latent,
    fg: &Latent,
    fg_bg: &Latent,
    full: &Latent,
    scales: &GuidanceScales,
) -> Result<Latent> {
    uncond.ensure_same_shape(fg, "cfg_combine")?;
    uncond.ensure_same_shape(fg_bg, "cfg_combine")?;
    uncond.ensure_same_shape(full, "cfg_combine")?;
    let c_full = scales.text;
    let c_fb = scales.bg - scales.text;
    let c_f = scales.fg - scales.bg;
    let c_u = 1.0 - scales.fg;
    let data = (0..uncond.len())
        .map(|i| {
            c_full * full.data()[i]
                + c_fb * fg_bg.data()[i]
                + c_f * fg.data()[i]
                + c_u * uncond.data()[i]
        })
        .collect();
    Latent::new(uncond.height(), uncond.width(), uncond.channels(), data)
}

/// Uniformly strided DDIM timesteps, descending, e.g. 1000, 990, ..., 10
/// for 100 of 1000. The step after the last one lands on `t = 0`.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::validation(format!(
            "inference steps must lie in 1..={train_steps}, got {steps}"
        )));
    }
    Ok((1..=steps).rev().map(|i| i * train_steps / steps).collect())
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    z_t: &Latent,
    eps_hat: &Latent,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<Latent> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::validation(format!(
            "DDIM must move backwards, got {t} -> {t_prev}"
        )));
    }
    z_t.ensure_same_shape(eps_hat, "ddim_step")?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (a_prev, b_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z_t.zip_with(eps_hat, |z, e| {
        let x0 = (z - b * e) / a;
        a_prev * x0 + b_prev * e
    })
}

/// Gaussian data world: under condition pattern `c` the clean latent is
/// `N(mean[c], sigma^2 I)`, so the Bayes-optimal ε-prediction is closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWorld {
    means: [Latent; 4],
    sigma: f64,
}

/// Knobs for [`GaussianWorld::for_edit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditWorldParams {
    /// Mean of the data when nothing is known.
    pub null_value: f64,
    /// How far the text-conditioned mean moves from the input towards the
    /// target inside the region (1 = all the way).
    pub text_response: f64,
    /// How far the text-conditioned mean drifts towards the target tint
    /// outside the region.
    pub text_leak: f64,
    pub sigma: f64,
}

impl Default for EditWorldParams {
    fn default() -> Self {
        Self {
            null_value: 0.5,
            text_response: 1.0,
            text_leak: 0.0,
            sigma: 0.01,
        }
    }
}

impl GaussianWorld {
    /// Means indexed by [`Presence::index`].
    pub fn new(means: [Latent; 4], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::validation(format!(
                "world sigma must be positive, got {sigma}"
            )));
        }
        for m in &means[1..] {
            means[0].ensure_same_shape(m, "world means")?;
        }
        Ok(Self { means, sigma })
    }

    pub fn uniform(mean: Latent, sigma: f64) -> Result<Self> {
        Self::new([mean.clone(), mean.clone(), mean.clone(), mean], sigma)
    }

    /// World for a single edit: without conditions the data is flat
    /// `null_value`; knowing the foreground pins the region; knowing both
    /// pins the whole input; adding the text moves the region towards
    /// `target` and tints the rest towards the region's target color.
    pub fn for_edit(
        input: &Latent,
        mask: &Mask,
        target: &Latent,
        p: EditWorldParams,
    ) -> Result<Self> {
        input.ensure_same_shape(target, "for_edit")?;
        if input.height() != mask.height() || input.width() != mask.width() {
            return Err(Error::shape("edit-world mask must match the latent grid"));
        }
        let ch = input.channels();
        let inside = |i: usize| mask.data()[i / ch] == 1;
        let mut tint = vec![0.0; ch];
        let region = mask.count().max(1) as f64;
        for i in 0..input.len() {
            if inside(i) {
                tint[i % ch] += target.data()[i] / region;
            }
        }
        let build = |f: &dyn Fn(usize) -> f64| -> Result<Latent> {
            Latent::new(
                input.height(),
                input.width(),
                ch,
                (0..input.len()).map(f).collect(),
            )
        };
        let x = input.data();
        let y = target.data();
        let none = build(&|_| p.null_value)?;
        let fg = build(&|i| if inside(i) { x[i] } else { p.null_value })?;
        let fg_bg = input.clone();
        let full = build(&|i| {
            if inside(i) {
                x[i] + p.text_response * (y[i] - x[i])
            } else {
                x[i] + p.text_leak * (tint[i % ch] - x[i])
            }
        })?;
        Self::new([none, fg, fg_bg, full], p.sigma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self, pattern: Presence) -> &Latent {
        &self.means[pattern.index()]
    }
}

/// Bayes-optimal ε for data `N(mu, sigma^2 I)` with `mu` chosen by the
/// condition pattern: with `a = sqrt(alpha_bar_t)`, `b^2 = 1 - alpha_bar_t`,
/// the posterior mean is `m = mu + a sigma^2 / (a^2 sigma^2 + b^2) (z_t - a mu)`
/// and the prediction is `(z_t - a m) / b`.
pub fn analytic_gaussian_eps(
    z_t: &Latent,
    t: usize,
    world: &GaussianWorld,
    cond: &ConditionSet,
    sched: &DiffusionSchedule,
) -> Result<Latent> {
    sched.check_step(t)?;
    let mu = world.mean(cond.presence()?);
    z_t.ensure_same_shape(mu, "analytic_gaussian_eps")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let s2 = world.sigma * world.sigma;
    let gain = a * s2 / (a * a * s2 + b * b);
    z_t.zip_with(mu, |z, m| {
        let post = m + gain * (z - a * m);
        (z - a * post) / b
    })
}

/// A [`GaussianWorld`] bound to a schedule, usable wherever a denoiser is.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    pub world: GaussianWorld,
    pub schedule: DiffusionSchedule,
}

impl Denoiser for AnalyticDenoiser {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &ConditionSet) -> Result<Latent> {
        analytic_gaussian_eps(z_t, t, &self.world, cond, &self.schedule)
    }
}

/// Gaussian world whose means are read off the conditions themselves: the
/// known foreground and background reconstruct the input, and text is
/// ignored. Edits nothing; useful as a neutral editor for arbitrary images.
#[derive(Debug, Clone)]
pub struct ReconstructionDenoiser {
    pub null_value: f64,
    pub sigma: f64,
    pub schedule: DiffusionSchedule,
}

impl Denoiser for ReconstructionDenoiser {
    fn predict_noise(&self, z_t: &Latent, t: usize, cond: &ConditionSet) -> Result<Latent> {
        let null = z_t.map(|_| self.null_value)?;
        let mean = match (&cond.fg, &cond.bg) {
            (Some(f), Some(b)) => f.zip_with(b, |x, y| x + y)?,
            (Some(f), None) => f.clone(),
            _ => null,
        };
        let world = GaussianWorld::uniform(mean, self.sigma)?;
        analytic_gaussian_eps(z_t, t, &world, &ConditionSet::default(), &self.schedule)
    }
}

pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &Image) -> Result<Latent>;
    fn decode(&self, latent: &Latent) -> Result<Image>;
}

/// Pixels are the latent.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        Latent::new(
            image.height(),
            image.width(),
            image.channels(),
            image.data().to_vec(),
        )
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        Image::from_clamped(
            latent.height(),
            latent.width(),
            latent.channels(),
            latent.data().to_vec(),
        )
    }
}

/// 2x2 average pooling down, nearest-neighbour up. Lossy; odd trailing
/// rows/columns are dropped on encode and replicated on decode.
#[derive(Debug, Clone, Copy, Default)]
pub struct AvgPoolCodec;

impl LatentCodec for AvgPoolCodec {
    fn encode(&self, image: &Image) -> Result<Latent> {
        let (h, w, ch) = (image.height() / 2, image.width() / 2, image.channels());
        if h == 0 || w == 0 {
            return Err(Error::shape("image too small to pool"));
        }
        let mut data = Vec::with_capacity(h * w * ch);
        for r in 0..h {
            for c in 0..w {
                for k in 0..ch {
                    let s = image.pixel(2 * r, 2 * c)[k]
                        + image.pixel(2 * r, 2 * c + 1)[k]
                        + image.pixel(2 * r + 1, 2 * c)[k]
                        + image.pixel(2 * r + 1, 2 * c + 1)[k];
                    data.push(s / 4.0);
                }
            }
        }
        Latent::new(h, w, ch, data)
    }

    fn decode(&self, latent: &Latent) -> Result<Image> {
        let (h, w, ch) = (latent.height() * 2, latent.width() * 2, latent.channels());
        let mut data = Vec::with_capacity(h * w * ch);
        for r in 0..h {
            for c in 0..w {
                let at = ((r / 2) * latent.width() + c / 2) * ch;
                data.extend_from_slice(&latent.data()[at..at + ch]);
            }
        }
        Image::from_clamped(h, w, ch, data)
    }
}

pub fn gaussian_latent(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Latent {
    let data = (0..height * width * channels)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Latent::new(height, width, channels, data).expect("gaussian samples are finite")
}

/// Everything one edit pass needs besides the hint itself.
#[derive(Clone, Copy)]
pub struct Editor<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub text_encoder: &'a dyn TextEmbedder,
    pub schedule: &'a DiffusionSchedule,
}

impl<'a> Editor<'a> {
    /// Builds the full condition set for one hint.
    pub fn conditions(&self, y: &Image, m: &Mask, p: &SubPrompt) -> Result<ConditionSet> {
        let (x_f, x_b) = split_foreground(y, m)?;
        Ok(ConditionSet::full(
            self.codec.encode(&x_f)?,
            self.codec.encode(&x_b)?,
            self.text_encoder.embed(&p.text)?,
        ))
    }

    /// One guided DDIM prediction at step `t`.
    pub fn guided_noise(
        &self,
        z: &Latent,
        t: usize,
        cond: &ConditionSet,
        scales: &GuidanceScales,
    ) -> Result<Latent> {
        let mut eps = Vec::with_capacity(4);
        for pattern in Presence::ALL {
            let branch = cond.restrict(pattern)?;
            let e = self.denoiser.predict_noise(z, t, &branch)?;
            z.ensure_same_shape(&e, "denoiser output")?;
            eps.push(e);
        }
        cfg_combine(&eps[0], &eps[1], &eps[2], &eps[3], scales)
    }

    /// Edits `y` inside `m` according to `p`. Seeded and deterministic.
    pub fn edit(
        &self,
        y: &Image,
        m: &Mask,
        p: &SubPrompt,
        scales: &GuidanceScales,
        steps: usize,
        seed: u64,
    ) -> Result<Image> {
        scales.validate()?;
        let cond = self.conditions(y, m, p)?;
        let shape = cond.fg.as_ref().expect("full condition set");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = gaussian_latent(shape.height(), shape.width(), shape.channels(), &mut rng);
        let ts = ddim_timesteps(self.schedule.train_steps(), steps)?;
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let eps = self.guided_noise(&z, t, &cond, scales)?;
            z = ddim_step(&z, &eps, t, t_prev, self.schedule)?;
        }
        self.codec.decode(&z)
    }
}

/// Free-function form of [`Editor::edit`].
#[allow(clippy::too_many_arguments)]
pub fn edit_sample(
    denoiser: &dyn Denoiser,
    y: &Image,
    m: &Mask,
    p: &SubPrompt,
    scales: &GuidanceScales,
    steps: usize,
    seed: u64,
    codec: &dyn LatentCodec,
    text_encoder: &dyn TextEmbedder,
    schedule: &DiffusionSchedule,
) -> Result<Image> {
    Editor {
        denoiser,
        codec,
        text_encoder,
        schedule,
    }
    .edit(y, m, p, scales, steps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedTextEmbedder;

    fn rand_latent(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Latent {
        gaussian_latent(h, w, c, rng)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars(), &[0.9]);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_matches_product() {
        let s = DiffusionSchedule::default();
        // Independent product over the linear betas.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.1).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = rand_latent(&mut rng, 3, 3, 2);
        let zero = Latent::zeros(3, 3, 2);
        let zt = forward_noise(&z0, 500, &zero, &s).unwrap();
        let a = s.alpha_bar(500).sqrt();
        for (x, y) in zt.data().iter().zip(z0.data()) {
            assert!((x - a * y).abs() < 1e-15);
        }
        let eps = rand_latent(&mut rng, 3, 3, 2);
        let z1 = forward_noise(&z0, 1, &eps, &s).unwrap();
        let bound =
            (1.0 - s.alpha_bar(1)).sqrt() * eps.data().iter().map(|e| e * e).sum::<f64>().sqrt();
        let dist = z1
            .data()
            .iter()
            .zip(z0.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= bound + (1.0 - a) * 10.0);
        assert!(forward_noise(&z0, 0, &eps, &s).is_err());
        assert!(forward_noise(&z0, 1001, &eps, &s).is_err());
        assert!(forward_noise(&z0, 5, &Latent::zeros(2, 3, 2), &s).is_err());
    }

    #[test]
    fn dropout_bands() {
        let p = DropoutPolicy::default();
        assert_eq!(sample_dropout(&p, 0.02), Presence::FgBg);
        assert_eq!(sample_dropout(&p, 0.07), Presence::Fg);
        assert_eq!(sample_dropout(&p, 0.12), Presence::None);
        assert_eq!(sample_dropout(&p, 0.5), Presence::Full);
        assert_eq!(sample_dropout(&p, 0.0), Presence::FgBg);
        assert!(DropoutPolicy {
            drop_text: 0.6,
            drop_text_and_bg: 0.6,
            drop_all: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn condition_patterns() {
        let l = Latent::zeros(1, 1, 1);
        let full = ConditionSet::full(l.clone(), l.clone(), vec![0.0]);
        for p in Presence::ALL {
            assert_eq!(full.restrict(p).unwrap().presence().unwrap(), p);
        }
        let odd = ConditionSet {
            text: Some(vec![1.0]),
            fg: None,
            bg: None,
        };
        assert!(odd.presence().is_err());
    }

    #[test]
    fn cfg_telescopes_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let [u, f, fb, full] = std::array::from_fn(|_| rand_latent(&mut rng, 4, 4, 3));
        assert_eq!(
            cfg_combine(&u, &f, &fb, &full, &GuidanceScales::unit()).unwrap(),
            full
        );
        let zero = GuidanceScales {
            fg: 0.0,
            bg: 0.0,
            text: 0.0,
        };
        assert_eq!(cfg_combine(&u, &f, &fb, &full, &zero).unwrap(), u);
        let s1 = GuidanceScales {
            fg: 1.5,
            bg: 1.5,
            text: 7.0,
        };
        let s2 = GuidanceScales { text: 8.0, ..s1 };
        let a = cfg_combine(&u, &f, &fb, &full, &s1).unwrap();
        let b = cfg_combine(&u, &f, &fb, &full, &s2).unwrap();
        for i in 0..u.len() {
            let slope = b.data()[i] - a.data()[i];
            assert!((slope - (full.data()[i] - fb.data()[i])).abs() < 1e-12);
        }
        assert!(cfg_combine(&u, &f, &fb, &Latent::zeros(1, 1, 1), &s1).is_err());
    }

    #[test]
    fn ddim_timesteps_are_uniform() {
        let ts = ddim_timesteps(1000, 100).unwrap();
        assert_eq!(ts.len(), 100);
        assert_eq!((ts[0], ts[1], ts[99]), (1000, 990, 10));
        assert_eq!(ddim_timesteps(1000, 1000).unwrap().last(), Some(&1));
        assert!(ddim_timesteps(10, 11).is_err());
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_with_true_noise_recovers_z0() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = rand_latent(&mut rng, 4, 4, 3);
        let eps = rand_latent(&mut rng, 4, 4, 3);
        let mut z = forward_noise(&z0, 700, &eps, &s).unwrap();
        for (t, tp) in [(700, 420), (420, 37), (37, 0)] {
            z = ddim_step(&z, &eps, t, tp, &s).unwrap();
        }
        assert!(z.max_abs_diff(&z0) < 1e-10);
        assert!(ddim_step(&z, &eps, 5, 5, &s).is_err());
    }

    #[test]
    fn ddim_with_zero_noise_rescales() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = rand_latent(&mut rng, 2, 2, 1);
        let out = ddim_step(&z, &Latent::zeros(2, 2, 1), 300, 299, &s).unwrap();
        let r = (s.alpha_bar(299) / s.alpha_bar(300)).sqrt();
        for (o, v) in out.data().iter().zip(z.data()) {
            assert!((o - r * v).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_eps_limits() {
        let s = DiffusionSchedule::default();
        let mu = Latent::new(1, 2, 1, vec![0.3, -0.7]).unwrap();
        let world = GaussianWorld::uniform(mu.clone(), 0.2).unwrap();
        let a = s.alpha_bar(250).sqrt();
        let at_mean = mu.map(|m| a * m).unwrap();
        let e = analytic_gaussian_eps(&at_mean, 250, &world, &ConditionSet::default(), &s).unwrap();
        assert!(e.data().iter().all(|v| v.abs() < 1e-15));
        let wide = GaussianWorld::uniform(mu, 1e9).unwrap();
        let z = Latent::new(1, 2, 1, vec![1.3, 0.2]).unwrap();
        let e = analytic_gaussian_eps(&z, 250, &wide, &ConditionSet::default(), &s).unwrap();
        assert!(e.data().iter().all(|v| v.abs() < 1e-9));
        assert!(GaussianWorld::uniform(Latent::zeros(1, 1, 1), 0.0).is_err());
        assert!(analytic_gaussian_eps(&z, 0, &world, &ConditionSet::default(), &s).is_err());
    }

    #[test]
    fn avgpool_codec_shapes() {
        let img = Image::new(4, 4, 1, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        let z = AvgPoolCodec.encode(&img).unwrap();
        assert_eq!((z.height(), z.width()), (2, 2));
        assert!((z.data()[0] - (0.0 + 1.0 + 4.0 + 5.0) / 60.0).abs() < 1e-15);
        let back = AvgPoolCodec.decode(&z).unwrap();
        assert_eq!((back.height(), back.width()), (4, 4));
        assert_eq!(
            IdentityCodec
                .decode(&IdentityCodec.encode(&img).unwrap())
                .unwrap(),
            img
        );
    }

    #[test]
    fn edit_is_seeded() {
        let s = DiffusionSchedule::default();
        let img = Image::filled(6, 6, 3, 0.25).unwrap();
        let den = ReconstructionDenoiser {
            null_value: 0.5,
            sigma: 0.01,
            schedule: s.clone(),
        };
        let text = HashedTextEmbedder::new(8, 0);
        let m = Mask::from_fn(6, 6, |r, _| r < 3).unwrap();
        let p = SubPrompt::new(1, "make the square red");
        let run = |seed| {
            edit_sample(
                &den,
                &img,
                &m,
                &p,
                &GuidanceScales::default(),
                20,
                seed,
                &IdentityCodec,
                &text,
                &s,
            )
            .unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
