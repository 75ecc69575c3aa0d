//! Synthetic video distributions with closed-form diffused scores.
//!
//! A world is a weighted mixture of trajectory components. Each component is
//! an isotropic Gaussian around a sequence of frame means. After diffusion to
//! timestep `t` a component with mean `mu` and spread `sigma` has marginal
//! `N(sqrt(ab) * mu, (ab * sigma^2 + 1 - ab) I)`, so the mixture score is a
//! responsibility-weighted sum of Gaussian scores.
//!
//! Two scopes share one world. Clip scope models the whole `m x d` clip
//! jointly (temporally coherent). Frame scope models a single frame as the
//! pooled mixture of all `K * m` frame means, which forgets which trajectory
//! and time a frame came from.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddim::{Denoiser, Scope};
use crate::error::{Error, Result};
use crate::rng::{Stage, StreamKey};
use crate::schedule::NoiseSchedule;

/// An `m`-frame clip of `height x width` real values, frame-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentClip {
    frames: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl LatentClip {
    pub fn new(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "clip dimensions must be positive, got {frames}x{height}x{width}"
            )));
        }
        if values.len() != frames * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{height}x{width} clip",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                t: None,
                magnitude: *v,
            });
        }
        Ok(Self {
            frames,
            height,
            width,
            values,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            values: vec![0.0; frames * height * width],
        }
    }

    pub fn from_frames(height: usize, width: usize, frames: Vec<Vec<f64>>) -> Result<Self> {
        let m = frames.len();
        LatentClip::new(m, height, width, frames.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Per-frame dimension `height * width`.
    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.values[i * d..(i + 1) * d]
    }

    pub fn frame_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.dim())
    }

    /// Same geometry, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        LatentClip::new(self.frames, self.height, self.width, values)
    }

    pub fn single_frame(&self, i: usize) -> LatentClip {
        LatentClip {
            frames: 1,
            height: self.height,
            width: self.width,
            values: self.frame(i).to_vec(),
        }
    }

    pub fn same_shape(&self, other: &LatentClip) -> bool {
        self.frames == other.frames && self.height == other.height && self.width == other.width
    }

    pub fn max_abs_diff(&self, other: &LatentClip) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryComponent {
    pub weight: f64,
    pub sigma: f64,
    /// `m x d` frame means, frame-major.
    pub frame_means: Vec<f64>,
}

/// Start position and velocity of one moving-blob component (pixels, pixels/frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobTrack {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureVideoWorld {
    components: Vec<TrajectoryComponent>,
    frames: usize,
    height: usize,
    width: usize,
    tracks: Vec<BlobTrack>,
}

impl MixtureVideoWorld {
    pub fn new(
        components: Vec<TrajectoryComponent>,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config("world.k", "a world needs at least one component"));
        }
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::config("world.frames", "clip dimensions must be positive"));
        }
        let len = frames * height * width;
        let mut total = 0.0;
        for c in &components {
            if c.frame_means.len() != len {
                return Err(Error::Shape(format!(
                    "component has {} means, world expects {len}",
                    c.frame_means.len()
                )));
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::config("world.weights", format!("weight {} outside (0, 1]", c.weight)));
            }
            if !(c.sigma >= 0.0 && c.sigma.is_finite()) {
                return Err(Error::config("world.sigma", format!("sigma {} must be >= 0", c.sigma)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("world.weights", format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            components,
            frames,
            height,
            width,
            tracks: Vec::new(),
        })
    }

    pub fn components(&self) -> &[TrajectoryComponent] {
        &self.components
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.dim()
    }

    /// Blob parameters, empty for worlds not built by [`make_moving_blob_world`].
    pub fn tracks(&self) -> &[BlobTrack] {
        &self.tracks
    }

    /// Mean of component `k` at frame slot `j`.
    pub fn slot_mean(&self, k: usize, j: usize) -> &[f64] {
        let d = self.dim();
        &self.components[k].frame_means[j * d..(j + 1) * d]
    }

    pub fn component_clip(&self, k: usize) -> LatentClip {
        LatentClip {
            frames: self.frames,
            height: self.height,
            width: self.width,
            values: self.components[k].frame_means.clone(),
        }
    }

    /// Spread of the single Gaussian a `Control` condition collapses to.
    pub fn control_sigma(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.sigma).sum()
    }

    pub fn check_component(&self, k: usize) -> Result<()> {
        if k < self.k() {
            Ok(())
        } else {
            Err(Error::config("condition", format!("component {k} out of range (K = {})", self.k())))
        }
    }

    fn empty_clip(&self) -> LatentClip {
        LatentClip::zeros(self.frames, self.height, self.width)
    }
}

/// World whose single component is centred at `mean` with spread `sigma`.
pub fn single_gaussian_world(mean: LatentClip, sigma: f64) -> Result<MixtureVideoWorld> {
    let (m, h, w) = (mean.frames(), mean.height(), mean.width());
    MixtureVideoWorld::new(
        vec![TrajectoryComponent {
            weight: 1.0,
            sigma,
            frame_means: mean.into_values(),
        }],
        m,
        h,
        w,
    )
}

/// K equally weighted Gaussian blobs, each translating at its own constant
/// velocity and wrapping at the borders.
pub fn make_moving_blob_world(
    k: usize,
    frames: usize,
    height: usize,
    width: usize,
    sigma: f64,
    seed: u64,
) -> Result<MixtureVideoWorld> {
    if k == 0 {
        return Err(Error::config("world.k", "must be at least 1"));
    }
    if frames == 0 {
        return Err(Error::config("world.frames", "must be at least 1"));
    }
    if height < 4 {
        return Err(Error::config("world.height", format!("must be at least 4, got {height}")));
    }
    if width < 4 {
        return Err(Error::config("world.width", format!("must be at least 4, got {width}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::config("world.sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    let radius = height.min(width) as f64 / 8.0;
    let mut rng = StreamKey::new(seed, Stage::World).rng();
    let phase: f64 = rng.random::<f64>() * 2.0 * PI;
    let mut tracks = Vec::with_capacity(k);
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let start = (rng.random::<f64>() * width as f64, rng.random::<f64>() * height as f64);
        // angles spread evenly around the circle keep velocities distinct
        let angle = phase + 2.0 * PI * j as f64 / k as f64 + (rng.random::<f64>() - 0.5) * PI / (2.0 * k as f64);
        let speed = 0.75 + 0.75 * rng.random::<f64>();
        let velocity = (speed * angle.cos(), speed * angle.sin());
        let mut frame_means = Vec::with_capacity(frames * height * width);
        for f in 0..frames {
            let cx = start.0 + velocity.0 * f as f64;
            let cy = start.1 + velocity.1 * f as f64;
            for y in 0..height {
                for x in 0..width {
                    let dx = wrapped(x as f64 - cx, width as f64);
                    let dy = wrapped(y as f64 - cy, height as f64);
                    frame_means.push((-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp());
                }
            }
        }
        tracks.push(BlobTrack { start, velocity });
        components.push(TrajectoryComponent {
            weight: 1.0 / k as f64,
            sigma,
            frame_means,
        });
    }
    let mut world = MixtureVideoWorld::new(components, frames, height, width)?;
    world.tracks = tracks;
    Ok(world)
}

fn wrapped(delta: f64, period: f64) -> f64 {
    (delta + period / 2.0).rem_euclid(period) - period / 2.0
}

/// Draws a component by weight and adds isotropic noise.
pub fn sample_data(world: &MixtureVideoWorld, seed: u64) -> (LatentClip, usize) {
    let key = StreamKey::new(seed, Stage::Data);
    let u = key.uniform();
    let mut acc = 0.0;
    let mut k = world.k() - 1;
    for (i, c) in world.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            k = i;
            break;
        }
    }
    let comp = &world.components[k];
    let noise = key.frame(1).normals(world.clip_len());
    let mut clip = world.empty_clip();
    for ((out, mu), g) in clip.values.iter_mut().zip(&comp.frame_means).zip(noise) {
        *out = mu + comp.sigma * g;
    }
    (clip, k)
}

/// Conditioning signal passed to a denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Null,
    Component(usize),
    /// Per-frame targets; the conditional collapses to one Gaussian at them.
    Control(LatentClip),
    Edit { source: LatentClip, target: usize },
    /// `mask` marks known coordinates, taken from `source`.
    Mask { mask: Vec<bool>, source: LatentClip },
}

impl Condition {
    /// The part of the condition relevant to frame `i` of a clip.
    pub fn frame_slice(&self, i: usize) -> Condition {
        match self {
            Condition::Null | Condition::Component(_) => self.clone(),
            Condition::Control(targets) => Condition::Control(targets.single_frame(i)),
            Condition::Edit { source, target } => Condition::Edit {
                source: source.single_frame(i),
                target: *target,
            },
            Condition::Mask { mask, source } => {
                let d = source.dim();
                Condition::Mask {
                    mask: mask[i * d..(i + 1) * d].to_vec(),
                    source: source.single_frame(i),
                }
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Condition::Null => "null",
            Condition::Component(_) => "component",
            Condition::Control(_) => "control",
            Condition::Edit { .. } => "edit",
            Condition::Mask { .. } => "mask",
        }
    }
}

/// One isotropic Gaussian of the diffused-marginal mixture.
struct Term<'a> {
    log_weight: f64,
    mean: &'a [f64],
    sigma: f64,
}

fn mixture_terms<'a>(
    world: &'a MixtureVideoWorld,
    len: usize,
    cond: &'a Condition,
    scope: Scope,
) -> Result<Vec<Term<'a>>> {
    let expected = match scope {
        Scope::Clip => world.clip_len(),
        Scope::Frame => world.dim(),
    };
    if len != expected {
        return Err(Error::Shape(format!(
            "{scope:?}-scope input has {len} values, expected {expected}"
        )));
    }
    let m = world.frames();
    let pooled = |ks: &mut dyn Iterator<Item = usize>, renorm: bool| -> Vec<Term<'a>> {
        let mut out = Vec::new();
        for k in ks {
            let c = &world.components[k];
            let base = if renorm { 0.0 } else { c.weight.ln() };
            match scope {
                Scope::Clip => out.push(Term {
                    log_weight: base,
                    mean: &c.frame_means,
                    sigma: c.sigma,
                }),
                Scope::Frame => {
                    for j in 0..m {
                        out.push(Term {
                            log_weight: base - (m as f64).ln(),
                            mean: world.slot_mean(k, j),
                            sigma: c.sigma,
                        });
                    }
                }
            }
        }
        out
    };
    match cond {
        Condition::Null | Condition::Mask { .. } => Ok(pooled(&mut (0..world.k()), false)),
        Condition::Component(k) | Condition::Edit { target: k, .. } => {
            world.check_component(*k)?;
            Ok(pooled(&mut std::iter::once(*k), true))
        }
        Condition::Control(targets) => {
            if targets.len() != len {
                return Err(Error::Shape(format!(
                    "control targets have {} values, input has {len}",
                    targets.len()
                )));
            }
            Ok(vec![Term {
                log_weight: 0.0,
                mean: targets.values(),
                sigma: world.control_sigma(),
            }])
        }
    }
}

struct Diffused {
    sqrt_ab: f64,
    variances: Vec<f64>,
    log_terms: Vec<f64>,
}

fn diffuse(terms: &[Term<'_>], x: &[f64], ab: f64) -> Diffused {
    let sqrt_ab = ab.sqrt();
    let dim = x.len() as f64;
    let mut variances = Vec::with_capacity(terms.len());
    let mut log_terms = Vec::with_capacity(terms.len());
    for term in terms {
        let v = ab * term.sigma * term.sigma + 1.0 - ab;
        let sq: f64 = x
            .iter()
            .zip(term.mean)
            .map(|(xi, mi)| {
                let r = xi - sqrt_ab * mi;
                r * r
            })
            .sum();
        variances.push(v);
        log_terms.push(term.log_weight - 0.5 * dim * (2.0 * PI * v).ln() - sq / (2.0 * v));
    }
    Diffused {
        sqrt_ab,
        variances,
        log_terms,
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| (v - lse).exp()).collect()
}

fn check_input(x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<()> {
    schedule.check_timestep(t)?;
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            t: Some(t),
            magnitude: *v,
        });
    }
    Ok(())
}

/// Posterior responsibilities of the diffused mixture terms at `(x, t)`.
pub fn responsibilities(
    world: &MixtureVideoWorld,
    x: &[f64],
    t: usize,
    cond: &Condition,
    scope: Scope,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_input(x, t, schedule)?;
    let terms = mixture_terms(world, x.len(), cond, scope)?;
    let diffused = diffuse(&terms, x, schedule.alpha_bar(Some(t)));
    Ok(softmax(&diffused.log_terms))
}

/// Closed-form `log p_t(x)` of the diffused mixture.
pub fn log_density(
    world: &MixtureVideoWorld,
    x: &[f64],
    t: usize,
    cond: &Condition,
    scope: Scope,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_input(x, t, schedule)?;
    let terms = mixture_terms(world, x.len(), cond, scope)?;
    Ok(log_sum_exp(&diffuse(&terms, x, schedule.alpha_bar(Some(t))).log_terms))
}

/// Noise prediction `-sqrt(1 - ab_t) * grad log p_t(x)`.
pub fn mixture_eps(
    world: &MixtureVideoWorld,
    x: &[f64],
    t: usize,
    cond: &Condition,
    scope: Scope,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_input(x, t, schedule)?;
    let terms = mixture_terms(world, x.len(), cond, scope)?;
    let ab = schedule.alpha_bar(Some(t));
    let diffused = diffuse(&terms, x, ab);
    let resp = softmax(&diffused.log_terms);
    let noise_scale = (1.0 - ab).sqrt();
    let mut eps = vec![0.0; x.len()];
    for ((term, r), v) in terms.iter().zip(&resp).zip(&diffused.variances) {
        if *r == 0.0 {
            continue;
        }
        let coef = noise_scale * r / v;
        for ((e, xi), mi) in eps.iter_mut().zip(x).zip(term.mean) {
            *e += coef * (xi - diffused.sqrt_ab * mi);
        }
    }
    Ok(eps)
}

/// Central-difference gradient of [`log_density`] along every coordinate.
///
/// Perturbing one coordinate shifts each term's squared distance by a known
/// amount, so each perturbed density is re-evaluated from cached distances
/// instead of a full pass over `x`.
pub fn score_finite_diff(
    world: &MixtureVideoWorld,
    x: &[f64],
    t: usize,
    cond: &Condition,
    scope: Scope,
    schedule: &NoiseSchedule,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::config("h", "finite-difference step must be positive"));
    }
    check_input(x, t, schedule)?;
    let terms = mixture_terms(world, x.len(), cond, scope)?;
    let ab = schedule.alpha_bar(Some(t));
    let sqrt_ab = ab.sqrt();
    let dim = x.len() as f64;
    let prepared: Vec<(f64, f64, f64)> = terms
        .iter()
        .map(|term| {
            let v = ab * term.sigma * term.sigma + 1.0 - ab;
            let sq: f64 = x
                .iter()
                .zip(term.mean)
                .map(|(xi, mi)| (xi - sqrt_ab * mi).powi(2))
                .sum();
            (term.log_weight - 0.5 * dim * (2.0 * PI * v).ln(), v, sq)
        })
        .collect();
    let mut plus = vec![0.0; terms.len()];
    let mut minus = vec![0.0; terms.len()];
    let mut grad = Vec::with_capacity(x.len());
    for c in 0..x.len() {
        for (i, (term, (base, v, sq))) in terms.iter().zip(&prepared).enumerate() {
            let r = x[c] - sqrt_ab * term.mean[c];
            let shift_p = (r + h) * (r + h) - r * r;
            let shift_m = (r - h) * (r - h) - r * r;
            plus[i] = base - (sq + shift_p) / (2.0 * v);
            minus[i] = base - (sq + shift_m) / (2.0 * v);
        }
        grad.push((log_sum_exp(&plus) - log_sum_exp(&minus)) / (2.0 * h));
    }
    Ok(grad)
}

/// Replaces known coordinates of `x_t` with a fresh forward-diffused copy of
/// `source` at level `t`.
pub fn inpaint_project(
    x_t: &LatentClip,
    source: &LatentClip,
    mask: &[bool],
    t: Option<usize>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LatentClip> {
    if !x_t.same_shape(source) || mask.len() != x_t.len() {
        return Err(Error::Shape(format!(
            "mask/source ({} / {}) do not match clip of {} values",
            mask.len(),
            source.len(),
            x_t.len()
        )));
    }
    let d = x_t.dim();
    let mut out = x_t.clone();
    for f in 0..x_t.frames() {
        project_frame(
            out.frame_mut(f),
            source.frame(f),
            &mask[f * d..(f + 1) * d],
            f,
            t,
            schedule,
            seed,
        );
    }
    Ok(out)
}

/// Projection of a single frame; `frame_index` selects the noise substream so
/// frame-wise and clip-wise projection agree.
pub(crate) fn project_frame(
    x: &mut [f64],
    source: &[f64],
    mask: &[bool],
    frame_index: usize,
    t: Option<usize>,
    schedule: &NoiseSchedule,
    seed: u64,
) {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let level = t.map_or(0, |t| t as u64 + 1);
    let noise = if t.is_some() {
        StreamKey::new(seed, Stage::Inpaint)
            .cell(level)
            .frame(frame_index as u64)
            .normals(x.len())
    } else {
        vec![0.0; x.len()]
    };
    for (((xi, si), known), g) in x.iter_mut().zip(source).zip(mask).zip(noise) {
        if *known {
            *xi = if t.is_some() { a * si + b * g } else { *si };
        }
    }
}

/// Exact-score denoiser over a world at a given scope.
#[derive(Debug, Clone, Copy)]
pub struct WorldDenoiser<'a> {
    pub world: &'a MixtureVideoWorld,
    pub schedule: &'a NoiseSchedule,
    pub scope: Scope,
    pub label: &'static str,
}

impl<'a> WorldDenoiser<'a> {
    pub fn frame(world: &'a MixtureVideoWorld, schedule: &'a NoiseSchedule) -> Self {
        Self {
            world,
            schedule,
            scope: Scope::Frame,
            label: "image",
        }
    }

    pub fn clip(world: &'a MixtureVideoWorld, schedule: &'a NoiseSchedule) -> Self {
        Self {
            world,
            schedule,
            scope: Scope::Clip,
            label: "video",
        }
    }
}

impl Denoiser for WorldDenoiser<'_> {
    fn scope(&self) -> Scope {
        self.scope
    }

    fn label(&self) -> &str {
        self.label
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.schedule
    }

    fn eps(&self, x: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
        mixture_eps(self.world, x, t, cond, self.scope, self.schedule)
    }
}
