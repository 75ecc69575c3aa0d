//! Deterministic DDIM sampling, DDIM inversion and classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::worlds::Condition;

/// Whether a denoiser sees one frame or the whole clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Frame,
    Clip,
}

/// A noise predictor `(x, t, cond) -> eps`. Must be deterministic and return
/// a vector shaped like `x`.
pub trait Denoiser: Sync {
    fn scope(&self) -> Scope;
    fn label(&self) -> &str;
    fn schedule(&self) -> &NoiseSchedule;
    fn eps(&self, x: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub cond: Condition,
    pub uncond: Condition,
}

impl GuidanceSpec {
    pub fn new(scale: f64, cond: Condition, uncond: Condition) -> Self {
        Self { scale, cond, uncond }
    }

    /// Unguided prediction under `cond`.
    pub fn plain(cond: Condition) -> Self {
        Self {
            scale: 1.0,
            uncond: cond.clone(),
            cond,
        }
    }

    pub fn none() -> Self {
        Self::plain(Condition::Null)
    }

    pub fn frame_slice(&self, i: usize) -> Self {
        Self {
            scale: self.scale,
            cond: self.cond.frame_slice(i),
            uncond: self.uncond.frame_slice(i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvertMode {
    /// One explicit step per grid interval, eps taken at the current point.
    Naive,
    /// Solves each interval so that sampling reproduces the input exactly.
    FixedPoint,
}

/// Inversion settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvertOptions {
    pub mode: InvertMode,
    pub tol: f64,
    pub max_iter: usize,
}

impl InvertOptions {
    pub fn naive() -> Self {
        Self {
            mode: InvertMode::Naive,
            tol: 1e-10,
            max_iter: 500,
        }
    }

    pub fn fixed_point(tol: f64, max_iter: usize) -> Self {
        Self {
            mode: InvertMode::FixedPoint,
            tol,
            max_iter,
        }
    }
}

/// `eps_u + s * (eps_c - eps_u)`; a single evaluation when `cond == uncond`.
pub fn guided_eps(
    denoiser: &dyn Denoiser,
    x: &[f64],
    t: usize,
    guidance: &GuidanceSpec,
) -> Result<Vec<f64>> {
    let cond = denoiser.eps(x, t, &guidance.cond)?;
    if guidance.cond == guidance.uncond {
        return Ok(cond);
    }
    let s = guidance.scale;
    let mut out = denoiser.eps(x, t, &guidance.uncond)?;
    // (1 - s) u + s c keeps the s = 0 and s = 1 endpoints exact
    for (u, c) in out.iter_mut().zip(&cond) {
        *u = (1.0 - s) * *u + s * c;
    }
    Ok(out)
}

/// Moves `x` from level `ab_from` to level `ab_to` along the direction `eps`.
fn transfer(x: &[f64], eps: &[f64], ab_from: f64, ab_to: f64) -> Vec<f64> {
    let (sa_from, sn_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sn_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    x.iter()
        .zip(eps)
        .map(|(xi, ei)| {
            let x0 = (xi - sn_from * ei) / sa_from;
            sa_to * x0 + sn_to * ei
        })
        .collect()
}

fn ensure_finite(values: &[f64], t: Option<usize>) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numerical { t, magnitude: *v }),
        None => Ok(()),
    }
}

/// One deterministic (eta = 0) DDIM step from `t` down to `t_prev`.
pub fn ddim_step(
    x_t: &[f64],
    eps: &[f64],
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if x_t.len() != eps.len() {
        return Err(Error::Shape(format!("x has {} values, eps {}", x_t.len(), eps.len())));
    }
    if let Some(p) = t_prev {
        if p >= t {
            return Err(Error::config("t_prev", format!("{p} is not below {t}")));
        }
    }
    let out = transfer(x_t, eps, schedule.alpha_bar(Some(t)), schedule.alpha_bar(t_prev));
    ensure_finite(&out, Some(t))?;
    Ok(out)
}

/// Folds guided DDIM steps over the whole grid, ending at the clean level.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    x_start: &[f64],
    grid: &StepGrid,
    guidance: &GuidanceSpec,
) -> Result<Vec<f64>> {
    ddim_sample_with(denoiser, x_start, grid, guidance, |_, _| Ok(()))
}

/// [`ddim_sample`] with a hook run on the latent after every step, given the
/// level just reached.
pub fn ddim_sample_with<F>(
    denoiser: &dyn Denoiser,
    x_start: &[f64],
    grid: &StepGrid,
    guidance: &GuidanceSpec,
    mut after_step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(Option<usize>, &mut [f64]) -> Result<()>,
{
    let schedule = denoiser.schedule();
    let mut x = x_start.to_vec();
    for (i, (t, t_prev)) in grid.pairs().enumerate() {
        let eps = guided_eps(denoiser, &x, t, guidance).map_err(|e| Error::at_step(i, e))?;
        x = ddim_step(&x, &eps, t, t_prev, schedule).map_err(|e| Error::at_step(i, e))?;
        after_step(t_prev, &mut x).map_err(|e| Error::at_step(i, e))?;
    }
    Ok(x)
}

/// One inversion interval from `t_prev` (lower noise) up to `t`.
pub fn invert_step(
    denoiser: &dyn Denoiser,
    x_prev: &[f64],
    t: usize,
    t_prev: Option<usize>,
    guidance: &GuidanceSpec,
    opts: &InvertOptions,
) -> Result<Vec<f64>> {
    let schedule = denoiser.schedule();
    let ab_t = schedule.alpha_bar(Some(t));
    let ab_p = schedule.alpha_bar(t_prev);
    // the clean level has no timestep of its own; use t there
    let eval_t = t_prev.unwrap_or(t);
    let eps0 = guided_eps(denoiser, x_prev, eval_t, guidance)?;
    let naive = transfer(x_prev, &eps0, ab_p, ab_t);
    ensure_finite(&naive, Some(t))?;
    if opts.mode == InvertMode::Naive {
        return Ok(naive);
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::config("ddim.fp_tol", "fixed-point mode needs tol > 0 and max_iter >= 1"));
    }
    // x_t = a * x_prev + b * eps(x_t, t) inverts ddim_step(x_t, eps, t, t_prev)
    let a = (ab_t / ab_p).sqrt();
    let b = (1.0 - ab_t).sqrt() - a * (1.0 - ab_p).sqrt();
    let image = |x: &[f64]| -> Result<Vec<f64>> {
        let eps = guided_eps(denoiser, x, t, guidance)?;
        Ok(x_prev.iter().zip(&eps).map(|(xp, e)| a * xp + b * e).collect())
    };
    let residual = |x: &[f64], fx: &[f64]| {
        x.iter().zip(fx).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
    };
    let mut x = naive;
    let mut fx = image(&x)?;
    let mut res = residual(&x, &fx);
    let mut damping = 1.0;
    for _ in 0..opts.max_iter {
        if res < opts.tol {
            return Ok(fx);
        }
        let candidate: Vec<f64> = x
            .iter()
            .zip(&fx)
            .map(|(u, v)| u + damping * (v - u))
            .collect();
        let f_candidate = image(&candidate)?;
        let r_candidate = residual(&candidate, &f_candidate);
        if r_candidate.is_finite() && r_candidate < res {
            x = candidate;
            fx = f_candidate;
            res = r_candidate;
            damping = (damping * 1.5).min(1.0);
        } else {
            damping *= 0.5;
            if damping < 1e-6 {
                break;
            }
        }
    }
    if res < opts.tol {
        return Ok(fx);
    }
    Err(Error::NonConvergence { step: 0, residual: res })
}

/// Walks the grid upwards from a clean input to the latent at `steps[0]`.
pub fn ddim_invert(
    denoiser: &dyn Denoiser,
    x0: &[f64],
    grid: &StepGrid,
    guidance: &GuidanceSpec,
    opts: &InvertOptions,
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    for (i, (t, t_prev)) in grid.pairs().enumerate().rev() {
        x = invert_step(denoiser, &x, t, t_prev, guidance, opts).map_err(|e| match e {
            Error::NonConvergence { residual, .. } => Error::NonConvergence { step: i, residual },
            other => Error::at_step(i, other),
        })?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stage, StreamKey};
    use crate::worlds::{make_moving_blob_world, sample_data, single_gaussian_world, LatentClip, WorldDenoiser};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    /// Point mass under the condition, standard normal under Null.
    struct PairDenoiser<'a> {
        schedule: &'a NoiseSchedule,
        mu: Vec<f64>,
    }

    impl Denoiser for PairDenoiser<'_> {
        fn scope(&self) -> Scope {
            Scope::Clip
        }
        fn label(&self) -> &str {
            "pair"
        }
        fn schedule(&self) -> &NoiseSchedule {
            self.schedule
        }
        fn eps(&self, x: &[f64], t: usize, cond: &Condition) -> Result<Vec<f64>> {
            let ab = self.schedule.alpha_bars()[t];
            Ok(match cond {
                Condition::Null => x.iter().map(|v| (1.0 - ab).sqrt() * v).collect(),
                _ => x
                    .iter()
                    .zip(&self.mu)
                    .map(|(v, m)| (v - ab.sqrt() * m) / (1.0 - ab).sqrt())
                    .collect(),
            })
        }
    }

    #[test]
    fn guidance_endpoints_and_composite() {
        let s = schedule();
        let mu = StreamKey::new(1, Stage::Probe).normals(8);
        let den = PairDenoiser { schedule: &s, mu: mu.clone() };
        let x = StreamKey::new(2, Stage::Probe).normals(8);
        let t = 420;
        let cond = Condition::Component(0);
        let c = den.eps(&x, t, &cond).unwrap();
        let u = den.eps(&x, t, &Condition::Null).unwrap();
        let at = |s: f64| guided_eps(&den, &x, t, &GuidanceSpec::new(s, cond.clone(), Condition::Null)).unwrap();
        assert_eq!(at(1.0), c);
        assert_eq!(at(0.0), u);
        let ab = s.alpha_bars()[t];
        let composite = at(7.5);
        for i in 0..8 {
            let eps_c = (x[i] - ab.sqrt() * mu[i]) / (1.0 - ab).sqrt();
            let eps_u = (1.0 - ab).sqrt() * x[i];
            let want = eps_u + 7.5 * (eps_c - eps_u);
            assert!((composite[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn point_mass_step_predicts_mean() {
        let s = schedule();
        let w = make_moving_blob_world(1, 2, 4, 4, 0.0, 1).unwrap();
        let den = WorldDenoiser::clip(&w, &s);
        let mu = &w.components()[0].frame_means;
        let x = StreamKey::new(3, Stage::Probe).normals(32);
        for t in [999, 500, 20] {
            let eps = den.eps(&x, t, &Condition::Null).unwrap();
            let out = ddim_step(&x, &eps, t, None, &s).unwrap();
            for (o, m) in out.iter().zip(mu) {
                assert!((o - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standard_normal_step_coefficient() {
        let s = schedule();
        let w = single_gaussian_world(LatentClip::zeros(1, 2, 2), 1.0).unwrap();
        let den = WorldDenoiser::clip(&w, &s);
        let x = vec![0.3, -1.2, 2.0, 0.7];
        let (t, p) = (600, 580);
        let (at, ap) = (s.alpha_bars()[t], s.alpha_bars()[p]);
        let coef = ap.sqrt() / at.sqrt()
            + ((1.0 - ap).sqrt() - ap.sqrt() * (1.0 - at).sqrt() / at.sqrt()) * (1.0 - at).sqrt();
        let eps = den.eps(&x, t, &Condition::Null).unwrap();
        let out = ddim_step(&x, &eps, t, Some(p), &s).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - coef * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn step_rejects_non_finite() {
        let s = schedule();
        let e = ddim_step(&[f64::MAX, 0.0], &[-f64::MAX, 0.0], 10, Some(5), &s).unwrap_err();
        assert!(matches!(e, Error::Numerical { t: Some(10), .. }));
    }

    #[test]
    fn point_mass_sampling_and_inversion() {
        let s = schedule();
        let w = make_moving_blob_world(1, 2, 4, 4, 0.0, 5).unwrap();
        let den = WorldDenoiser::clip(&w, &s);
        let grid = StepGrid::new(&s, 50).unwrap();
        let mu = w.components()[0].frame_means.clone();
        let x = StreamKey::new(4, Stage::Probe).normals(32);
        let out = ddim_sample(&den, &x, &grid, &GuidanceSpec::none()).unwrap();
        assert!(out.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-9));
        for opts in [InvertOptions::naive(), InvertOptions::fixed_point(1e-12, 200)] {
            let z = ddim_invert(&den, &mu, &grid, &GuidanceSpec::none(), &opts).unwrap();
            let back = ddim_sample(&den, &z, &grid, &GuidanceSpec::none()).unwrap();
            assert!(back.iter().zip(&mu).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn standard_normal_transport_preserves_moments() {
        let s = schedule();
        let w = single_gaussian_world(LatentClip::zeros(1, 1, 1), 1.0).unwrap();
        let den = WorldDenoiser::clip(&w, &s);
        let grid = StepGrid::new(&s, 50).unwrap();
        let n = 4000;
        let outs: Vec<f64> = (0..n)
            .map(|i| {
                let x = StreamKey::new(i, Stage::Probe).normals(1);
                ddim_sample(&den, &x, &grid, &GuidanceSpec::none()).unwrap()[0]
            })
            .collect();
        let mean = outs.iter().sum::<f64>() / n as f64;
        let var = outs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn separated_mixture_samples_land_on_modes() {
        let s = schedule();
        let sigma = 0.05;
        let w = make_moving_blob_world(2, 1, 8, 8, sigma, 2).unwrap();
        let den = WorldDenoiser::clip(&w, &s);
        let grid = StepGrid::new(&s, 50).unwrap();
        let n = 400;
        let mut counts = [0usize; 2];
        for i in 0..n {
            let x = StreamKey::new(i, Stage::Probe).normals(64);
            let out = ddim_sample(&den, &x, &grid, &GuidanceSpec::none()).unwrap();
            let dist: Vec<f64> = (0..2)
                .map(|k| {
                    out.iter()
                        .zip(&w.components()[k].frame_means)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .collect();
            let k = if dist[0] < dist[1] { 0 } else { 1 };
            assert!(dist[k] < 3.0 * sigma * 2.0, "sample {i} off-mode: {dist:?}");
            counts[k] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.5).abs() < 0.05 + 0.05, "{counts:?}");
        }
    }

    #[test]
    fn fixed_point_round_trips() {
        let s = schedule();
        let w = make_moving_blob_world(4, 4, 8, 8, 0.05, 7).unwrap();
        let den = WorldDenoiser::clip(&w, &s);
        let grid = StepGrid::new(&s, 50).unwrap();
        let opts = InvertOptions::fixed_point(1e-10, 500);
        let g = GuidanceSpec::none();
        for seed in 0..3 {
            let x0 = sample_data(&w, seed).0.into_values();
            let z = ddim_invert(&den, &x0, &grid, &g, &opts).unwrap();
            let back = ddim_sample(&den, &z, &grid, &g).unwrap();
            let err = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "sample(invert) error {err:e}");

            let zt = StreamKey::new(seed, Stage::Probe).normals(w.clip_len());
            let x = ddim_sample(&den, &zt, &grid, &g).unwrap();
            let z2 = ddim_invert(&den, &x, &grid, &g, &opts).unwrap();
            let err = z2.iter().zip(&zt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "invert(sample) error {err:e}");
        }
    }

    #[test]
    fn non_convergence_reports_step() {
        let s = schedule();
        let w = make_moving_blob_world(4, 2, 8, 8, 0.05, 7).unwrap();
        let den = WorldDenoiser::clip(&w, &s);
        let grid = StepGrid::new(&s, 10).unwrap();
        let x0 = sample_data(&w, 0).0.into_values();
        let e = ddim_invert(&den, &x0, &grid, &GuidanceSpec::none(), &InvertOptions::fixed_point(1e-300, 1))
            .unwrap_err();
        assert!(matches!(e, Error::NonConvergence { step: 9, .. }), "{e}");
    }
}
