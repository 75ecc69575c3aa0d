//! Pixel-space temporal-consistency and latent-distribution diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worlds::{Condition, LatentClip, MixtureVideoWorld};

/// Norms (or variances) at or below this are treated as zero.
pub const ZERO_VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussianity {
    pub mean_abs: f64,
    pub var_dev: f64,
    pub cov_offdiag: f64,
}

/// Metrics of one pipeline run. Optional fields apply only to some tasks or
/// strategies and are `null` in reports otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub frame_consistency: f64,
    pub switch_rate: f64,
    /// Switch rate using only the coordinates a mask leaves unknown.
    pub region_switch_rate: Option<f64>,
    pub control_match_error: Option<f64>,
    pub latent_corr: Option<f64>,
    pub gaussianity: Option<Gaussianity>,
}

fn centered(frame: &[f64]) -> Vec<f64> {
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    frame.iter().map(|v| v - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn require_pairs(clip: &LatentClip, what: &str) -> Result<()> {
    if clip.frames() < 2 {
        Err(Error::Metric(format!("{what} needs at least 2 frames, got {}", clip.frames())))
    } else {
        Ok(())
    }
}

/// Mean cosine similarity of consecutive mean-centred frames.
///
/// A pair involving a zero-variance frame scores 1 when both frames are
/// constant and equal, 0 otherwise.
pub fn frame_consistency(clip: &LatentClip) -> Result<f64> {
    require_pairs(clip, "frame consistency")?;
    let frames: Vec<Vec<f64>> = clip.frame_iter().map(centered).collect();
    let mut total = 0.0;
    for i in 0..frames.len() - 1 {
        let (a, b) = (&frames[i], &frames[i + 1]);
        let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
        total += if na <= ZERO_VARIANCE_EPS || nb <= ZERO_VARIANCE_EPS {
            let equal = clip.frame(i) == clip.frame(i + 1);
            if na <= ZERO_VARIANCE_EPS && nb <= ZERO_VARIANCE_EPS && equal {
                1.0
            } else {
                0.0
            }
        } else {
            (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
        };
    }
    Ok(total / (frames.len() - 1) as f64)
}

/// Nearest `(component, frame slot)` of every frame, L2 over the selected
/// coordinates (all of them when `region` is `None`).
pub fn assign_slots(
    world: &MixtureVideoWorld,
    clip: &LatentClip,
    region: Option<&[bool]>,
) -> Result<Vec<(usize, usize)>> {
    if clip.dim() != world.dim() {
        return Err(Error::Shape(format!(
            "clip frames have {} values, world frames {}",
            clip.dim(),
            world.dim()
        )));
    }
    let d = clip.dim();
    if let Some(r) = region {
        if r.len() != d {
            return Err(Error::Shape(format!("region has {} entries, frames {d}", r.len())));
        }
    }
    let mut out = Vec::with_capacity(clip.frames());
    for frame in clip.frame_iter() {
        let mut best = (f64::INFINITY, (0, 0));
        for k in 0..world.k() {
            for j in 0..world.frames() {
                let mean = world.slot_mean(k, j);
                let dist: f64 = (0..d)
                    .filter(|c| region.is_none_or(|r| r[*c]))
                    .map(|c| (frame[c] - mean[c]).powi(2))
                    .sum();
                if dist < best.0 {
                    best = (dist, (k, j));
                }
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// Fraction of consecutive frame pairs that do not continue one trajectory.
///
/// A pair continues when frame `i + 1` is nearest to the frame slot directly
/// after frame `i`'s slot in the same component. A clip that follows one
/// component scores 0; frames drawn independently and uniformly from the
/// `K * m` slots score `1 - 1/(K m)` in expectation.
pub fn switch_rate(world: &MixtureVideoWorld, clip: &LatentClip) -> Result<f64> {
    switch_rate_in(world, clip, None)
}

/// [`switch_rate`] restricted to the per-frame coordinates marked in `region`.
pub fn switch_rate_in(
    world: &MixtureVideoWorld,
    clip: &LatentClip,
    region: Option<&[bool]>,
) -> Result<f64> {
    require_pairs(clip, "switch rate")?;
    let slots = assign_slots(world, clip, region)?;
    let switches = slots
        .windows(2)
        .filter(|w| {
            let ((k0, j0), (k1, j1)) = (w[0], w[1]);
            !(k0 == k1 && j1 == j0 + 1)
        })
        .count();
    Ok(switches as f64 / (slots.len() - 1) as f64)
}

/// Mean squared error between the clip and the per-frame control targets.
pub fn control_match_error(clip: &LatentClip, cond: &Condition) -> Result<f64> {
    let Condition::Control(targets) = cond else {
        return Err(Error::Metric(format!(
            "control match error needs a control condition, got {}",
            cond.label()
        )));
    };
    if !clip.same_shape(targets) {
        return Err(Error::Shape("control targets and clip differ in shape".into()));
    }
    let se: f64 = clip
        .values()
        .iter()
        .zip(targets.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(se / clip.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentCorr {
    pub value: f64,
    /// Pairs with a zero-variance frame, counted as correlation 0.
    pub degenerate_pairs: usize,
}

/// Mean Pearson correlation of consecutive flattened frames.
pub fn latent_corr(latents: &LatentClip) -> Result<LatentCorr> {
    require_pairs(latents, "latent correlation")?;
    let frames: Vec<Vec<f64>> = latents.frame_iter().map(centered).collect();
    let mut total = 0.0;
    let mut degenerate = 0;
    for w in frames.windows(2) {
        let (na, nb) = (dot(&w[0], &w[0]).sqrt(), dot(&w[1], &w[1]).sqrt());
        if na <= ZERO_VARIANCE_EPS || nb <= ZERO_VARIANCE_EPS {
            degenerate += 1;
        } else {
            total += (dot(&w[0], &w[1]) / (na * nb)).clamp(-1.0, 1.0);
        }
    }
    Ok(LatentCorr {
        value: total / (frames.len() - 1) as f64,
        degenerate_pairs: degenerate,
    })
}

/// Deviation of latents from i.i.d. unit Gaussian.
///
/// Each frame's coordinates are treated as draws: `mean_abs` and `var_dev`
/// average `|mean|` and `|variance - 1|` over frames, and `cov_offdiag` is
/// the root-mean-square covariance between consecutive frames. Single-frame
/// clips report `cov_offdiag = 0`.
pub fn gaussianity_stats(latents: &LatentClip) -> Result<Gaussianity> {
    if latents.is_empty() {
        return Err(Error::Metric("gaussianity of empty latents".into()));
    }
    let d = latents.dim() as f64;
    let m = latents.frames();
    let mut mean_abs = 0.0;
    let mut var_dev = 0.0;
    let frames: Vec<Vec<f64>> = latents.frame_iter().map(centered).collect();
    for (raw, c) in latents.frame_iter().zip(&frames) {
        let mean = raw.iter().sum::<f64>() / d;
        mean_abs += mean.abs();
        var_dev += (dot(c, c) / d - 1.0).abs();
    }
    let cov_offdiag = if m < 2 {
        0.0
    } else {
        let ms: f64 = frames
            .windows(2)
            .map(|w| (dot(&w[0], &w[1]) / d).powi(2))
            .sum::<f64>()
            / (m - 1) as f64;
        ms.sqrt()
    };
    Ok(Gaussianity {
        mean_abs: mean_abs / m as f64,
        var_dev: var_dev / m as f64,
        cov_offdiag,
    })
}
