//! The image-to-video bridge and the strategies it is compared against.
//!
//! `Sequential` generates frames independently with the frame-scope
//! denoiser, inverts the result twice (frame-wise with the frame-scope
//! model, jointly with the clip-scope model), blends the two latents with
//! ratio `alpha`, and re-samples the blend with the clip-scope denoiser.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddim::{self, Denoiser, GuidanceSpec, InvertOptions, Scope};
use crate::error::{Error, Result};
use crate::rng::{Stage, StreamKey};
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::worlds::{project_frame, sample_data, Condition, LatentClip, MixtureVideoWorld, WorldDenoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    IdmOnly,
    VdmOnly,
    Alternate,
    Fuse,
    Sequential,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::IdmOnly,
        Strategy::VdmOnly,
        Strategy::Alternate,
        Strategy::Fuse,
        Strategy::Sequential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::IdmOnly => "idm_only",
            Strategy::VdmOnly => "vdm_only",
            Strategy::Alternate => "alternate",
            Strategy::Fuse => "fuse",
            Strategy::Sequential => "sequential",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| {
                Error::config(
                    "bridge.strategy",
                    format!("unknown strategy `{name}` (expected one of idm_only, vdm_only, alternate, fuse, sequential)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Generation,
    Control,
    Edit,
    Inpaint,
    Outpaint,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Generation,
        TaskKind::Control,
        TaskKind::Edit,
        TaskKind::Inpaint,
        TaskKind::Outpaint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Generation => "generation",
            TaskKind::Control => "control",
            TaskKind::Edit => "edit",
            TaskKind::Inpaint => "inpaint",
            TaskKind::Outpaint => "outpaint",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| {
                Error::config(
                    "bridge.task",
                    format!("unknown task `{name}` (expected one of generation, control, edit, inpaint, outpaint)"),
                )
            })
    }
}

/// Knobs that shape how tasks are instantiated on a world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    /// Std of the per-frame perturbation added to control targets.
    pub control_jitter: f64,
    /// Side of the centred square the inpaint mask erases, as a fraction of
    /// the frame side.
    pub hole_fraction: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            control_jitter: 0.1,
            hole_fraction: 0.5,
        }
    }
}

/// A task instance: what the frame-scope and clip-scope models are asked for.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    /// Condition handed to the frame-scope model.
    pub idm_cond: Condition,
    /// Condition handed to the clip-scope model.
    pub vdm_cond: Condition,
    /// Source clip for edit and (out)inpaint tasks.
    pub source: Option<LatentClip>,
    /// Known-coordinate mask for inpaint and outpaint tasks.
    pub mask: Option<Vec<bool>>,
}

impl Task {
    /// Builds the task for `seed` on `world`; all randomness comes from
    /// keyed streams.
    pub fn build(kind: TaskKind, world: &MixtureVideoWorld, seed: u64, params: &TaskParams) -> Result<Self> {
        let setup = StreamKey::new(seed, Stage::TaskSetup);
        let pick = |label: u64| ((setup.cell(label).uniform() * world.k() as f64) as usize).min(world.k() - 1);
        let data_seed = crate::rng::splitmix64(seed ^ 0x7a5c_0de5);
        Ok(match kind {
            TaskKind::Generation => Task {
                kind,
                idm_cond: Condition::Null,
                vdm_cond: Condition::Null,
                source: None,
                mask: None,
            },
            TaskKind::Control => {
                if !(params.control_jitter >= 0.0) {
                    return Err(Error::config("bridge.control_jitter", "must be >= 0"));
                }
                let k = pick(1);
                let noise = setup.cell(2).normals(world.clip_len());
                let base = world.component_clip(k);
                let values = base
                    .values()
                    .iter()
                    .zip(noise)
                    .map(|(m, g)| m + params.control_jitter * g)
                    .collect();
                Task {
                    kind,
                    idm_cond: Condition::Control(base.with_values(values)?),
                    vdm_cond: Condition::Component(k),
                    source: None,
                    mask: None,
                }
            }
            TaskKind::Edit => {
                let (source, a) = sample_data(world, data_seed);
                let target = if world.k() > 1 { (a + 1) % world.k() } else { 0 };
                let cond = Condition::Edit {
                    source: source.clone(),
                    target,
                };
                Task {
                    kind,
                    idm_cond: cond.clone(),
                    vdm_cond: cond,
                    source: Some(source),
                    mask: None,
                }
            }
            TaskKind::Inpaint | TaskKind::Outpaint => {
                if !(params.hole_fraction > 0.0 && params.hole_fraction < 1.0) {
                    return Err(Error::config("bridge.hole_fraction", "must lie in (0, 1)"));
                }
                let (source, _) = sample_data(world, data_seed);
                let frame_mask = hole_mask(world.height(), world.width(), params.hole_fraction, kind == TaskKind::Outpaint);
                let mask: Vec<bool> = (0..world.frames()).flat_map(|_| frame_mask.iter().copied()).collect();
                let cond = Condition::Mask {
                    mask: mask.clone(),
                    source: source.clone(),
                };
                Task {
                    kind,
                    idm_cond: cond.clone(),
                    vdm_cond: cond,
                    source: Some(source),
                    mask: Some(mask),
                }
            }
        })
    }

    /// Guidance for the frame-scope model. Control targets appear in both
    /// branches, so guidance has no effect there.
    pub fn idm_guidance(&self, scale: f64) -> GuidanceSpec {
        match &self.idm_cond {
            Condition::Control(_) | Condition::Mask { .. } => GuidanceSpec::plain(self.idm_cond.clone()),
            c => GuidanceSpec::new(scale, c.clone(), Condition::Null),
        }
    }

    pub fn vdm_guidance(&self, scale: f64) -> GuidanceSpec {
        match &self.vdm_cond {
            Condition::Mask { .. } => GuidanceSpec::plain(self.vdm_cond.clone()),
            c => GuidanceSpec::new(scale, c.clone(), Condition::Null),
        }
    }

    /// Per-frame mask of the coordinates the task leaves unknown.
    pub fn unknown_region(&self, dim: usize) -> Option<Vec<bool>> {
        self.mask.as_ref().map(|m| m[..dim].iter().map(|k| !k).collect())
    }

    fn projection(&self, seed: u64) -> Option<Projection<'_>> {
        match (&self.mask, &self.source) {
            (Some(mask), Some(source)) => Some(Projection { mask, source, seed }),
            _ => None,
        }
    }
}

/// Known coordinates are everything outside a centred square hole
/// (`outpaint = true` flips the mask).
pub fn hole_mask(height: usize, width: usize, fraction: f64, outpaint: bool) -> Vec<bool> {
    let hh = ((height as f64 * fraction).round() as usize).clamp(1, height);
    let hw = ((width as f64 * fraction).round() as usize).clamp(1, width);
    let (y0, x0) = ((height - hh) / 2, (width - hw) / 2);
    let mut mask = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let in_hole = y >= y0 && y < y0 + hh && x >= x0 && x < x0 + hw;
            mask.push(in_hole == outpaint);
        }
    }
    mask
}

/// Known-region replacement applied after every sampling step.
#[derive(Debug, Clone, Copy)]
pub struct Projection<'a> {
    pub mask: &'a [bool],
    pub source: &'a LatentClip,
    pub seed: u64,
}

impl Projection<'_> {
    fn apply_frame(&self, x: &mut [f64], frame: usize, t: Option<usize>, schedule: &NoiseSchedule) {
        let d = self.source.dim();
        project_frame(
            x,
            self.source.frame(frame),
            &self.mask[frame * d..(frame + 1) * d],
            frame,
            t,
            schedule,
            self.seed,
        );
    }

    fn apply_clip(&self, x: &mut [f64], t: Option<usize>, schedule: &NoiseSchedule) {
        let d = self.source.dim();
        for (f, chunk) in x.chunks_mut(d).enumerate() {
            self.apply_frame(chunk, f, t, schedule);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub alpha: f64,
    pub strategy: Strategy,
    pub idm_guidance: f64,
    pub vdm_guidance: f64,
    pub t_infer: usize,
    pub invert: InvertOptions,
    pub seed: u64,
    /// In `Alternate`, whether the frame-scope model takes the first step.
    pub alternate_idm_first: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            strategy: Strategy::Sequential,
            idm_guidance: 7.5,
            vdm_guidance: 7.5,
            t_infer: 50,
            invert: InvertOptions::naive(),
            seed: 0,
            alternate_idm_first: true,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        for (key, s) in [("bridge.idm_guidance", self.idm_guidance), ("bridge.vdm_guidance", self.vdm_guidance)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(key, format!("guidance scale must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::config("bridge.alpha", format!("mixing ratio must lie in [0, 1], got {alpha}")))
    }
}

/// Intermediates of one run. Stages a strategy skips are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub idm_output: Option<LatentClip>,
    pub img_inverted: Option<LatentClip>,
    pub vid_inverted: Option<LatentClip>,
    pub mixed: Option<LatentClip>,
    pub final_clip: LatentClip,
}

impl PipelineTrace {
    /// Named clips present in the trace, in pipeline order.
    pub fn stages(&self) -> Vec<(&'static str, &LatentClip)> {
        let mut out = Vec::new();
        for (name, clip) in [
            ("idm_output", &self.idm_output),
            ("img_inverted", &self.img_inverted),
            ("vid_inverted", &self.vid_inverted),
            ("mixed", &self.mixed),
        ] {
            if let Some(c) = clip {
                out.push((name, c));
            }
        }
        out.push(("final", &self.final_clip));
        out
    }
}

fn require_scope(denoiser: &dyn Denoiser, scope: Scope, key: &str) -> Result<()> {
    if denoiser.scope() == scope {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("`{}` has {:?} scope, expected {scope:?}", denoiser.label(), denoiser.scope()),
        ))
    }
}

/// Unit-Gaussian start latents, one substream per frame.
pub fn framewise_start_latents(seed: u64, frames: usize, height: usize, width: usize) -> LatentClip {
    let values = (0..frames)
        .flat_map(|f| StreamKey::new(seed, Stage::StartLatent).frame(f as u64).normals(height * width))
        .collect();
    LatentClip::new(frames, height, width, values).expect("finite normals")
}

pub fn clip_start_latents(seed: u64, frames: usize, height: usize, width: usize) -> LatentClip {
    let values = StreamKey::new(seed, Stage::ClipStartLatent).normals(frames * height * width);
    LatentClip::new(frames, height, width, values).expect("finite normals")
}

/// DDIM inversion of every frame on its own; frames run in parallel.
pub fn framewise_invert(
    denoiser: &dyn Denoiser,
    clip: &LatentClip,
    grid: &StepGrid,
    opts: &InvertOptions,
) -> Result<LatentClip> {
    require_scope(denoiser, Scope::Frame, "image_denoiser")?;
    let frames: Vec<Vec<f64>> = (0..clip.frames())
        .into_par_iter()
        .map(|f| ddim::ddim_invert(denoiser, clip.frame(f), grid, &GuidanceSpec::none(), opts))
        .collect::<Result<_>>()?;
    LatentClip::from_frames(clip.height(), clip.width(), frames)
}

/// Frame-by-frame generation with a frame-scope denoiser.
///
/// For edit conditions `inputs` is the source clip, which is inverted
/// frame-wise under the null condition to obtain start latents; otherwise
/// `inputs` are the start latents themselves.
pub fn framewise_generate(
    idm: &dyn Denoiser,
    inputs: &LatentClip,
    guidance: &GuidanceSpec,
    grid: &StepGrid,
    invert: &InvertOptions,
    projection: Option<Projection<'_>>,
) -> Result<LatentClip> {
    require_scope(idm, Scope::Frame, "idm")?;
    let start = match &guidance.cond {
        Condition::Edit { .. } => framewise_invert(idm, inputs, grid, invert)?,
        _ => inputs.clone(),
    };
    let schedule = idm.schedule();
    let frames: Vec<Vec<f64>> = (0..start.frames())
        .into_par_iter()
        .map(|f| {
            let g = guidance.frame_slice(f);
            ddim::ddim_sample_with(idm, start.frame(f), grid, &g, |t, x| {
                if let Some(p) = &projection {
                    p.apply_frame(x, f, t, schedule);
                }
                Ok(())
            })
        })
        .collect::<Result<_>>()?;
    LatentClip::from_frames(start.height(), start.width(), frames)
}

/// Frame-wise and clip-wise inversions of `z0` and their blend.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedLatents {
    pub img: LatentClip,
    pub vid: LatentClip,
    pub mixed: LatentClip,
}

/// `alpha * img + (1 - alpha) * vid`; the endpoints return a branch unchanged.
pub fn mix_latents(img: &LatentClip, vid: &LatentClip, alpha: f64) -> Result<LatentClip> {
    check_alpha(alpha)?;
    if !img.same_shape(vid) {
        return Err(Error::Shape("inversion branches differ in shape".into()));
    }
    if alpha == 1.0 {
        return Ok(img.clone());
    }
    if alpha == 0.0 {
        return Ok(vid.clone());
    }
    let values = img
        .values()
        .iter()
        .zip(vid.values())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    img.with_values(values)
}

pub fn mixed_inversion(
    z0: &LatentClip,
    image_foundation: &dyn Denoiser,
    vdm: &dyn Denoiser,
    grid: &StepGrid,
    alpha: f64,
    invert: &InvertOptions,
) -> Result<MixedLatents> {
    check_alpha(alpha)?;
    require_scope(image_foundation, Scope::Frame, "image_foundation")?;
    require_scope(vdm, Scope::Clip, "vdm")?;
    let img = framewise_invert(image_foundation, z0, grid, invert).map_err(|e| Error::Branch {
        branch: "image",
        source: Box::new(e),
    })?;
    let vid = ddim::ddim_invert(vdm, z0.values(), grid, &GuidanceSpec::none(), invert)
        .and_then(|v| z0.with_values(v))
        .map_err(|e| Error::Branch {
            branch: "video",
            source: Box::new(e),
        })?;
    let mixed = mix_latents(&img, &vid, alpha)?;
    Ok(MixedLatents { img, vid, mixed })
}

/// Clip-scope DDIM sampling from `z_t` under the target condition.
pub fn temporal_smooth(
    vdm: &dyn Denoiser,
    z_t: &LatentClip,
    guidance: &GuidanceSpec,
    grid: &StepGrid,
    projection: Option<Projection<'_>>,
) -> Result<LatentClip> {
    require_scope(vdm, Scope::Clip, "vdm")?;
    let schedule = vdm.schedule();
    let out = ddim::ddim_sample_with(vdm, z_t.values(), grid, guidance, |t, x| {
        if let Some(p) = &projection {
            p.apply_clip(x, t, schedule);
        }
        Ok(())
    })?;
    z_t.with_values(out)
}

/// One frame-scope step applied to every frame of `x`.
fn framewise_step(
    idm: &dyn Denoiser,
    x: &LatentClip,
    t: usize,
    t_prev: Option<usize>,
    guidance: &GuidanceSpec,
) -> Result<Vec<f64>> {
    let frames: Vec<Vec<f64>> = (0..x.frames())
        .into_par_iter()
        .map(|f| {
            let eps = ddim::guided_eps(idm, x.frame(f), t, &guidance.frame_slice(f))?;
            ddim::ddim_step(x.frame(f), &eps, t, t_prev, idm.schedule())
        })
        .collect::<Result<_>>()?;
    Ok(frames.concat())
}

fn clip_step(
    vdm: &dyn Denoiser,
    x: &LatentClip,
    t: usize,
    t_prev: Option<usize>,
    guidance: &GuidanceSpec,
) -> Result<Vec<f64>> {
    let eps = ddim::guided_eps(vdm, x.values(), t, guidance)?;
    ddim::ddim_step(x.values(), &eps, t, t_prev, vdm.schedule())
}

/// Walks one shared latent down the grid, combining the two models per step.
fn interleaved(
    idm: &dyn Denoiser,
    vdm: &dyn Denoiser,
    start: &LatentClip,
    grid: &StepGrid,
    idm_guidance: &GuidanceSpec,
    vdm_guidance: &GuidanceSpec,
    fuse: bool,
    idm_first: bool,
    projection: Option<Projection<'_>>,
) -> Result<LatentClip> {
    let schedule = vdm.schedule();
    let mut x = start.clone();
    for (i, (t, t_prev)) in grid.pairs().enumerate() {
        let mut next = if fuse {
            let a = framewise_step(idm, &x, t, t_prev, idm_guidance).map_err(|e| Error::at_step(i, e))?;
            let b = clip_step(vdm, &x, t, t_prev, vdm_guidance).map_err(|e| Error::at_step(i, e))?;
            a.iter().zip(&b).map(|(u, v)| 0.5 * (u + v)).collect()
        } else if (i % 2 == 0) == idm_first {
            framewise_step(idm, &x, t, t_prev, idm_guidance).map_err(|e| Error::at_step(i, e))?
        } else {
            clip_step(vdm, &x, t, t_prev, vdm_guidance).map_err(|e| Error::at_step(i, e))?
        };
        if let Some(p) = &projection {
            p.apply_clip(&mut next, t_prev, schedule);
        }
        x = x.with_values(next)?;
    }
    Ok(x)
}

/// Runs one strategy on one task instance.
pub fn run_strategy(
    task: &Task,
    world: &MixtureVideoWorld,
    schedule: &NoiseSchedule,
    config: &BridgeConfig,
) -> Result<PipelineTrace> {
    config.validate()?;
    let grid = StepGrid::new(schedule, config.t_infer)?;
    let idm = WorldDenoiser::frame(world, schedule);
    let vdm = WorldDenoiser::clip(world, schedule);
    let seed = config.seed;
    let (m, h, w) = (world.frames(), world.height(), world.width());
    let idm_g = task.idm_guidance(config.idm_guidance);
    let vdm_g = task.vdm_guidance(config.vdm_guidance);
    let projection = task.projection(seed);

    // Start latents shared by every strategy that begins frame-wise.
    let framewise_inputs = || -> Result<LatentClip> {
        Ok(match (&task.idm_cond, &task.source) {
            (Condition::Edit { .. }, Some(source)) => source.clone(),
            _ => framewise_start_latents(seed, m, h, w),
        })
    };
    let interleave_start = || -> Result<LatentClip> {
        match (&task.idm_cond, &task.source) {
            (Condition::Edit { .. }, Some(source)) => framewise_invert(&idm, source, &grid, &config.invert),
            _ => Ok(framewise_start_latents(seed, m, h, w)),
        }
    };

    let only_final = |final_clip| PipelineTrace {
        idm_output: None,
        img_inverted: None,
        vid_inverted: None,
        mixed: None,
        final_clip,
    };

    match config.strategy {
        Strategy::IdmOnly => {
            let out = framewise_generate(&idm, &framewise_inputs()?, &idm_g, &grid, &config.invert, projection)?;
            Ok(PipelineTrace {
                idm_output: Some(out.clone()),
                ..only_final(out)
            })
        }
        Strategy::VdmOnly => {
            let start = clip_start_latents(seed, m, h, w);
            Ok(only_final(temporal_smooth(&vdm, &start, &vdm_g, &grid, projection)?))
        }
        Strategy::Alternate | Strategy::Fuse => {
            let out = interleaved(
                &idm,
                &vdm,
                &interleave_start()?,
                &grid,
                &idm_g,
                &vdm_g,
                config.strategy == Strategy::Fuse,
                config.alternate_idm_first,
                projection,
            )?;
            Ok(only_final(out))
        }
        Strategy::Sequential => {
            let z0 = framewise_generate(&idm, &framewise_inputs()?, &idm_g, &grid, &config.invert, projection)?;
            let MixedLatents { img, vid, mixed } =
                mixed_inversion(&z0, &idm, &vdm, &grid, config.alpha, &config.invert)?;
            let final_clip = temporal_smooth(&vdm, &mixed, &vdm_g, &grid, projection)?;
            Ok(PipelineTrace {
                idm_output: Some(z0),
                img_inverted: Some(img),
                vid_inverted: Some(vid),
                mixed: Some(mixed),
                final_clip,
            })
        }
    }
}
