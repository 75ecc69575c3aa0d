use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeConfig, Strategy, TaskKind, TaskParams};
use crate::ddim::{InvertMode, InvertOptions};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::worlds::{make_moving_blob_world, MixtureVideoWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub k: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            k: 4,
            frames: 8,
            height: 16,
            width: 16,
            sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdimSection {
    pub t_infer: usize,
    pub invert_mode: InvertMode,
    pub fp_tol: f64,
    pub fp_max_iter: usize,
}

impl Default for DdimSection {
    fn default() -> Self {
        Self {
            t_infer: 50,
            invert_mode: InvertMode::Naive,
            fp_tol: 1e-10,
            fp_max_iter: 200,
        }
    }
}

impl DdimSection {
    pub fn invert_options(&self) -> InvertOptions {
        match self.invert_mode {
            InvertMode::Naive => InvertOptions::naive(),
            InvertMode::FixedPoint => InvertOptions::fixed_point(self.fp_tol, self.fp_max_iter),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSection {
    pub alpha: f64,
    pub strategy: Strategy,
    pub task: TaskKind,
    pub idm_guidance: f64,
    pub vdm_guidance: f64,
    pub seed: u64,
    pub control_jitter: f64,
    pub hole_fraction: f64,
    pub alternate_idm_first: bool,
}

impl Default for BridgeSection {
    fn default() -> Self {
        let b = BridgeConfig::default();
        let t = TaskParams::default();
        Self {
            alpha: b.alpha,
            strategy: b.strategy,
            task: TaskKind::Generation,
            idm_guidance: b.idm_guidance,
            vdm_guidance: b.vdm_guidance,
            seed: b.seed,
            control_jitter: t.control_jitter,
            hole_fraction: t.hole_fraction,
            alternate_idm_first: b.alternate_idm_first,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Compute latent correlation and gaussianity of the mixed latents.
    pub latent_stats: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { latent_stats: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub tasks: Vec<TaskKind>,
    pub strategies: Vec<Strategy>,
    pub alphas: Vec<f64>,
    /// Per-task alpha lists that replace `alphas` for that task.
    pub task_alphas: BTreeMap<TaskKind, Vec<f64>>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::Control, TaskKind::Edit, TaskKind::Inpaint],
            strategies: Strategy::ALL.to_vec(),
            alphas: vec![0.25],
            task_alphas: BTreeMap::from([
                (TaskKind::Control, vec![1.0]),
                (TaskKind::Edit, vec![1.0, 0.25]),
                (TaskKind::Inpaint, vec![0.1]),
            ]),
        }
    }
}

impl AblationSection {
    pub fn alphas_for(&self, task: TaskKind) -> &[f64] {
        self.task_alphas.get(&task).map_or(&self.alphas, |a| a.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub world: WorldSection,
    pub ddim: DdimSection,
    pub bridge: BridgeSection,
    pub metrics: MetricsSection,
    pub ablation: AblationSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Write raw and PGM dumps of every cell's final clip.
    pub dump_clips: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSection::default(),
            world: WorldSection::default(),
            ddim: DdimSection::default(),
            bridge: BridgeSection::default(),
            metrics: MetricsSection::default(),
            ablation: AblationSection::default(),
            seeds: (0..20).collect(),
            out_dir: PathBuf::from("out"),
            dump_clips: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.t_train, s.beta_start, s.beta_end)
    }

    pub fn world(&self) -> Result<MixtureVideoWorld> {
        let w = &self.world;
        make_moving_blob_world(w.k, w.frames, w.height, w.width, w.sigma, w.seed)
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            control_jitter: self.bridge.control_jitter,
            hole_fraction: self.bridge.hole_fraction,
        }
    }

    /// Pipeline parameters for a single run.
    pub fn bridge_config(&self) -> BridgeConfig {
        let b = &self.bridge;
        BridgeConfig {
            alpha: b.alpha,
            strategy: b.strategy,
            idm_guidance: b.idm_guidance,
            vdm_guidance: b.vdm_guidance,
            t_infer: self.ddim.t_infer,
            invert: self.ddim.invert_options(),
            seed: b.seed,
            alternate_idm_first: b.alternate_idm_first,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let schedule = self.schedule()?;
        self.world()?;
        StepGrid::new(&schedule, self.ddim.t_infer)?;
        if self.ddim.invert_mode == InvertMode::FixedPoint {
            if !(self.ddim.fp_tol > 0.0) {
                return Err(Error::config("ddim.fp_tol", "must be > 0"));
            }
            if self.ddim.fp_max_iter == 0 {
                return Err(Error::config("ddim.fp_max_iter", "must be at least 1"));
            }
        }
        self.bridge_config().validate()?;
        if !(self.bridge.control_jitter >= 0.0 && self.bridge.control_jitter.is_finite()) {
            return Err(Error::config("bridge.control_jitter", "must be finite and >= 0"));
        }
        if !(self.bridge.hole_fraction > 0.0 && self.bridge.hole_fraction < 1.0) {
            return Err(Error::config("bridge.hole_fraction", "must lie in (0, 1)"));
        }
        let a = &self.ablation;
        for (key, alphas) in std::iter::once(("ablation.alphas".to_string(), &a.alphas))
            .chain(a.task_alphas.iter().map(|(t, v)| (format!("ablation.task_alphas.{}", t.name()), v)))
        {
            if let Some(bad) = alphas.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::config(key, format!("mixing ratio must lie in [0, 1], got {bad}")));
            }
        }
        if a.tasks.is_empty() {
            return Err(Error::config("ablation.tasks", "must not be empty"));
        }
        if a.strategies.is_empty() {
            return Err(Error::config("ablation.strategies", "must not be empty"));
        }
        if a.tasks.iter().any(|t| a.alphas_for(*t).is_empty()) {
            return Err(Error::config("ablation.alphas", "every task needs at least one alpha"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"bridge": {"alpha": 0.5}, "seeds": [3]}"#).unwrap();
        assert_eq!(c.bridge.alpha, 0.5);
        assert_eq!(c.world, WorldSection::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let e = RunConfig::from_json(r#"{"bridge": {"alpah": 0.5}}"#).unwrap_err();
        assert!(e.to_string().contains("alpah"), "{e}");
        let e = RunConfig::from_json(r#"{"bridge": {"alpha": 1.5}}"#).unwrap_err();
        assert!(e.to_string().contains("bridge.alpha"));
        let e = RunConfig::from_json(r#"{"ddim": {"t_infer": 5000}}"#).unwrap_err();
        assert!(e.to_string().contains("ddim.t_infer"));
        let e = RunConfig::from_json(r#"{"ablation": {"task_alphas": {"edit": [-0.1]}}}"#).unwrap_err();
        assert!(e.to_string().contains("ablation.task_alphas.edit"));
        let e = RunConfig::from_json(r#"{"bridge": {"strategy": "zigzag"}}"#).unwrap_err();
        assert!(e.is_config());
    }
}
