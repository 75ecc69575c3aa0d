//! Training-time noise schedule and the inference-time timestep grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving schedule with cumulative signal retention `alpha_bars`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta schedule, `betas` interpolated from `beta_start` to
    /// `beta_end` inclusive.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train == 0 {
            return Err(Error::config("schedule.t_train", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config(
                "schedule.beta_start",
                format!("must lie in (0, 1), got {beta_start}"),
            ));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config(
                "schedule.beta_end",
                format!("must lie in [beta_start, 1), got {beta_end}"),
            ));
        }
        let betas: Vec<f64> = if t_train == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (t_train - 1) as f64;
            (0..t_train).map(|i| beta_start + span * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule.t_train", "must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::config("schedule.betas", format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Signal retention at `t`; `None` is the clean level with value 1.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        match t {
            Some(t) => self.alpha_bars[t],
            None => 1.0,
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < self.t_train() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "timestep {t} outside schedule of length {}",
                self.t_train()
            )))
        }
    }
}

/// Descending inference timesteps. Stepping below the last entry lands on
/// the clean level (`None`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    steps: Vec<usize>,
}

impl StepGrid {
    /// Evenly spaced "leading" grid: `steps[i] = floor((n-1-i) * t_train / n)`.
    pub fn new(schedule: &NoiseSchedule, t_infer: usize) -> Result<Self> {
        let t_train = schedule.t_train();
        if t_infer == 0 || t_infer > t_train {
            return Err(Error::config(
                "ddim.t_infer",
                format!("must lie in [1, {t_train}], got {t_infer}"),
            ));
        }
        let steps = (0..t_infer)
            .map(|i| (t_infer - 1 - i) * t_train / t_infer)
            .collect();
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Highest-noise timestep, where sampling starts.
    pub fn first(&self) -> usize {
        self.steps[0]
    }

    /// Target of the `i`-th sampling step.
    pub fn prev(&self, i: usize) -> Option<usize> {
        self.steps.get(i + 1).copied()
    }

    /// `(t, t_prev)` pairs in sampling order.
    pub fn pairs(
        &self,
    ) -> impl DoubleEndedIterator<Item = (usize, Option<usize>)> + ExactSizeIterator + '_ {
        (0..self.steps.len()).map(move |i| (self.steps[i], self.prev(i)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_product() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_by_hand() {
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.63).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_tail() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // running product computed independently in log space
        let log_prod: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        let last = s.alpha_bars()[999];
        assert!((last - log_prod.exp()).abs() < 1e-15);
        assert!(last > 0.0 && last < 0.01);
        // pinned regression value
        assert!((last - 4.035_829_765_375_675_4e-5).abs() < 1e-18, "{last:e}");
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn bad_bounds_name_the_field() {
        let e = NoiseSchedule::linear(10, 0.0, 0.1).unwrap_err();
        assert!(e.to_string().contains("schedule.beta_start"));
        let e = NoiseSchedule::linear(10, 0.2, 0.1).unwrap_err();
        assert!(e.to_string().contains("schedule.beta_end"));
        let e = NoiseSchedule::linear(0, 0.1, 0.1).unwrap_err();
        assert!(e.to_string().contains("schedule.t_train"));
    }

    #[test]
    fn grid_examples() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let g = StepGrid::new(&s, 50).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g.first(), 980);
        assert_eq!(*g.steps().last().unwrap(), 0);
        assert_eq!(StepGrid::new(&s, 1).unwrap().steps(), &[0]);
        let s4 = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        assert_eq!(StepGrid::new(&s4, 4).unwrap().steps(), &[3, 2, 1, 0]);
        assert!(StepGrid::new(&s4, 5).is_err());
    }

    #[test]
    fn sentinel_pairs() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let g = StepGrid::new(&s, 2).unwrap();
        let pairs: Vec<_> = g.pairs().collect();
        assert_eq!(pairs, vec![(2, Some(0)), (0, None)]);
        assert_eq!(s.alpha_bar(None), 1.0);
    }

    #[test]
    fn coarse_grid_inside_refinement() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        for n in [25, 50, 100, 125, 250] {
            let coarse = StepGrid::new(&s, n).unwrap();
            let fine = StepGrid::new(&s, 2 * n).unwrap();
            assert!(coarse.steps().iter().all(|t| fine.steps().contains(t)));
        }
    }

    proptest::proptest! {
        #[test]
        fn schedules_monotone_and_deterministic(
            t_train in 1usize..400,
            b0 in 1e-5f64..0.05,
            extra in 0.0f64..0.2,
        ) {
            let b1 = (b0 + extra).min(0.99);
            let a = NoiseSchedule::linear(t_train, b0, b1).unwrap();
            let b = NoiseSchedule::linear(t_train, b0, b1).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert!(a.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            proptest::prop_assert!(a.alpha_bars().iter().all(|v| *v > 0.0 && *v < 1.0));
            for n in 1..=t_train.min(60) {
                let g = StepGrid::new(&a, n).unwrap();
                proptest::prop_assert_eq!(g.len(), n);
                proptest::prop_assert!(g.steps().windows(2).all(|w| w[1] < w[0]));
                proptest::prop_assert!(g.steps().iter().all(|t| *t < t_train));
            }
        }
    }
}
