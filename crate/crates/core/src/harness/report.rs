use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::{Strategy, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::ClipMetrics;

use super::config::RunConfig;

/// Metric columns, in report order.
pub const METRIC_NAMES: [&str; 8] = [
    "frame_consistency",
    "switch_rate",
    "region_switch_rate",
    "control_match_error",
    "latent_corr",
    "gaussianity.mean_abs",
    "gaussianity.var_dev",
    "gaussianity.cov_offdiag",
];

pub fn metric_values(m: &ClipMetrics) -> [Option<f64>; 8] {
    let g = m.gaussianity;
    [
        Some(m.frame_consistency),
        Some(m.switch_rate),
        m.region_switch_rate,
        m.control_match_error,
        m.latent_corr,
        g.map(|g| g.mean_abs),
        g.map(|g| g.var_dev),
        g.map(|g| g.cov_offdiag),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub task: TaskKind,
    pub strategy: Strategy,
    pub alpha: f64,
    pub seed: u64,
    pub metrics: Option<ClipMetrics>,
    pub error: Option<String>,
    /// Seconds; excluded from determinism comparisons.
    pub wall_time: f64,
}

impl CellRecord {
    pub fn key(&self) -> (TaskKind, Strategy, u64, u64) {
        (self.task, self.strategy, self.alpha.to_bits(), self.seed)
    }
}

pub(crate) fn sort_records(records: &mut [CellRecord]) {
    records.sort_by(|a, b| {
        (a.task, a.strategy)
            .cmp(&(b.task, b.strategy))
            .then(a.alpha.total_cmp(&b.alpha))
            .then(a.seed.cmp(&b.seed))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some(Self { n, mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub task: TaskKind,
    pub strategy: Strategy,
    pub alpha: f64,
    pub cells: usize,
    pub failures: usize,
    pub metrics: BTreeMap<String, Summary>,
}

/// Per-(task, strategy, alpha) summaries of sorted records.
pub fn aggregate(records: &[CellRecord]) -> Vec<Aggregate> {
    let mut out: Vec<Aggregate> = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let r0 = &records[start];
        let same = |r: &CellRecord| r.task == r0.task && r.strategy == r0.strategy && r.alpha.to_bits() == r0.alpha.to_bits();
        let end = start + records[start..].iter().take_while(|r| same(r)).count();
        let group = &records[start..end];
        let mut metrics = BTreeMap::new();
        for (i, name) in METRIC_NAMES.iter().enumerate() {
            let values: Vec<f64> = group
                .iter()
                .filter_map(|r| r.metrics.as_ref().and_then(|m| metric_values(m)[i]))
                .collect();
            if let Some(s) = Summary::of(&values) {
                metrics.insert(name.to_string(), s);
            }
        }
        out.push(Aggregate {
            task: r0.task,
            strategy: r0.strategy,
            alpha: r0.alpha,
            cells: group.len(),
            failures: group.iter().filter(|r| r.error.is_some()).count(),
            metrics,
        });
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    /// Seed of the world construction; per-cell streams are keyed by the cell seed.
    pub global_seed: u64,
    pub config: RunConfig,
    pub records: Vec<CellRecord>,
    pub aggregates: Vec<Aggregate>,
    /// Seconds for the whole matrix; excluded from determinism comparisons.
    pub wall_time: f64,
}

impl RunReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn aggregate_for(&self, task: TaskKind, strategy: Strategy, alpha: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.task == task && a.strategy == strategy && a.alpha.to_bits() == alpha.to_bits())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a report and checks its aggregates against its records.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)?;
        let mut sorted = report.records.clone();
        sort_records(&mut sorted);
        if sorted != report.records {
            return Err(Error::Format("report records are not sorted by cell key".into()));
        }
        if aggregate(&report.records) != report.aggregates {
            return Err(Error::Format("report aggregates do not match its records".into()));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copy with every timing field zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_time = 0.0;
        for rec in &mut r.records {
            rec.wall_time = 0.0;
        }
        r
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["task".to_string(), "strategy".into(), "alpha".into(), "cells".into(), "failures".into()];
        for name in METRIC_NAMES {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_std"));
        }
        w.write_record(&header)?;
        for a in &self.aggregates {
            let mut row = vec![
                a.task.name().to_string(),
                a.strategy.name().to_string(),
                a.alpha.to_string(),
                a.cells.to_string(),
                a.failures.to_string(),
            ];
            for name in METRIC_NAMES {
                match a.metrics.get(name) {
                    Some(s) => {
                        row.push(s.mean.to_string());
                        row.push(s.std.to_string());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Gaussianity;

    fn record(strategy: Strategy, alpha: f64, seed: u64, fc: f64) -> CellRecord {
        CellRecord {
            task: TaskKind::Control,
            strategy,
            alpha,
            seed,
            metrics: Some(ClipMetrics {
                frame_consistency: fc,
                switch_rate: 0.5,
                region_switch_rate: None,
                control_match_error: Some(0.1 * fc),
                latent_corr: None,
                gaussianity: Some(Gaussianity {
                    mean_abs: 0.01,
                    var_dev: 0.02,
                    cov_offdiag: 0.03,
                }),
            }),
            error: None,
            wall_time: 0.5,
        }
    }

    #[test]
    fn single_record_aggregate_equals_record() {
        let records = vec![record(Strategy::Sequential, 0.25, 0, 0.7)];
        let agg = aggregate(&records);
        assert_eq!(agg.len(), 1);
        let fc = agg[0].metrics["frame_consistency"];
        assert_eq!((fc.n, fc.mean, fc.std), (1, 0.7, 0.0));
        assert!(!agg[0].metrics.contains_key("latent_corr"));
    }

    #[test]
    fn failed_cells_are_counted_not_averaged() {
        let mut bad = record(Strategy::Fuse, 0.5, 1, 0.0);
        bad.metrics = None;
        bad.error = Some("boom".into());
        let mut records = vec![bad, record(Strategy::Fuse, 0.5, 0, 0.4), record(Strategy::Fuse, 0.5, 2, 0.6)];
        sort_records(&mut records);
        let agg = aggregate(&records);
        assert_eq!((agg[0].cells, agg[0].failures), (3, 1));
        let fc = agg[0].metrics["frame_consistency"];
        assert!((fc.mean - 0.5).abs() < 1e-15 && (fc.std - 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_byte_identical_and_checked() {
        let mut records = vec![
            record(Strategy::Sequential, 0.25, 1, 0.71),
            record(Strategy::IdmOnly, 0.25, 0, 0.1 + 0.2),
            record(Strategy::Sequential, 0.25, 0, 1.0 / 3.0),
        ];
        sort_records(&mut records);
        let report = RunReport {
            tool_version: crate::TOOL_VERSION.into(),
            global_seed: 0,
            config: RunConfig::default(),
            aggregates: aggregate(&records),
            records,
            wall_time: 1.25,
        };
        let a = report.to_json().unwrap();
        let back = RunReport::from_json(&a).unwrap();
        assert_eq!(back.to_json().unwrap(), a);
        let mut tampered = back.clone();
        tampered.aggregates[0].metrics.get_mut("switch_rate").unwrap().mean = 0.9;
        assert!(RunReport::from_json(&tampered.to_json().unwrap()).is_err());
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("task,strategy,alpha,cells,failures,frame_consistency_mean"));
    }
}
