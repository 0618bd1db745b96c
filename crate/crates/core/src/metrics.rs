//! Multi-task scores and method comparison tables.
//!
//! The primary score is the mean of sign-corrected metric differences in
//! native units: (1/T) sum_t sign_t (M_t - B_t), with sign +1 for
//! higher-better metrics and -1 for lower-better ones. This is the form
//! that reconstructs the published tables this lab checks itself against.
//! The relative-percentage variant is exposed separately and labeled
//! distinctly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::MetricKind;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const BASELINES_FORMAT_VERSION: u32 = 1;

fn check_lengths(method: &[f64], baseline: &[f64], higher_better: &[bool]) -> Result<()> {
    if method.len() != baseline.len() || method.len() != higher_better.len() || method.is_empty() {
        return Err(Error::Contract(format!(
            "delta-mtl needs matching non-empty metric lists, got {}/{}/{}",
            method.len(),
            baseline.len(),
            higher_better.len()
        )));
    }
    Ok(())
}

/// Mean sign-corrected absolute difference, in the metrics' native units.
pub fn delta_mtl(method: &[f64], baseline: &[f64], higher_better: &[bool]) -> Result<f64> {
    check_lengths(method, baseline, higher_better)?;
    let t = method.len() as f64;
    Ok(method
        .iter()
        .zip(baseline)
        .zip(higher_better)
        .map(|((&m, &b), &hb)| if hb { m - b } else { b - m })
        .sum::<f64>()
        / t)
}

/// Mean sign-corrected relative difference, in percent of the baseline.
pub fn delta_mtl_relative(method: &[f64], baseline: &[f64], higher_better: &[bool]) -> Result<f64> {
    check_lengths(method, baseline, higher_better)?;
    let t = method.len() as f64;
    let mut total = 0.0;
    for ((&m, &b), &hb) in method.iter().zip(baseline).zip(higher_better) {
        if b == 0.0 {
            return Err(Error::Contract(
                "relative delta-mtl undefined for a zero baseline".into(),
            ));
        }
        let diff = if hb { m - b } else { b - m };
        total += diff / b.abs() * 100.0;
    }
    Ok(total / t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub status: RunStatus,
    /// Per-task eval metrics; absent when the run diverged.
    pub metrics: Option<Vec<f64>>,
    /// Effective task weights at the end of training.
    pub final_lambdas: Option<Vec<f64>>,
    pub updates_run: usize,
}

/// Per-config experiment report, mirrored to JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub name: String,
    /// Echo of the resolved configuration.
    pub config: serde_json::Value,
    pub metric_kinds: Vec<MetricKind>,
    pub seeds: Vec<SeedOutcome>,
    /// Mean over completed seeds, one entry per task.
    pub seed_means: Option<Vec<f64>>,
    /// Single-task reference metrics the deltas are computed against.
    pub baselines: Option<Vec<f64>>,
    pub delta_mtl: Option<f64>,
    pub delta_mtl_relative: Option<f64>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn higher_better(&self) -> Vec<bool> {
        self.metric_kinds
            .iter()
            .map(MetricKind::higher_is_better)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported report format_version {}",
                report.format_version
            )));
        }
        Ok(report)
    }
}

/// Aggregate per-seed outcomes into means and deltas.
pub fn summarize(
    seeds: &[SeedOutcome],
    metric_kinds: &[MetricKind],
    baselines: Option<&[f64]>,
) -> Result<(Option<Vec<f64>>, Option<f64>, Option<f64>)> {
    let completed: Vec<&SeedOutcome> = seeds
        .iter()
        .filter(|s| s.status == RunStatus::Completed)
        .collect();
    if completed.is_empty() {
        return Ok((None, None, None));
    }
    let t = metric_kinds.len();
    let mut means = vec![0.0; t];
    for s in &completed {
        let m = s.metrics.as_ref().expect("completed seeds carry metrics");
        for (acc, &v) in means.iter_mut().zip(m) {
            *acc += v;
        }
    }
    for v in means.iter_mut() {
        *v /= completed.len() as f64;
    }
    let higher: Vec<bool> = metric_kinds.iter().map(MetricKind::higher_is_better).collect();
    let (dm, dmr) = match baselines {
        Some(b) => (
            Some(delta_mtl(&means, b, &higher)?),
            Some(delta_mtl_relative(&means, b, &higher)?),
        ),
        None => (None, None),
    };
    Ok((Some(means), dm, dmr))
}

/// Single-task reference metrics, produced by the baseline runner.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselinesFile {
    pub format_version: u32,
    /// Digest of the benchmark the baselines were trained on.
    pub benchmark_digest: String,
    pub metric_kinds: Vec<MetricKind>,
    /// per_task[t][i] = metric of task t under seed i.
    pub per_task_per_seed: Vec<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub means: Vec<f64>,
}

impl BaselinesFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: BaselinesFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format_version != BASELINES_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported baselines format_version {}",
                file.format_version
            )));
        }
        Ok(file)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub metrics: Vec<f64>,
    pub delta_mtl: f64,
    pub delta_mtl_relative: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub format_version: u32,
    pub metric_kinds: Vec<MetricKind>,
    pub baselines: Vec<f64>,
    /// Rows sorted by delta-mtl descending, ties broken by name.
    pub rows: Vec<ComparisonRow>,
}

/// Build a comparison table from per-method seed means, plus the
/// single-task baseline row at +0.00.
pub fn compare(
    methods: &BTreeMap<String, Vec<f64>>,
    baselines: &BaselinesFile,
) -> Result<ComparisonTable> {
    let higher: Vec<bool> = baselines
        .metric_kinds
        .iter()
        .map(MetricKind::higher_is_better)
        .collect();
    let mut rows = vec![ComparisonRow {
        name: "single-task".into(),
        metrics: baselines.means.clone(),
        delta_mtl: 0.0,
        delta_mtl_relative: 0.0,
    }];
    for (name, metrics) in methods {
        if metrics.len() != baselines.means.len() {
            return Err(Error::Contract(format!(
                "method {name} reports {} metrics, baselines hold {}",
                metrics.len(),
                baselines.means.len()
            )));
        }
        rows.push(ComparisonRow {
            name: name.clone(),
            metrics: metrics.clone(),
            delta_mtl: delta_mtl(metrics, &baselines.means, &higher)?,
            delta_mtl_relative: delta_mtl_relative(metrics, &baselines.means, &higher)?,
        });
    }
    rows.sort_by(|a, b| {
        b.delta_mtl
            .partial_cmp(&a.delta_mtl)
            .unwrap()
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(ComparisonTable {
        format_version: REPORT_FORMAT_VERSION,
        metric_kinds: baselines.metric_kinds.clone(),
        baselines: baselines.means.clone(),
        rows,
    })
}

pub fn write_comparison_csv(table: &ComparisonTable, path: &Path) -> Result<()> {
    let mut header = vec!["method".to_string()];
    for (t, kind) in table.metric_kinds.iter().enumerate() {
        header.push(format!("metric_{t}_{kind:?}").to_lowercase());
    }
    header.push("delta_mtl".into());
    header.push("delta_mtl_relative_pct".into());
    let mut lines = vec![header.join(",")];
    for row in &table.rows {
        let mut fields = vec![row.name.clone()];
        fields.extend(row.metrics.iter().map(|&v| crate::synth::format_f64(v)));
        fields.push(crate::synth::format_f64(row.delta_mtl));
        fields.push(crate::synth::format_f64(row.delta_mtl_relative));
        lines.push(fields.join(","));
    }
    std::fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nyuv2_ft_row_reconstructs() {
        // seg 53.22 vs 54.71 (up), depth 0.745 vs 0.747 (down) -> -0.744.
        let d = delta_mtl(&[0.745, 53.22], &[0.747, 54.71], &[false, true]).unwrap();
        assert!((d - (-0.744)).abs() < 1e-12);
        assert!((d - (-0.74)).abs() <= 0.01);
    }

    #[test]
    fn cityscapes_mgda_row_reconstructs() {
        let d = delta_mtl(&[5.252, 65.09], &[3.903, 63.84], &[false, true]).unwrap();
        assert!((d - (-0.0495)).abs() < 1e-10);
        assert!((d - (-0.05)).abs() <= 0.01);
    }

    #[test]
    fn identical_metrics_give_zero() {
        let d = delta_mtl(&[1.5, 70.0], &[1.5, 70.0], &[false, true]).unwrap();
        assert_eq!(d, 0.0);
        let r = delta_mtl_relative(&[1.5, 70.0], &[1.5, 70.0], &[false, true]).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn relative_variant_is_percent_of_baseline() {
        // +10% on a higher-better metric, -10% on a lower-better one.
        let r = delta_mtl_relative(&[0.9, 110.0], &[1.0, 100.0], &[false, true]).unwrap();
        assert!((r - 10.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_directions_are_contract_error() {
        assert!(delta_mtl(&[1.0], &[1.0, 2.0], &[true]).is_err());
        assert!(delta_mtl(&[], &[], &[]).is_err());
    }

    #[test]
    fn comparison_sorts_and_includes_baseline_row() {
        let baselines = BaselinesFile {
            format_version: BASELINES_FORMAT_VERSION,
            benchmark_digest: "test".into(),
            metric_kinds: vec![MetricKind::Rmse, MetricKind::Accuracy],
            per_task_per_seed: vec![vec![1.0], vec![80.0]],
            seeds: vec![0],
            means: vec![1.0, 80.0],
        };
        let mut methods = BTreeMap::new();
        methods.insert("worse".to_string(), vec![1.2, 78.0]);
        methods.insert("better".to_string(), vec![0.9, 81.0]);
        let table = compare(&methods, &baselines).unwrap();
        let names: Vec<&str> = table.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, vec!["better", "single-task", "worse"]);
        assert_eq!(table.rows[1].delta_mtl, 0.0);
        assert_eq!(table.rows.len(), methods.len() + 1);
    }

    #[test]
    fn comparing_identical_methods_gives_identical_rows() {
        let baselines = BaselinesFile {
            format_version: BASELINES_FORMAT_VERSION,
            benchmark_digest: "test".into(),
            metric_kinds: vec![MetricKind::Rmse],
            per_task_per_seed: vec![vec![1.0]],
            seeds: vec![0],
            means: vec![1.0],
        };
        let mut methods = BTreeMap::new();
        methods.insert("a".to_string(), vec![0.8]);
        methods.insert("b".to_string(), vec![0.8]);
        let table = compare(&methods, &baselines).unwrap();
        assert_eq!(table.rows[0].delta_mtl, table.rows[1].delta_mtl);
        assert_eq!(table.rows[0].metrics, table.rows[1].metrics);
        // Ties broken by name.
        assert_eq!(table.rows[0].name, "a");
    }
}
