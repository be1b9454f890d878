//! Run reports and the cross-run comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use latentfs::tabular::{MetricKind, Task};
use serde::{Deserialize, Serialize};

/// A feature subset with its validation and test scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub method: String,
    pub indices: Vec<usize>,
    pub names: Vec<String>,
    pub size: usize,
    /// `size / p`.
    pub feature_ratio: f64,
    /// Internal-holdout score on the training split.
    pub validated: Option<f64>,
    /// Mean of the cross-validation folds on the test split.
    pub test_mean: f64,
    pub test_folds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub collection_s: Option<f64>,
    pub training_s: Option<f64>,
    pub search_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub collection: u64,
    pub model: u64,
    pub protocol: u64,
    pub synth: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub dataset: String,
    pub task: Task,
    pub metric: MetricKind,
    pub n_features: usize,
    pub chosen: SubsetScore,
    /// Record id of the highest-scoring base record.
    pub best_seed_id: usize,
    /// Record id the chosen candidate was searched from.
    pub chosen_seed_id: usize,
    /// all-features, k-best and mRMR at the chosen size, best seed.
    pub baselines: Vec<SubsetScore>,
    pub informative: Option<Vec<usize>>,
    pub timings: Timings,
    pub parameter_count: usize,
    pub seeds: Seeds,
    pub config: BTreeMap<String, String>,
    /// Config keys that differ from the defaults.
    pub overrides: BTreeMap<String, String>,
}

impl RunReport {
    pub fn baseline(&self, method: &str) -> Option<&SubsetScore> {
        self.baselines.iter().find(|b| b.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset   {} ({}, {} features)", self.dataset, self.task, self.n_features);
        let _ = writeln!(s, "method    {}", self.method);
        let _ = writeln!(s, "metric    {} (5-fold CV on the test split)", self.metric);
        let _ = writeln!(
            s,
            "chosen    {} of {} features, ratio {:.3}: {}",
            self.chosen.size,
            self.n_features,
            self.chosen.feature_ratio,
            self.chosen.names.join(", ")
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14} {:>5} {:>10} {:>10}", "subset", "size", "validated", "test");
        for row in std::iter::once(&self.chosen).chain(&self.baselines) {
            let v = row.validated.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:<14} {:>5} {:>10} {:>10.4}", row.method, row.size, v, row.test_mean);
        }
        let _ = writeln!(s);
        let t = &self.timings;
        let secs = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}s"));
        let _ = writeln!(
            s,
            "timing    collection {}, training {}, search {:.1}s",
            secs(t.collection_s),
            secs(t.training_s),
            t.search_s
        );
        let _ = writeln!(s, "params    {}", self.parameter_count);
        if let Some(inf) = &self.informative {
            let _ = writeln!(s, "informative columns {inf:?}");
        }
        if !self.overrides.is_empty() {
            let _ = writeln!(s, "overrides");
            for (k, v) in &self.overrides {
                let _ = writeln!(s, "  {k} = {v}");
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub dataset: String,
    pub metric: String,
    pub size: usize,
    pub feature_ratio: f64,
    pub validated: Option<f64>,
    pub test_mean: f64,
    pub all_features_test: Option<f64>,
    pub collection_s: Option<f64>,
    pub training_s: Option<f64>,
    pub search_s: f64,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

const COLUMNS: [&str; 12] = [
    "method",
    "dataset",
    "metric",
    "size",
    "feature_ratio",
    "validated",
    "test",
    "all_features_test",
    "collection_s",
    "training_s",
    "search_s",
    "parameters",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

impl ComparisonTable {
    pub fn from_reports(reports: &[RunReport]) -> Self {
        let rows = reports
            .iter()
            .map(|r| ComparisonRow {
                method: r.method.clone(),
                dataset: r.dataset.clone(),
                metric: r.metric.name().to_string(),
                size: r.chosen.size,
                feature_ratio: r.chosen.feature_ratio,
                validated: r.chosen.validated,
                test_mean: r.chosen.test_mean,
                all_features_test: r.baseline("all-features").map(|b| b.test_mean),
                collection_s: r.timings.collection_s,
                training_s: r.timings.training_s,
                search_s: r.timings.search_s,
                parameters: r.parameter_count,
            })
            .collect();
        ComparisonTable { rows }
    }

    fn cells(row: &ComparisonRow) -> [String; 12] {
        [
            row.method.clone(),
            row.dataset.clone(),
            row.metric.clone(),
            row.size.to_string(),
            format!("{:.4}", row.feature_ratio),
            opt(row.validated),
            format!("{:.4}", row.test_mean),
            opt(row.all_features_test),
            opt(row.collection_s),
            opt(row.training_s),
            format!("{:.4}", row.search_s),
            row.parameters.to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = COLUMNS.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&Self::cells(row).join(","));
            s.push('\n');
        }
        s
    }

    /// Space-aligned columns.
    pub fn to_text(&self) -> String {
        let body: Vec<[String; 12]> = self.rows.iter().map(Self::cells).collect();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| body.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<&str>| {
            let mut l = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ");
            l.truncate(l.trim_end().len());
            l.push('\n');
            l
        };
        let mut s = line(COLUMNS.to_vec());
        for r in &body {
            s.push_str(&line(r.iter().map(String::as_str).collect()));
        }
        s
    }
}
