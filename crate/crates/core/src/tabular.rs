//! Dataset ingestion, seeded splitting and evaluation metrics.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multiclass,
    Regression,
}

impl Task {
    pub fn is_classification(self) -> bool {
        !matches!(self, Task::Regression)
    }

    pub fn default_metric(self) -> MetricKind {
        match self {
            Task::Binary => MetricKind::F1,
            Task::Multiclass => MetricKind::MicroF1,
            Task::Regression => MetricKind::OneMinusMae,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Binary => "binary",
            Task::Multiclass => "multiclass",
            Task::Regression => "regression",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "c" => Ok(Task::Binary),
            "multiclass" | "mc" => Ok(Task::Multiclass),
            "regression" | "r" => Ok(Task::Regression),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch(data.len(), rows * cols));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copies the given rows and columns, in the order given.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub feature_names: Vec<String>,
    pub y: Vec<f64>,
    pub task: Task,
    /// Number of classes; 0 for regression.
    pub n_classes: usize,
}

impl Dataset {
    /// Builds a dataset and checks its invariants.
    pub fn new(
        name: impl Into<String>,
        x: Matrix,
        feature_names: Vec<String>,
        y: Vec<f64>,
        task: Task,
    ) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if x.cols() == 0 {
            return Err(Error::InvalidDataset("no feature columns".into()));
        }
        if x.rows() != y.len() {
            return Err(Error::LengthMismatch(x.rows(), y.len()));
        }
        if feature_names.len() != x.cols() {
            return Err(Error::LengthMismatch(feature_names.len(), x.cols()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &feature_names {
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidDataset(format!("duplicate feature name `{n}`")));
            }
        }
        if let Some(pos) = x.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite cell at row {}, column {}",
                pos / x.cols(),
                pos % x.cols()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite target".into()));
        }
        let n_classes = match task {
            Task::Regression => 0,
            Task::Binary | Task::Multiclass => {
                if y.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
                    return Err(Error::InvalidDataset(
                        "classification labels must be non-negative integers".into(),
                    ));
                }
                let max = y.iter().fold(0.0_f64, |a, &b| a.max(b)) as usize;
                let k = max + 1;
                if task == Task::Binary && k > 2 {
                    return Err(Error::InvalidDataset(format!(
                        "binary task has {k} classes"
                    )));
                }
                if task == Task::Binary {
                    2
                } else {
                    k
                }
            }
        };
        Ok(Dataset {
            name: name.into(),
            x,
            feature_names,
            y,
            task,
            n_classes,
        })
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    #[inline]
    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    /// Restricts the dataset to `rows`, keeping every feature.
    pub fn subset_rows(&self, rows: &[usize]) -> Dataset {
        let cols: Vec<usize> = (0..self.n_features()).collect();
        Dataset {
            name: self.name.clone(),
            x: self.x.select(rows, &cols),
            feature_names: self.feature_names.clone(),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            task: self.task,
            n_classes: self.n_classes,
        }
    }
}

/// Loads a header-first, comma separated file. Quoted fields are rejected.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str, task: Task) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    parse_csv(&name, &text, target_column, task)
}

/// Parses CSV text; see [`load_csv`].
pub fn parse_csv(name: &str, text: &str, target_column: &str, task: Task) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
    let header: Vec<&str> = split_line(header, 1)?;
    let target_idx = header
        .iter()
        .position(|h| *h == target_column)
        .ok_or_else(|| Error::MissingTargetColumn(target_column.to_string()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut data = Vec::new();
    let mut raw_targets = Vec::new();
    let mut n_rows = 0;
    for (line_no, line) in lines {
        let cells = split_line(line, line_no + 1)?;
        if cells.len() != header.len() {
            return Err(Error::Csv {
                line: line_no + 1,
                reason: format!("expected {} fields, found {}", header.len(), cells.len()),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            if col == target_idx {
                raw_targets.push(cell.to_string());
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: n_rows,
                    col,
                    value: cell.to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row: n_rows,
                        col,
                        value: cell.to_string(),
                    });
                }
                data.push(v);
            }
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let y = encode_targets(&raw_targets, task, target_idx)?;
    let x = Matrix::new(n_rows, feature_names.len(), data)?;
    Dataset::new(name, x, feature_names, y, task)
}

fn split_line(line: &str, line_no: usize) -> Result<Vec<&str>> {
    if line.contains('"') || line.contains('\'') {
        return Err(Error::Csv {
            line: line_no,
            reason: "quoted fields are not supported".into(),
        });
    }
    Ok(line.split(',').map(str::trim).collect())
}

/// Regression targets parse as reals. Classification targets that all parse
/// as integers are mapped through their sorted distinct values (the identity
/// for labels already in `0..k`); anything else is encoded in first-seen order.
fn encode_targets(raw: &[String], task: Task, col: usize) -> Result<Vec<f64>> {
    if task == Task::Regression {
        return raw
            .iter()
            .enumerate()
            .map(|(row, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        col,
                        value: s.clone(),
                    })
            })
            .collect();
    }
    let ints: Option<Vec<i64>> = raw.iter().map(|s| s.parse::<i64>().ok()).collect();
    if let Some(ints) = ints {
        let mut distinct = ints.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let code: HashMap<i64, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        return Ok(ints.iter().map(|v| code[v] as f64).collect());
    }
    let mut code: HashMap<&str, usize> = HashMap::new();
    Ok(raw
        .iter()
        .map(|s| {
            let next = code.len();
            *code.entry(s.as_str()).or_insert(next) as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffles row indices with `seed` and sends the first `⌊n·fraction⌋` to train.
pub fn split_holdout(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    split_indices(ds.n_rows(), train_fraction, seed)
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let n_train = (n as f64 * train_fraction).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::DegenerateSplit {
            train: n_train,
            test: n - n_train,
        });
    }
    let perm = shuffled(n, seed);
    Ok(SplitPlan {
        train_idx: perm[..n_train].to_vec(),
        test_idx: perm[n_train..].to_vec(),
        seed,
    })
}

/// Seeded k-fold partition of `0..n`. The first `n % k` folds hold one extra row.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(Error::InvalidFolds { k, n });
    }
    let perm = shuffled(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let val = perm[start..start + len].to_vec();
        let train = perm[..start]
            .iter()
            .chain(&perm[start + len..])
            .copied()
            .collect();
        folds.push((train, val));
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    F1,
    Precision,
    Recall,
    RocAuc,
    MicroF1,
    MacroF1,
    OneMinusMae,
    OneMinusMse,
    OneMinusRmse,
}

impl MetricKind {
    pub const ALL: [MetricKind; 9] = [
        MetricKind::F1,
        MetricKind::Precision,
        MetricKind::Recall,
        MetricKind::RocAuc,
        MetricKind::MicroF1,
        MetricKind::MacroF1,
        MetricKind::OneMinusMae,
        MetricKind::OneMinusMse,
        MetricKind::OneMinusRmse,
    ];

    /// The task kind this metric belongs to.
    pub fn task(self) -> Task {
        use MetricKind::*;
        match self {
            F1 | Precision | Recall | RocAuc => Task::Binary,
            MicroF1 | MacroF1 => Task::Multiclass,
            OneMinusMae | OneMinusMse | OneMinusRmse => Task::Regression,
        }
    }

    pub fn check_task(self, task: Task) -> Result<()> {
        if self.task() == task {
            Ok(())
        } else {
            Err(Error::MetricMismatch {
                metric: self.to_string(),
                reason: format!("task is {task}, metric needs {}", self.task()),
            })
        }
    }

    pub fn needs_scores(self) -> bool {
        self == MetricKind::RocAuc
    }

    pub fn name(self) -> &'static str {
        use MetricKind::*;
        match self {
            F1 => "f1",
            Precision => "precision",
            Recall => "recall",
            RocAuc => "roc_auc",
            MicroF1 => "micro_f1",
            MacroF1 => "macro_f1",
            OneMinusMae => "1-mae",
            OneMinusMse => "1-mse",
            OneMinusRmse => "1-rmse",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_', '/'], "");
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name().replace(['-', '_'], "") == norm)
            .or(match norm.as_str() {
                "auc" | "rocauc" => Some(MetricKind::RocAuc),
                "oneminusmae" => Some(MetricKind::OneMinusMae),
                "oneminusmse" => Some(MetricKind::OneMinusMse),
                "oneminusrmse" => Some(MetricKind::OneMinusRmse),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// Scores predictions; higher is better for every metric.
///
/// Binary metrics treat class 1 as positive. `y_score` holds the positive
/// class probability and is only read for ROC/AUC. A ratio whose denominator
/// is zero contributes 0.
pub fn compute_metric(
    kind: MetricKind,
    y_true: &[f64],
    y_pred: &[f64],
    y_score: Option<&[f64]>,
) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mismatch = |reason: &str| Error::MetricMismatch {
        metric: kind.to_string(),
        reason: reason.to_string(),
    };
    let is_label = |v: &f64| v.fract() == 0.0 && *v >= 0.0;
    match kind.task() {
        Task::Binary => {
            if !y_true.iter().chain(y_pred).all(|v| *v == 0.0 || *v == 1.0) {
                return Err(mismatch("binary metrics need labels in {0, 1}"));
            }
        }
        Task::Multiclass => {
            if !y_true.iter().chain(y_pred).all(is_label) {
                return Err(mismatch("class labels must be non-negative integers"));
            }
        }
        Task::Regression => {}
    }

    let n = y_true.len() as f64;
    let value = match kind {
        MetricKind::F1 | MetricKind::Precision | MetricKind::Recall => {
            let c = binary_counts(y_true, y_pred, 1.0);
            match kind {
                MetricKind::F1 => c.f1(),
                MetricKind::Precision => c.precision(),
                _ => c.recall(),
            }
        }
        MetricKind::RocAuc => {
            let scores = y_score.ok_or_else(|| mismatch("ROC/AUC needs positive-class scores"))?;
            if scores.len() != y_true.len() {
                return Err(Error::LengthMismatch(y_true.len(), scores.len()));
            }
            roc_auc(y_true, scores)
        }
        MetricKind::MicroF1 => {
            // With one label per sample, pooled precision = pooled recall = accuracy.
            let correct = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
            correct as f64 / n
        }
        MetricKind::MacroF1 => {
            let mut classes: Vec<i64> = y_true.iter().chain(y_pred).map(|&v| v as i64).collect();
            classes.sort_unstable();
            classes.dedup();
            classes
                .iter()
                .map(|&c| binary_counts(y_true, y_pred, c as f64).f1())
                .sum::<f64>()
                / classes.len() as f64
        }
        MetricKind::OneMinusMae => {
            1.0 - y_true.iter().zip(y_pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
        }
        MetricKind::OneMinusMse => 1.0 - mse(y_true, y_pred),
        MetricKind::OneMinusRmse => 1.0 - mse(y_true, y_pred).sqrt(),
    };
    Ok(value)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

struct Counts {
    tp: f64,
    fp: f64,
    fne: f64,
}

impl Counts {
    fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fne)
    }

    fn f1(&self) -> f64 {
        ratio(2.0 * self.tp, 2.0 * self.tp + self.fp + self.fne)
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn binary_counts(y_true: &[f64], y_pred: &[f64], positive: f64) -> Counts {
    let mut c = Counts {
        tp: 0.0,
        fp: 0.0,
        fne: 0.0,
    };
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t == positive, p == positive) {
            (true, true) => c.tp += 1.0,
            (false, true) => c.fp += 1.0,
            (true, false) => c.fne += 1.0,
            (false, false) => {}
        }
    }
    c
}

/// Mann-Whitney statistic with midranks; ties count 1/2.
fn roc_auc(y_true: &[f64], scores: &[f64]) -> f64 {
    let n_pos = y_true.iter().filter(|&&v| v == 1.0).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(y_true)
        .filter(|(_, &t)| t == 1.0)
        .map(|(r, _)| r)
        .sum();
    let (np, nn) = (n_pos as f64, n_neg as f64);
    (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}
