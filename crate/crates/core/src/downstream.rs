//! The downstream model used to score feature subsets: CART trees, a bagged
//! random forest, and the two evaluation protocols (internal holdout on the
//! training split for record labels, k-fold CV on the test split for
//! reporting).

use std::cell::RefCell;
use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{
    compute_metric, kfold_indices, split_indices, Dataset, Matrix, MetricKind, SplitPlan, Task,
};

/// Output of a fitted model on a batch of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Class labels or regression values.
    pub values: Vec<f64>,
    /// Class probabilities per row (classification only).
    pub proba: Option<Vec<Vec<f64>>>,
}

impl Predictions {
    /// Probability of class 1 per row, for ROC/AUC.
    pub fn positive_scores(&self) -> Option<Vec<f64>> {
        self.proba
            .as_ref()
            .map(|p| p.iter().map(|row| row.get(1).copied().unwrap_or(0.0)).collect())
    }
}

pub trait Predictor {
    fn predict(&self, x: &Matrix) -> Predictions;
}

/// A downstream learner. Anything implementing this can replace the forest
/// in subset evaluation.
pub trait Estimator {
    type Model: Predictor;

    fn fit(&self, x: &Matrix, y: &[f64], task: Task, n_classes: usize, seed: u64) -> Result<Self::Model>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Class probabilities, or a single mean for regression.
    Leaf { value: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<Node>,
    pub task: Task,
    pub n_classes: usize,
}

impl TreeModel {
    fn leaf_for(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { value } => return value,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    /// Feature tested at the root, if the root is a split.
    pub fn root_feature(&self) -> Option<usize> {
        match self.nodes.first()? {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        }
    }
}

impl Predictor for TreeModel {
    fn predict(&self, x: &Matrix) -> Predictions {
        let leaves: Vec<&[f64]> = (0..x.rows()).map(|r| self.leaf_for(x.row(r))).collect();
        if self.task.is_classification() {
            let proba: Vec<Vec<f64>> = leaves.iter().map(|l| l.to_vec()).collect();
            Predictions {
                values: proba.iter().map(|p| argmax(p) as f64).collect(),
                proba: Some(proba),
            }
        } else {
            Predictions {
                values: leaves.iter().map(|l| l[0]).collect(),
                proba: None,
            }
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// `None` grows until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Fraction of features tried per node; `None` tries ⌈√p⌉ for
    /// classification and ⌈p/3⌉ for regression.
    pub feature_subsample: Option<f64>,
}

impl Default for TreeConfig {
    /// A single full CART tree considering every feature at every node.
    fn default() -> Self {
        TreeConfig {
            max_depth: None,
            min_samples_leaf: 1,
            feature_subsample: Some(1.0),
        }
    }
}

impl TreeConfig {
    fn features_per_node(&self, p: usize, task: Task) -> usize {
        let m = match self.feature_subsample {
            Some(frac) => (frac * p as f64).ceil() as usize,
            None if task.is_classification() => (p as f64).sqrt().ceil() as usize,
            None => (p as f64 / 3.0).ceil() as usize,
        };
        m.clamp(1, p)
    }
}

impl Estimator for TreeConfig {
    type Model = TreeModel;

    fn fit(&self, x: &Matrix, y: &[f64], task: Task, n_classes: usize, seed: u64) -> Result<TreeModel> {
        check_fit_inputs(x, y, task)?;
        let rows: Vec<usize> = (0..x.rows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(grow_tree(x, y, rows, task, n_classes, self, &mut rng))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub feature_subsample: Option<f64>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 30,
            max_depth: 8,
            min_samples_leaf: 2,
            feature_subsample: None,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            max_depth: Some(self.max_depth),
            min_samples_leaf: self.min_samples_leaf,
            feature_subsample: self.feature_subsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub config: ForestConfig,
    pub bootstrap_seed: u64,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

impl Predictor for ForestModel {
    fn predict(&self, x: &Matrix) -> Predictions {
        let first = &self.trees[0];
        let width = if first.task.is_classification() { first.n_classes } else { 1 };
        let mut acc = vec![vec![0.0; width]; x.rows()];
        for tree in &self.trees {
            for (r, slot) in acc.iter_mut().enumerate() {
                for (a, v) in slot.iter_mut().zip(tree.leaf_for(x.row(r))) {
                    *a += v;
                }
            }
        }
        let k = self.trees.len() as f64;
        for slot in &mut acc {
            for a in slot.iter_mut() {
                *a /= k;
            }
        }
        if first.task.is_classification() {
            Predictions {
                values: acc.iter().map(|p| argmax(p) as f64).collect(),
                proba: Some(acc),
            }
        } else {
            Predictions {
                values: acc.iter().map(|v| v[0]).collect(),
                proba: None,
            }
        }
    }
}

impl Estimator for ForestConfig {
    type Model = ForestModel;

    fn fit(&self, x: &Matrix, y: &[f64], task: Task, n_classes: usize, seed: u64) -> Result<ForestModel> {
        fit_forest(x, y, task, n_classes, self, seed)
    }
}

fn check_fit_inputs(x: &Matrix, y: &[f64], task: Task) -> Result<()> {
    if x.cols() == 0 {
        return Err(Error::EmptySubset);
    }
    if x.rows() != y.len() {
        return Err(Error::LengthMismatch(x.rows(), y.len()));
    }
    if x.rows() < 2 {
        return Err(Error::InvalidDataset(format!("{} training rows", x.rows())));
    }
    if task.is_classification() && y.iter().all(|v| *v == y[0]) {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Bagged CART ensemble. Tree `t` draws its bootstrap sample and feature
/// subsets from its own stream seeded with `seed + t`.
pub fn fit_forest(
    x: &Matrix,
    y: &[f64],
    task: Task,
    n_classes: usize,
    cfg: &ForestConfig,
    seed: u64,
) -> Result<ForestModel> {
    check_fit_inputs(x, y, task)?;
    if cfg.n_trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let tree_cfg = cfg.tree_config();
    let n = x.rows();
    let trees = (0..cfg.n_trees)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let rows: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow_tree(x, y, rows, task, n_classes, &tree_cfg, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        trees,
        config: cfg.clone(),
        bootstrap_seed: seed,
    })
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    score: f64,
}

fn grow_tree(
    x: &Matrix,
    y: &[f64],
    rows: Vec<usize>,
    task: Task,
    n_classes: usize,
    cfg: &TreeConfig,
    rng: &mut ChaCha8Rng,
) -> TreeModel {
    let mut nodes = Vec::new();
    let m = cfg.features_per_node(x.cols(), task);
    build_node(x, y, rows, 0, task, n_classes, cfg, m, rng, &mut nodes);
    TreeModel {
        nodes,
        task,
        n_classes,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_node(
    x: &Matrix,
    y: &[f64],
    rows: Vec<usize>,
    depth: usize,
    task: Task,
    n_classes: usize,
    cfg: &TreeConfig,
    m: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    nodes.push(Node::Leaf {
        value: leaf_value(y, &rows, task, n_classes),
    });
    let depth_ok = cfg.max_depth.is_none_or(|d| depth < d);
    if !depth_ok || rows.len() < 2 * cfg.min_samples_leaf.max(1) || is_pure(y, &rows) {
        return id;
    }
    let mut features: Vec<usize> = sample(rng, x.cols(), m).into_vec();
    features.sort_unstable();
    let Some(best) = best_split(x, y, &rows, &features, task, n_classes, cfg.min_samples_leaf) else {
        return id;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&r| x.get(r, best.feature) <= best.threshold);
    drop(rows);
    let left = build_node(x, y, left_rows, depth + 1, task, n_classes, cfg, m, rng, nodes);
    let right = build_node(x, y, right_rows, depth + 1, task, n_classes, cfg, m, rng, nodes);
    nodes[id] = Node::Split {
        feature: best.feature,
        threshold: best.threshold,
        left,
        right,
    };
    id
}

fn is_pure(y: &[f64], rows: &[usize]) -> bool {
    rows.iter().all(|&r| y[r] == y[rows[0]])
}

fn leaf_value(y: &[f64], rows: &[usize], task: Task, n_classes: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    if task.is_classification() {
        let mut counts = vec![0.0; n_classes];
        for &r in rows {
            counts[y[r] as usize] += 1.0;
        }
        counts.iter_mut().for_each(|c| *c /= n);
        counts
    } else {
        vec![rows.iter().map(|&r| y[r]).sum::<f64>() / n]
    }
}

/// Greedy best split over `features`, scanning midpoints between consecutive
/// distinct values. Gini (classification) and variance (regression) are
/// minimized through the equivalent maximization of Σ c²/n and S²/n over the
/// two children. Earlier features and thresholds win exact ties.
fn best_split(
    x: &Matrix,
    y: &[f64],
    rows: &[usize],
    features: &[usize],
    task: Task,
    n_classes: usize,
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = rows.len();
    let min_leaf = min_leaf.max(1);
    let classify = task.is_classification();

    let mut total = vec![0.0; if classify { n_classes } else { 1 }];
    for &r in rows {
        if classify {
            total[y[r] as usize] += 1.0;
        } else {
            total[0] += y[r];
        }
    }
    let purity = |s: &[f64], cnt: f64| -> f64 {
        if classify {
            s.iter().map(|c| c * c).sum::<f64>() / cnt
        } else {
            s[0] * s[0] / cnt
        }
    };
    let parent = purity(&total, n as f64);
    let tol = 1e-12 * parent.abs().max(1.0);

    let mut best: Option<SplitChoice> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut left = vec![0.0; total.len()];
    let mut right = vec![0.0; total.len()];
    for &f in features {
        pairs.clear();
        pairs.extend(rows.iter().map(|&r| (x.get(r, f), y[r])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[n - 1].0 {
            continue;
        }
        left.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n - 1 {
            let yi = pairs[i].1;
            if classify {
                left[yi as usize] += 1.0;
            } else {
                left[0] += yi;
            }
            let n_left = i + 1;
            if pairs[i].0 == pairs[i + 1].0 || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            for (r, (t, l)) in right.iter_mut().zip(total.iter().zip(&left)) {
                *r = t - l;
            }
            let score = purity(&left, n_left as f64) + purity(&right, (n - n_left) as f64);
            if score > parent + tol && best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: 0.5 * (pairs[i].0 + pairs[i + 1].0),
                    score,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Fit on part of the training split, score on the rest of it.
    InternalHoldout,
    /// k-fold cross-validation restricted to the test split.
    CvOnTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub internal_val_fraction: f64,
    pub cv_k: usize,
    pub metric: MetricKind,
    pub seed: u64,
}

impl EvalProtocol {
    pub fn internal(metric: MetricKind, seed: u64) -> Self {
        EvalProtocol {
            mode: EvalMode::InternalHoldout,
            internal_val_fraction: 0.25,
            cv_k: 5,
            metric,
            seed,
        }
    }

    pub fn with_mode(&self, mode: EvalMode) -> Self {
        EvalProtocol { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.internal_val_fraction > 0.0 && self.internal_val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "internal validation fraction {} not in (0, 1)",
                self.internal_val_fraction
            )));
        }
        if self.cv_k < 2 {
            return Err(Error::Config(format!("cv_k = {} < 2", self.cv_k)));
        }
        Ok(())
    }

    /// Fit and score rows of the internal holdout, as absolute dataset rows.
    pub fn internal_rows(&self, split: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>)> {
        let inner = split_indices(split.train_idx.len(), 1.0 - self.internal_val_fraction, self.seed)?;
        let map = |v: Vec<usize>| v.into_iter().map(|i| split.train_idx[i]).collect();
        Ok((map(inner.train_idx), map(inner.test_idx)))
    }
}

/// Sorted copy of `subset` after checking it is non-empty, in range and unique.
pub fn canonical_subset(subset: &[usize], p: usize) -> Result<Vec<usize>> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut s = subset.to_vec();
    s.sort_unstable();
    if let Some(&bad) = s.iter().find(|&&i| i >= p) {
        return Err(Error::InvalidSubset(format!("feature index {bad} >= {p}")));
    }
    if s.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidSubset("duplicate feature index".into()));
    }
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn fit_and_score<E: Estimator>(
    ds: &Dataset,
    fit_rows: &[usize],
    score_rows: &[usize],
    cols: &[usize],
    metric: MetricKind,
    estimator: &E,
    seed: u64,
) -> Result<f64> {
    let x_fit = ds.x.select(fit_rows, cols);
    let y_fit: Vec<f64> = fit_rows.iter().map(|&r| ds.y[r]).collect();
    let x_val = ds.x.select(score_rows, cols);
    let y_val: Vec<f64> = score_rows.iter().map(|&r| ds.y[r]).collect();
    let model = estimator.fit(&x_fit, &y_fit, ds.task, ds.n_classes, seed)?;
    let pred = model.predict(&x_val);
    let scores = if metric.needs_scores() {
        pred.positive_scores()
    } else {
        None
    };
    compute_metric(metric, &y_val, &pred.values, scores.as_deref())
}

/// Scores `subset` under `protocol`. The subset is sorted before fitting, so
/// the result does not depend on index order.
pub fn evaluate_subset<E: Estimator>(
    ds: &Dataset,
    split: &SplitPlan,
    subset: &[usize],
    protocol: &EvalProtocol,
    estimator: &E,
) -> Result<f64> {
    protocol.validate()?;
    protocol.metric.check_task(ds.task)?;
    let cols = canonical_subset(subset, ds.n_features())?;
    match protocol.mode {
        EvalMode::InternalHoldout => {
            let (fit_rows, val_rows) = protocol.internal_rows(split)?;
            fit_and_score(ds, &fit_rows, &val_rows, &cols, protocol.metric, estimator, protocol.seed)
        }
        EvalMode::CvOnTest => {
            let test = ds.subset_rows(&split.test_idx);
            cross_val_score(&test, &cols, protocol.cv_k, protocol.metric, estimator, protocol.seed)
                .map(|(mean, _)| mean)
        }
    }
}

/// k-fold cross-validation over every row of `ds`. Fold `f` fits with seed
/// `seed + f`. Returns the mean and the per-fold scores.
pub fn cross_val_score<E: Estimator>(
    ds: &Dataset,
    subset: &[usize],
    k: usize,
    metric: MetricKind,
    estimator: &E,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    metric.check_task(ds.task)?;
    let cols = canonical_subset(subset, ds.n_features())?;
    let folds = kfold_indices(ds.n_rows(), k, seed)?;
    let per_fold = folds
        .iter()
        .enumerate()
        .map(|(f, (fit_rows, val_rows))| {
            fit_and_score(ds, fit_rows, val_rows, &cols, metric, estimator, seed.wrapping_add(f as u64))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
    Ok((mean, per_fold))
}

/// Memoizing internal-holdout scorer shared by record collection and search,
/// so every subset is labelled by exactly the same protocol and seed.
pub struct HoldoutScorer<'a, E: Estimator> {
    ds: &'a Dataset,
    estimator: E,
    protocol: EvalProtocol,
    fit_rows: Vec<usize>,
    val_rows: Vec<usize>,
    cache: RefCell<HashMap<Vec<usize>, f64>>,
}

impl<'a, E: Estimator> HoldoutScorer<'a, E> {
    pub fn new(ds: &'a Dataset, split: &SplitPlan, protocol: &EvalProtocol, estimator: E) -> Result<Self> {
        protocol.validate()?;
        protocol.metric.check_task(ds.task)?;
        let protocol = protocol.with_mode(EvalMode::InternalHoldout);
        let (fit_rows, val_rows) = protocol.internal_rows(split)?;
        Ok(HoldoutScorer {
            ds,
            estimator,
            protocol,
            fit_rows,
            val_rows,
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn protocol(&self) -> &EvalProtocol {
        &self.protocol
    }

    /// Rows used for fitting and scoring; all come from the training split.
    pub fn rows(&self) -> (&[usize], &[usize]) {
        (&self.fit_rows, &self.val_rows)
    }

    pub fn score(&self, subset: &[usize]) -> Result<f64> {
        let cols = canonical_subset(subset, self.ds.n_features())?;
        if let Some(&v) = self.cache.borrow().get(&cols) {
            return Ok(v);
        }
        let v = fit_and_score(
            self.ds,
            &self.fit_rows,
            &self.val_rows,
            &cols,
            self.protocol.metric,
            &self.estimator,
            self.protocol.seed,
        )?;
        self.cache.borrow_mut().insert(cols, v);
        Ok(v)
    }

    pub fn evaluations(&self) -> usize {
        self.cache.borrow().len()
    }
}
