//! The `(subset, accuracy)` training corpus: filter selectors, the
//! multi-agent reinforcement explorer, uniform random collection,
//! permutation augmentation and the on-disk record store.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::downstream::{Estimator, HoldoutScorer};
use crate::error::{Error, Result};
use crate::tabular::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Kbest,
    Mrmr,
    Rl,
    Random,
    Augmented,
}

impl Source {
    pub const ALL: [Source; 5] = [Source::Kbest, Source::Mrmr, Source::Rl, Source::Random, Source::Augmented];

    pub fn name(self) -> &'static str {
        match self {
            Source::Kbest => "kbest",
            Source::Mrmr => "mrmr",
            Source::Rl => "rl",
            Source::Random => "random",
            Source::Augmented => "augmented",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A scored subset before it has been given an id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSubset {
    /// Ascending feature indices.
    pub tokens: Vec<usize>,
    pub accuracy: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSubsetRecord {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub accuracy: f64,
    pub source: Source,
    pub parent_id: Option<usize>,
}

impl FeatureSubsetRecord {
    pub fn is_base(&self) -> bool {
        self.source != Source::Augmented
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    fingerprint: String,
    n_features: usize,
    config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordStore {
    pub fingerprint: String,
    pub n_features: usize,
    /// Whatever produced the records, echoed verbatim.
    pub config: serde_json::Value,
    pub records: Vec<FeatureSubsetRecord>,
}

impl RecordStore {
    pub fn empty(fingerprint: impl Into<String>, n_features: usize) -> Self {
        RecordStore {
            fingerprint: fingerprint.into(),
            n_features,
            config: serde_json::Value::Null,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn base(&self) -> impl Iterator<Item = &FeatureSubsetRecord> {
        self.records.iter().filter(|r| r.is_base())
    }

    pub fn base_count(&self) -> usize {
        self.base().count()
    }

    pub fn get(&self, id: usize) -> Option<&FeatureSubsetRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn count_by_source(&self) -> Vec<(Source, usize)> {
        Source::ALL
            .iter()
            .map(|&s| (s, self.records.iter().filter(|r| r.source == s).count()))
            .filter(|&(_, n)| n > 0)
            .collect()
    }

    /// Checks the store invariants against a feature count.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id) {
                return Err(Error::RecordStore(format!("duplicate record id {}", r.id)));
            }
            if r.tokens.is_empty() {
                return Err(Error::RecordStore(format!("record {} has no tokens", r.id)));
            }
            if !r.accuracy.is_finite() {
                return Err(Error::RecordStore(format!("record {} has a non-finite accuracy", r.id)));
            }
            let mut sorted = r.tokens.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != r.tokens.len() || sorted.last().is_some_and(|&t| t >= self.n_features) {
                return Err(Error::RecordStore(format!("record {} has invalid tokens {:?}", r.id, r.tokens)));
            }
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Header line followed by one JSON object per record.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = StoreHeader {
            fingerprint: self.fingerprint.clone(),
            n_features: self.n_features,
            config: self.config.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: StoreHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::RecordStore("missing header line".into()))?,
        )?;
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<FeatureSubsetRecord>, _>>()?;
        let store = RecordStore {
            fingerprint: header.fingerprint,
            n_features: header.n_features,
            config: header.config,
            records,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Short hex digest of the dataset's identity: name, feature count, row
/// count and task.
pub fn fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(format!("{}\u{1f}{}\u{1f}{}\u{1f}{}", ds.name, ds.n_features(), ds.n_rows(), ds.task).as_bytes());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Filter selectors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    FScore,
    MutualInfo,
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_score" => Ok(ScoreKind::FScore),
            "mutual_info" => Ok(ScoreKind::MutualInfo),
            other => Err(Error::Config(format!("unknown score `{other}` (expected f_score or mutual_info)"))),
        }
    }
}

pub const DEFAULT_BINS: usize = 10;

/// Equal-frequency discretization. Values are ranked; tied values share the
/// bin of their first rank, so equal inputs always land in one bin.
pub fn discretize(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut first_rank = 0;
    for (rank, &i) in order.iter().enumerate() {
        if rank > 0 && values[order[rank - 1]] != values[i] {
            first_rank = rank;
        }
        out[i] = (first_rank * bins / n).min(bins - 1);
    }
    out
}

/// Plug-in mutual information (nats) between two discrete label vectors.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let ka = a.iter().max().map_or(0, |&m| m + 1);
    let kb = b.iter().max().map_or(0, |&m| m + 1);
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let c = c as f64;
                mi += c / nf * (c * nf / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Discrete target: class labels, or binned values for regression.
pub fn discrete_target(ds: &Dataset, bins: usize) -> Vec<usize> {
    if ds.task.is_classification() {
        ds.y.iter().map(|&v| v as usize).collect()
    } else {
        discretize(&ds.y, bins)
    }
}

/// ANOVA F statistic for classification; for regression the univariate
/// linear-regression F, `r² / (1 - r²) · (n - 2)`. Constant features score 0.
pub fn f_score(column: &[f64], ds: &Dataset) -> f64 {
    let n = column.len();
    if ds.task.is_classification() {
        let k = ds.n_classes;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&v, &y) in column.iter().zip(&ds.y) {
            sums[y as usize] += v;
            counts[y as usize] += 1;
        }
        let grand = column.iter().sum::<f64>() / n as f64;
        let groups = counts.iter().filter(|&&c| c > 0).count();
        let between: f64 = (0..k)
            .filter(|&c| counts[c] > 0)
            .map(|c| counts[c] as f64 * (sums[c] / counts[c] as f64 - grand).powi(2))
            .sum();
        let within: f64 = column
            .iter()
            .zip(&ds.y)
            .map(|(&v, &y)| (v - sums[y as usize] / counts[y as usize] as f64).powi(2))
            .sum();
        if groups < 2 || between <= 0.0 {
            return 0.0;
        }
        if within <= 0.0 || n <= groups {
            return f64::INFINITY;
        }
        (between / (groups - 1) as f64) / (within / (n - groups) as f64)
    } else {
        let r = pearson(column, &ds.y);
        let r2 = r * r;
        if r2 >= 1.0 {
            f64::INFINITY
        } else {
            r2 / (1.0 - r2) * (n as f64 - 2.0).max(0.0)
        }
    }
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

pub fn feature_scores(ds: &Dataset, kind: ScoreKind) -> Vec<f64> {
    let p = ds.n_features();
    match kind {
        ScoreKind::FScore => (0..p).map(|c| f_score(&ds.x.column(c), ds)).collect(),
        ScoreKind::MutualInfo => {
            let target = discrete_target(ds, DEFAULT_BINS);
            (0..p)
                .map(|c| mutual_information(&discretize(&ds.x.column(c), DEFAULT_BINS), &target))
                .collect()
        }
    }
}

/// Indices sorted by score, highest first, ties by lower index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_k(k: usize, p: usize) -> Result<()> {
    if k == 0 || k > p {
        return Err(Error::KOutOfRange { k, p });
    }
    Ok(())
}

/// The `k` highest-scoring features, in score order.
pub fn kbest_select(ds: &Dataset, k: usize, kind: ScoreKind) -> Result<Vec<usize>> {
    check_k(k, ds.n_features())?;
    let mut ranked = rank_desc(&feature_scores(ds, kind));
    ranked.truncate(k);
    Ok(ranked)
}

/// Greedy forward selection maximizing relevance `MI(f; y)` minus the mean
/// `MI(f; s)` over already selected `s`. Returned in pick order.
pub fn mrmr_select(ds: &Dataset, k: usize) -> Result<Vec<usize>> {
    let p = ds.n_features();
    check_k(k, p)?;
    let target = discrete_target(ds, DEFAULT_BINS);
    let binned: Vec<Vec<usize>> = (0..p).map(|c| discretize(&ds.x.column(c), DEFAULT_BINS)).collect();
    let relevance: Vec<f64> = binned.iter().map(|b| mutual_information(b, &target)).collect();

    let mut selected = Vec::with_capacity(k);
    let mut redundancy_sum = vec![0.0; p];
    let mut remaining: Vec<usize> = (0..p).collect();
    while selected.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for &f in &remaining {
            let score = if selected.is_empty() {
                relevance[f]
            } else {
                relevance[f] - redundancy_sum[f] / selected.len() as f64
            };
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((f, score));
            }
        }
        let (pick, _) = best.expect("remaining is non-empty while selected < k");
        remaining.retain(|&f| f != pick);
        for &f in &remaining {
            redundancy_sum[f] += mutual_information(&binned[f], &binned[pick]);
        }
        selected.push(pick);
    }
    Ok(selected)
}

// ---------------------------------------------------------------------------
// Explorers

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub episodes: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub learning_rate: f64,
    /// Weight of the mean pairwise |correlation| penalty in the reward.
    pub redundancy_weight: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            episodes: 300,
            epsilon_start: 0.5,
            epsilon_end: 0.1,
            learning_rate: 0.1,
            redundancy_weight: 0.2,
        }
    }
}

/// One per feature; two actions, select or deselect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub q_select: f64,
    pub q_deselect: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub records: Vec<LabeledSubset>,
    /// Shaped reward of each kept episode, in record order.
    pub rewards: Vec<f64>,
    pub agents: Vec<AgentState>,
    pub skipped: usize,
}

fn epsilon_at(cfg: &RlConfig, episode: usize) -> f64 {
    if cfg.episodes <= 1 {
        return cfg.epsilon_start;
    }
    let t = episode as f64 / (cfg.episodes - 1) as f64;
    (cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * t).clamp(0.0, 1.0)
}

/// Pairwise |Pearson| among features on the given rows.
fn abs_correlations(ds: &Dataset, rows: &[usize]) -> Vec<f64> {
    let p = ds.n_features();
    let cols: Vec<Vec<f64>> = (0..p)
        .map(|c| rows.iter().map(|&r| ds.x.get(r, c)).collect())
        .collect();
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for j in (i + 1)..p {
            let r = pearson(&cols[i], &cols[j]).abs();
            out[i * p + j] = r;
            out[j * p + i] = r;
        }
    }
    out
}

fn mean_redundancy(subset: &[usize], corr: &[f64], p: usize) -> f64 {
    let m = subset.len();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            total += corr[i * p + j];
        }
    }
    total / (m * (m - 1) / 2) as f64
}

/// ε-greedy multi-agent explorer. Each episode every agent decides whether
/// its feature is in; the subset is scored, and every agent moves the value
/// of the action it took toward the shared reward. Updates are applied
/// sequentially in episode order.
pub fn rl_collect<E: Estimator>(scorer: &HoldoutScorer<'_, E>, cfg: &RlConfig, seed: u64) -> Result<RlOutcome> {
    let ds = scorer.dataset();
    let p = ds.n_features();
    let corr = abs_correlations(ds, scorer.rows().0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents = vec![
        AgentState {
            q_select: 0.0,
            q_deselect: 0.0,
            epsilon: cfg.epsilon_start,
            learning_rate: cfg.learning_rate,
        };
        p
    ];
    let mut out = RlOutcome {
        records: Vec::new(),
        rewards: Vec::new(),
        agents: Vec::new(),
        skipped: 0,
    };
    for episode in 0..cfg.episodes {
        let eps = epsilon_at(cfg, episode);
        let mut chosen: Vec<bool> = agents
            .iter_mut()
            .map(|a| {
                a.epsilon = eps;
                if rng.gen::<f64>() < eps {
                    rng.gen_bool(0.5)
                } else {
                    a.q_select >= a.q_deselect
                }
            })
            .collect();
        if !chosen.iter().any(|&c| c) {
            chosen[rng.gen_range(0..p)] = true;
        }
        let subset: Vec<usize> = (0..p).filter(|&i| chosen[i]).collect();
        let accuracy = match scorer.score(&subset) {
            Ok(a) => a,
            Err(e) => {
                warn!("episode {episode}: evaluation failed, skipped: {e}");
                out.skipped += 1;
                continue;
            }
        };
        let reward = accuracy - cfg.redundancy_weight * mean_redundancy(&subset, &corr, p);
        for (a, &sel) in agents.iter_mut().zip(&chosen) {
            let q = if sel { &mut a.q_select } else { &mut a.q_deselect };
            *q += a.learning_rate * (reward - *q);
        }
        out.records.push(LabeledSubset {
            tokens: subset,
            accuracy,
            source: Source::Rl,
        });
        out.rewards.push(reward);
    }
    out.agents = agents;
    Ok(out)
}

/// Uniform random non-empty subsets: each feature kept with probability 1/2.
pub fn random_collect<E: Estimator>(
    scorer: &HoldoutScorer<'_, E>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<LabeledSubset>> {
    let p = scorer.dataset().n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let subset = loop {
            let s: Vec<usize> = (0..p).filter(|_| rng.gen_bool(0.5)).collect();
            if !s.is_empty() {
                break s;
            }
        };
        match scorer.score(&subset) {
            Ok(accuracy) => out.push(LabeledSubset {
                tokens: subset,
                accuracy,
                source: Source::Random,
            }),
            Err(e) => warn!("episode {episode}: evaluation failed, skipped: {e}"),
        }
    }
    Ok(out)
}

/// Scores a selector's output as a record.
pub fn label_subset<E: Estimator>(
    scorer: &HoldoutScorer<'_, E>,
    subset: &[usize],
    source: Source,
) -> Result<LabeledSubset> {
    let mut tokens = subset.to_vec();
    tokens.sort_unstable();
    tokens.dedup();
    let accuracy = scorer.score(&tokens)?;
    Ok(LabeledSubset {
        tokens,
        accuracy,
        source,
    })
}

/// Records from one dataset, tagged with its fingerprint.
#[derive(Debug, Clone)]
pub struct RecordBatch {
    pub fingerprint: String,
    pub n_features: usize,
    pub records: Vec<LabeledSubset>,
}

/// Merges records with identical token sets (keeping the highest accuracy
/// and the first source seen) and numbers them in first-seen order.
pub fn dedupe_and_label(batches: Vec<RecordBatch>, config: serde_json::Value) -> Result<RecordStore> {
    let Some(first) = batches.first() else {
        let mut store = RecordStore::empty("", 0);
        store.config = config;
        return Ok(store);
    };
    let (fp, p) = (first.fingerprint.clone(), first.n_features);
    let mut merged: Vec<FeatureSubsetRecord> = Vec::new();
    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    for batch in batches {
        if batch.fingerprint != fp || batch.n_features != p {
            return Err(Error::FingerprintMismatch {
                expected: fp,
                found: batch.fingerprint,
            });
        }
        for r in batch.records {
            let mut key = r.tokens.clone();
            key.sort_unstable();
            key.dedup();
            if key.is_empty() || key.last().is_some_and(|&t| t >= p) {
                return Err(Error::InvalidTokens(format!("{:?} for {p} features", r.tokens)));
            }
            match index.get(&key) {
                Some(&i) => {
                    if r.accuracy > merged[i].accuracy {
                        merged[i].accuracy = r.accuracy;
                    }
                }
                None => {
                    index.insert(key.clone(), merged.len());
                    merged.push(FeatureSubsetRecord {
                        id: merged.len(),
                        tokens: key,
                        accuracy: r.accuracy,
                        source: r.source,
                        parent_id: None,
                    });
                }
            }
        }
    }
    Ok(RecordStore {
        fingerprint: fp,
        n_features: p,
        config,
        records: merged,
    })
}

/// Appends `factor` random orderings of every base record, sharing its
/// accuracy. Base records are kept first; new ids continue after the last.
pub fn augment_records(store: &RecordStore, factor: usize, seed: u64) -> RecordStore {
    let mut out = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = store.records.iter().map(|r| r.id + 1).max().unwrap_or(0);
    for base in store.base() {
        for _ in 0..factor {
            let mut tokens = base.tokens.clone();
            tokens.shuffle(&mut rng);
            out.records.push(FeatureSubsetRecord {
                id: next_id,
                tokens,
                accuracy: base.accuracy,
                source: Source::Augmented,
                parent_id: Some(base.id),
            });
            next_id += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Default collection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionConfig {
    /// Selector sizes; empty means a quarter, half and three quarters of p.
    pub selector_ks: Vec<usize>,
    pub kbest_score: ScoreKind,
    pub rl: RlConfig,
    /// Replace selectors and the explorer with uniform random subsets.
    pub random_collection: bool,
    pub augment_factor: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        CollectionConfig {
            selector_ks: Vec::new(),
            kbest_score: ScoreKind::FScore,
            rl: RlConfig::default(),
            random_collection: false,
            augment_factor: 25,
        }
    }
}

impl CollectionConfig {
    pub fn ks(&self, p: usize) -> Vec<usize> {
        if !self.selector_ks.is_empty() {
            return self.selector_ks.clone();
        }
        let mut ks: Vec<usize> = [1, 2, 3].iter().map(|&q| (q * p).div_ceil(4).clamp(1, p)).collect();
        ks.dedup();
        ks
    }
}

/// Selectors plus explorer (or the random control), deduplicated and
/// augmented. Selectors see only the scorer's fitting rows.
pub fn collect<E: Estimator>(
    scorer: &HoldoutScorer<'_, E>,
    cfg: &CollectionConfig,
    seed: u64,
) -> Result<RecordStore> {
    let ds = scorer.dataset();
    let p = ds.n_features();
    let mut labeled = Vec::new();
    if cfg.random_collection {
        let n = cfg.ks(p).len() * 2 + cfg.rl.episodes;
        labeled.extend(random_collect(scorer, n, seed)?);
    } else {
        let fit = ds.subset_rows(scorer.rows().0);
        for k in cfg.ks(p) {
            let kb = kbest_select(&fit, k, cfg.kbest_score)?;
            labeled.push(label_subset(scorer, &kb, Source::Kbest)?);
            let mr = mrmr_select(&fit, k)?;
            labeled.push(label_subset(scorer, &mr, Source::Mrmr)?);
        }
        let rl = rl_collect(scorer, &cfg.rl, seed)?;
        if rl.skipped > 0 {
            warn!("{} explorer episodes skipped", rl.skipped);
        }
        labeled.extend(rl.records);
    }
    let batch = RecordBatch {
        fingerprint: fingerprint(ds),
        n_features: p,
        records: labeled,
    };
    let config = serde_json::to_value(cfg)?;
    let store = dedupe_and_label(vec![batch], config)?;
    info!("collected {} distinct base records", store.len());
    Ok(augment_records(&store, cfg.augment_factor, seed.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::{EvalProtocol, ForestConfig, TreeConfig};
    use crate::synth::{generate, SynthConfig};
    use crate::tabular::{split_holdout, Matrix, MetricKind, Task};

    fn regression(cols: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
        let n = y.len();
        let p = cols.len();
        let mut x = Matrix::zeros(n, p);
        for (c, col) in cols.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                x.set(r, c, v);
            }
        }
        let names = (0..p).map(|i| format!("c{i}")).collect();
        Dataset::new("t", x, names, y, Task::Regression).unwrap()
    }

    #[test]
    fn discretize_is_equal_frequency() {
        let v: Vec<f64> = (0..20).map(f64::from).collect();
        let b = discretize(&v, 10);
        for k in 0..10 {
            assert_eq!(b.iter().filter(|&&x| x == k).count(), 2);
        }
        let tied = discretize(&[1.0, 1.0, 1.0, 2.0], 2);
        assert_eq!(tied, vec![0, 0, 0, 1]);
    }

    #[test]
    fn mi_of_identical_labels_is_entropy() {
        let a = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let h = (4.0f64).ln();
        assert!((mutual_information(&a, &a) - h).abs() < 1e-12);
        let b = vec![0, 1, 0, 1, 0, 1, 0, 1];
        assert!(mutual_information(&[0, 0, 0, 0, 1, 1, 1, 1], &b).abs() < 1e-12);
    }

    #[test]
    fn kbest_finds_exact_copy_of_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let ds = regression(vec![a, b, y.clone()], y.clone());
        assert_eq!(kbest_select(&ds, 1, ScoreKind::MutualInfo).unwrap(), vec![2]);
        assert_eq!(kbest_select(&ds, 1, ScoreKind::FScore).unwrap(), vec![2]);
        // binned-MI oracle: the copy carries the full target entropy
        let target = discretize(&y, 10);
        let copy = discretize(&ds.x.column(2), 10);
        assert!((mutual_information(&copy, &target) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kbest_tie_prefers_lower_index_and_k_p_is_a_ranking() {
        let y: Vec<f64> = (0..30).map(|i| f64::from(i % 7)).collect();
        let c: Vec<f64> = y.iter().map(|v| v * 2.0).collect();
        let noise: Vec<f64> = (0..30).map(|i| f64::from((i * 13) % 5)).collect();
        let ds = regression(vec![noise, c.clone(), c], y);
        assert_eq!(kbest_select(&ds, 1, ScoreKind::MutualInfo).unwrap(), vec![1]);
        let mut all = kbest_select(&ds, 3, ScoreKind::FScore).unwrap();
        assert_eq!(all[..2], [1, 2]);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(kbest_select(&ds, 0, ScoreKind::FScore), Err(Error::KOutOfRange { .. })));
        assert!(matches!(kbest_select(&ds, 4, ScoreKind::FScore), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn constant_feature_scores_zero() {
        let y: Vec<f64> = (0..10).map(f64::from).collect();
        let ds = regression(vec![vec![1.0; 10], y.clone()], y);
        let s = feature_scores(&ds, ScoreKind::FScore);
        assert_eq!(s[0], 0.0);
        assert_eq!(feature_scores(&ds, ScoreKind::MutualInfo)[0], 0.0);
    }

    /// Two copies of a noisy version of y plus independent noise: the greedy
    /// pick must match the brute-force optimum of the pairwise objective.
    #[test]
    fn mrmr_rejects_redundant_twin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let y: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let copy: Vec<f64> = y.iter().map(|&v| v + 0.05 * rng.gen::<f64>()).collect();
        let noise: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let ds = regression(vec![copy.clone(), copy, noise], y);
        let got = mrmr_select(&ds, 2).unwrap();

        let target = discrete_target(&ds, DEFAULT_BINS);
        let binned: Vec<Vec<usize>> = (0..3).map(|c| discretize(&ds.x.column(c), DEFAULT_BINS)).collect();
        let rel: Vec<f64> = binned.iter().map(|b| mutual_information(b, &target)).collect();
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for a in 0..3 {
            for b in 0..3 {
                if a == b {
                    continue;
                }
                let obj = rel[a] + rel[b] - mutual_information(&binned[a], &binned[b]);
                if obj > best.0 {
                    best = (obj, (a, b));
                }
            }
        }
        let mut want = [best.1 .0, best.1 .1];
        want.sort_unstable();
        let mut have = [got[0], got[1]];
        have.sort_unstable();
        assert_eq!(have, want);
        assert!(have.contains(&2), "noise column expected, got {got:?}");
        assert_eq!(got[0], 0);
    }

    #[test]
    fn mrmr_k1_is_mi_top1_and_kp_is_permutation() {
        let d = generate(&SynthConfig { n_rows: 120, informative: 2, noise: 4, ..Default::default() }).unwrap();
        let ds = d.dataset;
        assert_eq!(mrmr_select(&ds, 1).unwrap(), kbest_select(&ds, 1, ScoreKind::MutualInfo).unwrap());
        let mut all = mrmr_select(&ds, 6).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
    }

    fn scorer_fixture(seed: u64) -> (Dataset, crate::tabular::SplitPlan, Vec<usize>) {
        let d = generate(&SynthConfig {
            n_rows: 200,
            informative: 1,
            noise: 7,
            label_noise: 0.2,
            seed,
            ..Default::default()
        })
        .unwrap();
        let split = split_holdout(&d.dataset, 0.8, seed).unwrap();
        (d.dataset, split, d.informative)
    }

    #[test]
    fn zero_episodes_collect_nothing() {
        let (ds, split, _) = scorer_fixture(1);
        let scorer = HoldoutScorer::new(&ds, &split, &EvalProtocol::internal(MetricKind::F1, 0), TreeConfig::default()).unwrap();
        let cfg = RlConfig { episodes: 0, ..Default::default() };
        assert!(rl_collect(&scorer, &cfg, 0).unwrap().records.is_empty());
        assert!(random_collect(&scorer, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn random_collect_is_seeded_and_half_sized() {
        let d = generate(&SynthConfig { n_rows: 80, informative: 2, noise: 8, ..Default::default() }).unwrap();
        let ds = d.dataset;
        let split = split_holdout(&ds, 0.8, 0).unwrap();
        let tree = TreeConfig {
            max_depth: Some(3),
            ..Default::default()
        };
        let scorer = HoldoutScorer::new(&ds, &split, &EvalProtocol::internal(MetricKind::F1, 0), tree).unwrap();
        let a = random_collect(&scorer, 300, 5).unwrap();
        let b = random_collect(&scorer, 300, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 300);
        assert!(a.iter().all(|r| !r.tokens.is_empty() && r.source == Source::Random));
        let mean = a.iter().map(|r| r.tokens.len() as f64).sum::<f64>() / 300.0;
        assert!((mean - 5.0).abs() <= 1.0, "{mean}");
    }

    #[test]
    fn rl_improves_and_rewards_are_bounded() {
        let (ds, split, informative) = scorer_fixture(4);
        let forest = ForestConfig {
            n_trees: 10,
            ..Default::default()
        };
        let scorer = HoldoutScorer::new(&ds, &split, &EvalProtocol::internal(MetricKind::F1, 0), forest).unwrap();
        let out = rl_collect(&scorer, &RlConfig::default(), 7).unwrap();
        assert_eq!(out.records.len() + out.skipped, 300);
        assert!(out.records.iter().all(|r| !r.tokens.is_empty() && r.source == Source::Rl));
        assert!(out.rewards.iter().all(|r| (-1.0..=1.0).contains(r)));
        let mean = |rs: &[LabeledSubset]| rs.iter().map(|r| r.accuracy).sum::<f64>() / rs.len() as f64;
        let n = out.records.len();
        let first = mean(&out.records[..50]);
        let last = mean(&out.records[n - 50..]);
        assert!(last >= first, "first {first} last {last}");
        let agent = &out.agents[informative[0]];
        assert!(agent.q_select > agent.q_deselect);
        assert!((agent.epsilon - 0.1).abs() < 1e-12);
    }

    fn batch(records: Vec<(Vec<usize>, f64)>) -> RecordBatch {
        RecordBatch {
            fingerprint: "fp".into(),
            n_features: 10,
            records: records
                .into_iter()
                .map(|(tokens, accuracy)| LabeledSubset {
                    tokens,
                    accuracy,
                    source: Source::Rl,
                })
                .collect(),
        }
    }

    #[test]
    fn dedupe_merges_sets_keeping_max() {
        let s = dedupe_and_label(vec![batch(vec![(vec![1, 2], 0.7), (vec![2, 1], 0.9)])], serde_json::Value::Null).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.records[0].accuracy, 0.9);
        assert_eq!(s.records[0].tokens, vec![1, 2]);
        assert!(dedupe_and_label(vec![], serde_json::Value::Null).unwrap().is_empty());
        let s = dedupe_and_label(vec![batch(vec![(vec![1], 0.1), (vec![2], 0.2), (vec![3], 0.3)])], serde_json::Value::Null).unwrap();
        assert_eq!(s.records.iter().map(|r| r.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn dedupe_rejects_mixed_fingerprints() {
        let mut other = batch(vec![(vec![3], 0.5)]);
        other.fingerprint = "other".into();
        let e = dedupe_and_label(vec![batch(vec![(vec![1], 0.5)]), other], serde_json::Value::Null).unwrap_err();
        assert!(matches!(e, Error::FingerprintMismatch { .. }));
    }

    fn forty_records() -> RecordStore {
        let recs = (0..40).map(|i| (vec![i % 10, (i / 10) + 3, 9 - (i % 3)], i as f64 / 40.0)).collect();
        let mut store = dedupe_and_label(vec![batch(recs)], serde_json::Value::Null).unwrap();
        store.records.truncate(40);
        store
    }

    #[test]
    fn augmentation_counts_and_labels() {
        let store = forty_records();
        let base = store.len();
        let aug = augment_records(&store, 25, 1);
        assert_eq!(aug.len(), base + 25 * base);
        assert_eq!(augment_records(&store, 0, 1), store);
        for r in aug.records.iter().filter(|r| !r.is_base()) {
            let parent = aug.get(r.parent_id.unwrap()).unwrap();
            assert_eq!(r.accuracy, parent.accuracy);
            let mut sorted = r.tokens.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, parent.tokens);
        }
        aug.validate().unwrap();
    }

    #[test]
    fn single_token_augmentations_are_identical() {
        let store = dedupe_and_label(vec![batch(vec![(vec![4], 0.3)])], serde_json::Value::Null).unwrap();
        let aug = augment_records(&store, 5, 0);
        assert!(aug.records.iter().all(|r| r.tokens == vec![4]));
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let mut store = augment_records(&forty_records(), 2, 3);
        store.records[0].accuracy = 0.1 + 0.2;
        store.records[1].accuracy = -1.0 / 3.0;
        store.config = serde_json::json!({"k": [1, 2]});
        let text = store.to_jsonl().unwrap();
        let back = RecordStore::from_jsonl(&text).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_jsonl().unwrap(), text);
        for (a, b) in back.records.iter().zip(&store.records) {
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        store.save(&path).unwrap();
        assert_eq!(RecordStore::load(&path).unwrap(), store);
    }

    #[test]
    fn fingerprint_tracks_identity() {
        let d = generate(&SynthConfig::default()).unwrap().dataset;
        assert_eq!(fingerprint(&d), fingerprint(&d.clone()));
        let mut e = d.clone();
        e.name.push('x');
        assert_ne!(fingerprint(&d), fingerprint(&e));
    }

    #[test]
    fn default_ks() {
        let cfg = CollectionConfig::default();
        assert_eq!(cfg.ks(20), vec![5, 10, 15]);
        assert_eq!(cfg.ks(1), vec![1]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn mrmr_first_pick_is_mi_top1(seed in 0u64..u64::MAX, p in 1usize..=8, n in 10usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| f64::from(rng.gen_range(0..6u8))).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let ds = regression(cols, y);
            proptest::prop_assert_eq!(mrmr_select(&ds, 1).unwrap()[0], kbest_select(&ds, 1, ScoreKind::MutualInfo).unwrap()[0]);
        }

        #[test]
        fn augmented_labels_follow_parents(seed in 0u64..1000, factor in 0usize..5) {
            let aug = augment_records(&forty_records(), factor, seed);
            for r in &aug.records {
                if let Some(pid) = r.parent_id {
                    proptest::prop_assert_eq!(r.accuracy, aug.get(pid).unwrap().accuracy);
                }
            }
        }
    }
}
