//! The five commands, callable without going through argument parsing.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use latentfs::downstream::{cross_val_score, ForestConfig, HoldoutScorer};
use latentfs::model::{train_with, Checkpoint, SubsetModel};
use latentfs::records::{collect, fingerprint, kbest_select, mrmr_select, RecordStore};
use latentfs::search::run_search;
use latentfs::synth::{generate, to_csv};
use latentfs::tabular::{load_csv, split_holdout, Dataset, SplitPlan};
use latentfs::Model64;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::{ComparisonTable, RunReport, Seeds, SubsetScore, Timings};

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }
    pub fn losses(&self) -> PathBuf {
        self.root.join("losses.csv")
    }
    pub fn candidates(&self) -> PathBuf {
        self.root.join("candidates.jsonl")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn collect_summary(&self) -> PathBuf {
        self.root.join("collect.json")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.root.join("train.json")
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &RunDir) -> Result<Self> {
        fs::create_dir_all(&dir.root).with_context(|| format!("creating {}", dir.root.display()))?;
        let path = dir.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                bail!("{} is locked by another command (remove {} if stale)", dir.root.display(), path.display())
            }
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Dataset plus the split every command agrees on.
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitPlan,
    /// Known informative columns, for generated data.
    pub informative: Option<Vec<usize>>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (dataset, informative) = match &cfg.data_path {
        Some(path) => (load_csv(path, &cfg.data_target, cfg.data_task)?, None),
        None => {
            let data = generate(&cfg.synth())?;
            (data.dataset, Some(data.informative))
        }
    };
    let split = split_holdout(&dataset, cfg.split_train_fraction, cfg.split_seed)?;
    Ok(Prepared {
        dataset,
        split,
        informative,
    })
}

fn scorer<'a>(cfg: &ExperimentConfig, prep: &'a Prepared) -> Result<HoldoutScorer<'a, ForestConfig>> {
    Ok(HoldoutScorer::new(&prep.dataset, &prep.split, &cfg.protocol(), cfg.forest())?)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub fingerprint: String,
    pub records: usize,
    pub base_records: usize,
    pub by_source: BTreeMap<String, usize>,
    pub seconds: f64,
}

/// Labels subsets and writes the record store.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<CollectSummary> {
    let dir = RunDir::new(&cfg.output_dir);
    let _lock = DirLock::acquire(&dir)?;
    write(&dir.config(), cfg.to_text())?;
    let prep = prepare(cfg)?;
    let scorer = scorer(cfg, &prep)?;
    let started = Instant::now();
    let store = collect(&scorer, &cfg.collection(), cfg.collection_seed)?;
    let seconds = started.elapsed().as_secs_f64();
    store.save(dir.records())?;
    if store.base_count() < cfg.search_top_k {
        warn!(
            "only {} base records for top_k = {}; search will fail",
            store.base_count(),
            cfg.search_top_k
        );
    }
    let summary = CollectSummary {
        fingerprint: store.fingerprint.clone(),
        records: store.len(),
        base_records: store.base_count(),
        by_source: store
            .count_by_source()
            .into_iter()
            .map(|(s, n)| (s.name().to_string(), n))
            .collect(),
        seconds,
    };
    write(&dir.collect_summary(), serde_json::to_string_pretty(&summary)?)?;
    info!("{} records ({} base) in {:.1}s: {:?}", summary.records, summary.base_records, seconds, summary.by_source);
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub optimizer_steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub parameter_count: usize,
    pub seconds: f64,
}

/// Trains the model on a record store and writes the checkpoint and losses.
pub fn cmd_train(cfg: &ExperimentConfig, store_path: Option<&Path>) -> Result<TrainSummary> {
    let dir = RunDir::new(&cfg.output_dir);
    let _lock = DirLock::acquire(&dir)?;
    write(&dir.config(), cfg.to_text())?;
    let prep = prepare(cfg)?;
    let store_path = store_path.map_or_else(|| dir.records(), Path::to_path_buf);
    let store = RecordStore::load(&store_path)?;
    let fp = fingerprint(&prep.dataset);
    store.check_fingerprint(&fp)?;
    let train_cfg = cfg.train();
    let mut model = Model64::new(prep.dataset.n_features(), cfg.model(), cfg.model_seed)?;
    let started = Instant::now();
    let history = train_with(&mut model, &store, &train_cfg, |row| {
        info!(
            "epoch {:>3}: loss {:.5} (reconstruction {:.5}, estimation {:.6})",
            row.epoch, row.loss, row.reconstruction, row.estimation
        )
    })?;
    let seconds = started.elapsed().as_secs_f64();
    write(&dir.losses(), history.to_csv())?;
    model.to_checkpoint(&fp, Some(train_cfg)).save(dir.checkpoint())?;
    let loss = |i: usize| history.epochs.get(i).map_or(f64::NAN, |e| e.loss);
    let summary = TrainSummary {
        epochs_run: history.epochs.len(),
        stopped_early: history.stopped_early,
        optimizer_steps: history.optimizer_steps,
        initial_loss: loss(0),
        final_loss: loss(history.epochs.len().wrapping_sub(1)),
        parameter_count: model.parameter_count(),
        seconds,
    };
    write(&dir.train_summary(), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn test_score(cfg: &ExperimentConfig, prep: &Prepared, method: &str, subset: &[usize], validated: Option<f64>) -> Result<SubsetScore> {
    let test = prep.dataset.subset_rows(&prep.split.test_idx);
    let (mean, folds) = cross_val_score(&test, subset, cfg.protocol_cv_k, cfg.metric(), &cfg.forest(), cfg.protocol_seed)?;
    let mut indices = subset.to_vec();
    indices.sort_unstable();
    let p = prep.dataset.n_features();
    Ok(SubsetScore {
        method: method.to_string(),
        names: indices.iter().map(|&i| prep.dataset.feature_names[i].clone()).collect(),
        size: indices.len(),
        feature_ratio: indices.len() as f64 / p as f64,
        indices,
        validated,
        test_mean: mean,
        test_folds: folds,
    })
}

/// Searches from the best records, then scores the chosen subset and the
/// baselines by cross-validation on the test split.
pub fn cmd_search(cfg: &ExperimentConfig, checkpoint: Option<&Path>, store_path: Option<&Path>) -> Result<RunReport> {
    let dir = RunDir::new(&cfg.output_dir);
    let _lock = DirLock::acquire(&dir)?;
    write(&dir.config(), cfg.to_text())?;
    let prep = prepare(cfg)?;
    let fp = fingerprint(&prep.dataset);
    let store = RecordStore::load(store_path.map_or_else(|| dir.records(), Path::to_path_buf))?;
    store.check_fingerprint(&fp)?;
    let ck = Checkpoint::load(checkpoint.map_or_else(|| dir.checkpoint(), Path::to_path_buf))?;
    let model: Model64 = SubsetModel::from_checkpoint(&ck, Some(&fp), false)?;
    let scorer = scorer(cfg, &prep)?;

    let started = Instant::now();
    let outcome = run_search(&scorer, &store, &model, &cfg.search())?;
    let search_s = started.elapsed().as_secs_f64();
    outcome.save_candidates(dir.candidates())?;

    let best = outcome.best();
    let chosen = test_score(cfg, &prep, "chosen", &best.tokens, best.validated)?;
    let k = chosen.size;
    let all: Vec<usize> = (0..prep.dataset.n_features()).collect();
    let fit = prep.dataset.subset_rows(scorer.rows().0);
    let kbest = kbest_select(&fit, k, cfg.collection_kbest_score)?;
    let mrmr = mrmr_select(&fit, k)?;
    let seed = store
        .base()
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.id.cmp(&a.id)))
        .context("record store has no base records")?;
    let baselines = vec![
        test_score(cfg, &prep, "all-features", &all, Some(scorer.score(&all)?))?,
        test_score(cfg, &prep, "k-best", &kbest, Some(scorer.score(&kbest)?))?,
        test_score(cfg, &prep, "mrmr", &mrmr, Some(scorer.score(&mrmr)?))?,
        test_score(cfg, &prep, "best-seed", &seed.tokens, Some(seed.accuracy))?,
    ];

    let collected: Option<CollectSummary> = read_json(&dir.collect_summary()).ok();
    let trained: Option<TrainSummary> = read_json(&dir.train_summary()).ok();
    let report = RunReport {
        method: cfg.method_name(),
        dataset: prep.dataset.name.clone(),
        task: prep.dataset.task,
        metric: cfg.metric(),
        n_features: prep.dataset.n_features(),
        chosen,
        best_seed_id: seed.id,
        chosen_seed_id: best.seed_id,
        baselines,
        informative: prep.informative.clone(),
        timings: Timings {
            collection_s: collected.map(|c| c.seconds),
            training_s: trained.map(|t| t.seconds),
            search_s,
        },
        parameter_count: ck.parameter_count(),
        seeds: Seeds {
            split: cfg.split_seed,
            collection: cfg.collection_seed,
            model: cfg.model_seed,
            protocol: cfg.protocol_seed,
            synth: cfg.synth_seed,
        },
        config: cfg.entries(),
        overrides: cfg.overrides(),
    };
    report.save(&dir.report_json())?;
    write(&dir.report_txt(), report.to_text())?;
    Ok(report)
}

/// Collect, train and search in one output directory.
pub fn cmd_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cmd_collect(cfg)?;
    cmd_train(cfg, None)?;
    cmd_search(cfg, None, None)
}

/// One row per run directory; writes `comparison.txt` and `comparison.csv`
/// into `out` when given.
pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<ComparisonTable> {
    if runs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let reports = runs
        .iter()
        .map(|r| RunReport::load(&RunDir::new(r).report_json()).with_context(|| format!("run directory {}", r.display())))
        .collect::<Result<Vec<_>>>()?;
    let table = ComparisonTable::from_reports(&reports);
    if let Some(out) = out {
        let dir = RunDir::new(out);
        let _lock = DirLock::acquire(&dir)?;
        write(&out.join("comparison.txt"), table.to_text())?;
        write(&out.join("comparison.csv"), table.to_csv())?;
    }
    Ok(table)
}

/// Writes the configured synthetic dataset as CSV; returns its informative
/// columns.
pub fn cmd_synth(cfg: &ExperimentConfig, path: &Path) -> Result<Vec<usize>> {
    let data = generate(&cfg.synth())?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write(path, to_csv(&data.dataset))?;
    Ok(data.informative)
}
