//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs the full pipeline several times; expect tens of minutes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use latentfs::downstream::{EvalProtocol, ForestConfig, HoldoutScorer};
use latentfs::model::{train, Checkpoint, ModelConfig, SubsetModel};
use latentfs::records::{kbest_select, mrmr_select, FeatureSubsetRecord, RecordStore, ScoreKind, Source};
use latentfs::search::{ascend, reconstruct, select_seeds, SearchConfig};
use latentfs::synth::{generate, SynthConfig};
use latentfs::tabular::{split_holdout, Dataset, Matrix, MetricKind, Task};
use latentfs::Model64;
use latentfs_cli::commands::{cmd_collect, cmd_pipeline, cmd_search, cmd_train, RunDir};
use latentfs_cli::report::RunReport;
use latentfs_cli::ExperimentConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Epochs and batch size used for every full-corpus training run. The
/// defaults (200 epochs of 1024-record batches) take far longer than the
/// time budget on one core; see the README.
const EPOCHS: usize = 12;
const BATCH: usize = 64;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn acceptance_config(seed: u64, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.set_seed(seed);
    cfg.model_epochs = EPOCHS;
    cfg.model_batch_size = BATCH;
    cfg.output_dir = out.to_path_buf();
    cfg
}

struct Run {
    dir: PathBuf,
    report: RunReport,
}

fn pipeline(cfg: &ExperimentConfig) -> Run {
    let report = cmd_pipeline(cfg).unwrap_or_else(|e| panic!("pipeline in {}: {e:#}", cfg.output_dir.display()));
    Run {
        dir: cfg.output_dir.clone(),
        report,
    }
}

fn load_model(dir: &Path) -> Model64 {
    let ck = Checkpoint::load(RunDir::new(dir).checkpoint()).unwrap();
    SubsetModel::from_checkpoint(&ck, None, false).unwrap()
}

fn load_store(dir: &Path) -> RecordStore {
    RecordStore::load(RunDir::new(dir).records()).unwrap()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// 1 -------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let model = Model64::new(4, ModelConfig::default(), 11).unwrap();
    let started = Instant::now();
    let report = model.joint_loss_fd_check(&[2, 0], 0.6, 0.8, 1e-4, 1e-4).unwrap();
    let elapsed = started.elapsed();
    outcome(
        report.passed && report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(10),
        format!(
            "{} coordinates, max rel error {:.2e}, {:.1}s",
            report.coordinates,
            report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn autoencoding(run: &Run) -> Outcome {
    let model = load_model(&run.dir);
    let store = load_store(&run.dir);
    let base: Vec<&[usize]> = store.base().map(|r| r.tokens.as_slice()).collect();
    let tf = model.teacher_forced_accuracy(base.iter().copied()).unwrap();
    let seeds = select_seeds(&store, &model, 25).unwrap();
    let exact = seeds
        .iter()
        .filter(|s| {
            let r = reconstruct(&model, &s.embedding, &[]).unwrap();
            !r.fell_back && sorted(&r.tokens) == sorted(&s.tokens)
        })
        .count();
    let train_s = run.report.timings.training_s.unwrap_or(f64::INFINITY);
    let p = store.n_features;
    let augmented = store.count_by_source().into_iter().find(|(s, _)| *s == Source::Augmented).map_or(0, |(_, n)| n);
    outcome(
        p == 20 && store.base_count() >= 250 && tf >= 0.9 && exact >= 20 && train_s < 900.0,
        format!(
            "p={p}, {} base + {augmented} augmented, teacher-forced {:.4}, exact seeds {exact}/25, training {:.0}s",
            store.base_count(),
            tf,
            train_s
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn evaluator_fit(run: &Run) -> Outcome {
    let store = load_store(&run.dir);
    let mut ids: Vec<usize> = store.base().map(|r| r.id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
    let n_held = ids.len() / 5;
    let held: std::collections::HashSet<usize> = ids[..n_held].iter().copied().collect();
    let keep = |r: &FeatureSubsetRecord| !held.contains(&r.parent_id.unwrap_or(r.id));
    let mut training = RecordStore::empty(store.fingerprint.clone(), store.n_features);
    training.records = store.records.iter().filter(|r| keep(r)).cloned().collect();

    let cfg = acceptance_config(0, &run.dir);
    let mut model = Model64::new(store.n_features, cfg.model(), cfg.model_seed).unwrap();
    train(&mut model, &training, &cfg.train()).unwrap();
    let held_records: Vec<&FeatureSubsetRecord> = store.base().filter(|r| held.contains(&r.id)).collect();
    let predicted: Vec<f64> = held_records
        .iter()
        .map(|r| model.evaluate_embedding(&model.encode(&r.tokens).unwrap()).unwrap())
        .collect();
    let actual: Vec<f64> = held_records.iter().map(|r| model.normalizer.normalize(r.accuracy)).collect();
    let r = pearson(&predicted, &actual);
    outcome(r >= 0.7, format!("pearson {r:.4} on {} held-out base records", held_records.len()))
}

// 4 -------------------------------------------------------------------------

fn monotone_ascent(run: &Run) -> Outcome {
    let model = load_model(&run.dir);
    let store = load_store(&run.dir);
    let seeds = select_seeds(&store, &model, 25).unwrap();
    let mut gains = Vec::new();
    let mut monotone = true;
    for s in &seeds {
        let up = ascend(&model, &s.embedding, &SearchConfig::default()).unwrap();
        monotone &= up.v_after >= up.v_before;
        gains.push(up.v_after - up.v_before);
    }
    let g = mean(gains.iter().copied());
    outcome(
        monotone && g > 0.0 && seeds.len() == 25,
        format!(
            "{} seeds, all non-decreasing: {monotone}, mean gain {g:.3e}, min gain {:.3e}",
            seeds.len(),
            gains.iter().copied().fold(f64::INFINITY, f64::min)
        ),
    )
}

// 5, 6, 7 -------------------------------------------------------------------

fn end_to_end(runs: &[Run]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        let r = &run.report;
        let seed = r.baseline("best-seed").unwrap();
        let all = r.baseline("all-features").unwrap();
        let validated = r.chosen.validated.unwrap_or(f64::NEG_INFINITY);
        let ok = validated >= seed.validated.unwrap() && r.chosen.test_mean >= all.test_mean - 0.02;
        pass &= ok;
        parts.push(format!(
            "seed {}: holdout {:.4} vs best seed {:.4}, test F1 {:.4} vs all-features {:.4}",
            r.seeds.model,
            validated,
            seed.validated.unwrap(),
            r.chosen.test_mean,
            all.test_mean
        ));
    }
    outcome(pass, parts.join("; "))
}

fn shrinkage(runs: &[Run]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        let r = &run.report;
        let seed = r.baseline("best-seed").unwrap();
        pass &= r.chosen.feature_ratio < 1.0 && r.chosen.feature_ratio <= seed.feature_ratio + 0.1;
        parts.push(format!(
            "seed {}: ratio {:.2} vs best seed {:.2}",
            r.seeds.model, r.chosen.feature_ratio, seed.feature_ratio
        ));
    }
    outcome(pass, parts.join("; "))
}

fn ablation_direction(full: &[Run], random: &[Run], no_aug: &[Run]) -> Outcome {
    let m = |runs: &[Run]| mean(runs.iter().map(|r| r.report.chosen.test_mean));
    let (f, r, a) = (m(full), m(random), m(no_aug));
    let per_seed = |runs: &[Run]| {
        runs.iter()
            .map(|r| format!("{:.3}/{:.3}", r.report.chosen.validated.unwrap_or(f64::NAN), r.report.chosen.test_mean))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        f > r && f >= a - 0.01,
        format!(
            "mean test F1: full {f:.4}, random-collection {r:.4}, no-augment {a:.4} (holdout/test per seed: full {}; random {}; no-augment {})",
            per_seed(full),
            per_seed(random),
            per_seed(no_aug)
        ),
    )
}

// 8 -------------------------------------------------------------------------

/// Seconds per seed for ascend + reconstruct, and the mean decoded length,
/// on a model trained to reproduce 25 ten-feature subsets of a `p`-feature
/// synthetic dataset.
fn search_cost(p: usize) -> (f64, f64, f64) {
    let data = generate(&SynthConfig {
        noise: p - 5,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = &data.dataset;
    let split = split_holdout(ds, 0.8, 0).unwrap();
    let scorer = HoldoutScorer::new(ds, &split, &EvalProtocol::internal(MetricKind::F1, 0), ForestConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = RecordStore::empty(latentfs::records::fingerprint(ds), p);
    let all: Vec<usize> = (0..p).collect();
    for id in 0..25 {
        let tokens: Vec<usize> = all.choose_multiple(&mut rng, 10).copied().collect();
        let accuracy = scorer.score(&tokens).unwrap();
        store.records.push(FeatureSubsetRecord {
            id,
            tokens,
            accuracy,
            source: Source::Random,
            parent_id: None,
        });
    }
    let mut model = Model64::new(p, ModelConfig::default(), 1).unwrap();
    let cfg = latentfs::model::TrainConfig {
        epochs: 10,
        batch_size: 1,
        learning_rate: 0.01,
        patience: usize::MAX,
        ..Default::default()
    };
    let base: Vec<Vec<usize>> = store.records.iter().map(|r| r.tokens.clone()).collect();
    for _ in 0..30 {
        train(&mut model, &store, &cfg).unwrap();
        if model.teacher_forced_accuracy(base.iter().map(Vec::as_slice)).unwrap() >= 0.99 {
            break;
        }
    }
    let search = SearchConfig {
        min_gain: f64::NEG_INFINITY,
        ..SearchConfig::default()
    };
    let seeds = select_seeds(&store, &model, 25).unwrap();
    let mut lengths = 0.0;
    let mut steps = 0.0;
    let started = Instant::now();
    for s in &seeds {
        let up = ascend(&model, &s.embedding, &search).unwrap();
        let r = reconstruct(&model, &up.embedding, &s.tokens).unwrap();
        lengths += r.tokens.len() as f64;
        steps += up.steps as f64;
    }
    let per_seed = started.elapsed().as_secs_f64() / seeds.len() as f64;
    let n = seeds.len() as f64;
    (per_seed, lengths / n, steps / n)
}

fn dimensionality() -> Outcome {
    let (small, len_small, steps_small) = search_cost(20);
    let (large, len_large, steps_large) = search_cost(200);
    let ratio = large / small;
    outcome(
        ratio < 3.0,
        format!(
            "p=20 {:.2}ms/seed (T {len_small:.1}, {steps_small:.1} steps), p=200 {:.2}ms/seed (T {len_large:.1}, {steps_large:.1} steps), ratio {ratio:.2}",
            small * 1e3,
            large * 1e3
        ),
    )
}

// 9 -------------------------------------------------------------------------

/// Rank-based equal-frequency bins for tie-free data.
fn oracle_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out = vec![0; values.len()];
    for (rank, (_, i)) in ranked.into_iter().enumerate() {
        out[i] = rank * bins / values.len();
    }
    out
}

fn oracle_mi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pa: HashMap<usize, f64> = HashMap::new();
    let mut pb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0 / n;
        *pa.entry(x).or_default() += 1.0 / n;
        *pb.entry(y).or_default() += 1.0 / n;
    }
    joint.iter().map(|(&(x, y), &pxy)| pxy * (pxy / (pa[&x] * pb[&y])).ln()).sum()
}

/// One-way ANOVA F statistic, two passes.
fn oracle_anova(col: &[f64], labels: &[usize], classes: usize) -> f64 {
    let n = col.len();
    let grand = col.iter().sum::<f64>() / n as f64;
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (&v, &c) in col.iter().zip(labels) {
        groups[c].push(v);
    }
    let groups: Vec<Vec<f64>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in &groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand).powi(2);
        ssw += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    (ssb / (groups.len() - 1) as f64) / (ssw / (n - groups.len()) as f64)
}

fn random_dataset(rng: &mut ChaCha8Rng) -> (Dataset, Vec<usize>) {
    let p = rng.gen_range(2..=8);
    let n = 60;
    let classes = rng.gen_range(2..=3);
    let labels: Vec<usize> = (0..n).map(|i| if i < classes { i } else { rng.gen_range(0..classes) }).collect();
    let weights: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..2.0)).collect();
    let mut x = Matrix::zeros(n, p);
    for r in 0..n {
        for c in 0..p {
            let v: f64 = rng.gen_range(-1.0..1.0) + weights[c] * labels[r] as f64;
            x.set(r, c, v);
        }
    }
    let task = if classes == 2 { Task::Binary } else { Task::Multiclass };
    let names = (0..p).map(|c| format!("x{c}")).collect();
    let y = labels.iter().map(|&l| l as f64).collect();
    (Dataset::new("oracle", x, names, y, task).unwrap(), labels)
}

/// Indices whose oracle score is within `tol` of the `k`-th best are
/// interchangeable at the boundary.
fn matches_top_k(picked: &[usize], scores: &[f64], k: usize, tol: f64) -> bool {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let cutoff = scores[order[k - 1]];
    let strict: Vec<usize> = order.iter().copied().filter(|&i| scores[i] > cutoff + tol).collect();
    picked.len() == k
        && strict.iter().all(|i| picked.contains(i))
        && picked.iter().all(|&i| scores[i] >= cutoff - tol)
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut mrmr_ok, mut kbest_ok, mut mi_ok, mut exact_first) = (0, 0, 0, 0);
    for _ in 0..100 {
        let (ds, labels) = random_dataset(&mut rng);
        let p = ds.n_features();
        let cols: Vec<Vec<f64>> = (0..p).map(|c| ds.x.column(c)).collect();
        let mi: Vec<f64> = cols.iter().map(|c| oracle_mi(&oracle_bins(c, 10), &labels)).collect();
        let first = mrmr_select(&ds, 1).unwrap()[0];
        mrmr_ok += usize::from(matches_top_k(&[first], &mi, 1, 1e-12));
        let best = (0..p).fold(0, |b, i| if mi[i] > mi[b] { i } else { b });
        exact_first += usize::from(first == best);

        let k = rng.gen_range(1..=p);
        let f: Vec<f64> = cols.iter().map(|c| oracle_anova(c, &labels, ds.n_classes)).collect();
        kbest_ok += usize::from(matches_top_k(&kbest_select(&ds, k, ScoreKind::FScore).unwrap(), &f, k, 1e-9));
        mi_ok += usize::from(matches_top_k(&kbest_select(&ds, k, ScoreKind::MutualInfo).unwrap(), &mi, k, 1e-12));
    }
    outcome(
        mrmr_ok == 100 && kbest_ok == 100 && mi_ok == 100,
        format!(
            "mRMR first pick {mrmr_ok}/100 ({exact_first} index-exact), K-Best f_score {kbest_ok}/100, K-Best mutual_info {mi_ok}/100"
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn determinism(root: &Path) -> Outcome {
    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let mut cfg = acceptance_config(7, &root.join(name));
        cfg.model_epochs = 2;
        cmd_collect(&cfg).unwrap();
        cmd_train(&cfg, None).unwrap();
        let report = cmd_search(&cfg, None, None).unwrap();
        let dir = RunDir::new(&cfg.output_dir);
        artifacts.push((
            fs::read(dir.records()).unwrap(),
            fs::read(dir.checkpoint()).unwrap(),
            report.chosen.indices,
        ));
    }
    let (a, b) = (&artifacts[0], &artifacts[1]);
    outcome(
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2,
        format!(
            "store identical: {}, checkpoint identical: {} ({} bytes), chosen {:?} vs {:?}",
            a.0 == b.0,
            a.1 == b.1,
            a.1.len(),
            a.2,
            b.2
        ),
    )
}

/// `ACCEPTANCE_ONLY=1,9` restricts the run to the listed criteria.
fn wanted() -> Vec<u32> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|n| n.trim().parse().ok()).collect(),
        _ => (1..=10).collect(),
    }
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let only = wanted();
    let want = |n: u32| only.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {name:<28} {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    if want(1) {
        record(1, "gradient correctness", gradient_check());
    }
    if want(9) {
        record(9, "oracle equivalence", oracles());
    }
    if want(8) {
        record(8, "dimensionality-agnostic", dimensionality());
    }

    let runs_for = |ablate: fn(&mut ExperimentConfig), tag: &str| -> Vec<Run> {
        SEEDS
            .iter()
            .map(|&s| {
                let mut cfg = acceptance_config(s, &root.path().join(format!("{tag}-{s}")));
                ablate(&mut cfg);
                let t = Instant::now();
                let run = pipeline(&cfg);
                println!("  [{tag} seed {s}: {:.0}s]", t.elapsed().as_secs_f64());
                run
            })
            .collect()
    };
    if (2..=7).any(want) {
        let full = runs_for(|_| {}, "full");
        if want(2) {
            record(2, "autoencoding", autoencoding(&full[0]));
        }
        if want(3) {
            record(3, "evaluator fit", evaluator_fit(&full[0]));
        }
        if want(4) {
            record(4, "monotone ascent", monotone_ascent(&full[0]));
        }
        if want(5) {
            record(5, "end-to-end improvement", end_to_end(&full));
        }
        if want(6) {
            record(6, "subset shrinkage", shrinkage(&full));
        }
        if want(7) {
            let random = runs_for(|c| c.collection_random = true, "random");
            let no_aug = runs_for(|c| c.collection_augment_factor = 0, "noaug");
            record(7, "ablation direction", ablation_direction(&full, &random, &no_aug));
        }
    }
    if want(10) {
        record(10, "determinism", determinism(root.path()));
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
