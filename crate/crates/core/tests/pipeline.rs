use std::collections::BTreeSet;

use latentfs::downstream::{EvalProtocol, ForestConfig, HoldoutScorer};
use latentfs::model::{train, ModelConfig, SubsetModel, TrainConfig};
use latentfs::records::{augment_records, collect, CollectionConfig, FeatureSubsetRecord, RecordStore, RlConfig, Source};
use latentfs::search::{run_search, SearchConfig};
use latentfs::synth::{generate, SynthConfig};
use latentfs::tabular::{split_holdout, MetricKind};
use latentfs::Model64;
use proptest::prelude::*;

fn small_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        encoder_hidden: 16,
        decoder_hidden: 16,
        evaluator_hidden: 16,
    }
}

#[test]
fn collect_train_search_end_to_end() {
    let data = generate(&SynthConfig {
        n_rows: 150,
        informative: 3,
        noise: 5,
        ..Default::default()
    })
    .unwrap();
    let ds = data.dataset;
    let split = split_holdout(&ds, 0.8, 0).unwrap();
    let forest = ForestConfig {
        n_trees: 5,
        max_depth: 4,
        ..Default::default()
    };
    let scorer = HoldoutScorer::new(&ds, &split, &EvalProtocol::internal(MetricKind::F1, 0), forest).unwrap();
    let cfg = CollectionConfig {
        rl: RlConfig {
            episodes: 30,
            ..Default::default()
        },
        augment_factor: 2,
        ..Default::default()
    };
    let store = collect(&scorer, &cfg, 0).unwrap();
    store.validate().unwrap();
    assert_eq!(store.len(), store.base_count() * 3);

    let mut model: Model64 = SubsetModel::new(ds.n_features(), small_model(), 0).unwrap();
    let history = train(
        &mut model,
        &store,
        &TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.01,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(history.epochs.last().unwrap().loss < history.epochs[0].loss);

    let search = SearchConfig {
        top_k: 3,
        max_steps: 5,
        ..Default::default()
    };
    let outcome = run_search(&scorer, &store, &model, &search).unwrap();
    assert_eq!(outcome.candidates.len(), 3);
    let best = outcome.best();
    assert!(best.chosen);
    let v = best.validated.unwrap();
    assert!(outcome.candidates.iter().all(|c| c.validated.is_none_or(|x| x <= v)));
    assert_eq!(scorer.score(&best.tokens).unwrap(), v);
    assert!(best.tokens.windows(2).all(|w| w[0] < w[1]));
}

fn store_with(bases: &[Vec<usize>]) -> RecordStore {
    let mut store = RecordStore::empty("fp", 12);
    for (id, tokens) in bases.iter().enumerate() {
        store.records.push(FeatureSubsetRecord {
            id,
            tokens: tokens.clone(),
            accuracy: id as f64 / 10.0,
            source: Source::Kbest,
            parent_id: None,
        });
    }
    store
}

fn subsets() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::btree_set(0usize..12, 1..6), 1..5)
        .prop_map(|v| v.into_iter().map(|s| s.into_iter().collect()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_keeps_each_parent_set_and_label(bases in subsets(), factor in 0usize..4, seed in any::<u64>()) {
        let store = store_with(&bases);
        let out = augment_records(&store, factor, seed);
        prop_assert_eq!(out.len(), bases.len() * (factor + 1));
        out.validate().unwrap();
        for r in out.records.iter().filter(|r| !r.is_base()) {
            let parent = out.get(r.parent_id.unwrap()).unwrap();
            let a: BTreeSet<_> = r.tokens.iter().collect();
            let b: BTreeSet<_> = parent.tokens.iter().collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(r.tokens.len(), parent.tokens.len());
            prop_assert_eq!(r.accuracy, parent.accuracy);
        }
    }

    #[test]
    fn store_jsonl_round_trips(bases in subsets(), seed in any::<u64>()) {
        let store = augment_records(&store_with(&bases), 2, seed);
        let back = RecordStore::from_jsonl(&store.to_jsonl().unwrap()).unwrap();
        prop_assert_eq!(back, store);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions(tokens in prop::collection::vec(0usize..12, 1..8), seed in 0u64..50) {
        let model: Model64 = SubsetModel::new(12, small_model(), seed).unwrap();
        let back: Model64 = SubsetModel::from_checkpoint(&model.to_checkpoint("fp", None), Some("fp"), false).unwrap();
        let a = model.evaluate_embedding(&model.encode(&tokens).unwrap()).unwrap();
        let b = back.evaluate_embedding(&back.encode(&tokens).unwrap()).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}
