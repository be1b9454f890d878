//! Experiment configuration as flat `section.key = value` text.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use latentfs::downstream::{EvalProtocol, ForestConfig};
use latentfs::model::{ModelConfig, TrainConfig};
use latentfs::records::{CollectionConfig, RlConfig, ScoreKind};
use latentfs::search::SearchConfig;
use latentfs::synth::SynthConfig;
use latentfs::tabular::{MetricKind, Task};

/// Every knob of a collect → train → search run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// CSV file; empty selects the bundled synthetic generator.
    pub data_path: Option<PathBuf>,
    pub data_target: String,
    pub data_task: Task,

    pub synth_rows: usize,
    pub synth_informative: usize,
    pub synth_noise: usize,
    pub synth_classes: usize,
    pub synth_label_noise: f64,
    pub synth_seed: u64,

    pub split_seed: u64,
    pub split_train_fraction: f64,

    pub collection_seed: u64,
    pub collection_selector_ks: Vec<usize>,
    pub collection_kbest_score: ScoreKind,
    pub collection_rl_episodes: usize,
    pub collection_epsilon_start: f64,
    pub collection_epsilon_end: f64,
    pub collection_rl_learning_rate: f64,
    pub collection_redundancy_weight: f64,
    pub collection_random: bool,
    pub collection_augment_factor: usize,

    pub model_seed: u64,
    pub model_embed_dim: usize,
    pub model_encoder_hidden: usize,
    pub model_decoder_hidden: usize,
    pub model_evaluator_hidden: usize,
    pub model_lambda: f64,
    pub model_learning_rate: f64,
    pub model_batch_size: usize,
    pub model_epochs: usize,
    pub model_patience: usize,
    pub model_min_delta: f64,

    pub search_top_k: usize,
    pub search_eta: f64,
    pub search_max_steps: usize,
    pub search_min_gain: f64,
    pub search_backtrack: usize,

    /// `None` picks the task's default metric.
    pub protocol_metric: Option<MetricKind>,
    pub protocol_cv_k: usize,
    pub protocol_internal_val_fraction: f64,
    pub protocol_seed: u64,

    pub estimator_trees: usize,
    pub estimator_max_depth: usize,
    pub estimator_min_leaf: usize,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let collection = CollectionConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let search = SearchConfig::default();
        let protocol = EvalProtocol::internal(MetricKind::F1, 0);
        let forest = ForestConfig::default();
        ExperimentConfig {
            data_path: None,
            data_target: "target".into(),
            data_task: synth.task,
            synth_rows: synth.n_rows,
            synth_informative: synth.informative,
            synth_noise: synth.noise,
            synth_classes: synth.n_classes,
            synth_label_noise: synth.label_noise,
            synth_seed: synth.seed,
            split_seed: 0,
            split_train_fraction: 0.8,
            collection_seed: 0,
            collection_selector_ks: collection.selector_ks,
            collection_kbest_score: collection.kbest_score,
            collection_rl_episodes: collection.rl.episodes,
            collection_epsilon_start: collection.rl.epsilon_start,
            collection_epsilon_end: collection.rl.epsilon_end,
            collection_rl_learning_rate: collection.rl.learning_rate,
            collection_redundancy_weight: collection.rl.redundancy_weight,
            collection_random: collection.random_collection,
            collection_augment_factor: collection.augment_factor,
            model_seed: train.seed,
            model_embed_dim: model.embed_dim,
            model_encoder_hidden: model.encoder_hidden,
            model_decoder_hidden: model.decoder_hidden,
            model_evaluator_hidden: model.evaluator_hidden,
            model_lambda: train.lambda,
            model_learning_rate: train.learning_rate,
            model_batch_size: train.batch_size,
            model_epochs: train.epochs,
            model_patience: train.patience,
            model_min_delta: train.min_delta,
            search_top_k: search.top_k,
            search_eta: search.eta,
            search_max_steps: search.max_steps,
            search_min_gain: search.min_gain,
            search_backtrack: search.backtrack,
            protocol_metric: None,
            protocol_cv_k: protocol.cv_k,
            protocol_internal_val_fraction: protocol.internal_val_fraction,
            protocol_seed: protocol.seed,
            estimator_trees: forest.n_trees,
            estimator_max_depth: forest.max_depth,
            estimator_min_leaf: forest.min_samples_leaf,
            output_dir: PathBuf::from("run"),
        }
    }
}

/// Text form of one config value.
trait Value: Sized {
    fn parse(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self> {
                s.parse().map_err(|e| anyhow!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool, String);

impl Value for Task {
    fn parse(s: &str) -> Result<Self> {
        Ok(s.parse()?)
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for ScoreKind {
    fn parse(s: &str) -> Result<Self> {
        Ok(s.parse()?)
    }
    fn render(&self) -> String {
        match self {
            ScoreKind::FScore => "f_score",
            ScoreKind::MutualInfo => "mutual_info",
        }
        .into()
    }
}

impl Value for Option<MetricKind> {
    fn parse(s: &str) -> Result<Self> {
        if s.is_empty() || s == "auto" {
            Ok(None)
        } else {
            Ok(Some(s.parse()?))
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "auto".into(), |m| m.name().into())
    }
}

impl Value for Option<PathBuf> {
    fn parse(s: &str) -> Result<Self> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn render(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl Value for PathBuf {
    fn parse(s: &str) -> Result<Self> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl Value for Vec<usize> {
    fn parse(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|e| anyhow!("`{t}`: {e}")))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keys {
    ($($key:literal => $field:ident),* $(,)?) => {
        /// Every accepted key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl ExperimentConfig {
            /// Assigns one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => {
                        self.$field = Value::parse(value).with_context(|| format!("bad value for `{key}`"))?;
                    })*
                    _ => bail!("unknown config key `{key}`"),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

keys! {
    "data.path" => data_path,
    "data.target" => data_target,
    "data.task" => data_task,
    "synth.rows" => synth_rows,
    "synth.informative" => synth_informative,
    "synth.noise" => synth_noise,
    "synth.classes" => synth_classes,
    "synth.label_noise" => synth_label_noise,
    "synth.seed" => synth_seed,
    "split.seed" => split_seed,
    "split.train_fraction" => split_train_fraction,
    "collection.seed" => collection_seed,
    "collection.selector_ks" => collection_selector_ks,
    "collection.kbest_score" => collection_kbest_score,
    "collection.rl_episodes" => collection_rl_episodes,
    "collection.epsilon_start" => collection_epsilon_start,
    "collection.epsilon_end" => collection_epsilon_end,
    "collection.rl_learning_rate" => collection_rl_learning_rate,
    "collection.redundancy_weight" => collection_redundancy_weight,
    "collection.random" => collection_random,
    "collection.augment_factor" => collection_augment_factor,
    "model.seed" => model_seed,
    "model.embed_dim" => model_embed_dim,
    "model.encoder_hidden" => model_encoder_hidden,
    "model.decoder_hidden" => model_decoder_hidden,
    "model.evaluator_hidden" => model_evaluator_hidden,
    "model.lambda" => model_lambda,
    "model.learning_rate" => model_learning_rate,
    "model.batch_size" => model_batch_size,
    "model.epochs" => model_epochs,
    "model.patience" => model_patience,
    "model.min_delta" => model_min_delta,
    "search.top_k" => search_top_k,
    "search.eta" => search_eta,
    "search.max_steps" => search_max_steps,
    "search.min_gain" => search_min_gain,
    "search.backtrack" => search_backtrack,
    "protocol.metric" => protocol_metric,
    "protocol.cv_k" => protocol_cv_k,
    "protocol.internal_val_fraction" => protocol_internal_val_fraction,
    "protocol.seed" => protocol_seed,
    "estimator.trees" => estimator_trees,
    "estimator.max_depth" => estimator_max_depth,
    "estimator.min_leaf" => estimator_min_leaf,
    "output.dir" => output_dir,
}

/// Named ablations of the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    /// Uniform random subsets instead of selectors and the explorer.
    RandomCollection,
    /// No permutation augmentation.
    NoAugment,
}

impl ExperimentConfig {
    /// Reads `section.key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            self.set(key.trim(), value).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_text(&text)
    }

    /// All keys with their current values, one per line.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Keys whose value differs from the built-in default.
    pub fn overrides(&self) -> BTreeMap<String, String> {
        let base = ExperimentConfig::default();
        KEYS.iter()
            .filter(|k| self.get(k) != base.get(k))
            .map(|k| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Sets every pipeline seed at once; the synthetic dataset keeps its own.
    pub fn set_seed(&mut self, seed: u64) {
        self.split_seed = seed;
        self.collection_seed = seed;
        self.model_seed = seed;
        self.protocol_seed = seed;
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::RandomCollection => self.collection_random = true,
            Ablation::NoAugment => self.collection_augment_factor = 0,
        }
    }

    /// `full`, or the ablations in effect joined by `+`.
    pub fn method_name(&self) -> String {
        let mut parts = Vec::new();
        if self.collection_random {
            parts.push("random-collection");
        }
        if self.collection_augment_factor == 0 {
            parts.push("no-augment");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    pub fn metric(&self) -> MetricKind {
        self.protocol_metric.unwrap_or_else(|| self.data_task.default_metric())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_rows: self.synth_rows,
            informative: self.synth_informative,
            noise: self.synth_noise,
            task: self.data_task,
            n_classes: self.synth_classes,
            label_noise: self.synth_label_noise,
            shuffle_columns: true,
            seed: self.synth_seed,
        }
    }

    pub fn collection(&self) -> CollectionConfig {
        CollectionConfig {
            selector_ks: self.collection_selector_ks.clone(),
            kbest_score: self.collection_kbest_score,
            rl: RlConfig {
                episodes: self.collection_rl_episodes,
                epsilon_start: self.collection_epsilon_start,
                epsilon_end: self.collection_epsilon_end,
                learning_rate: self.collection_rl_learning_rate,
                redundancy_weight: self.collection_redundancy_weight,
            },
            random_collection: self.collection_random,
            augment_factor: self.collection_augment_factor,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model_embed_dim,
            encoder_hidden: self.model_encoder_hidden,
            decoder_hidden: self.model_decoder_hidden,
            evaluator_hidden: self.model_evaluator_hidden,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.model_epochs,
            batch_size: self.model_batch_size,
            learning_rate: self.model_learning_rate,
            lambda: self.model_lambda,
            patience: self.model_patience,
            min_delta: self.model_min_delta,
            seed: self.model_seed,
        }
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            top_k: self.search_top_k,
            eta: self.search_eta,
            max_steps: self.search_max_steps,
            min_gain: self.search_min_gain,
            backtrack: self.search_backtrack,
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            cv_k: self.protocol_cv_k,
            internal_val_fraction: self.protocol_internal_val_fraction,
            ..EvalProtocol::internal(self.metric(), self.protocol_seed)
        }
    }

    pub fn forest(&self) -> ForestConfig {
        ForestConfig {
            n_trees: self.estimator_trees,
            max_depth: self.estimator_max_depth,
            min_samples_leaf: self.estimator_min_leaf,
            ..ForestConfig::default()
        }
    }
}
