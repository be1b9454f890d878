//! Seeded synthetic tabular data with a known set of informative columns.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Dataset, Matrix, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub informative: usize,
    pub noise: usize,
    pub task: Task,
    /// Classes for multiclass targets.
    pub n_classes: usize,
    /// Standard deviation of the noise added to the latent score.
    pub label_noise: f64,
    /// Place informative columns at random positions instead of first.
    pub shuffle_columns: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// The bundled benchmark: 5 informative + 15 noise columns, 500 rows,
    /// binary target.
    fn default() -> Self {
        SynthConfig {
            n_rows: 500,
            informative: 5,
            noise: 15,
            task: Task::Binary,
            n_classes: 3,
            label_noise: 0.5,
            shuffle_columns: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Column indices the target depends on, ascending.
    pub informative: Vec<usize>,
}

/// All columns are standard normal. The target is a threshold (or, for
/// regression, the value) of a random linear combination of the informative
/// columns plus gaussian noise.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.n_rows < 2 {
        return Err(Error::EmptyDataset);
    }
    if cfg.informative == 0 {
        return Err(Error::InvalidDataset("synthetic data needs an informative column".into()));
    }
    if cfg.task == Task::Multiclass && cfg.n_classes < 2 {
        return Err(Error::InvalidDataset("multiclass needs at least 2 classes".into()));
    }
    let p = cfg.informative + cfg.noise;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut positions: Vec<usize> = (0..p).collect();
    if cfg.shuffle_columns {
        positions.shuffle(&mut rng);
    }
    let weights: Vec<f64> = (0..cfg.informative)
        .map(|_| {
            let magnitude = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect();

    let mut x = Matrix::zeros(cfg.n_rows, p);
    let mut score = vec![0.0; cfg.n_rows];
    for (r, s) in score.iter_mut().enumerate() {
        for c in 0..p {
            let v: f64 = rng.sample(StandardNormal);
            x.set(r, positions[c], v);
            if c < cfg.informative {
                *s += weights[c] * v;
            }
        }
        let eps: f64 = rng.sample(StandardNormal);
        *s += cfg.label_noise * eps;
    }

    let y = match cfg.task {
        Task::Binary => score.iter().map(|&s| f64::from(s > 0.0)).collect(),
        Task::Regression => score,
        Task::Multiclass => {
            let mut sorted = score.clone();
            sorted.sort_by(f64::total_cmp);
            let cuts: Vec<f64> = (1..cfg.n_classes)
                .map(|k| sorted[k * cfg.n_rows / cfg.n_classes])
                .collect();
            score
                .iter()
                .map(|&s| cuts.iter().filter(|&&c| s >= c).count() as f64)
                .collect()
        }
    };

    let names = (0..p).map(|c| format!("f{c:02}")).collect();
    let name = format!("synth-{}i{}z{}n-{}", cfg.informative, cfg.noise, cfg.n_rows, cfg.seed);
    let dataset = Dataset::new(name, x, names, y, cfg.task)?;
    let mut informative: Vec<usize> = positions[..cfg.informative].to_vec();
    informative.sort_unstable();
    Ok(SynthData { dataset, informative })
}

/// Writes a dataset as CSV with a trailing `target` column.
pub fn to_csv(ds: &Dataset) -> String {
    let mut out = ds.feature_names.join(",");
    out.push_str(",target\n");
    for r in 0..ds.n_rows() {
        for v in ds.x.row(r) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.y[r]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::parse_csv;

    #[test]
    fn default_shape() {
        let d = generate(&SynthConfig::default()).unwrap();
        assert_eq!(d.dataset.n_rows(), 500);
        assert_eq!(d.dataset.n_features(), 20);
        assert_eq!(d.informative.len(), 5);
        let pos = d.dataset.y.iter().filter(|&&v| v == 1.0).count();
        assert!(pos > 100 && pos < 400, "{pos}");
    }

    #[test]
    fn seeded() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a.dataset.x, b.dataset.x);
        let c = generate(&SynthConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.dataset.x, c.dataset.x);
    }

    #[test]
    fn multiclass_is_balanced() {
        let cfg = SynthConfig {
            task: Task::Multiclass,
            n_rows: 300,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.dataset.n_classes, 3);
        for k in 0..3 {
            let count = d.dataset.y.iter().filter(|&&v| v == k as f64).count();
            assert_eq!(count, 100);
        }
    }

    #[test]
    fn csv_round_trip() {
        let d = generate(&SynthConfig { n_rows: 20, ..Default::default() }).unwrap();
        let back = parse_csv(&d.dataset.name, &to_csv(&d.dataset), "target", Task::Binary).unwrap();
        assert_eq!(back.x, d.dataset.x);
        assert_eq!(back.y, d.dataset.y);
    }
}
