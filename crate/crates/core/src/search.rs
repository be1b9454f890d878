//! Gradient ascent on encoder embeddings of the best historical subsets,
//! followed by greedy reconstruction and validation.

use std::fs;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::downstream::{Estimator, HoldoutScorer};
use crate::error::{Error, Result};
use crate::model::{EmbeddingMatrix, SubsetModel};
use crate::records::RecordStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub top_k: usize,
    /// Initial step size of every ascent step.
    pub eta: f64,
    pub max_steps: usize,
    /// Stop once a step gains less than this.
    pub min_gain: f64,
    /// Step halvings allowed before giving up on a step.
    pub backtrack: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            top_k: 25,
            eta: 0.01,
            max_steps: 25,
            min_gain: 1e-5,
            backtrack: 10,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta {} must be finite and non-negative", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSeed<T> {
    pub record_id: usize,
    pub tokens: Vec<usize>,
    pub accuracy: f64,
    pub embedding: EmbeddingMatrix<T>,
}

/// The `k` base records with the highest accuracy (ties: lower id), encoded.
pub fn select_seeds<T: Scalar>(store: &RecordStore, model: &SubsetModel<T>, k: usize) -> Result<Vec<SearchSeed<T>>> {
    let mut base: Vec<_> = store.base().collect();
    if base.len() < k {
        return Err(Error::NotEnoughRecords {
            need: k,
            have: base.len(),
        });
    }
    base.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.id.cmp(&b.id)));
    base.truncate(k);
    base.into_iter()
        .map(|r| {
            let mut embedding = model.encode(&r.tokens)?;
            embedding.source = Some(r.id);
            Ok(SearchSeed {
                record_id: r.id,
                tokens: r.tokens.clone(),
                accuracy: r.accuracy,
                embedding,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ascent<T> {
    pub embedding: EmbeddingMatrix<T>,
    pub v_before: f64,
    pub v_after: f64,
    /// Accepted steps.
    pub steps: usize,
}

/// Repeatedly moves `E` along `∂v̂/∂E` (evaluator only). Each step starts
/// at `eta` and halves until the prediction does not drop; the result
/// never predicts lower than the start.
pub fn ascend<T: Scalar>(model: &SubsetModel<T>, e: &EmbeddingMatrix<T>, cfg: &SearchConfig) -> Result<Ascent<T>> {
    let mut current = e.clone();
    let (v0, _) = model.evaluator_gradient(&current)?;
    let mut v = v0;
    let mut steps = 0;
    for _ in 0..cfg.max_steps {
        let (_, grad) = model.evaluator_gradient(&current)?;
        if grad.data().iter().all(|g| *g == T::zero()) {
            break;
        }
        let mut eta = T::of(cfg.eta);
        let mut accepted = None;
        for _ in 0..=cfg.backtrack {
            let moved: Vec<T> = current
                .states
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&x, &g)| x + eta * g)
                .collect();
            let proposal = Tensor::new(current.states.shape().to_vec(), moved)?;
            if let Ok(candidate) = EmbeddingMatrix::new(proposal) {
                let vp = model.evaluate_embedding(&candidate)?;
                if vp >= v {
                    accepted = Some((candidate, vp));
                    break;
                }
            }
            eta /= T::of(2.0);
        }
        let Some((mut next, vp)) = accepted else { break };
        let gain = vp - v;
        next.source = current.source;
        current = next;
        v = vp;
        steps += 1;
        if gain.as_f64() < cfg.min_gain {
            break;
        }
    }
    debug!("ascent: {steps} steps, {:.6} -> {:.6}", v0.as_f64(), v.as_f64());
    Ok(Ascent {
        embedding: current,
        v_before: v0.as_f64(),
        v_after: v.as_f64(),
        steps,
    })
}

/// Drops repeated features, keeping first occurrences.
pub fn dedupe_tokens(tokens: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    tokens.iter().copied().filter(|t| seen.insert(*t)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Unique features in emission order.
    pub tokens: Vec<usize>,
    /// The decoder produced nothing and the fallback was used.
    pub fell_back: bool,
}

/// Greedy decode (at most `p` steps), deduplicated; an empty result is
/// replaced by `fallback`.
pub fn reconstruct<T: Scalar>(model: &SubsetModel<T>, e: &EmbeddingMatrix<T>, fallback: &[usize]) -> Result<Reconstruction> {
    let decoded = dedupe_tokens(&model.greedy_decode(e, model.vocab.n_features)?);
    if decoded.is_empty() {
        return Ok(Reconstruction {
            tokens: dedupe_tokens(fallback),
            fell_back: true,
        });
    }
    Ok(Reconstruction {
        tokens: decoded,
        fell_back: false,
    })
}

/// One line of the candidate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub seed_id: usize,
    /// Ascending feature indices.
    pub tokens: Vec<usize>,
    pub v_seed: f64,
    pub v_hat_before: f64,
    pub v_hat_after: f64,
    /// `None` when evaluation failed.
    pub validated: Option<f64>,
    pub chosen: bool,
    pub ascent_steps: usize,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub candidates: Vec<CandidateResult>,
    /// Index of the chosen candidate.
    pub best: usize,
}

impl SearchOutcome {
    pub fn best(&self) -> &CandidateResult {
        &self.candidates[self.best]
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.candidates {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_candidates(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// `a` beats `b`: higher validated score, then smaller subset, then lower
/// seed id.
fn better(a: &CandidateResult, b: &CandidateResult) -> bool {
    let (va, vb) = (a.validated.unwrap_or(f64::NEG_INFINITY), b.validated.unwrap_or(f64::NEG_INFINITY));
    if va != vb {
        return va > vb;
    }
    if a.tokens.len() != b.tokens.len() {
        return a.tokens.len() < b.tokens.len();
    }
    a.seed_id < b.seed_id
}

/// Index of the best candidate with a validated score.
pub fn choose_best(candidates: &[CandidateResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if c.validated.is_none() {
            continue;
        }
        if best.is_none_or(|b| better(c, &candidates[b])) {
            best = Some(i);
        }
    }
    best
}

/// Ascends from every seed, reconstructs, and validates with the scorer
/// that labelled the records.
pub fn run_search<T: Scalar, E: Estimator>(
    scorer: &HoldoutScorer<'_, E>,
    store: &RecordStore,
    model: &SubsetModel<T>,
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let seeds = select_seeds(store, model, cfg.top_k)?;
    let mut candidates = Vec::with_capacity(seeds.len());
    let mut failures = Vec::new();
    for seed in &seeds {
        let up = ascend(model, &seed.embedding, cfg)?;
        let rec = reconstruct(model, &up.embedding, &seed.tokens)?;
        let mut tokens = rec.tokens;
        tokens.sort_unstable();
        let validated = match scorer.score(&tokens) {
            Ok(v) => Some(v),
            Err(e) => {
                warn!("candidate from seed {} failed: {e}", seed.record_id);
                failures.push(format!("seed {}: {e}", seed.record_id));
                None
            }
        };
        candidates.push(CandidateResult {
            seed_id: seed.record_id,
            tokens,
            v_seed: seed.accuracy,
            v_hat_before: up.v_before,
            v_hat_after: up.v_after,
            validated,
            chosen: false,
            ascent_steps: up.steps,
            fell_back: rec.fell_back,
        });
    }
    let best = choose_best(&candidates).ok_or_else(|| Error::AllCandidatesFailed(failures.join("; ")))?;
    candidates[best].chosen = true;
    Ok(SearchOutcome { candidates, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TrainConfig};
    use crate::records::{FeatureSubsetRecord, Source};

    fn store_of(p: usize, recs: &[(&[usize], f64)]) -> RecordStore {
        let mut s = RecordStore::empty("fp", p);
        for (i, (tokens, acc)) in recs.iter().enumerate() {
            s.records.push(FeatureSubsetRecord {
                id: i,
                tokens: tokens.to_vec(),
                accuracy: *acc,
                source: Source::Rl,
                parent_id: None,
            });
        }
        s
    }

    fn model(p: usize) -> SubsetModel<f64> {
        SubsetModel::new(p, ModelConfig::default(), 3).unwrap()
    }

    #[test]
    fn seeds_rank_by_accuracy_then_id() {
        let store = store_of(6, &[(&[0], 0.5), (&[1], 0.9), (&[2], 0.9), (&[3, 4], 0.7)]);
        let m = model(6);
        let seeds = select_seeds(&store, &m, 3).unwrap();
        assert_eq!(seeds.iter().map(|s| s.record_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(select_seeds(&store, &m, 1).unwrap()[0].record_id, 1);
        assert_eq!(seeds[2].embedding.len(), 2);
        assert!(matches!(select_seeds(&store, &m, 5), Err(Error::NotEnoughRecords { need: 5, have: 4 })));
    }

    #[test]
    fn zero_eta_leaves_embedding() {
        let m = model(5);
        let e = m.encode(&[0, 2, 4]).unwrap();
        let cfg = SearchConfig { eta: 0.0, ..Default::default() };
        let up = ascend(&m, &e, &cfg).unwrap();
        assert_eq!(up.embedding.states, e.states);
        assert_eq!(up.v_after, up.v_before);
    }

    #[test]
    fn ascent_never_lowers_prediction() {
        let m = model(7);
        for (i, tokens) in [[0usize, 1].as_slice(), &[3, 5, 6], &[2], &[6, 0, 4, 1]].iter().enumerate() {
            let e = m.encode(tokens).unwrap();
            let cfg = SearchConfig { eta: [0.01, 1.0, 100.0, 0.1][i], ..Default::default() };
            let up = ascend(&m, &e, &cfg).unwrap();
            assert!(up.v_after >= up.v_before);
        }
    }

    #[test]
    fn one_tiny_step_matches_first_order_taylor() {
        let m = model(6);
        let e = m.encode(&[1, 3, 4]).unwrap();
        let (v0, grad) = m.evaluator_gradient(&e).unwrap();
        let norm2: f64 = grad.data().iter().map(|g| g * g).sum();
        let eta = 1e-6;
        let cfg = SearchConfig {
            eta,
            max_steps: 1,
            ..Default::default()
        };
        let up = ascend(&m, &e, &cfg).unwrap();
        let predicted = eta * norm2;
        let gain = up.v_after - v0;
        assert!((gain - predicted).abs() <= 0.1 * predicted, "gain {gain} vs {predicted}");
    }

    #[test]
    fn dedupe_keeps_first_occurrence() {
        assert_eq!(dedupe_tokens(&[5, 5]), vec![5]);
        assert_eq!(dedupe_tokens(&[3, 1, 3, 2, 1]), vec![3, 1, 2]);
    }

    #[test]
    fn reconstruction_is_capped_and_valid() {
        let m = model(4);
        let e = m.encode(&[0, 3]).unwrap();
        let r = reconstruct(&m, &e, &[1]).unwrap();
        assert!(!r.tokens.is_empty() && r.tokens.len() <= 4);
        assert!(r.tokens.iter().all(|&t| t < 4));
        assert_eq!(dedupe_tokens(&r.tokens), r.tokens);
    }

    #[test]
    fn tie_prefers_smaller_subset_then_lower_seed() {
        let row = |seed_id, n: usize, v| CandidateResult {
            seed_id,
            tokens: (0..n).collect(),
            v_seed: 0.0,
            v_hat_before: 0.0,
            v_hat_after: 0.0,
            validated: Some(v),
            chosen: false,
            ascent_steps: 0,
            fell_back: false,
        };
        assert_eq!(choose_best(&[row(0, 7, 0.8), row(1, 3, 0.8)]), Some(1));
        assert_eq!(choose_best(&[row(4, 3, 0.8), row(2, 3, 0.8)]), Some(1));
        assert_eq!(choose_best(&[row(0, 7, 0.9), row(1, 3, 0.8)]), Some(0));
        let mut failed = row(0, 1, 0.0);
        failed.validated = None;
        assert_eq!(choose_best(&[failed.clone()]), None);
        assert_eq!(choose_best(&[failed, row(1, 2, 0.1)]), Some(1));
    }

    #[test]
    fn memorized_record_round_trips_through_search() {
        let features = [4usize, 0, 2];
        let store = store_of(6, &[(&features, 0.8)]);
        let mut m = model(6);
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 1,
            learning_rate: 0.01,
            patience: usize::MAX,
            ..Default::default()
        };
        crate::model::train(&mut m, &store, &cfg).unwrap();
        let e = m.encode(&features).unwrap();
        let r = reconstruct(&m, &e, &[1]).unwrap();
        assert!(!r.fell_back);
        let mut got = r.tokens.clone();
        got.sort_unstable();
        assert_eq!(got, vec![0, 2, 4]);
    }
}
