//! Encoder, attention decoder and evaluator over feature-ID token
//! sequences, trained jointly.
//!
//! Token ids: `PAD = 0`, `SOS = 1`, `EOS = 2`, feature `i` is `i + 3`.
//! The encoder LSTM turns a subset's tokens into the matrix `E` of its
//! hidden states. The decoder starts from the last encoder state, reads
//! `SOS` and then the previous token, attends over `E` by dot product and
//! predicts the next token from `[context, hidden]`. The evaluator
//! mean-pools `E` and predicts the subset's normalized accuracy.
//!
//! LSTM weights act on `[input, hidden]` and produce the gates in the order
//! input, forget, cell, output.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::RecordStore;
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Adam, FdReport, Graph, NodeId, ParamId, ParamStore, Tensor};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_features: usize,
}

impl Vocabulary {
    pub fn new(n_features: usize) -> Self {
        Vocabulary { n_features }
    }

    pub fn size(&self) -> usize {
        self.n_features + SPECIALS
    }

    pub fn token(&self, feature: usize) -> Result<usize> {
        if feature >= self.n_features {
            return Err(Error::UnknownToken(feature + SPECIALS));
        }
        Ok(feature + SPECIALS)
    }

    /// `None` for special tokens.
    pub fn feature(&self, token: usize) -> Option<usize> {
        (SPECIALS..self.size()).contains(&token).then(|| token - SPECIALS)
    }

    pub fn tokens(&self, features: &[usize]) -> Result<Vec<usize>> {
        if features.is_empty() {
            return Err(Error::InvalidTokens("empty token sequence".into()));
        }
        features.iter().map(|&f| self.token(f)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub evaluator_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            encoder_hidden: 64,
            decoder_hidden: 64,
            evaluator_hidden: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.encoder_hidden == 0 || self.evaluator_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        // The decoder starts from the last encoder state and attends with dot
        // products against encoder states, so both widths must agree.
        if self.encoder_hidden != self.decoder_hidden {
            return Err(Error::Config(format!(
                "encoder hidden ({}) and decoder hidden ({}) must match",
                self.encoder_hidden, self.decoder_hidden
            )));
        }
        Ok(())
    }
}

/// Min-max scaling of accuracies to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyNormalizer {
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for AccuracyNormalizer {
    fn default() -> Self {
        AccuracyNormalizer { v_min: 0.0, v_max: 1.0 }
    }
}

impl AccuracyNormalizer {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NotEnoughRecords { need: 1, have: 0 });
        }
        Ok(AccuracyNormalizer { v_min: lo, v_max: hi })
    }

    fn span(&self) -> f64 {
        self.v_max - self.v_min
    }

    /// A zero span maps everything to 0.5.
    pub fn normalize(&self, v: f64) -> f64 {
        if self.span() > 0.0 {
            (v - self.v_min) / self.span()
        } else {
            0.5
        }
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        if self.span() > 0.0 {
            self.v_min + u * self.span()
        } else {
            self.v_min
        }
    }
}

/// Encoder hidden states `[h_1 .. h_T]`, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    pub states: Tensor<T>,
    pub source: Option<usize>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    pub fn new(states: Tensor<T>) -> Result<Self> {
        if states.rows() == 0 || !states.is_finite() {
            return Err(Error::InvalidTokens("embedding must be non-empty and finite".into()));
        }
        Ok(EmbeddingMatrix { states, source: None })
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn row(&self, t: usize) -> &[T] {
        self.states.row_slice(t)
    }

    pub fn last(&self) -> &[T] {
        self.row(self.len() - 1)
    }
}

/// Decoder recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState<T> {
    pub hidden: Vec<T>,
    pub cell: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ParamIds {
    embedding: ParamId,
    enc_w: ParamId,
    enc_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ev_w1: ParamId,
    ev_b1: ParamId,
    ev_w2: ParamId,
    ev_b2: ParamId,
}

const PARAM_NAMES: [&str; 11] = [
    "embedding",
    "encoder.weight",
    "encoder.bias",
    "decoder.weight",
    "decoder.bias",
    "decoder.out_weight",
    "decoder.out_bias",
    "evaluator.w1",
    "evaluator.b1",
    "evaluator.w2",
    "evaluator.b2",
];

impl ParamIds {
    fn lookup<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        Ok(ParamIds {
            embedding: get(PARAM_NAMES[0])?,
            enc_w: get(PARAM_NAMES[1])?,
            enc_b: get(PARAM_NAMES[2])?,
            dec_w: get(PARAM_NAMES[3])?,
            dec_b: get(PARAM_NAMES[4])?,
            out_w: get(PARAM_NAMES[5])?,
            out_b: get(PARAM_NAMES[6])?,
            ev_w1: get(PARAM_NAMES[7])?,
            ev_b1: get(PARAM_NAMES[8])?,
            ev_w2: get(PARAM_NAMES[9])?,
            ev_b2: get(PARAM_NAMES[10])?,
        })
    }
}

/// Parameter nodes of the decoder bound into one graph.
struct DecoderNodes {
    w: NodeId,
    b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

/// Encoder, decoder and evaluator with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetModel<T> {
    pub vocab: Vocabulary,
    pub config: ModelConfig,
    pub normalizer: AccuracyNormalizer,
    pub params: ParamStore<T>,
    ids: ParamIds,
}

impl<T: Scalar> SubsetModel<T> {
    /// Uniform `±1/√fan_in` initialization; forget-gate biases start at 1.
    pub fn new(n_features: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_features == 0 {
            return Err(Error::InvalidDataset("no features".into()));
        }
        let vocab = Vocabulary::new(n_features);
        let v = vocab.size();
        let (e, h, eh) = (config.embed_dim, config.encoder_hidden, config.evaluator_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| -> Tensor<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
            Tensor::new(vec![rows, cols], data).expect("consistent init shape")
        };
        let lstm_bias = |b: Tensor<T>| -> Tensor<T> {
            let mut b = b;
            b.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = T::one());
            b
        };
        let mut params = ParamStore::new();
        params.add(PARAM_NAMES[0], uniform(v, e, 1));
        params.add(PARAM_NAMES[1], uniform(e + h, 4 * h, e + h));
        params.add(PARAM_NAMES[2], lstm_bias(uniform(1, 4 * h, e + h)));
        params.add(PARAM_NAMES[3], uniform(e + h, 4 * h, e + h));
        params.add(PARAM_NAMES[4], lstm_bias(uniform(1, 4 * h, e + h)));
        params.add(PARAM_NAMES[5], uniform(2 * h, v, 2 * h));
        params.add(PARAM_NAMES[6], uniform(1, v, 2 * h));
        params.add(PARAM_NAMES[7], uniform(h, eh, h));
        params.add(PARAM_NAMES[8], uniform(1, eh, h));
        params.add(PARAM_NAMES[9], uniform(eh, 1, eh));
        params.add(PARAM_NAMES[10], uniform(1, 1, eh));
        let ids = ParamIds::lookup(&params)?;
        Ok(SubsetModel {
            vocab,
            config,
            normalizer: AccuracyNormalizer::default(),
            params,
            ids,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_elements()
    }

    fn hidden(&self) -> usize {
        self.config.encoder_hidden
    }

    fn lstm_step(&self, g: &mut Graph<T>, w: NodeId, b: NodeId, x: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let hd = self.hidden();
        let xh = g.concat(&[x, h])?;
        let z = g.matmul(xh, w)?;
        let z = g.add(z, b)?;
        let i = g.slice_cols(z, 0, hd)?;
        let f = g.slice_cols(z, hd, hd)?;
        let cand = g.slice_cols(z, 2 * hd, hd)?;
        let o = g.slice_cols(z, 3 * hd, hd)?;
        let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let squashed = g.tanh(c_new);
        let h_new = g.mul(o, squashed)?;
        Ok((h_new, c_new))
    }

    /// `E` for feature-ID tokens (ids ≥ 3), as a `T × hidden` node.
    fn encode_nodes(&self, g: &mut Graph<T>, tokens: &[usize]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::InvalidTokens("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| self.vocab.feature(t).is_none()) {
            return Err(Error::UnknownToken(bad));
        }
        let hd = self.hidden();
        let w = g.param(&self.params, self.ids.enc_w);
        let b = g.param(&self.params, self.ids.enc_b);
        let xs = g.embedding(&self.params, self.ids.embedding, tokens)?;
        let mut h = g.constant(1, hd, vec![T::zero(); hd])?;
        let mut c = h;
        let mut states = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let x = g.row(xs, t)?;
            (h, c) = self.lstm_step(g, w, b, x, h, c)?;
            states.push(h);
        }
        g.stack_rows(&states)
    }

    fn bind_decoder(&self, g: &mut Graph<T>) -> DecoderNodes {
        DecoderNodes {
            w: g.param(&self.params, self.ids.dec_w),
            b: g.param(&self.params, self.ids.dec_b),
            out_w: g.param(&self.params, self.ids.out_w),
            out_b: g.param(&self.params, self.ids.out_b),
        }
    }

    /// One decoder step: returns (logits, hidden, cell).
    fn decoder_step_nodes(
        &self,
        g: &mut Graph<T>,
        d: &DecoderNodes,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        e: NodeId,
        e_t: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let (h, c) = self.lstm_step(g, d.w, d.b, x, h, c)?;
        let scores = g.matmul(h, e_t)?;
        let weights = g.softmax(scores);
        let context = g.matmul(weights, e)?;
        let joined = g.concat(&[context, h])?;
        let logits = g.matmul(joined, d.out_w)?;
        let logits = g.add(logits, d.out_b)?;
        Ok((logits, h, c))
    }

    /// Teacher-forced negative log-likelihood of `targets` (which end with
    /// EOS) given the encoder states node `e`.
    fn nll_nodes(&self, g: &mut Graph<T>, e: NodeId, targets: &[usize]) -> Result<NodeId> {
        let d = self.bind_decoder(g);
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(SOS);
        inputs.extend_from_slice(&targets[..targets.len() - 1]);
        let xs = g.embedding(&self.params, self.ids.embedding, &inputs)?;
        let e_t = g.transpose(e);
        let [rows, hd] = g.shape(e);
        let mut h = g.row(e, rows - 1)?;
        let mut c = g.constant(1, hd, vec![T::zero(); hd])?;
        let mut picked = Vec::with_capacity(targets.len());
        for (t, &target) in targets.iter().enumerate() {
            let x = g.row(xs, t)?;
            let (logits, h2, c2) = self.decoder_step_nodes(g, &d, x, h, c, e, e_t)?;
            (h, c) = (h2, c2);
            let probs = g.softmax(logits);
            picked.push(g.pick(probs, target)?);
        }
        let stacked = g.stack_rows(&picked)?;
        let logs = g.log(stacked)?;
        let total = g.sum(logs);
        Ok(g.neg(total))
    }

    /// Predicted normalized accuracy from the encoder states node `e`.
    fn evaluator_nodes(&self, g: &mut Graph<T>, e: NodeId) -> Result<NodeId> {
        let w1 = g.param(&self.params, self.ids.ev_w1);
        let b1 = g.param(&self.params, self.ids.ev_b1);
        let w2 = g.param(&self.params, self.ids.ev_w2);
        let b2 = g.param(&self.params, self.ids.ev_b2);
        let pooled = g.mean_rows(e);
        let z = g.matmul(pooled, w1)?;
        let z = g.add(z, b1)?;
        let hidden = g.tanh(z);
        let out = g.matmul(hidden, w2)?;
        let out = g.add(out, b2)?;
        Ok(g.sigmoid(out))
    }

    fn embedding_leaf(&self, g: &mut Graph<T>, e: &EmbeddingMatrix<T>) -> Result<NodeId> {
        if e.dim() != self.hidden() || e.is_empty() {
            return Err(Error::Shape {
                op: "embedding matrix",
                left: e.states.shape().to_vec(),
                right: vec![self.hidden()],
            });
        }
        Ok(g.leaf(&e.states))
    }

    /// Builds the joint loss for one record into `g`; returns `(L, L_rec, L_est)`.
    pub fn joint_loss_nodes(
        &self,
        g: &mut Graph<T>,
        features: &[usize],
        v_norm: T,
        lambda: T,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let tokens = self.vocab.tokens(features)?;
        let e = self.encode_nodes(g, &tokens)?;
        let mut targets = tokens;
        targets.push(EOS);
        let rec = self.nll_nodes(g, e, &targets)?;
        let v_hat = self.evaluator_nodes(g, e)?;
        let target = g.constant(1, 1, vec![v_norm])?;
        let diff = g.sub(v_hat, target)?;
        let est = g.square(diff);
        let a = g.scale(rec, lambda);
        let b = g.scale(est, T::one() - lambda);
        let total = g.add(a, b)?;
        Ok((total, rec, est))
    }

    /// `(L, L_rec, L_est)` for one subset, `L = λ·L_rec + (1 − λ)·L_est`.
    pub fn joint_loss(&self, features: &[usize], v_norm: T, lambda: T) -> Result<(T, T, T)> {
        let mut g = Graph::frozen();
        let (l, r, e) = self.joint_loss_nodes(&mut g, features, v_norm, lambda)?;
        Ok((g.scalar(l), g.scalar(r), g.scalar(e)))
    }

    /// Runs the encoder over a subset given as feature indices, in order.
    pub fn encode(&self, features: &[usize]) -> Result<EmbeddingMatrix<T>> {
        let tokens = self.vocab.tokens(features)?;
        let mut g = Graph::frozen();
        let e = self.encode_nodes(&mut g, &tokens)?;
        EmbeddingMatrix::new(g.to_tensor(e))
    }

    /// Teacher-forced `-log P(tokens | E)`, where `tokens` are feature
    /// indices; EOS is appended here.
    pub fn sequence_nll(&self, e: &EmbeddingMatrix<T>, features: &[usize]) -> Result<T> {
        let mut targets = self.vocab.tokens(features)?;
        targets.push(EOS);
        let mut g = Graph::frozen();
        let en = self.embedding_leaf(&mut g, e)?;
        let nll = self.nll_nodes(&mut g, en, &targets)?;
        Ok(g.scalar(nll))
    }

    pub fn evaluate_embedding(&self, e: &EmbeddingMatrix<T>) -> Result<T> {
        let mut g = Graph::frozen();
        let en = self.embedding_leaf(&mut g, e)?;
        let v = self.evaluator_nodes(&mut g, en)?;
        Ok(g.scalar(v))
    }

    /// Evaluator output and its gradient with respect to `E`; encoder and
    /// decoder are not involved.
    pub fn evaluator_gradient(&self, e: &EmbeddingMatrix<T>) -> Result<(T, Tensor<T>)> {
        let mut g = Graph::frozen();
        if e.dim() != self.hidden() {
            return Err(Error::Shape {
                op: "embedding matrix",
                left: e.states.shape().to_vec(),
                right: vec![self.hidden()],
            });
        }
        let en = g.leaf(&e.states.clone().with_grad());
        let v = self.evaluator_nodes(&mut g, en)?;
        let grads = g.backward(v)?;
        let grad = grads
            .wrt(en)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); e.states.len()]);
        Ok((g.scalar(v), Tensor::new(e.states.shape().to_vec(), grad)?))
    }

    pub fn initial_state(&self, e: &EmbeddingMatrix<T>) -> DecoderState<T> {
        DecoderState {
            hidden: e.last().to_vec(),
            cell: vec![T::zero(); self.hidden()],
        }
    }

    /// One inference step from `prev_token`. PAD and SOS logits are set to
    /// negative infinity.
    pub fn decode_step(
        &self,
        prev_token: usize,
        state: &DecoderState<T>,
        e: &EmbeddingMatrix<T>,
    ) -> Result<(Vec<T>, DecoderState<T>)> {
        let mut g = Graph::frozen();
        let en = self.embedding_leaf(&mut g, e)?;
        let e_t = g.transpose(en);
        let d = self.bind_decoder(&mut g);
        let hd = self.hidden();
        let h = g.constant(1, hd, state.hidden.clone())?;
        let c = g.constant(1, hd, state.cell.clone())?;
        let x = g.embedding(&self.params, self.ids.embedding, &[prev_token])?;
        let (logits, h, c) = self.decoder_step_nodes(&mut g, &d, x, h, c, en, e_t)?;
        let mut logits = g.value(logits).to_vec();
        logits[PAD] = T::neg_infinity();
        logits[SOS] = T::neg_infinity();
        let next = DecoderState {
            hidden: g.value(h).to_vec(),
            cell: g.value(c).to_vec(),
        };
        Ok((logits, next))
    }

    /// Greedy decode until EOS or `max_steps` tokens. Returns the emitted
    /// feature indices in order (duplicates kept, EOS dropped).
    pub fn greedy_decode(&self, e: &EmbeddingMatrix<T>, max_steps: usize) -> Result<Vec<usize>> {
        let mut g = Graph::frozen();
        let en = self.embedding_leaf(&mut g, e)?;
        let e_t = g.transpose(en);
        let d = self.bind_decoder(&mut g);
        let hd = self.hidden();
        let mut h = g.constant(1, hd, e.last().to_vec())?;
        let mut c = g.constant(1, hd, vec![T::zero(); hd])?;
        let mut prev = SOS;
        let mut out = Vec::new();
        for _ in 0..max_steps {
            let x = g.embedding(&self.params, self.ids.embedding, &[prev])?;
            let (logits, h2, c2) = self.decoder_step_nodes(&mut g, &d, x, h, c, en, e_t)?;
            (h, c) = (h2, c2);
            let token = masked_argmax(g.value(logits));
            if token == EOS {
                break;
            }
            out.push(self.vocab.feature(token).expect("specials are masked"));
            prev = token;
        }
        Ok(out)
    }

    /// Fraction of teacher-forced steps (EOS step included) whose masked
    /// argmax equals the target token.
    pub fn teacher_forced_accuracy<'a>(&self, subsets: impl IntoIterator<Item = &'a [usize]>) -> Result<f64> {
        let (mut hits, mut steps) = (0usize, 0usize);
        for features in subsets {
            let tokens = self.vocab.tokens(features)?;
            let mut g = Graph::frozen();
            let e = self.encode_nodes(&mut g, &tokens)?;
            let d = self.bind_decoder(&mut g);
            let e_t = g.transpose(e);
            let [rows, hd] = g.shape(e);
            let mut h = g.row(e, rows - 1)?;
            let mut c = g.constant(1, hd, vec![T::zero(); hd])?;
            let mut prev = SOS;
            let mut targets = tokens;
            targets.push(EOS);
            for &target in &targets {
                let x = g.embedding(&self.params, self.ids.embedding, &[prev])?;
                let (logits, h2, c2) = self.decoder_step_nodes(&mut g, &d, x, h, c, e, e_t)?;
                (h, c) = (h2, c2);
                hits += usize::from(masked_argmax(g.value(logits)) == target);
                steps += 1;
                prev = target;
            }
        }
        Ok(if steps == 0 { 0.0 } else { hits as f64 / steps as f64 })
    }

    /// Accumulates the joint-loss gradient of one record into the parameter
    /// store and returns `(L, L_rec, L_est)`.
    pub fn accumulate_record(&mut self, features: &[usize], v_norm: T, lambda: T) -> Result<(T, T, T)> {
        let mut g = Graph::new();
        let (l, r, e) = self.joint_loss_nodes(&mut g, features, v_norm, lambda)?;
        let (lv, rv, ev) = (g.scalar(l), g.scalar(r), g.scalar(e));
        if lv.is_finite() {
            g.backward(l)?.accumulate_into(&g, &mut self.params);
        }
        Ok((lv, rv, ev))
    }

    /// Checks the joint-loss gradient with respect to every parameter
    /// against central differences.
    ///
    /// Evaluator weights cannot change the reconstruction term and decoder
    /// weights cannot change `E` or the estimation term, so those terms are
    /// computed once and reused; the recombined loss is bit-identical to a
    /// full forward pass.
    pub fn joint_loss_fd_check(&self, features: &[usize], v_norm: T, lambda: T, h: f64, tol: f64) -> Result<FdReport> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidStep(h));
        }
        let mut probe = self.clone();
        probe.params.zero_grads();
        probe.accumulate_record(features, v_norm, lambda)?;

        let tokens = self.vocab.tokens(features)?;
        let mut targets = tokens.clone();
        targets.push(EOS);
        let e0 = self.encode(features)?;
        let rec_of = |m: &Self| -> Result<T> {
            let mut g = Graph::frozen();
            let e = g.leaf(&e0.states);
            let r = m.nll_nodes(&mut g, e, &targets)?;
            Ok(g.scalar(r))
        };
        let est_of = |m: &Self| -> Result<T> {
            let v = m.evaluate_embedding(&e0)?;
            Ok((v - v_norm) * (v - v_norm))
        };
        let (rec0, est0) = (rec_of(self)?, est_of(self)?);
        let combine = |rec: T, est: T| rec * lambda + est * (T::one() - lambda);

        let ids = self.ids;
        let decoder = [ids.dec_w, ids.dec_b, ids.out_w, ids.out_b];
        let evaluator = [ids.ev_w1, ids.ev_b1, ids.ev_w2, ids.ev_b2];
        let loss_of = |m: &Self, id: ParamId| -> Result<f64> {
            let l = if decoder.contains(&id) {
                combine(rec_of(m)?, est0)
            } else if evaluator.contains(&id) {
                combine(rec0, est_of(m)?)
            } else {
                m.joint_loss(features, v_norm, lambda)?.0
            };
            Ok(l.as_f64())
        };

        let mut report = FdReport {
            coordinates: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        let mut shifted = self.clone();
        let all: Vec<ParamId> = self.params.iter().map(|(id, _, _)| id).collect();
        for id in all {
            let analytic: Vec<f64> = match probe.params.get(id).grad() {
                Some(g) => g.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; self.params.get(id).len()],
            };
            for (i, &a) in analytic.iter().enumerate() {
                let orig = self.params.get(id).data()[i];
                shifted.params.get_mut(id).data_mut()[i] = T::of(orig.as_f64() + h);
                let up = loss_of(&shifted, id)?;
                shifted.params.get_mut(id).data_mut()[i] = T::of(orig.as_f64() - h);
                let down = loss_of(&shifted, id)?;
                shifted.params.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
                report.max_abs_error = report.max_abs_error.max(abs);
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_index = report.coordinates;
                }
                report.coordinates += 1;
            }
        }
        report.passed = report.max_rel_error < tol;
        Ok(report)
    }
}

fn masked_argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = EOS;
    for (t, &v) in logits.iter().enumerate().skip(EOS + 1) {
        if v > logits[best] {
            best = t;
        }
    }
    best
}

/// Attention weights (softmax of `ĥ · h_j`) and the weighted context row.
pub fn attention_context<T: Scalar>(query: &[T], e: &EmbeddingMatrix<T>) -> (Vec<T>, Vec<T>) {
    let mut weights: Vec<T> = (0..e.len())
        .map(|j| e.row(j).iter().zip(query).map(|(&a, &b)| a * b).sum())
        .collect();
    softmax_in_place(&mut weights);
    let mut context = vec![T::zero(); e.dim()];
    for (j, &w) in weights.iter().enumerate() {
        context.iter_mut().zip(e.row(j)).for_each(|(c, &v)| *c += w * v);
    }
    (context, weights)
}

/// Softmax of a logit vector, treating `-inf` entries as probability zero.
pub fn step_distribution<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the reconstruction loss; the estimation loss gets `1 - λ`.
    pub lambda: f64,
    /// Stop after this many epochs without an improvement of `min_delta`.
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1024,
            learning_rate: 0.001,
            lambda: 0.8,
            patience: 10,
            min_delta: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub estimation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    pub stopped_early: bool,
    pub optimizer_steps: u64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,reconstruction,estimation\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.reconstruction, e.estimation));
        }
        out
    }
}

/// Fits the normalizer on the store's base records, then trains on every
/// record. Each Adam step averages the gradients of up to `batch_size`
/// records, visited in a seeded per-epoch shuffle.
pub fn train<T: Scalar>(model: &mut SubsetModel<T>, store: &RecordStore, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with(model, store, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with<T: Scalar>(
    model: &mut SubsetModel<T>,
    store: &RecordStore,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if store.is_empty() {
        return Err(Error::NotEnoughRecords { need: 1, have: 0 });
    }
    if store.n_features != model.vocab.n_features {
        return Err(Error::InvalidTokens(format!(
            "store has {} features, model expects {}",
            store.n_features, model.vocab.n_features
        )));
    }
    model.normalizer = AccuracyNormalizer::fit(store.base().map(|r| r.accuracy))?;
    let examples: Vec<(usize, &[usize], T)> = store
        .records
        .iter()
        .map(|r| (r.id, r.tokens.as_slice(), T::of(model.normalizer.normalize(r.accuracy))))
        .collect();
    let lambda = T::of(cfg.lambda);
    let mut adam = Adam::new(T::of(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_l, mut sum_r, mut sum_e) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grads();
            for &k in batch {
                let (id, features, v) = examples[k];
                let (l, r, e) = model.accumulate_record(features, v, lambda)?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, record: id });
                }
                sum_l += l.as_f64();
                sum_r += r.as_f64();
                sum_e += e.as_f64();
            }
            model.params.scale_grads(T::one() / T::of(batch.len() as f64));
            adam.step(&mut model.params)?;
        }
        let n = examples.len() as f64;
        let row = EpochLoss {
            epoch,
            loss: sum_l / n,
            reconstruction: sum_r / n,
            estimation: sum_e / n,
        };
        debug!("epoch {epoch}: loss {:.6} rec {:.6} est {:.6}", row.loss, row.reconstruction, row.estimation);
        on_epoch(&row);
        history.epochs.push(row);
        if best - row.loss >= cfg.min_delta {
            best = row.loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("early stop after epoch {epoch}");
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params.zero_grads();
    history.optimizer_steps = adam.steps();
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocabulary: Vocabulary,
    pub model: ModelConfig,
    pub normalizer: AccuracyNormalizer,
    pub train: Option<TrainConfig>,
    pub fingerprint: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl<T: Scalar> SubsetModel<T> {
    pub fn to_checkpoint(&self, fingerprint: &str, train: Option<TrainConfig>) -> Checkpoint {
        Checkpoint {
            vocabulary: self.vocab,
            model: self.config,
            normalizer: self.normalizer,
            train,
            fingerprint: fingerprint.to_string(),
            tensors: self
                .params
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model. A fingerprint other than `expected` is an error
    /// unless `allow_mismatch`, in which case it is only logged.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&str>, allow_mismatch: bool) -> Result<Self> {
        if let Some(fp) = expected {
            if fp != ck.fingerprint {
                if !allow_mismatch {
                    return Err(Error::FingerprintMismatch {
                        expected: fp.to_string(),
                        found: ck.fingerprint.clone(),
                    });
                }
                log::warn!("checkpoint fingerprint {} does not match {fp}; continuing", ck.fingerprint);
            }
        }
        let mut model = SubsetModel::new(ck.vocabulary.n_features, ck.model, 0)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                ck.tensors.len()
            )));
        }
        for nt in &ck.tensors {
            let id = model
                .params
                .find(&nt.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", nt.name)))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != nt.shape.as_slice() || nt.data.len() != slot.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    nt.name,
                    nt.shape,
                    slot.shape()
                )));
            }
            slot.data_mut().iter_mut().zip(&nt.data).for_each(|(d, &v)| *d = T::of(v));
        }
        model.normalizer = ck.normalizer;
        Ok(model)
    }
}
