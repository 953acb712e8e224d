//! Attention-based neural temporal point process over account events.
//!
//! Each event is featurized as `[account embedding | positional encoding |
//! temporal encoding of the preceding gap]`. A strictly causal self-attention
//! layer, fed a learned start token followed by the event features, produces
//! one context vector per event that only sees earlier events. Two heads decode
//! it: a softmax over accounts for the mark and a mixture of log-normals for
//! the inter-event gap.

use std::f64::consts::{LN_2, PI};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::event_data::EventSequence;
use crate::linalg::{log_sum_exp, Matrix};
use crate::optim::{param_group, Adam, AdamConfig, ParamSet};
use crate::{Error, Result};

const CHECKPOINT_FORMAT: &str = "coordet-seq-model";
const CHECKPOINT_VERSION: u32 = 1;
/// Sequences per parallel wave; gradients are reduced in a fixed order.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModelConfig {
    pub n_accounts: usize,
    pub embed_dim: usize,
    pub pos_dim: usize,
    pub time_dim: usize,
    pub attn_dim: usize,
    pub context_dim: usize,
    pub mark_hidden: usize,
    pub components: usize,
    /// Gap scored for the first event of a sequence.
    pub first_gap: f64,
    /// Gaps are clamped below at this value before taking logs.
    pub min_gap: f64,
    /// Score gaps with the mixture density in log-gap space, without the
    /// `1/tau` change-of-variables factor.
    pub log_gap_density: bool,
    /// Standard deviation of the initial account embeddings.
    pub embed_init_scale: f64,
}

impl SeqModelConfig {
    /// Full-size model.
    pub fn new(n_accounts: usize) -> Self {
        Self {
            n_accounts,
            embed_dim: 64,
            pos_dim: 16,
            time_dim: 16,
            attn_dim: 64,
            context_dim: 64,
            mark_hidden: 64,
            components: 32,
            first_gap: 1.0,
            min_gap: 1e-8,
            log_gap_density: false,
            embed_init_scale: 0.1,
        }
    }

    /// A small model that trains in seconds on a laptop.
    pub fn compact(n_accounts: usize) -> Self {
        Self {
            embed_dim: 8,
            pos_dim: 4,
            time_dim: 4,
            attn_dim: 8,
            context_dim: 8,
            mark_hidden: 16,
            components: 4,
            ..Self::new(n_accounts)
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.embed_dim + self.pos_dim + self.time_dim
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.n_accounts,
            self.embed_dim,
            self.attn_dim,
            self.context_dim,
            self.mark_hidden,
            self.components,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !(self.first_gap > 0.0 && self.min_gap > 0.0) {
            return Err(Error::invalid("first_gap and min_gap must be positive"));
        }
        Ok(())
    }
}

param_group! {
    /// Trainable tensors of the sequence model. Gradients share this type.
    pub struct SeqWeights / SeqVars {
        /// `n_accounts x embed_dim`
        embedding,
        /// `1 x feature_dim`
        start,
        w_query,
        w_key,
        w_value,
        w_out,
        b_out,
        mark_w1,
        mark_b1,
        mark_w2,
        mark_b2,
        mix_w,
        mix_b,
        scale_w,
        scale_b,
        loc_w,
        loc_b,
        time_freq,
        time_phase,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModelParams {
    pub config: SeqModelConfig,
    pub weights: SeqWeights,
}

impl ParamSet for SeqModelParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.weights.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights.tensors_mut()
    }
}

impl SeqModelParams {
    pub fn init(config: SeqModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let d = c.feature_dim();
        let time_freq = Matrix::from_vec(
            1,
            c.time_dim,
            (0..c.time_dim)
                .map(|k| {
                    let frac = if c.time_dim > 1 {
                        k as f64 / (c.time_dim - 1) as f64
                    } else {
                        0.0
                    };
                    0.1 * 30f64.powf(frac)
                })
                .collect(),
        );
        let time_phase = Matrix::from_vec(
            1,
            c.time_dim,
            (0..c.time_dim)
                .map(|k| if k % 2 == 1 { PI / 2.0 } else { 0.0 })
                .collect(),
        );
        let mut scale_w = Matrix::glorot(c.context_dim, c.components, &mut rng);
        scale_w.scale_assign(0.1);
        let loc_b = Matrix::from_vec(1, c.components, spread(c.components, 0.0, 1.0));
        let weights = SeqWeights {
            embedding: Matrix::random_normal(c.n_accounts, c.embed_dim, c.embed_init_scale, &mut rng),
            start: Matrix::random_normal(1, d, 0.1, &mut rng),
            w_query: Matrix::glorot(d, c.attn_dim, &mut rng),
            w_key: Matrix::glorot(d, c.attn_dim, &mut rng),
            w_value: Matrix::glorot(d, c.attn_dim, &mut rng),
            w_out: Matrix::glorot(c.attn_dim, c.context_dim, &mut rng),
            b_out: Matrix::zeros(1, c.context_dim),
            mark_w1: Matrix::glorot(c.context_dim, c.mark_hidden, &mut rng),
            mark_b1: Matrix::zeros(1, c.mark_hidden),
            mark_w2: Matrix::glorot(c.mark_hidden, c.n_accounts, &mut rng),
            mark_b2: Matrix::zeros(1, c.n_accounts),
            mix_w: Matrix::glorot(c.context_dim, c.components, &mut rng),
            mix_b: Matrix::zeros(1, c.components),
            scale_w,
            scale_b: Matrix::zeros(1, c.components),
            loc_w: Matrix::glorot(c.context_dim, c.components, &mut rng),
            loc_b,
            time_freq,
            time_phase,
        };
        Ok(Self { config, weights })
    }

    /// Sets output biases from data: mark logits to smoothed log account
    /// frequencies, mixture locations and scales to the spread of log-gaps.
    pub fn warm_start(&mut self, seqs: &[EventSequence]) {
        let c = &self.config;
        let mut counts = vec![0usize; c.n_accounts];
        let mut log_gaps = Vec::new();
        for s in seqs {
            for e in &s.events {
                if e.account < counts.len() {
                    counts[e.account] += 1;
                }
            }
            log_gaps.extend(gaps(s, c).iter().map(|g| g.ln()));
        }
        let total: usize = counts.iter().sum();
        let denom = (total + c.n_accounts) as f64;
        for (v, &n) in counts.iter().enumerate() {
            self.weights.mark_b2.set(0, v, ((n + 1) as f64 / denom).ln());
        }
        if log_gaps.is_empty() {
            return;
        }
        let m = log_gaps.iter().sum::<f64>() / log_gaps.len() as f64;
        let var = log_gaps.iter().map(|x| (x - m).powi(2)).sum::<f64>() / log_gaps.len() as f64;
        let sd = var.sqrt().max(1e-2);
        let k = c.components;
        self.weights.loc_b = Matrix::from_vec(1, k, spread(k, m, sd));
        let width = if k > 1 { sd / (k as f64).sqrt() } else { sd };
        self.weights.scale_b = Matrix::filled(1, k, width.ln());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &ckpt)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(f)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        ckpt.params.check_shapes()?;
        Ok(ckpt.params)
    }

    /// Verifies every tensor has the shape implied by the config.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = Self::init(self.config.clone(), 0)?;
        for ((name, want), (_, got)) in reference.weights.named().into_iter().zip(self.weights.named()) {
            if want.shape() != got.shape() || got.as_slice().len() != got.rows() * got.cols() {
                return Err(Error::Shape(format!(
                    "{name}: expected {:?}, found {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.weights.embedding
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: SeqModelParams,
}

/// `k` evenly spaced values over `center ± width`, or just `center`.
fn spread(k: usize, center: f64, width: f64) -> Vec<f64> {
    if k == 1 {
        return vec![center];
    }
    (0..k)
        .map(|i| center + width * (2.0 * i as f64 / (k - 1) as f64 - 1.0))
        .collect()
}

/// Gaps scored by the time head: the configured first gap, then clamped
/// differences of consecutive timestamps.
fn gaps(seq: &EventSequence, c: &SeqModelConfig) -> Vec<f64> {
    let ev = &seq.events;
    (0..ev.len())
        .map(|i| {
            if i == 0 {
                c.first_gap
            } else {
                (ev[i].t - ev[i - 1].t).max(c.min_gap)
            }
        })
        .collect()
}

/// Sinusoidal position codes for positions `1..=len`.
pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for i in 0..len {
        let pos = (i + 1) as f64;
        for j in 0..dim {
            let k = (j / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * k / dim as f64);
            m.set(i, j, if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// Which log-likelihood terms to include.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terms {
    Both,
    MarkOnly,
    TimeOnly,
}

/// Tape nodes of one forward pass.
struct Graph {
    context: Var,
    mark_log_probs: Var,
    mix_log_w: Var,
    log_scale: Var,
    loc: Var,
    mark_ll: Var,
    time_ll: Var,
    /// Parameter-free part of the time log-likelihood.
    time_offset: f64,
}

fn check_sequence(seq: &EventSequence, c: &SeqModelConfig) -> Result<()> {
    if seq.events.is_empty() {
        return Err(Error::Empty(format!("sequence {}", seq.seq_id)));
    }
    if let Some(e) = seq.events.iter().find(|e| e.account >= c.n_accounts) {
        return Err(Error::UnknownAccount(e.account));
    }
    Ok(())
}

fn features_on(tape: &mut Tape, v: &SeqVars, c: &SeqModelConfig, seq: &EventSequence) -> Var {
    let ev = &seq.events;
    let idx: Vec<usize> = ev.iter().map(|e| e.account).collect();
    let emb = tape.gather_rows(v.embedding, &idx);
    let pe = tape.leaf(positional_encoding(ev.len(), c.pos_dim));
    let lag: Vec<f64> = (0..ev.len())
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                (ev[i].t - ev[i - 1].t).max(0.0).ln_1p()
            }
        })
        .collect();
    let lag = tape.leaf(Matrix::column(&lag));
    let arg = tape.matmul(lag, v.time_freq);
    let arg = tape.add_row(arg, v.time_phase);
    let phi = tape.sin(arg);
    tape.concat_cols(&[emb, pe, phi])
}

fn encode_on(tape: &mut Tape, v: &SeqVars, c: &SeqModelConfig, x: Var) -> Var {
    let len = tape.value(x).rows();
    let h = if len > 1 {
        let head = tape.head_rows(x, len - 1);
        tape.vstack(v.start, head)
    } else {
        v.start
    };
    let q = tape.matmul(h, v.w_query);
    let k = tape.matmul(h, v.w_key);
    let val = tape.matmul(h, v.w_value);
    let scores = tape.matmul_t(q, k);
    let scores = tape.scale(scores, 1.0 / (c.attn_dim as f64).sqrt());
    let attn = tape.causal_softmax(scores);
    let mixed = tape.matmul(attn, val);
    let out = tape.matmul(mixed, v.w_out);
    let out = tape.add_row(out, v.b_out);
    tape.tanh(out)
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

fn forward(tape: &mut Tape, v: &SeqVars, c: &SeqModelConfig, seq: &EventSequence) -> Graph {
    let x = features_on(tape, v, c, seq);
    let context = encode_on(tape, v, c, x);

    let hidden = affine(tape, context, v.mark_w1, v.mark_b1);
    let hidden = tape.tanh(hidden);
    let logits = affine(tape, hidden, v.mark_w2, v.mark_b2);
    let mark_log_probs = tape.log_softmax_rows(logits);
    let idx: Vec<usize> = seq.events.iter().map(|e| e.account).collect();
    let picked = tape.pick(mark_log_probs, &idx);
    let mark_ll = tape.sum(picked);

    let mix = affine(tape, context, v.mix_w, v.mix_b);
    let mix_log_w = tape.log_softmax_rows(mix);
    let log_scale = affine(tape, context, v.scale_w, v.scale_b);
    let loc = affine(tape, context, v.loc_w, v.loc_b);
    let log_tau: Vec<f64> = gaps(seq, c).iter().map(|g| g.ln()).collect();
    let lt = tape.leaf(Matrix::column(&log_tau));
    let neg_loc = tape.scale(loc, -1.0);
    let diff = tape.add_col(neg_loc, lt);
    let neg_log_scale = tape.scale(log_scale, -1.0);
    let inv_scale = tape.exp(neg_log_scale);
    let z = tape.mul(diff, inv_scale);
    let zz = tape.mul(z, z);
    let half_zz = tape.scale(zz, 0.5);
    let comp = tape.sub(mix_log_w, log_scale);
    let comp = tape.sub(comp, half_zz);
    let per_event = tape.log_sum_exp_rows(comp);
    let time_ll = tape.sum(per_event);

    let n = log_tau.len() as f64;
    let mut time_offset = -0.5 * n * (LN_2 + PI.ln());
    if !c.log_gap_density {
        time_offset -= log_tau.iter().sum::<f64>();
    }
    Graph {
        context,
        mark_log_probs,
        mix_log_w,
        log_scale,
        loc,
        mark_ll,
        time_ll,
        time_offset,
    }
}

fn objective(tape: &mut Tape, g: &Graph, terms: Terms) -> (Var, f64) {
    match terms {
        Terms::Both => (tape.add(g.mark_ll, g.time_ll), g.time_offset),
        Terms::MarkOnly => (g.mark_ll, 0.0),
        Terms::TimeOnly => (g.time_ll, g.time_offset),
    }
}

/// Event feature matrix, one row per event.
pub fn featurize(seq: &EventSequence, params: &SeqModelParams) -> Result<Matrix> {
    check_sequence(seq, &params.config)?;
    let mut tape = Tape::new();
    let v = params.weights.register(&mut tape);
    let x = features_on(&mut tape, &v, &params.config, seq);
    Ok(tape.value(x).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    /// Row `i` is the context for event `i`, built from events before it.
    pub context: Matrix,
}

/// Runs the causal encoder over a feature matrix produced by [`featurize`].
pub fn encode(x: &Matrix, params: &SeqModelParams) -> Result<EncodedSequence> {
    let c = &params.config;
    if x.cols() != c.feature_dim() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "features are {:?}, expected L x {}",
            x.shape(),
            c.feature_dim()
        )));
    }
    let mut tape = Tape::new();
    let v = params.weights.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let ctx = encode_on(&mut tape, &v, c, xv);
    Ok(EncodedSequence {
        context: tape.value(ctx).clone(),
    })
}

/// Parameters of one event's gap distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LogNormalMixture {
    pub log_weights: Vec<f64>,
    pub locs: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl LogNormalMixture {
    /// Log density at `tau`. With `jacobian` this is a density over `tau`,
    /// otherwise over `ln tau`.
    pub fn log_density(&self, tau: f64, jacobian: bool) -> f64 {
        let lt = tau.ln();
        let terms: Vec<f64> = (0..self.locs.len())
            .map(|k| {
                let z = (lt - self.locs[k]) * (-self.log_scales[k]).exp();
                self.log_weights[k] - self.log_scales[k] - 0.5 * z * z - 0.5 * (2.0 * PI).ln()
            })
            .collect();
        let base = log_sum_exp(&terms);
        if jacobian {
            base - lt
        } else {
            base
        }
    }
}

/// Per-event decoder outputs.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub context: Matrix,
    /// `L x n_accounts` log-probabilities of the next mark.
    pub mark_log_probs: Matrix,
    pub gaps: Vec<LogNormalMixture>,
    pub mark_ll: f64,
    pub time_ll: f64,
}

pub fn decode(seq: &EventSequence, params: &SeqModelParams) -> Result<Decoded> {
    check_sequence(seq, &params.config)?;
    let mut tape = Tape::new();
    let v = params.weights.register(&mut tape);
    let g = forward(&mut tape, &v, &params.config, seq);
    let (w, s, l) = (tape.value(g.mix_log_w), tape.value(g.log_scale), tape.value(g.loc));
    let gaps = (0..w.rows())
        .map(|i| LogNormalMixture {
            log_weights: w.row(i).to_vec(),
            locs: l.row(i).to_vec(),
            log_scales: s.row(i).to_vec(),
        })
        .collect();
    Ok(Decoded {
        context: tape.value(g.context).clone(),
        mark_log_probs: tape.value(g.mark_log_probs).clone(),
        gaps,
        mark_ll: tape.scalar(g.mark_ll),
        time_ll: tape.scalar(g.time_ll) + g.time_offset,
    })
}

/// Log-likelihood of one sequence under the model.
pub fn log_likelihood(seq: &EventSequence, params: &SeqModelParams) -> Result<f64> {
    let d = decode(seq, params)?;
    Ok(d.mark_ll + d.time_ll)
}

/// Summed log-likelihood of many sequences, evaluated in parallel.
pub fn total_log_likelihood(seqs: &[EventSequence], params: &SeqModelParams) -> Result<f64> {
    let parts: Result<Vec<f64>> = seqs.par_iter().map(|s| log_likelihood(s, params)).collect();
    Ok(parts?.iter().sum())
}

fn grad_one(seq: &EventSequence, params: &SeqModelParams, terms: Terms) -> Result<(f64, SeqWeights)> {
    check_sequence(seq, &params.config)?;
    let mut tape = Tape::new();
    let v = params.weights.register(&mut tape);
    let g = forward(&mut tape, &v, &params.config, seq);
    let (root, offset) = objective(&mut tape, &g, terms);
    let ll = tape.scalar(root) + offset;
    let grads = tape.backward(root);
    Ok((ll, params.weights.collect(&v, &grads)))
}

/// Summed log-likelihood of a batch and its gradient.
pub fn grad_log_likelihood(batch: &[EventSequence], params: &SeqModelParams) -> Result<(f64, SeqWeights)> {
    grad_log_likelihood_terms(batch, params, Terms::Both)
}

/// Like [`grad_log_likelihood`] restricted to some terms. The result does not
/// depend on the number of worker threads.
pub fn grad_log_likelihood_terms(
    batch: &[EventSequence],
    params: &SeqModelParams,
    terms: Terms,
) -> Result<(f64, SeqWeights)> {
    let mut total = 0.0;
    let mut acc = params.weights.zeros_like();
    for chunk in batch.chunks(GRAD_CHUNK) {
        let parts: Result<Vec<(f64, SeqWeights)>> = chunk.par_iter().map(|s| grad_one(s, params, terms)).collect();
        for (ll, g) in parts? {
            total += ll;
            acc.axpy(1.0, &g);
        }
    }
    Ok((total, acc))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            max_epochs: 50,
            batch_size: 256,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean negative log-likelihood per training sequence.
    pub train_nll: f64,
    pub valid_nll: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Maximum-likelihood training with Adam. When `valid` is non-empty the
/// parameters with the best validation likelihood are returned.
pub fn train(
    mut params: SeqModelParams,
    train: &[EventSequence],
    valid: &[EventSequence],
    cfg: &TrainConfig,
) -> Result<(SeqModelParams, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training sequences".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam.clone(), &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, SeqModelParams)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_ll = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<EventSequence> = idx.iter().map(|&i| train[i].clone()).collect();
            let (ll, grad) = grad_log_likelihood(&batch, &params)?;
            if !ll.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite log-likelihood".into(),
                });
            }
            epoch_ll += ll;
            let mut step = grad.zeros_like();
            step.axpy(-1.0 / batch.len() as f64, &grad);
            opt.step(&mut params, &step);
            if !params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite parameters".into(),
                });
            }
        }
        let train_nll = -epoch_ll / train.len() as f64;
        let valid_nll = if valid.is_empty() {
            None
        } else {
            Some(-total_log_likelihood(valid, &params)? / valid.len() as f64)
        };
        report.history.push(EpochStats {
            epoch,
            train_nll,
            valid_nll,
        });
        let score = valid_nll.unwrap_or(train_nll);
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, params.clone()));
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if valid_nll.is_some() && stale >= cfg.patience {
                break;
            }
        }
    }
    let params = match (valid.is_empty(), best) {
        (false, Some((_, p))) => p,
        _ => {
            report.best_epoch = report.history.len();
            params
        }
    };
    Ok((params, report))
}
