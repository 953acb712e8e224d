//! Variational EM over the sequence model and the group-assignment field.
//!
//! The loop starts from a pretrained sequence model: k-means on its account
//! embeddings gives an initial grouping that the unary scorer is fitted to.
//! Each round then runs mean-field inference over the field (E-step) and
//! ascends `sum log p(seq) + lambda * sum_u sum_m Q_u(m) log softmax(phi(E_u))_m`
//! in the sequence-model parameters, embeddings and scorer (M-step).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf_field::{
    argmax_rows, estep_converge, initial_q, mean_field_free_energy, Field, MeanFieldConfig, ScorerWeights, UnaryScorer,
};
use crate::event_data::{AccountRegistry, EventSequence, Labels};
use crate::kmeans::{kmeans, KMeans, KMeansConfig};
use crate::knowledge_graph::KnowledgeGraph;
use crate::linalg::Matrix;
use crate::metrics_eval::silhouette;
use crate::optim::{Adam, AdamConfig, ParamSet};
use crate::seq_model::{grad_log_likelihood, total_log_likelihood, SeqModelParams};
use crate::{Error, Result};

/// Class label of coordinated accounts in label files.
pub const COORDINATED_CLASS: usize = 1;
/// Loop counts tried when the count is chosen on validation data.
pub const AUTO_LOOP_CANDIDATES: [usize; 3] = [1, 2, 3];

/// Number of EM rounds, fixed or picked on validation data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LoopSetting {
    Fixed(usize),
    Auto,
}

impl FromStr for LoopSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(LoopSetting::Auto);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(LoopSetting::Fixed(n)),
            _ => Err(Error::invalid(format!(
                "loops must be a positive integer or `auto`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for LoopSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoopSetting::Fixed(n) => write!(f, "{n}"),
            LoopSetting::Auto => f.write_str("auto"),
        }
    }
}

impl TryFrom<String> for LoopSetting {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LoopSetting> for String {
    fn from(l: LoopSetting) -> String {
        l.to_string()
    }
}

/// How the coordinated group is picked among the inferred groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupHeuristic {
    /// The group with less posterior mass (two groups only).
    SmallerCluster,
    /// The group most revealed coordinated accounts fall into.
    RevealedLabels,
}

impl FromStr for GroupHeuristic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smaller_cluster" | "smaller-cluster" => Ok(Self::SmallerCluster),
            "revealed_labels" | "revealed-labels" => Ok(Self::RevealedLabels),
            _ => Err(Error::invalid(format!("unknown group heuristic `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub loops: LoopSetting,
    pub m_step_epochs: usize,
    /// M-step epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub estep: MeanFieldConfig,
    /// Weight of the field term relative to the sequence likelihood.
    pub lambda: f64,
    pub scorer_hidden: usize,
    /// Full-batch steps used to fit the scorer to the k-means grouping.
    pub scorer_fit_steps: usize,
    pub scorer_fit_lr: f64,
    pub kmeans_init: usize,
    pub seed: u64,
    /// Run a single E-step on the initialization and stop.
    pub estep_only: bool,
    /// Defaults to revealed labels when some are given, else the smaller cluster.
    pub heuristic: Option<GroupHeuristic>,
    pub threshold: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            loops: LoopSetting::Auto,
            m_step_epochs: 50,
            patience: 5,
            batch_size: 256,
            adam: AdamConfig::default(),
            estep: MeanFieldConfig::default(),
            lambda: 1.0,
            scorer_hidden: 64,
            scorer_fit_steps: 500,
            scorer_fit_lr: 0.01,
            kmeans_init: 4,
            seed: 0,
            estep_only: false,
            heuristic: None,
            threshold: 0.5,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if let LoopSetting::Fixed(0) = self.loops {
            return Err(Error::invalid("at least one EM loop is required"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        if self.batch_size == 0 || self.scorer_hidden == 0 {
            return Err(Error::invalid("batch_size and scorer_hidden must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Sequence model plus unary scorer, updated together in the M-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub seq: SeqModelParams,
    pub scorer: UnaryScorer,
}

impl ParamSet for JointModel {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.seq.tensors();
        t.extend(self.scorer.weights.tensors());
        t
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.seq.tensors_mut();
        t.extend(self.scorer.weights.tensors_mut());
        t
    }
}

impl JointModel {
    pub fn embeddings(&self) -> &Matrix {
        self.seq.embeddings()
    }

    /// Unary scores for every account.
    pub fn unary(&self) -> Result<Matrix> {
        self.scorer.scores(self.embeddings())
    }

    pub fn field(&self, graph: &KnowledgeGraph) -> Result<Field> {
        Field::new(self.unary()?, graph)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: JointModel = serde_json::from_reader(f)?;
        m.seq.check_shapes()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub scorer: UnaryScorer,
    pub kmeans: KMeans,
    /// Mean cross-entropy of the fitted scorer against the k-means labels.
    pub fit_loss: f64,
}

/// k-means on the pretrained embeddings, then a scorer fitted to that grouping.
pub fn initialize(pretrained: &SeqModelParams, groups: usize, seed: u64) -> Result<Initialization> {
    let cfg = EmConfig {
        seed,
        ..EmConfig::default()
    };
    initialize_with(pretrained, groups, &cfg, None)
}

/// Like [`initialize`]; with revealed labels (two groups only) the k-means
/// groups are renumbered so group `c` agrees best with class `c`.
pub fn initialize_with(
    pretrained: &SeqModelParams,
    groups: usize,
    cfg: &EmConfig,
    revealed: Option<&Labels>,
) -> Result<Initialization> {
    if groups < 2 {
        return Err(Error::invalid(format!("at least 2 groups are required, got {groups}")));
    }
    let e = pretrained.embeddings();
    let mut km = kmeans(
        e,
        groups,
        &KMeansConfig {
            n_init: cfg.kmeans_init,
            seed: cfg.seed,
        },
    )?;
    if let Some(rev) = revealed {
        if groups != 2 {
            return Err(Error::invalid("revealed labels require exactly 2 groups"));
        }
        let agree = rev.iter().filter(|&(&u, &c)| km.labels.get(u) == Some(&c)).count();
        if 2 * agree < rev.len() {
            km.labels.iter_mut().for_each(|l| *l = 1 - *l);
            let (a, b) = (km.centroids.row(0).to_vec(), km.centroids.row(1).to_vec());
            km.centroids.row_mut(0).copy_from_slice(&b);
            km.centroids.row_mut(1).copy_from_slice(&a);
        }
    }
    let mut scorer = UnaryScorer::init(e.cols(), cfg.scorer_hidden, groups, cfg.seed)?;
    let target = one_hot_rows(&km.labels, groups);
    let fit_loss = fit_scorer(&mut scorer, e, &target, cfg.scorer_fit_steps, cfg.scorer_fit_lr)?;
    Ok(Initialization {
        scorer,
        kmeans: km,
        fit_loss,
    })
}

fn one_hot_rows(labels: &[usize], groups: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), groups);
    for (u, &l) in labels.iter().enumerate() {
        m.set(u, l, 1.0);
    }
    m
}

/// Full-batch cross-entropy fit of the scorer with the embeddings held fixed.
fn fit_scorer(scorer: &mut UnaryScorer, e: &Matrix, target: &Matrix, steps: usize, lr: f64) -> Result<f64> {
    let n = e.rows() as f64;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        &scorer.weights,
    );
    let mut loss = f64::INFINITY;
    for _ in 0..steps {
        let (value, mut g, _) = scorer.expected_log_softmax(e, target, None)?;
        let next = -value / n;
        let done = (loss - next).abs() < 1e-9;
        loss = next;
        if done {
            break;
        }
        let mut step = g.zeros_like();
        step.axpy(-1.0 / n, &g);
        g = step;
        opt.step(&mut scorer.weights, &g);
    }
    let (value, _, _) = scorer.expected_log_softmax(e, target, None)?;
    Ok(-value / n)
}

/// `sum_batch log p(seq) + lambda * sum_u sum_m Q_u(m) log softmax(phi(E_u))_m`.
pub fn m_step_objective(batch: &[EventSequence], q: &Matrix, model: &JointModel, lambda: f64) -> Result<f64> {
    let ll = total_log_likelihood(batch, &model.seq)?;
    let (ce, _, _) = model.scorer.expected_log_softmax(model.embeddings(), q, None)?;
    Ok(ll + lambda * ce)
}

/// Gradient of the two terms of [`m_step_objective`] with separate weights.
/// `Q` is treated as a constant.
pub fn m_step_gradient(
    batch: &[EventSequence],
    q: &Matrix,
    model: &JointModel,
    seq_weight: f64,
    field_weight: f64,
) -> Result<(f64, JointModel)> {
    let (ll, gseq) = grad_log_likelihood(batch, &model.seq)?;
    let (ce, gsc, ge) = model.scorer.expected_log_softmax(model.embeddings(), q, None)?;
    let mut grad = JointModel {
        seq: SeqModelParams {
            config: model.seq.config.clone(),
            weights: model.seq.weights.zeros_like(),
        },
        scorer: UnaryScorer {
            weights: ScorerWeights::zeros_like(&model.scorer.weights),
        },
    };
    grad.seq.weights.axpy(seq_weight, &gseq);
    grad.scorer.weights.axpy(field_weight, &gsc);
    for (g, x) in grad.seq.weights.embedding.as_mut_slice().iter_mut().zip(ge.as_slice()) {
        *g += field_weight * x;
    }
    Ok((seq_weight * ll + field_weight * ce, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub valid_before: f64,
    pub valid_after: f64,
}

/// Held-out likelihood scaled to the training-set size plus the field term.
/// Falls back to the training objective without validation sequences.
fn validation_objective(
    train: &[EventSequence],
    valid: &[EventSequence],
    q: &Matrix,
    model: &JointModel,
    lambda: f64,
) -> Result<f64> {
    if valid.is_empty() {
        return m_step_objective(train, q, model, lambda);
    }
    let ll = total_log_likelihood(valid, &model.seq)?;
    let (ce, _, _) = model.scorer.expected_log_softmax(model.embeddings(), q, None)?;
    Ok(ll * train.len() as f64 / valid.len() as f64 + lambda * ce)
}

/// Gradient ascent on the M-step objective with early stopping on the
/// validation objective; the best epoch (possibly the starting point) is kept.
pub fn m_step(
    model: &JointModel,
    q: &Matrix,
    train: &[EventSequence],
    valid: &[EventSequence],
    cfg: &EmConfig,
    seed: u64,
) -> Result<(JointModel, MStepReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training sequences".into()));
    }
    let n = train.len() as f64;
    let mut current = model.clone();
    let mut opt = Adam::new(cfg.adam.clone(), &current);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = validation_objective(train, valid, q, &current, cfg.lambda)?;
    let mut best = (start, current.clone(), 0);
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.m_step_epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<EventSequence> = idx.iter().map(|&i| train[i].clone()).collect();
            let (value, grad) = m_step_gradient(&batch, q, &current, 1.0 / batch.len() as f64, cfg.lambda / n)?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite M-step objective".into(),
                });
            }
            let mut descent = grad.clone();
            for t in descent.tensors_mut() {
                t.scale_assign(-1.0);
            }
            opt.step(&mut current, &descent);
            if !current.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite parameters".into(),
                });
            }
        }
        let v = validation_objective(train, valid, q, &current, cfg.lambda)?;
        if v > best.0 {
            best = (v, current.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (valid_after, kept, best_epoch) = best;
    Ok((
        kept,
        MStepReport {
            epochs_run,
            best_epoch,
            valid_before: start,
            valid_after,
        },
    ))
}

/// Result fields written per account.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub q: Matrix,
    pub coordinated_group: usize,
    /// Posterior probability of the coordinated group.
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub group_of: Vec<usize>,
    pub threshold: f64,
}

impl DetectionResult {
    pub fn from_q(q: Matrix, coordinated_group: usize, threshold: f64) -> Self {
        let scores: Vec<f64> = (0..q.rows()).map(|u| q.get(u, coordinated_group)).collect();
        let labels = scores.iter().map(|&s| s >= threshold).collect();
        let group_of = argmax_rows(&q);
        Self {
            q,
            coordinated_group,
            scores,
            labels,
            group_of,
            threshold,
        }
    }

    /// `account,score,label,group`
    pub fn write_csv(&self, registry: &AccountRegistry, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["account", "score", "label", "group"])?;
        for u in 0..self.scores.len() {
            w.write_record([
                registry.name(u).as_str().to_string(),
                self.scores[u].to_string(),
                u8::from(self.labels[u]).to_string(),
                self.group_of[u].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `account,q_0,...,q_{M-1}`
    pub fn write_q_csv(&self, registry: &AccountRegistry, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["account".to_string()];
        header.extend((0..self.q.cols()).map(|m| format!("q_{m}")));
        w.write_record(&header)?;
        for u in 0..self.q.rows() {
            let mut row = vec![registry.name(u).as_str().to_string()];
            row.extend(self.q.row(u).iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-account scores read back from a result CSV.
pub fn read_result_scores(path: &Path, registry: &AccountRegistry) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message,
        };
        let name = rec.get(0).ok_or_else(|| parse_err("missing account".into()))?;
        let u = registry
            .get(name)
            .ok_or_else(|| parse_err(format!("unknown account `{name}`")))?;
        let score: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("missing or malformed score".into()))?;
        out.push((u, score));
    }
    Ok(out)
}

/// Picks the group treated as coordinated.
pub fn identify_coordinated_group(q: &Matrix, heuristic: GroupHeuristic, revealed: Option<&Labels>) -> Result<usize> {
    let m = q.cols();
    match heuristic {
        GroupHeuristic::SmallerCluster => {
            if m != 2 {
                return Err(Error::invalid("the smaller-cluster heuristic needs exactly 2 groups"));
            }
            let mass: Vec<f64> = (0..2).map(|g| (0..q.rows()).map(|u| q.get(u, g)).sum()).collect();
            if mass[0] == mass[1] {
                return Err(Error::Ambiguous(format!(
                    "both groups carry mass {}; choose the group explicitly",
                    mass[0]
                )));
            }
            Ok(usize::from(mass[1] < mass[0]))
        }
        GroupHeuristic::RevealedLabels => {
            let rev = revealed.ok_or_else(|| Error::invalid("revealed-labels heuristic needs revealed labels"))?;
            let mut votes = vec![0usize; m];
            let argmax = argmax_rows(q);
            for (&u, &c) in rev {
                if c == COORDINATED_CLASS {
                    let g = *argmax.get(u).ok_or(Error::UnknownAccount(u))?;
                    votes[g] += 1;
                }
            }
            let top = *votes.iter().max().unwrap_or(&0);
            if top == 0 {
                return Err(Error::invalid("no revealed coordinated accounts"));
            }
            let winners: Vec<usize> = (0..m).filter(|&g| votes[g] == top).collect();
            if winners.len() > 1 {
                return Err(Error::Ambiguous(format!("groups {winners:?} tie on revealed labels")));
            }
            Ok(winners[0])
        }
    }
}

/// k-means for each candidate count on the embedding rows; returns the
/// count with the highest silhouette (ties to the smaller count) and every
/// candidate's score.
pub fn select_group_count(
    pretrained: &SeqModelParams,
    candidates: &[usize],
    seed: u64,
) -> Result<(usize, Vec<(usize, f64)>)> {
    if candidates.len() < 2 {
        return Err(Error::invalid("at least two candidate group counts are required"));
    }
    if let Some(&m) = candidates.iter().find(|&&m| m < 2) {
        return Err(Error::invalid(format!("candidate group count {m} is below 2")));
    }
    let e = pretrained.embeddings();
    if (1..e.rows()).all(|u| e.row(u) == e.row(0)) {
        return Err(Error::Degenerate("all account embeddings are identical".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for &m in &sorted {
        let km = kmeans(e, m, &KMeansConfig { n_init: 4, seed })?;
        let s = silhouette(e, &km.labels)?;
        scores.push((m, s));
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((m, s));
        }
    }
    Ok((best.expect("non-empty candidates").0, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub round: usize,
    pub estep_iterations: usize,
    pub estep_converged: bool,
    pub free_energy: f64,
    pub m_step: Option<MStepReport>,
    /// Validation objective of the model after this round with the
    /// posterior inferred from it.
    pub valid_objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EmOutcome {
    pub result: DetectionResult,
    pub model: JointModel,
    pub init: Initialization,
    pub rounds: Vec<LoopRecord>,
    /// Number of M-steps in the returned model.
    pub chosen_loops: usize,
}

/// Training and validation sequences plus the prior graph.
#[derive(Debug, Clone, Copy)]
pub struct EmInputs<'a> {
    pub train: &'a [EventSequence],
    pub valid: &'a [EventSequence],
    pub graph: &'a KnowledgeGraph,
}

fn clamps_from(revealed: Option<&Labels>, n: usize) -> Result<Option<Vec<Option<usize>>>> {
    let Some(rev) = revealed else { return Ok(None) };
    let mut c = vec![None; n];
    for (&u, &class) in rev {
        if u >= n {
            return Err(Error::UnknownAccount(u));
        }
        if class > 1 {
            return Err(Error::invalid(format!("revealed label {class} is not binary")));
        }
        c[u] = Some(class);
    }
    Ok(Some(c))
}

/// Full detection: initialization, EM rounds and the final posterior.
pub fn run_em(
    inputs: EmInputs<'_>,
    pretrained: &SeqModelParams,
    groups: usize,
    cfg: &EmConfig,
    revealed: Option<&Labels>,
) -> Result<EmOutcome> {
    cfg.validate()?;
    let n = pretrained.config.n_accounts;
    if inputs.graph.n() != n {
        return Err(Error::Shape(format!(
            "graph has {} nodes but the model knows {n} accounts",
            inputs.graph.n()
        )));
    }
    let revealed = revealed.filter(|r| !r.is_empty());
    let init = initialize_with(pretrained, groups, cfg, revealed)?;
    let clamps = clamps_from(revealed, n)?;
    let clamps = clamps.as_deref();

    let mut model = JointModel {
        seq: pretrained.clone(),
        scorer: init.scorer.clone(),
    };
    let field = model.field(inputs.graph)?;
    let mut es = estep_converge(&field, &initial_q(&field, clamps)?, clamps, &cfg.estep)?;
    let mut rounds = vec![LoopRecord {
        round: 0,
        estep_iterations: es.iterations,
        estep_converged: es.converged,
        free_energy: mean_field_free_energy(&field, &es.q)?,
        m_step: None,
        valid_objective: None,
    }];

    let mut chosen = (model.clone(), es.q.clone(), 0usize);
    if !cfg.estep_only {
        let max_loops = match cfg.loops {
            LoopSetting::Fixed(k) => k,
            LoopSetting::Auto => *AUTO_LOOP_CANDIDATES.last().expect("candidates"),
        };
        let mut best_valid = f64::NEG_INFINITY;
        for round in 1..=max_loops {
            let (next, report) = m_step(
                &model,
                &es.q,
                inputs.train,
                inputs.valid,
                cfg,
                cfg.seed.wrapping_add(round as u64),
            )?;
            model = next;
            let field = model.field(inputs.graph)?;
            es = estep_converge(&field, &es.q, clamps, &cfg.estep)?;
            let valid = validation_objective(inputs.train, inputs.valid, &es.q, &model, cfg.lambda)?;
            rounds.push(LoopRecord {
                round,
                estep_iterations: es.iterations,
                estep_converged: es.converged,
                free_energy: mean_field_free_energy(&field, &es.q)?,
                m_step: Some(report),
                valid_objective: Some(valid),
            });
            let take = match cfg.loops {
                LoopSetting::Fixed(k) => round == k,
                LoopSetting::Auto => valid > best_valid,
            };
            best_valid = best_valid.max(valid);
            if take {
                chosen = (model.clone(), es.q.clone(), round);
            }
        }
    }

    let (model, q, chosen_loops) = chosen;
    let heuristic = cfg.heuristic.unwrap_or(if revealed.is_some() {
        GroupHeuristic::RevealedLabels
    } else {
        GroupHeuristic::SmallerCluster
    });
    let group = identify_coordinated_group(&q, heuristic, revealed)?;
    Ok(EmOutcome {
        result: DetectionResult::from_q(q, group, cfg.threshold),
        model,
        init,
        rounds,
        chosen_loops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_data::Event;
    use crate::knowledge_graph::{FilterTag, StorageKind};
    use crate::seq_model::SeqModelConfig;
    use rand::Rng;

    fn toy_seq_params(seed: u64) -> SeqModelParams {
        let cfg = SeqModelConfig {
            embed_dim: 8,
            components: 2,
            ..SeqModelConfig::compact(6)
        };
        SeqModelParams::init(cfg, seed).unwrap()
    }

    fn blob_embeddings(p: &mut SeqModelParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p.config.n_accounts;
        for u in 0..n {
            let c = if u < n / 2 { -3.0 } else { 3.0 };
            for j in 0..p.config.embed_dim {
                p.weights.embedding.set(u, j, c + rng.gen_range(-0.3..0.3));
            }
        }
    }

    fn toy_sequences(seed: u64) -> Vec<EventSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..8)
            .map(|k| {
                let mut t = 0.0;
                let events = (0..6)
                    .map(|_| {
                        t += rng.gen_range(0.1..5.0);
                        Event {
                            account: rng.gen_range(0..6),
                            t,
                        }
                    })
                    .collect();
                EventSequence::new(format!("s{k}"), events)
            })
            .collect()
    }

    #[test]
    fn initialization_reproduces_kmeans_groups() {
        let mut p = SeqModelParams::init(SeqModelConfig::compact(60), 0).unwrap();
        blob_embeddings(&mut p, 1);
        let init = initialize(&p, 2, 3).unwrap();
        let pred = argmax_rows(&init.scorer.scores(p.embeddings()).unwrap());
        let agree = pred.iter().zip(&init.kmeans.labels).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.99 * 60.0);
        assert_eq!(init, initialize(&p, 2, 3).unwrap());
        assert!(initialize(&p, 1, 3).is_err());
    }

    #[test]
    fn objective_reduces_to_likelihood_at_perfect_fit() {
        let p = toy_seq_params(1);
        let seqs = toy_sequences(2);
        let mut scorer = UnaryScorer::init(8, 4, 2, 0).unwrap();
        // A huge bias makes the softmax one-hot on group 1 to machine precision.
        scorer.weights.b2 = Matrix::from_vec(1, 2, vec![-800.0, 800.0]);
        let model = JointModel { seq: p.clone(), scorer };
        let q = one_hot_rows(&[1; 6], 2);
        let obj = m_step_objective(&seqs, &q, &model, 1.0).unwrap();
        assert_eq!(obj, total_log_likelihood(&seqs, &p).unwrap());

        // Uniform Q against a uniform softmax costs log 2 per account.
        let mut flat = model.clone();
        flat.scorer.weights.w2 = Matrix::zeros(4, 2);
        flat.scorer.weights.b2 = Matrix::zeros(1, 2);
        let uq = Matrix::filled(6, 2, 0.5);
        let obj = m_step_objective(&seqs, &uq, &flat, 1.0).unwrap();
        let expected = total_log_likelihood(&seqs, &p).unwrap() - 6.0 * 2f64.ln();
        assert!((obj - expected).abs() < 1e-9);
    }

    #[test]
    fn m_step_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seqs = toy_sequences(4);
        let model = JointModel {
            seq: toy_seq_params(3),
            scorer: UnaryScorer::init(8, 5, 2, 1).unwrap(),
        };
        let mut q = Matrix::random_normal(6, 2, 1.0, &mut rng).map(f64::exp);
        for u in 0..6 {
            let s: f64 = q.row(u).iter().sum();
            q.row_mut(u).iter_mut().for_each(|x| *x /= s);
        }
        let (_, grad) = m_step_gradient(&seqs, &q, &model, 1.0, 1.0).unwrap();
        let h = 1e-4;
        let n_seq = model.seq.tensors().len();
        // Embeddings (tensor 0) and every scorer tensor.
        let checked: Vec<usize> = std::iter::once(0).chain(n_seq..n_seq + 4).collect();
        for k in checked {
            for i in 0..grad.tensors()[k].len() {
                let mut plus = model.clone();
                plus.tensors_mut()[k].as_mut_slice()[i] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[k].as_mut_slice()[i] -= h;
                let num = (m_step_objective(&seqs, &q, &plus, 1.0).unwrap()
                    - m_step_objective(&seqs, &q, &minus, 1.0).unwrap())
                    / (2.0 * h);
                let ana = grad.tensors()[k].as_slice()[i];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
                assert!(rel < 1e-4, "tensor {k} entry {i}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn coordinated_group_heuristics() {
        let mut rows: Vec<Vec<f64>> = (0..17).map(|_| vec![0.9, 0.1]).collect();
        rows.extend((0..3).map(|_| vec![0.1, 0.9]));
        let q = Matrix::from_rows(&rows);
        assert_eq!(
            identify_coordinated_group(&q, GroupHeuristic::SmallerCluster, None).unwrap(),
            1
        );
        let tie = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(
            identify_coordinated_group(&tie, GroupHeuristic::SmallerCluster, None),
            Err(Error::Ambiguous(_))
        ));
        let rev: Labels = (0..10).map(|u| (u, COORDINATED_CLASS)).collect();
        assert_eq!(
            identify_coordinated_group(&q, GroupHeuristic::RevealedLabels, Some(&rev)).unwrap(),
            0
        );
        let three = Matrix::from_rows(&(0..3).map(|_| vec![0.2, 0.3, 0.5]).collect::<Vec<_>>());
        assert!(identify_coordinated_group(&three, GroupHeuristic::SmallerCluster, None).is_err());
    }

    #[test]
    fn group_count_selection() {
        let mut p = SeqModelParams::init(SeqModelConfig::compact(40), 0).unwrap();
        blob_embeddings(&mut p, 2);
        let (m, scores) = select_group_count(&p, &[2, 3, 4], 0).unwrap();
        assert_eq!(m, 2);
        assert_eq!(scores.len(), 3);
        assert!(select_group_count(&p, &[2], 0).is_err());
        p.weights.embedding = Matrix::filled(40, 8, 0.25);
        assert!(matches!(select_group_count(&p, &[2, 3], 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn loop_setting_parses() {
        assert_eq!("auto".parse::<LoopSetting>().unwrap(), LoopSetting::Auto);
        assert_eq!("2".parse::<LoopSetting>().unwrap(), LoopSetting::Fixed(2));
        assert!("0".parse::<LoopSetting>().is_err());
    }

    fn small_em_config() -> EmConfig {
        EmConfig {
            loops: LoopSetting::Fixed(2),
            m_step_epochs: 3,
            batch_size: 4,
            scorer_hidden: 8,
            ..EmConfig::default()
        }
    }

    #[test]
    fn clamped_accounts_stay_one_hot() {
        let mut p = toy_seq_params(5);
        blob_embeddings(&mut p, 3);
        let seqs = toy_sequences(6);
        let g = crate::knowledge_graph::co_occurrence(&crate::event_data::Dataset {
            sequences: seqs.clone(),
            registry: crate::hawkes_synth::synthetic_registry(6),
            labels: None,
        });
        let revealed: Labels = [(0, 1), (5, 0)].into_iter().collect();
        let out = run_em(
            EmInputs {
                train: &seqs[..6],
                valid: &seqs[6..],
                graph: &g,
            },
            &p,
            2,
            &small_em_config(),
            Some(&revealed),
        )
        .unwrap();
        assert_eq!(out.result.q.row(0), &[0.0, 1.0]);
        assert_eq!(out.result.q.row(5), &[1.0, 0.0]);
        assert_eq!(out.rounds.len(), 3);
        assert_eq!(out.chosen_loops, 2);
        for u in 0..6 {
            assert!((out.result.q.row(u).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_graph_single_loop_keeps_scorer_labels() {
        let mut p = toy_seq_params(7);
        blob_embeddings(&mut p, 4);
        let seqs = toy_sequences(8);
        let g = KnowledgeGraph::from_triplets(6, vec![], FilterTag::None, StorageKind::Dense).unwrap();
        let cfg = EmConfig {
            estep_only: true,
            ..small_em_config()
        };
        let out = run_em(
            EmInputs {
                train: &seqs,
                valid: &[],
                graph: &g,
            },
            &p,
            2,
            &cfg,
            None,
        )
        .unwrap();
        let expected = argmax_rows(&out.init.scorer.scores(p.embeddings()).unwrap());
        assert_eq!(out.result.group_of, expected);
        assert_eq!(out.chosen_loops, 0);
        assert_eq!(out.model.seq, p);
    }

    #[test]
    fn m_step_never_worsens_validation_objective() {
        let mut p = toy_seq_params(9);
        blob_embeddings(&mut p, 5);
        let seqs = toy_sequences(10);
        let init = initialize(&p, 2, 0).unwrap();
        let model = JointModel {
            seq: p,
            scorer: init.scorer,
        };
        let q = Matrix::filled(6, 2, 0.5);
        let (_, report) = m_step(&model, &q, &seqs[..6], &seqs[6..], &small_em_config(), 1).unwrap();
        assert!(report.valid_after >= report.valid_before);
    }
}
