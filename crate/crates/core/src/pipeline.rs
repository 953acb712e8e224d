//! End-to-end detection: pretraining, graph construction, EM and evaluation,
//! driven by one serializable [`RunConfig`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::em_engine::{
    identify_coordinated_group, run_em, select_group_count, DetectionResult, EmConfig, EmInputs, EmOutcome,
    GroupHeuristic,
};
use crate::event_data::{split_long_sequences, Dataset, EventSequence, Labels};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::knowledge_graph::{co_occurrence, filter_power, filter_temporal_logic, FilterTag, KnowledgeGraph};
use crate::linalg::Matrix;
use crate::metrics_eval::{evaluate, MetricReport, ScoredLabels};
use crate::seq_model::{train, SeqModelConfig, SeqModelParams, TrainConfig, TrainReport};
use crate::{Error, Result};

/// Sequence-model shape without the data-dependent account count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub pos_dim: usize,
    pub time_dim: usize,
    pub attn_dim: usize,
    pub context_dim: usize,
    pub mark_hidden: usize,
    pub components: usize,
    pub first_gap: f64,
    pub min_gap: f64,
    pub log_gap_density: bool,
    pub embed_init_scale: f64,
}

impl ModelSettings {
    pub fn from_config(c: &SeqModelConfig) -> Self {
        Self {
            embed_dim: c.embed_dim,
            pos_dim: c.pos_dim,
            time_dim: c.time_dim,
            attn_dim: c.attn_dim,
            context_dim: c.context_dim,
            mark_hidden: c.mark_hidden,
            components: c.components,
            first_gap: c.first_gap,
            min_gap: c.min_gap,
            log_gap_density: c.log_gap_density,
            embed_init_scale: c.embed_init_scale,
        }
    }

    pub fn compact() -> Self {
        Self::from_config(&SeqModelConfig::compact(1))
    }

    pub fn for_accounts(&self, n_accounts: usize) -> SeqModelConfig {
        SeqModelConfig {
            n_accounts,
            embed_dim: self.embed_dim,
            pos_dim: self.pos_dim,
            time_dim: self.time_dim,
            attn_dim: self.attn_dim,
            context_dim: self.context_dim,
            mark_hidden: self.mark_hidden,
            components: self.components,
            first_gap: self.first_gap,
            min_gap: self.min_gap,
            log_gap_density: self.log_gap_density,
            embed_init_scale: self.embed_init_scale,
        }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self::from_config(&SeqModelConfig::new(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSettings,
    pub pretrain: TrainConfig,
    /// Longer sequences are cut into chunks of this many events.
    pub max_len: usize,
    /// Share of sequences held out for early stopping.
    pub valid_fraction: f64,
    /// `none`, `power(p)` or `temporal_logic(c)`.
    #[serde(with = "filter_string")]
    pub filter: FilterTag,
    pub groups: usize,
    /// When non-empty, the group count is picked among these by silhouette.
    pub group_candidates: Vec<usize>,
    pub em: EmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSettings::default(),
            pretrain: TrainConfig::default(),
            max_len: 128,
            valid_fraction: 0.1,
            filter: FilterTag::Power(3.0),
            groups: 2,
            group_candidates: Vec::new(),
            em: EmConfig::default(),
        }
    }
}

mod filter_string {
    use super::FilterTag;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &FilterTag, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FilterTag, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl RunConfig {
    /// Small model and short schedules for datasets of a few hundred
    /// sequences over about a hundred accounts.
    pub fn compact() -> Self {
        let mut cfg = Self {
            model: ModelSettings::compact(),
            ..Self::default()
        };
        cfg.pretrain.batch_size = 32;
        cfg.pretrain.adam.learning_rate = 0.01;
        cfg.em.batch_size = 32;
        cfg.em.m_step_epochs = 10;
        cfg
    }

    /// Seeds of every stage derived from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.em.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::invalid("valid_fraction must lie in [0, 1)"));
        }
        if self.groups < 2 {
            return Err(Error::invalid("at least 2 groups are required"));
        }
        self.em.validate()
    }
}

/// Chunked sequences split into training and validation parts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<EventSequence>,
    pub valid: Vec<EventSequence>,
}

pub fn prepare(d: &Dataset, cfg: &RunConfig) -> Result<Prepared> {
    d.validate()?;
    let chunked = split_long_sequences(d, cfg.max_len)?;
    let mut seqs: Vec<EventSequence> = chunked.sequences.into_iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::Empty("dataset has no events".into()));
    }
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11d));
    let n_valid = ((cfg.valid_fraction * seqs.len() as f64).round() as usize).min(seqs.len() - 1);
    let mut is_valid = vec![false; seqs.len()];
    for &i in &idx[..n_valid] {
        is_valid[i] = true;
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (s, v) in seqs.drain(..).zip(is_valid) {
        if v {
            valid.push(s);
        } else {
            train.push(s);
        }
    }
    Ok(Prepared { train, valid })
}

pub fn pretrain(d: &Dataset, prep: &Prepared, cfg: &RunConfig) -> Result<(SeqModelParams, TrainReport)> {
    let mut params = SeqModelParams::init(cfg.model.for_accounts(d.num_accounts()), cfg.seed)?;
    params.warm_start(&prep.train);
    train(params, &prep.train, &prep.valid, &cfg.pretrain)
}

pub fn build_graph(d: &Dataset, filter: FilterTag) -> Result<KnowledgeGraph> {
    match filter {
        FilterTag::None => Ok(co_occurrence(d)),
        FilterTag::Power(p) => filter_power(&co_occurrence(d), p),
        FilterTag::TemporalLogic(c) => filter_temporal_logic(d, c),
    }
}

/// The group count to use, from the config or by silhouette.
pub fn resolve_groups(pretrained: &SeqModelParams, cfg: &RunConfig) -> Result<usize> {
    if cfg.group_candidates.is_empty() {
        Ok(cfg.groups)
    } else {
        Ok(select_group_count(pretrained, &cfg.group_candidates, cfg.seed)?.0)
    }
}

pub fn detect(
    prep: &Prepared,
    graph: &KnowledgeGraph,
    pretrained: &SeqModelParams,
    cfg: &RunConfig,
    revealed: Option<&Labels>,
) -> Result<EmOutcome> {
    let groups = resolve_groups(pretrained, cfg)?;
    run_em(
        EmInputs {
            train: &prep.train,
            valid: &prep.valid,
            graph,
        },
        pretrained,
        groups,
        &cfg.em,
        revealed,
    )
}

/// Plain k-means on the pretrained embeddings with hard 0/1 scores.
pub fn kmeans_baseline(
    pretrained: &SeqModelParams,
    cfg: &RunConfig,
    revealed: Option<&Labels>,
) -> Result<DetectionResult> {
    let groups = resolve_groups(pretrained, cfg)?;
    let km = kmeans(
        pretrained.embeddings(),
        groups,
        &KMeansConfig {
            n_init: cfg.em.kmeans_init,
            seed: cfg.em.seed,
        },
    )?;
    let mut q = Matrix::zeros(km.labels.len(), groups);
    for (u, &l) in km.labels.iter().enumerate() {
        q.set(u, l, 1.0);
    }
    let heuristic = cfg.em.heuristic.unwrap_or(if revealed.is_some() {
        GroupHeuristic::RevealedLabels
    } else {
        GroupHeuristic::SmallerCluster
    });
    let group = identify_coordinated_group(&q, heuristic, revealed)?;
    Ok(DetectionResult::from_q(q, group, cfg.em.threshold))
}

/// Scores and truth for labelled accounts, skipping any in `exclude`.
pub fn scored_labels(scores: &[f64], truth: &Labels, exclude: Option<&Labels>) -> Result<ScoredLabels> {
    let mut s = Vec::new();
    let mut t = Vec::new();
    for (&u, &class) in truth {
        if exclude.is_some_and(|e| e.contains_key(&u)) {
            continue;
        }
        let score = *scores.get(u).ok_or(Error::UnknownAccount(u))?;
        s.push(score);
        t.push(class == crate::em_engine::COORDINATED_CLASS);
    }
    ScoredLabels::new(s, t)
}

pub fn evaluate_scores(
    scores: &[f64],
    truth: &Labels,
    exclude: Option<&Labels>,
    threshold: f64,
) -> Result<MetricReport> {
    evaluate(&scored_labels(scores, truth, exclude)?, threshold)
}

/// A stratified sample of `fraction` of each class, at least one per class.
pub fn reveal_labels(truth: &Labels, fraction: f64, seed: u64) -> Result<Labels> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("reveal fraction must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e7ea1);
    let mut out = Labels::new();
    let mut classes: Vec<usize> = truth.values().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let mut members: Vec<usize> = truth.iter().filter(|&(_, &v)| v == c).map(|(&u, _)| u).collect();
        members.shuffle(&mut rng);
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        for &u in &members[..k] {
            out.insert(u, c);
        }
    }
    Ok(out)
}
