//! Prior-knowledge account graph.
//!
//! Edge weights count the sequences two accounts share. Two filters sharpen
//! the raw counts: an elementwise power, and a temporal-logic rule that only
//! counts a sequence when the two accounts' active intervals in it overlap by
//! more than a threshold. Degrees are always taken on the filtered weights,
//! and the `1/sqrt(d_u d_v)` factor of [`pairwise_potential`] is the only
//! normalization applied.
//!
//! Graphs up to [`DENSE_LIMIT`] accounts use a dense matrix; larger ones use
//! per-row sorted adjacency lists. Both storages give identical results.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_data::{AccountRegistry, Dataset};

pub const DENSE_LIMIT: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum FilterTag {
    None,
    Power(f64),
    TemporalLogic(f64),
}

impl fmt::Display for FilterTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterTag::None => write!(f, "none"),
            FilterTag::Power(p) => write!(f, "power({p})"),
            FilterTag::TemporalLogic(c) => write!(f, "temporal_logic({c})"),
        }
    }
}

impl std::str::FromStr for FilterTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(FilterTag::None);
        }
        let parse_arg = |prefix: &str| -> Option<f64> { s.strip_prefix(prefix)?.strip_suffix(')')?.parse().ok() };
        if let Some(p) = parse_arg("power(") {
            return Ok(FilterTag::Power(p));
        }
        if let Some(c) = parse_arg("temporal_logic(") {
            return Ok(FilterTag::TemporalLogic(c));
        }
        Err(Error::invalid(format!("unrecognized filter tag '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageKind {
    Dense,
    Sparse,
}

impl StorageKind {
    pub fn for_size(n: usize) -> Self {
        if n <= DENSE_LIMIT {
            StorageKind::Dense
        } else {
            StorageKind::Sparse
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    Dense(Vec<f64>),
    /// Row `u` holds `(v, w_uv)` sorted by `v`, zero weights omitted.
    Sparse(Vec<Vec<(usize, f64)>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    n: usize,
    storage: Storage,
    deg: Vec<f64>,
    filter: FilterTag,
}

/// Symmetric accumulator used by every builder.
struct PairAccumulator {
    n: usize,
    kind: StorageKind,
    dense: Vec<f64>,
    sparse: HashMap<(usize, usize), f64>,
}

impl PairAccumulator {
    fn new(n: usize, kind: StorageKind) -> Self {
        let dense = match kind {
            StorageKind::Dense => vec![0.0; n * n],
            StorageKind::Sparse => Vec::new(),
        };
        Self {
            n,
            kind,
            dense,
            sparse: HashMap::new(),
        }
    }

    fn add(&mut self, u: usize, v: usize, w: f64) {
        if u == v {
            return;
        }
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        match self.kind {
            StorageKind::Dense => {
                self.dense[a * self.n + b] += w;
                self.dense[b * self.n + a] += w;
            }
            StorageKind::Sparse => *self.sparse.entry((a, b)).or_default() += w,
        }
    }

    fn finish(self, filter: FilterTag) -> KnowledgeGraph {
        let storage = match self.kind {
            StorageKind::Dense => Storage::Dense(self.dense),
            StorageKind::Sparse => {
                let mut rows = vec![Vec::new(); self.n];
                for ((a, b), w) in self.sparse {
                    if w != 0.0 {
                        rows[a].push((b, w));
                        rows[b].push((a, w));
                    }
                }
                rows.iter_mut().for_each(|r| r.sort_by_key(|&(v, _)| v));
                Storage::Sparse(rows)
            }
        };
        KnowledgeGraph::from_storage(self.n, storage, filter)
    }
}

impl KnowledgeGraph {
    fn from_storage(n: usize, storage: Storage, filter: FilterTag) -> Self {
        let deg = match &storage {
            Storage::Dense(w) => (0..n).map(|u| w[u * n..(u + 1) * n].iter().sum()).collect(),
            Storage::Sparse(rows) => rows.iter().map(|r| r.iter().map(|&(_, w)| w).sum()).collect(),
        };
        Self {
            n,
            storage,
            deg,
            filter,
        }
    }

    /// Builds a graph from `(u, v, w)` triplets; each unordered pair may
    /// appear once in either orientation. Self-loops are dropped.
    pub fn from_triplets(
        n: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
        filter: FilterTag,
        kind: StorageKind,
    ) -> Result<Self> {
        let mut acc = PairAccumulator::new(n, kind);
        for (u, v, w) in triplets {
            if u >= n || v >= n {
                return Err(Error::UnknownAccount(u.max(v)));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("edge weight {w} must be finite and >= 0")));
            }
            acc.add(u, v, w);
        }
        Ok(acc.finish(filter))
    }

    /// Graph with no edges.
    pub fn empty(n: usize) -> Self {
        PairAccumulator::new(n, StorageKind::for_size(n)).finish(FilterTag::None)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn filter_tag(&self) -> FilterTag {
        self.filter
    }

    pub fn storage_kind(&self) -> StorageKind {
        match self.storage {
            Storage::Dense(_) => StorageKind::Dense,
            Storage::Sparse(_) => StorageKind::Sparse,
        }
    }

    pub fn weight(&self, u: usize, v: usize) -> f64 {
        match &self.storage {
            Storage::Dense(w) => w[u * self.n + v],
            Storage::Sparse(rows) => rows[u]
                .binary_search_by_key(&v, |&(k, _)| k)
                .map_or(0.0, |i| rows[u][i].1),
        }
    }

    pub fn degree(&self, u: usize) -> f64 {
        self.deg[u]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.deg
    }

    /// Non-zero `(v, w_uv)` entries of row `u`, ascending in `v`.
    pub fn neighbors(&self, u: usize) -> Vec<(usize, f64)> {
        match &self.storage {
            Storage::Dense(w) => w[u * self.n..(u + 1) * self.n]
                .iter()
                .enumerate()
                .filter(|&(_, &x)| x != 0.0)
                .map(|(v, &x)| (v, x))
                .collect(),
            Storage::Sparse(rows) => rows[u].clone(),
        }
    }

    /// Upper-triangle edges `(u, v, w)` with `u < v` and `w > 0`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|u| {
                self.neighbors(u)
                    .into_iter()
                    .filter(move |&(v, _)| v > u)
                    .map(move |(v, w)| (u, v, w))
            })
            .collect()
    }

    /// `w_uv / sqrt(d_u d_v)`, zero when either degree vanishes.
    pub fn normalized_weight(&self, u: usize, v: usize) -> f64 {
        let (du, dv) = (self.deg[u], self.deg[v]);
        if du == 0.0 || dv == 0.0 {
            return 0.0;
        }
        self.weight(u, v) / (du * dv).sqrt()
    }

    /// Same graph under another storage backend.
    pub fn with_storage(&self, kind: StorageKind) -> Self {
        Self::from_triplets(self.n, self.edges(), self.filter, kind).expect("valid edges")
    }

    fn map_weights(&self, f: impl Fn(f64) -> f64, filter: FilterTag) -> Self {
        let storage = match &self.storage {
            Storage::Dense(w) => Storage::Dense(w.iter().map(|&x| if x == 0.0 { 0.0 } else { f(x) }).collect()),
            Storage::Sparse(rows) => Storage::Sparse(
                rows.iter()
                    .map(|r| r.iter().map(|&(v, w)| (v, f(w))).collect())
                    .collect(),
            ),
        };
        Self::from_storage(self.n, storage, filter)
    }

    /// Writes `u,v,weight` triplets (account names) after a `#` header line
    /// carrying the filter tag and account count.
    pub fn save_csv(&self, registry: &AccountRegistry, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# filter_tag={} n={}", self.filter, self.n)?;
        writeln!(f, "u,v,weight")?;
        for (u, v, w) in self.edges() {
            writeln!(f, "{},{},{}", registry.name(u), registry.name(v), w)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_csv(registry: &AccountRegistry, path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (_, header) = lines.next().ok_or_else(|| Error::Empty(path.display().to_string()))?;
        let header = header?;
        let meta = header
            .strip_prefix('#')
            .ok_or_else(|| perr(1, "missing '# filter_tag=... n=...' header".into()))?;
        let mut filter = None;
        let mut n = None;
        for tok in meta.split_whitespace() {
            if let Some(v) = tok.strip_prefix("filter_tag=") {
                filter = Some(v.parse::<FilterTag>()?);
            } else if let Some(v) = tok.strip_prefix("n=") {
                n = Some(v.parse::<usize>().map_err(|e| perr(1, e.to_string()))?);
            }
        }
        let filter = filter.ok_or_else(|| perr(1, "header lacks filter_tag".into()))?;
        let n = n.ok_or_else(|| perr(1, "header lacks n".into()))?;
        if n != registry.len() {
            return Err(perr(
                1,
                format!("graph has {n} accounts, registry has {}", registry.len()),
            ));
        }
        let mut triplets = Vec::new();
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if lineno == 2 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(perr(lineno, format!("expected 3 fields, got {}", parts.len())));
            }
            let lookup = |name: &str| {
                registry
                    .get(name)
                    .ok_or_else(|| perr(lineno, format!("unknown account '{name}'")))
            };
            let w: f64 = parts[2]
                .trim()
                .parse()
                .map_err(|e| perr(lineno, format!("bad weight: {e}")))?;
            triplets.push((lookup(parts[0].trim())?, lookup(parts[1].trim())?, w));
        }
        Self::from_triplets(n, triplets, filter, StorageKind::for_size(n))
    }
}

fn unique_accounts(accounts: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = accounts.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Number of sequences in which both accounts appear at least once.
pub fn co_occurrence(d: &Dataset) -> KnowledgeGraph {
    co_occurrence_with(d, StorageKind::for_size(d.num_accounts()))
}

pub fn co_occurrence_with(d: &Dataset, kind: StorageKind) -> KnowledgeGraph {
    let mut acc = PairAccumulator::new(d.num_accounts(), kind);
    for s in &d.sequences {
        let present = unique_accounts(s.accounts());
        for (i, &u) in present.iter().enumerate() {
            for &v in &present[i + 1..] {
                acc.add(u, v, 1.0);
            }
        }
    }
    acc.finish(FilterTag::None)
}

/// Elementwise `w^p` of a raw co-occurrence graph, `p >= 1`.
pub fn filter_power(g: &KnowledgeGraph, p: f64) -> Result<KnowledgeGraph> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::invalid(format!("power exponent must be >= 1, got {p}")));
    }
    if g.filter != FilterTag::None {
        return Err(Error::invalid(format!(
            "power filter expects a raw co-occurrence graph, got {}",
            g.filter
        )));
    }
    Ok(g.map_weights(|w| w.powf(p), FilterTag::Power(p)))
}

/// Counts a shared sequence only when the two accounts' `[first, last]`
/// appearance intervals in it overlap by strictly more than `c`.
pub fn filter_temporal_logic(d: &Dataset, c: f64) -> Result<KnowledgeGraph> {
    filter_temporal_logic_with(d, c, StorageKind::for_size(d.num_accounts()))
}

pub fn filter_temporal_logic_with(d: &Dataset, c: f64, kind: StorageKind) -> Result<KnowledgeGraph> {
    if !(c >= 0.0) {
        return Err(Error::invalid(format!("overlap threshold must be >= 0, got {c}")));
    }
    let mut acc = PairAccumulator::new(d.num_accounts(), kind);
    for s in &d.sequences {
        let mut span: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for e in &s.events {
            span.entry(e.account)
                .and_modify(|(lo, hi)| {
                    *lo = lo.min(e.t);
                    *hi = hi.max(e.t);
                })
                .or_insert((e.t, e.t));
        }
        let spans: Vec<(usize, (f64, f64))> = span.into_iter().collect();
        for (i, &(u, (us, ul))) in spans.iter().enumerate() {
            for &(v, (vs, vl)) in &spans[i + 1..] {
                if ul.min(vl) - us.max(vs) > c {
                    acc.add(u, v, 1.0);
                }
            }
        }
    }
    Ok(acc.finish(FilterTag::TemporalLogic(c)))
}

/// `w_uv / sqrt(d_u d_v)` when `y_u == y_v`, else zero.
pub fn pairwise_potential(g: &KnowledgeGraph, u: usize, v: usize, y_u: usize, y_v: usize) -> f64 {
    if y_u != y_v {
        return 0.0;
    }
    g.normalized_weight(u, v)
}
