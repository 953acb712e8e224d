//! Conditional random field over account group assignments.
//!
//! The potential of an assignment `y` is
//! `sum_u phi(E_u)[y_u] + sum_{u<v} nw_uv * [y_u == y_v]`, where `phi` is a
//! small MLP over account embeddings and `nw` the degree-normalized prior
//! graph. Inference is mean-field; exact enumeration is available for tiny
//! instances as an oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::knowledge_graph::KnowledgeGraph;
use crate::linalg::{log_sum_exp, softmax_in_place, Matrix};
use crate::optim::param_group;
use crate::{Error, Result};

/// Largest number of assignments the exact routines will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

param_group! {
    /// Two-layer scorer mapping an embedding to one score per group.
    pub struct ScorerWeights / ScorerVars {
        w1,
        b1,
        w2,
        b2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnaryScorer {
    pub weights: ScorerWeights,
}

impl UnaryScorer {
    pub fn init(embed_dim: usize, hidden: usize, groups: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 || groups == 0 {
            return Err(Error::invalid("scorer dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            weights: ScorerWeights {
                w1: Matrix::glorot(embed_dim, hidden, &mut rng),
                b1: Matrix::zeros(1, hidden),
                w2: Matrix::glorot(hidden, groups, &mut rng),
                b2: Matrix::zeros(1, groups),
            },
        })
    }

    pub fn groups(&self) -> usize {
        self.weights.w2.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.w1.rows()
    }

    /// `N x M` unary scores for the rows of `embeddings`.
    pub fn scores(&self, embeddings: &Matrix) -> Result<Matrix> {
        self.check(embeddings)?;
        let mut tape = Tape::new();
        let v = self.weights.register(&mut tape);
        let e = tape.leaf(embeddings.clone());
        let s = scores_on(&mut tape, &v, e);
        Ok(tape.value(s).clone())
    }

    fn check(&self, embeddings: &Matrix) -> Result<()> {
        if embeddings.cols() != self.embed_dim() {
            return Err(Error::Shape(format!(
                "embeddings have {} columns, scorer expects {}",
                embeddings.cols(),
                self.embed_dim()
            )));
        }
        Ok(())
    }

    /// `sum_u sum_m q[u][m] * log_softmax(phi(E_u))[m]` over `rows` (all rows
    /// when `None`), together with its gradients for the scorer and for the
    /// embeddings.
    pub fn expected_log_softmax(
        &self,
        embeddings: &Matrix,
        q: &Matrix,
        rows: Option<&[usize]>,
    ) -> Result<(f64, ScorerWeights, Matrix)> {
        self.check(embeddings)?;
        if q.shape() != (embeddings.rows(), self.groups()) {
            return Err(Error::Shape(format!(
                "posterior is {:?}, expected {:?}",
                q.shape(),
                (embeddings.rows(), self.groups())
            )));
        }
        let mut tape = Tape::new();
        let v = self.weights.register(&mut tape);
        let e_full = tape.leaf(embeddings.clone());
        let (e, target) = match rows {
            Some(idx) => (tape.gather_rows(e_full, idx), q.select_rows(idx)),
            None => (e_full, q.clone()),
        };
        let s = scores_on(&mut tape, &v, e);
        let ls = tape.log_softmax_rows(s);
        let t = tape.leaf(target);
        let prod = tape.mul(ls, t);
        let total = tape.sum(prod);
        let value = tape.scalar(total);
        let grads = tape.backward(total);
        let de = grads.get_or_zeros(e_full, embeddings.shape());
        Ok((value, self.weights.collect(&v, &grads), de))
    }
}

fn scores_on(tape: &mut Tape, v: &ScorerVars, e: crate::autodiff::Var) -> crate::autodiff::Var {
    let h = tape.matmul(e, v.w1);
    let h = tape.add_row(h, v.b1);
    let h = tape.tanh(h);
    let s = tape.matmul(h, v.w2);
    tape.add_row(s, v.b2)
}

/// One CRF instance: fixed unary scores plus normalized couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    unary: Matrix,
    /// Symmetric adjacency of normalized weights, ascending by neighbor.
    coupling: Vec<Vec<(usize, f64)>>,
}

impl Field {
    pub fn new(unary: Matrix, graph: &KnowledgeGraph) -> Result<Self> {
        if unary.rows() != graph.n() {
            return Err(Error::Shape(format!(
                "{} unary rows for a graph on {} nodes",
                unary.rows(),
                graph.n()
            )));
        }
        if unary.cols() == 0 {
            return Err(Error::invalid("at least one group is required"));
        }
        let coupling = (0..graph.n())
            .map(|u| {
                graph
                    .neighbors(u)
                    .into_iter()
                    .map(|(v, _)| (v, graph.normalized_weight(u, v)))
                    .filter(|&(_, w)| w != 0.0)
                    .collect()
            })
            .collect();
        Ok(Self { unary, coupling })
    }

    pub fn n(&self) -> usize {
        self.unary.rows()
    }

    pub fn groups(&self) -> usize {
        self.unary.cols()
    }

    pub fn unary(&self) -> &Matrix {
        &self.unary
    }

    pub fn neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.coupling[u]
    }

    /// Sum of normalized weights over unordered pairs.
    pub fn total_coupling(&self) -> f64 {
        self.coupling
            .iter()
            .enumerate()
            .flat_map(|(u, row)| row.iter().filter(move |&&(v, _)| v > u).map(|&(_, w)| w))
            .sum()
    }

    fn check_assignment(&self, y: &[usize]) -> Result<()> {
        if y.len() != self.n() {
            return Err(Error::Shape(format!(
                "assignment of length {} for {} nodes",
                y.len(),
                self.n()
            )));
        }
        if let Some(&m) = y.iter().find(|&&m| m >= self.groups()) {
            return Err(Error::invalid(format!("group {m} out of range")));
        }
        Ok(())
    }

    fn check_q(&self, q: &Matrix) -> Result<()> {
        if q.shape() != self.unary.shape() {
            return Err(Error::Shape(format!(
                "posterior is {:?}, expected {:?}",
                q.shape(),
                self.unary.shape()
            )));
        }
        Ok(())
    }
}

/// Graph part of the potential.
pub fn graph_potential(field: &Field, y: &[usize]) -> Result<f64> {
    field.check_assignment(y)?;
    let mut total = 0.0;
    for u in 0..field.n() {
        for &(v, w) in field.neighbors(u) {
            if v > u && y[u] == y[v] {
                total += w;
            }
        }
    }
    Ok(total)
}

pub fn potential(field: &Field, y: &[usize]) -> Result<f64> {
    let g = graph_potential(field, y)?;
    Ok(g + y.iter().enumerate().map(|(u, &m)| field.unary.get(u, m)).sum::<f64>())
}

fn enumeration_guard(field: &Field) -> Result<()> {
    let (m, n) = (field.groups(), field.n());
    let mut count: usize = 1;
    for _ in 0..n {
        count = count.saturating_mul(m);
        if count > BRUTE_FORCE_LIMIT {
            return Err(Error::TooLarge {
                groups: m,
                nodes: n,
                limit: BRUTE_FORCE_LIMIT,
            });
        }
    }
    Ok(())
}

/// Calls `f` with every assignment in lexicographic order.
fn for_each_assignment(field: &Field, mut f: impl FnMut(&[usize])) {
    let (m, n) = (field.groups(), field.n());
    let mut y = vec![0usize; n];
    loop {
        f(&y);
        let mut k = 0;
        loop {
            if k == n {
                return;
            }
            y[k] += 1;
            if y[k] < m {
                break;
            }
            y[k] = 0;
            k += 1;
        }
    }
}

/// Exact `log sum_y exp(potential(y))`.
pub fn log_partition_bruteforce(field: &Field) -> Result<f64> {
    enumeration_guard(field)?;
    let mut values = Vec::new();
    for_each_assignment(field, |y| values.push(potential(field, y).expect("valid assignment")));
    Ok(log_sum_exp(&values))
}

/// Exact single-node marginals, `N x M`.
pub fn marginals_bruteforce(field: &Field) -> Result<Matrix> {
    let log_z = log_partition_bruteforce(field)?;
    let mut out = Matrix::zeros(field.n(), field.groups());
    for_each_assignment(field, |y| {
        let p = (potential(field, y).expect("valid assignment") - log_z).exp();
        for (u, &m) in y.iter().enumerate() {
            out.set(u, m, out.get(u, m) + p);
        }
    });
    Ok(out)
}

/// Largest graph potential, attained by placing every node in one group.
pub fn max_graph_potential(field: &Field) -> f64 {
    field.total_coupling()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub log_z: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks `log Z <= max_y graph_potential(y) + sum_u logsumexp(phi_u)`.
pub fn check_prop1_bound(field: &Field) -> Result<BoundCheck> {
    let log_z = log_partition_bruteforce(field)?;
    let unary: f64 = (0..field.n()).map(|u| log_sum_exp(field.unary.row(u))).sum();
    let bound = max_graph_potential(field) + unary;
    Ok(BoundCheck {
        log_z,
        bound,
        holds: log_z <= bound + 1e-9,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Schedule {
    /// Every node is updated from the previous sweep.
    Jacobi,
    /// Nodes are updated in index order using the freshest values.
    #[default]
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub schedule: Schedule,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10,
            schedule: Schedule::GaussSeidel,
        }
    }
}

/// Per-node observed groups; `None` rows are inferred.
pub type Clamps = [Option<usize>];

fn one_hot(m: usize, groups: usize) -> Vec<f64> {
    let mut r = vec![0.0; groups];
    r[m] = 1.0;
    r
}

/// Posterior ignoring the graph, with clamped rows set to their one-hot.
pub fn initial_q(field: &Field, clamps: Option<&Clamps>) -> Result<Matrix> {
    let mut q = field.unary.clone();
    for u in 0..q.rows() {
        softmax_in_place(q.row_mut(u));
    }
    apply_clamps(&mut q, clamps)?;
    Ok(q)
}

fn apply_clamps(q: &mut Matrix, clamps: Option<&Clamps>) -> Result<()> {
    let Some(c) = clamps else { return Ok(()) };
    if c.len() != q.rows() {
        return Err(Error::Shape(format!("{} clamps for {} nodes", c.len(), q.rows())));
    }
    let groups = q.cols();
    for (u, &obs) in c.iter().enumerate() {
        if let Some(m) = obs {
            if m >= groups {
                return Err(Error::invalid(format!("clamped group {m} out of range")));
            }
            q.row_mut(u).copy_from_slice(&one_hot(m, groups));
        }
    }
    Ok(())
}

fn updated_row(field: &Field, q: &Matrix, u: usize) -> Vec<f64> {
    let mut row = field.unary.row(u).to_vec();
    for &(v, w) in field.neighbors(u) {
        for (r, &qv) in row.iter_mut().zip(q.row(v)) {
            *r += w * qv;
        }
    }
    softmax_in_place(&mut row);
    row
}

/// One sweep of `Q_u(m) ∝ exp(phi_u(m) + sum_v nw_uv Q_v(m))` over the
/// unclamped nodes.
pub fn estep_update(field: &Field, q: &Matrix, clamps: Option<&Clamps>, schedule: Schedule) -> Result<Matrix> {
    field.check_q(q)?;
    let free = |u: usize| clamps.map_or(true, |c| c[u].is_none());
    if let Some(c) = clamps {
        if c.len() != field.n() {
            return Err(Error::Shape(format!("{} clamps for {} nodes", c.len(), field.n())));
        }
    }
    let mut next = q.clone();
    for u in (0..field.n()).filter(|&u| free(u)) {
        let row = match schedule {
            Schedule::Jacobi => updated_row(field, q, u),
            Schedule::GaussSeidel => updated_row(field, &next, u),
        };
        next.row_mut(u).copy_from_slice(&row);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepOutcome {
    pub q: Matrix,
    pub iterations: usize,
    /// Largest absolute change in the final sweep.
    pub last_change: f64,
    pub converged: bool,
}

/// Sweeps until the largest change drops to `tol` or `max_iter` is reached.
pub fn estep_converge(
    field: &Field,
    q0: &Matrix,
    clamps: Option<&Clamps>,
    cfg: &MeanFieldConfig,
) -> Result<EStepOutcome> {
    let mut q = q0.clone();
    apply_clamps(&mut q, clamps)?;
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let next = estep_update(field, &q, clamps, cfg.schedule)?;
        last_change = next.max_abs_diff(&q);
        q = next;
        iterations += 1;
        if last_change <= cfg.tol {
            break;
        }
    }
    Ok(EStepOutcome {
        q,
        iterations,
        converged: last_change <= cfg.tol,
        last_change,
    })
}

/// `E_Q[potential] + H(Q)`, a lower bound on `log Z` for any fully
/// factorized `Q`.
pub fn mean_field_free_energy(field: &Field, q: &Matrix) -> Result<f64> {
    field.check_q(q)?;
    let mut energy = 0.0;
    let mut entropy = 0.0;
    for u in 0..field.n() {
        let qu = q.row(u);
        for (m, &p) in qu.iter().enumerate() {
            energy += p * field.unary.get(u, m);
            if p > 0.0 {
                entropy -= p * p.ln();
            }
        }
        for &(v, w) in field.neighbors(u) {
            if v > u {
                energy += w * crate::linalg::dot(qu, q.row(v));
            }
        }
    }
    Ok(energy + entropy)
}

/// `KL(Q || P) = log Z - free energy`, by enumeration.
pub fn kl_to_exact(field: &Field, q: &Matrix) -> Result<f64> {
    Ok(log_partition_bruteforce(field)? - mean_field_free_energy(field, q)?)
}

/// Most probable group per node under `q`, ties to the lower index.
pub fn argmax_rows(q: &Matrix) -> Vec<usize> {
    (0..q.rows())
        .map(|u| {
            let row = q.row(u);
            let mut best = 0;
            for (m, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = m;
                }
            }
            best
        })
        .collect()
}
