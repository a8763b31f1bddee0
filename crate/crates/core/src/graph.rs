//! User-item interaction graph, k-core filtering, LightGCN propagation and
//! BPR training of the collaborative embeddings.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::kernels::{dot, log_sigmoid, sigmoid};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::optim::Adam;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge ({user}, {item}) outside a graph of {num_users} users and {num_items} items")]
    EdgeOutOfRange {
        user: usize,
        item: usize,
        num_users: usize,
        num_items: usize,
    },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding table is {got_users}x{got_items}, graph has {want_users} users and {want_items} items")]
    ShapeMismatch {
        got_users: usize,
        got_items: usize,
        want_users: usize,
        want_items: usize,
    },
    #[error("cannot train on a graph without edges")]
    EmptyGraph,
    #[error("user {0} interacted with every item; no negative samples available")]
    NoNegatives(usize),
    #[error("invalid gnn config: {0}")]
    InvalidConfig(String),
}

/// Bipartite user-item graph with unique edges and both adjacency directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
}

impl InteractionGraph {
    /// Builds a graph; duplicate edges are collapsed.
    pub fn new<I>(num_users: usize, num_items: usize, edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut unique = BTreeSet::new();
        for (user, item) in edges {
            if user >= num_users || item >= num_items {
                return Err(GraphError::EdgeOutOfRange {
                    user,
                    item,
                    num_users,
                    num_items,
                });
            }
            unique.insert((user, item));
        }
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for (u, i) in unique {
            user_adj[u].push(i);
            item_adj[i].push(u);
        }
        for list in &mut item_adj {
            list.sort_unstable();
        }
        Ok(Self {
            num_users,
            num_items,
            user_adj,
            item_adj,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.user_adj.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_edges() == 0
    }

    pub fn user_neighbors(&self, u: usize) -> &[usize] {
        &self.user_adj[u]
    }

    pub fn item_neighbors(&self, i: usize) -> &[usize] {
        &self.item_adj[i]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_adj[u].len()
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_adj[i].len()
    }

    pub fn has_edge(&self, u: usize, i: usize) -> bool {
        self.user_adj[u].binary_search(&i).is_ok()
    }

    /// Edges in (user, item) lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_adj
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }
}

/// A k-core with its ids compacted to `0..n`; the maps give the original ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilteredGraph {
    pub graph: InteractionGraph,
    pub user_ids: Vec<usize>,
    pub item_ids: Vec<usize>,
}

/// Maximal subgraph in which every remaining user and item has degree >= k.
pub fn k_core_filter(graph: &InteractionGraph, k: usize) -> Result<FilteredGraph, GraphError> {
    if k == 0 {
        return Err(GraphError::InvalidK);
    }
    let (nu, ni) = (graph.num_users, graph.num_items);
    // users are nodes 0..nu, items nu..nu+ni
    let mut degree: Vec<usize> = (0..nu)
        .map(|u| graph.user_degree(u))
        .chain((0..ni).map(|i| graph.item_degree(i)))
        .collect();
    let mut removed = vec![false; nu + ni];
    let mut queue: VecDeque<usize> = (0..nu + ni).filter(|&n| degree[n] < k).collect();
    for &n in &queue {
        removed[n] = true;
    }
    while let Some(node) = queue.pop_front() {
        let neighbors: Box<dyn Iterator<Item = usize>> = if node < nu {
            Box::new(graph.user_neighbors(node).iter().map(|&i| nu + i))
        } else {
            Box::new(graph.item_neighbors(node - nu).iter().copied())
        };
        for nb in neighbors {
            if removed[nb] {
                continue;
            }
            degree[nb] -= 1;
            if degree[nb] < k {
                removed[nb] = true;
                queue.push_back(nb);
            }
        }
    }

    let user_ids: Vec<usize> = (0..nu).filter(|&u| !removed[u]).collect();
    let item_ids: Vec<usize> = (0..ni).filter(|&i| !removed[nu + i]).collect();
    let mut user_new = vec![usize::MAX; nu];
    for (new, &old) in user_ids.iter().enumerate() {
        user_new[old] = new;
    }
    let mut item_new = vec![usize::MAX; ni];
    for (new, &old) in item_ids.iter().enumerate() {
        item_new[old] = new;
    }
    let edges: Vec<(usize, usize)> = graph
        .edges()
        .filter(|&(u, i)| !removed[u] && !removed[nu + i])
        .map(|(u, i)| (user_new[u], item_new[i]))
        .collect();
    let core = InteractionGraph::new(user_ids.len(), item_ids.len(), edges)?;
    Ok(FilteredGraph {
        graph: core,
        user_ids,
        item_ids,
    })
}

/// Dense user and item vectors, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, users: Vec<f64>, items: Vec<f64>) -> Result<Self, GraphError> {
        if dim == 0 || users.len() % dim != 0 || items.len() % dim != 0 {
            return Err(GraphError::InvalidConfig(format!(
                "buffers of {} and {} values do not split into rows of {dim}",
                users.len(),
                items.len()
            )));
        }
        Ok(Self { dim, users, items })
    }

    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self {
            dim,
            users: vec![0.0; num_users * dim],
            items: vec![0.0; num_items * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.users.len() / self.dim
    }

    pub fn num_items(&self) -> usize {
        self.items.len() / self.dim
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user_buffer(&self) -> &[f64] {
        &self.users
    }

    pub fn item_buffer(&self) -> &[f64] {
        &self.items
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        dot(self.user(u), self.item(i))
    }

    pub fn all_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|v| v.is_finite())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            dim: self.dim,
            users: self.users.iter().map(|v| v * a).collect(),
            items: self.items.iter().map(|v| v * a).collect(),
        }
    }
}

/// LightGCN propagation with symmetric sqrt-degree normalization.
///
/// Layer rule: `e_u' = sum_{i in N(u)} e_i / sqrt(|N(u)| |N(i)|)` and the
/// mirror rule for items. The result is the mean of layers `0..=layers`.
/// Nodes without neighbors keep their base vector.
pub fn lightgcn_propagate(
    graph: &InteractionGraph,
    base: &EmbeddingTable,
    layers: usize,
) -> Result<EmbeddingTable, GraphError> {
    if base.num_users() != graph.num_users || base.num_items() != graph.num_items {
        return Err(GraphError::ShapeMismatch {
            got_users: base.num_users(),
            got_items: base.num_items(),
            want_users: graph.num_users,
            want_items: graph.num_items,
        });
    }
    let d = base.dim;
    let inv_sqrt_u: Vec<f64> = (0..graph.num_users)
        .map(|u| (graph.user_degree(u).max(1) as f64).sqrt().recip())
        .collect();
    let inv_sqrt_i: Vec<f64> = (0..graph.num_items)
        .map(|i| (graph.item_degree(i).max(1) as f64).sqrt().recip())
        .collect();

    let mut sum = base.clone();
    let mut cur = base.clone();
    for _ in 0..layers {
        let mut next = EmbeddingTable::zeros(graph.num_users, graph.num_items, d);
        for u in 0..graph.num_users {
            let out = &mut next.users[u * d..(u + 1) * d];
            for &i in graph.user_neighbors(u) {
                let w = inv_sqrt_u[u] * inv_sqrt_i[i];
                crate::numerics::kernels::axpy(w, cur.item(i), out);
            }
        }
        for i in 0..graph.num_items {
            let out = &mut next.items[i * d..(i + 1) * d];
            for &u in graph.item_neighbors(i) {
                let w = inv_sqrt_u[u] * inv_sqrt_i[i];
                crate::numerics::kernels::axpy(w, cur.user(u), out);
            }
        }
        for (s, v) in sum.users.iter_mut().zip(&next.users) {
            *s += v;
        }
        for (s, v) in sum.items.iter_mut().zip(&next.items) {
            *s += v;
        }
        cur = next;
    }
    let inv = 1.0 / (layers + 1) as f64;
    for u in 0..graph.num_users {
        if graph.user_degree(u) == 0 {
            sum.user_mut(u).copy_from_slice(base.user(u));
        } else {
            sum.user_mut(u).iter_mut().for_each(|v| *v *= inv);
        }
    }
    for i in 0..graph.num_items {
        if graph.item_degree(i) == 0 {
            sum.item_mut(i).copy_from_slice(base.item(i));
        } else {
            sum.item_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(sum)
}

/// `-ln sigmoid(<user, pos> - <user, neg>) + l2_lambda * params_norm_sq`.
pub fn bpr_loss(user: &[f64], pos: &[f64], neg: &[f64], l2_lambda: f64, params_norm_sq: f64) -> f64 {
    let diff = dot(user, pos) - dot(user, neg);
    -log_sigmoid(diff) + l2_lambda * params_norm_sq
}

/// Closed-form gradient of the ranking term of [`bpr_loss`] with respect
/// to (user, pos, neg).
pub fn bpr_grad(user: &[f64], pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let diff = dot(user, pos) - dot(user, neg);
    // d/d diff of -ln sigmoid(diff) = -(1 - sigmoid(diff))
    let c = -(1.0 - sigmoid(diff));
    let gu = pos.iter().zip(neg).map(|(p, n)| c * (p - n)).collect();
    let gp = user.iter().map(|u| c * u).collect();
    let gn = user.iter().map(|u| -c * u).collect();
    (gu, gp, gn)
}

/// [`bpr_loss`] recorded on a tape. The vectors are 1 x d rows.
pub fn bpr_loss_on_tape(
    tape: &mut Tape,
    user: Var,
    pos: Var,
    neg: Var,
    l2_lambda: f64,
    params_norm_sq: f64,
) -> Result<Var, NumericsError> {
    let up = tape.mul(user, pos)?;
    let pos_score = tape.sum(up)?;
    let un = tape.mul(user, neg)?;
    let neg_score = tape.sum(un)?;
    let neg_score = tape.scale(neg_score, -1.0)?;
    let diff = tape.add(pos_score, neg_score)?;
    let prob = tape.sigmoid(diff)?;
    let log_prob = tape.log(prob)?;
    let nll = tape.scale(log_prob, -1.0)?;
    let reg = tape.constant(Tensor::scalar(l2_lambda * params_norm_sq));
    tape.add(nll, reg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub num_neg_samples: usize,
    /// Upper bound on epochs; training also stops once the epoch loss plateaus.
    pub epochs: usize,
    pub batch_size: usize,
    /// Relative epoch-loss improvement below which training stops.
    pub plateau_tol: f64,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            embed_dim: 32,
            learning_rate: 1e-3,
            l2_lambda: 1e-4,
            num_neg_samples: 1,
            epochs: 400,
            batch_size: 128,
            plateau_tol: 1e-4,
            seed: 0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.num_layers < 1 {
            return Err(GraphError::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.embed_dim < 2 {
            return Err(GraphError::InvalidConfig("embed_dim must be >= 2".into()));
        }
        if self.num_neg_samples == 0 || self.batch_size == 0 {
            return Err(GraphError::InvalidConfig(
                "num_neg_samples and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch record from [`train_gnn_with_trace`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnnEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub fn train_gnn(graph: &InteractionGraph, config: &GnnConfig) -> Result<EmbeddingTable, GraphError> {
    train_gnn_with_trace(graph, config).map(|(t, _)| t)
}

/// BPR training of LightGCN base embeddings with uniform negative sampling
/// and Adam. Returns the propagated table and the per-epoch loss trace.
pub fn train_gnn_with_trace(
    graph: &InteractionGraph,
    config: &GnnConfig,
) -> Result<(EmbeddingTable, Vec<GnnEpoch>), GraphError> {
    config.validate()?;
    if graph.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    if let Some(u) = (0..graph.num_users).find(|&u| graph.user_degree(u) == graph.num_items) {
        return Err(GraphError::NoNegatives(u));
    }
    let d = config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let users: Vec<f64> = (0..graph.num_users * d)
        .map(|_| rng.random_range(-0.1..=0.1))
        .collect();
    let items: Vec<f64> = (0..graph.num_items * d)
        .map(|_| rng.random_range(-0.1..=0.1))
        .collect();
    let mut base = EmbeddingTable::new(d, users, items)?;

    let mut edges: Vec<(usize, usize)> = graph.edges().collect();
    let mut adam = Adam::new(config.learning_rate, 0.0);
    let mut trace = Vec::new();
    let mut prev_loss: Option<f64> = None;

    for epoch in 0..config.epochs {
        edges.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in edges.chunks(config.batch_size) {
            let fin = lightgcn_propagate(graph, &base, config.num_layers)?;
            let mut grad = EmbeddingTable::zeros(graph.num_users, graph.num_items, d);
            let mut base_grad = EmbeddingTable::zeros(graph.num_users, graph.num_items, d);
            let n_triples = (batch.len() * config.num_neg_samples) as f64;
            for &(u, pos) in batch {
                for _ in 0..config.num_neg_samples {
                    let neg = loop {
                        let j = rng.random_range(0..graph.num_items);
                        if !graph.has_edge(u, j) {
                            break j;
                        }
                    };
                    let norm_sq = dot(base.user(u), base.user(u))
                        + dot(base.item(pos), base.item(pos))
                        + dot(base.item(neg), base.item(neg));
                    epoch_loss += bpr_loss(fin.user(u), fin.item(pos), fin.item(neg), config.l2_lambda, norm_sq);
                    count += 1;
                    let (gu, gp, gn) = bpr_grad(fin.user(u), fin.item(pos), fin.item(neg));
                    let s = 1.0 / n_triples;
                    crate::numerics::kernels::axpy(s, &gu, grad.user_mut(u));
                    crate::numerics::kernels::axpy(s, &gp, grad.item_mut(pos));
                    crate::numerics::kernels::axpy(s, &gn, grad.item_mut(neg));
                    let r = 2.0 * config.l2_lambda * s;
                    let bu = base.user(u).to_vec();
                    crate::numerics::kernels::axpy(r, &bu, base_grad.user_mut(u));
                    let bp = base.item(pos).to_vec();
                    crate::numerics::kernels::axpy(r, &bp, base_grad.item_mut(pos));
                    let bn = base.item(neg).to_vec();
                    crate::numerics::kernels::axpy(r, &bn, base_grad.item_mut(neg));
                }
            }
            // the propagation operator is symmetric, so its adjoint is itself
            let back = lightgcn_propagate(graph, &grad, config.num_layers)?;
            for (b, g) in base_grad.users.iter_mut().zip(&back.users) {
                *b += g;
            }
            for (b, g) in base_grad.items.iter_mut().zip(&back.items) {
                *b += g;
            }
            adam.tick();
            adam.update(0, &mut base.users, &base_grad.users);
            adam.update(1, &mut base.items, &base_grad.items);
        }
        let mean_loss = epoch_loss / count.max(1) as f64;
        trace.push(GnnEpoch { epoch, mean_loss });
        if let Some(prev) = prev_loss {
            if (prev - mean_loss) / prev.abs().max(f64::MIN_POSITIVE) < config.plateau_tol {
                break;
            }
        }
        prev_loss = Some(mean_loss);
    }
    Ok((lightgcn_propagate(graph, &base, config.num_layers)?, trace))
}

/// Ranking AUC of `positives` against every item the user has not
/// interacted with in `known` or `positives`. Ties count one half.
pub fn ranking_auc(table: &EmbeddingTable, known: &InteractionGraph, positives: &[(usize, usize)]) -> f64 {
    let mut held: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); known.num_users];
    for &(u, i) in positives {
        held[u].insert(i);
    }
    let mut wins = 0.0;
    let mut total = 0.0;
    for &(u, i) in positives {
        let s = table.score(u, i);
        for j in 0..known.num_items {
            if known.has_edge(u, j) || held[u].contains(&j) {
                continue;
            }
            let sj = table.score(u, j);
            total += 1.0;
            if s > sj {
                wins += 1.0;
            } else if s == sj {
                wins += 0.5;
            }
        }
    }
    if total == 0.0 {
        0.5
    } else {
        wins / total
    }
}
