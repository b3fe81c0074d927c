//! Graph data model, on-disk text format, Louvain partitioning into client
//! subgraphs, train/val/test splitting, and the impairing protocol that
//! manufactures missing-neighbor ground truth.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Read access shared by the global graph, client subgraphs and impaired views.
pub trait GraphData {
    fn node_count(&self) -> usize;
    fn neighbors(&self, v: usize) -> &[usize];
    fn feature(&self, v: usize) -> &[f64];
    fn label(&self, v: usize) -> usize;
    /// False for nodes hidden by impairing.
    fn is_active(&self, _v: usize) -> bool {
        true
    }
}

/// Node-labeled undirected graph: symmetric adjacency, no self-loops,
/// no duplicate edges.
#[derive(Debug, Clone)]
pub struct GlobalGraph {
    adjacency: Vec<Vec<usize>>,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl GlobalGraph {
    pub fn new(
        adjacency: Vec<Vec<usize>>,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = adjacency.len();
        if features.rows() != n {
            return Err(Error::Schema(format!(
                "feature rows {} != node count {}",
                features.rows(),
                n
            )));
        }
        if labels.len() != n {
            return Err(Error::Schema(format!(
                "label count {} != node count {}",
                labels.len(),
                n
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Schema(format!(
                "label {} >= class count {}",
                l, num_classes
            )));
        }
        for (u, nbrs) in adjacency.iter().enumerate() {
            for &v in nbrs {
                if v >= n {
                    return Err(Error::Schema(format!("edge endpoint {} out of range", v)));
                }
                if !adjacency[v].contains(&u) {
                    return Err(Error::Schema(format!(
                        "adjacency not symmetric at ({}, {})",
                        u, v
                    )));
                }
            }
        }
        Ok(GlobalGraph {
            adjacency,
            features,
            labels,
            num_classes,
        })
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

impl GraphData for GlobalGraph {
    fn node_count(&self) -> usize {
        self.adjacency.len()
    }
    fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }
    fn feature(&self, v: usize) -> &[f64] {
        self.features.row(v)
    }
    fn label(&self, v: usize) -> usize {
        self.labels[v]
    }
}

/// A client-owned induced subgraph. Node ids here are local (0-based);
/// `global_ids` maps them back to the global graph.
#[derive(Debug, Clone)]
pub struct Subgraph {
    pub owner: usize,
    pub global_ids: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Subgraph {
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(|a| a.len()).sum::<usize>() / 2
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    /// Whole subgraph as a standalone graph (for export and oracle checks).
    pub fn to_global(&self) -> Result<GlobalGraph> {
        GlobalGraph::new(
            self.adjacency.clone(),
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
    }
}

impl GraphData for Subgraph {
    fn node_count(&self) -> usize {
        self.adjacency.len()
    }
    fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }
    fn feature(&self, v: usize) -> &[f64] {
        self.features.row(v)
    }
    fn label(&self, v: usize) -> usize {
        self.labels[v]
    }
}

/// Subgraph with a fraction of nodes hidden, plus the per-node ground truth
/// the hiding manufactures: missing-neighbor counts and (once the local
/// embedder has run) the hidden neighbors' embeddings.
#[derive(Debug, Clone)]
pub struct ImpairedView {
    sub: Subgraph,
    hidden: Vec<bool>,
    retained: Vec<usize>,
    retained_adj: Vec<Vec<usize>>,
    missing_count: Vec<usize>,
    /// Per local node: ground-truth embeddings of its hidden neighbors,
    /// ordered by neighbor id. Empty until filled by the gnn module.
    missing_embeddings: Option<Vec<Vec<Vec<f64>>>>,
}

impl ImpairedView {
    pub fn subgraph(&self) -> &Subgraph {
        &self.sub
    }

    pub fn is_hidden(&self, v: usize) -> bool {
        self.hidden[v]
    }

    pub fn hidden_nodes(&self) -> Vec<usize> {
        (0..self.hidden.len()).filter(|&v| self.hidden[v]).collect()
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn missing_count(&self, v: usize) -> usize {
        self.missing_count[v]
    }

    pub fn retained_degree(&self, v: usize) -> usize {
        self.retained_adj[v].len()
    }

    pub fn set_missing_embeddings(&mut self, emb: Vec<Vec<Vec<f64>>>) {
        self.missing_embeddings = Some(emb);
    }

    pub fn missing_embeddings(&self) -> Option<&Vec<Vec<Vec<f64>>>> {
        self.missing_embeddings.as_ref()
    }

    pub fn ego_graph(&self, v: usize, hops: usize) -> Result<EgoGraph> {
        if v >= self.hidden.len() || self.hidden[v] {
            return Err(Error::Argument(format!(
                "node {} is hidden or absent from the impaired view",
                v
            )));
        }
        ego_graph(self, v, hops)
    }
}

impl GraphData for ImpairedView {
    fn node_count(&self) -> usize {
        self.retained_adj.len()
    }
    fn neighbors(&self, v: usize) -> &[usize] {
        &self.retained_adj[v]
    }
    fn feature(&self, v: usize) -> &[f64] {
        self.sub.feature(v)
    }
    fn label(&self, v: usize) -> usize {
        self.sub.label(v)
    }
    fn is_active(&self, v: usize) -> bool {
        !self.hidden[v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Per-node role assignment over the retained nodes of an impaired view.
#[derive(Debug, Clone)]
pub struct NodeSplit {
    roles: Vec<Option<Role>>,
}

impl NodeSplit {
    pub fn role(&self, v: usize) -> Option<Role> {
        self.roles[v]
    }

    pub fn nodes_with(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&v| self.roles[v] == Some(role))
            .collect()
    }
}

/// Counts dropped while normalizing a loaded edge list.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadReport {
    pub self_loops_dropped: usize,
    pub duplicate_edges_dropped: usize,
}

/// Parse the line-oriented graph format:
/// header `nodes=<N> features=<d_x> classes=<|Y|>`, then `node <id> <label>
/// <f_1> ... <f_dx>` lines and `edge <u> <v>` lines; `#` starts a comment.
pub fn load_graph(path: impl AsRef<Path>) -> Result<(GlobalGraph, LoadReport)> {
    let text = fs::read_to_string(path)?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<(GlobalGraph, LoadReport)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline_no, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, message: "empty file".into() })?;
    let mut n = None;
    let mut dx = None;
    let mut classes = None;
    for tok in header.split_whitespace() {
        let (key, val) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: hline_no,
            message: format!("expected key=value, got '{}'", tok),
        })?;
        let parsed: usize = val.parse().map_err(|_| Error::Parse {
            line: hline_no,
            message: format!("invalid number '{}'", val),
        })?;
        match key {
            "nodes" => n = Some(parsed),
            "features" => dx = Some(parsed),
            "classes" => classes = Some(parsed),
            _ => {
                return Err(Error::Parse {
                    line: hline_no,
                    message: format!("unknown header key '{}'", key),
                })
            }
        }
    }
    let (n, dx, classes) = match (n, dx, classes) {
        (Some(n), Some(dx), Some(c)) => (n, dx, c),
        _ => {
            return Err(Error::Parse {
                line: hline_no,
                message: "header must define nodes=, features= and classes=".into(),
            })
        }
    };

    let mut features = Matrix::zeros(n, dx);
    let mut labels = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut edge_set: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut report = LoadReport::default();

    for (line_no, line) in lines {
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("node") => {
                let rest: Vec<&str> = toks.collect();
                if rest.len() != 2 + dx {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!(
                            "node line has {} fields, expected {}",
                            rest.len(),
                            2 + dx
                        ),
                    });
                }
                let id: usize = rest[0].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid node id '{}'", rest[0]),
                })?;
                if id >= n {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("node id {} >= declared node count {}", id, n),
                    });
                }
                if seen[id] {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("duplicate node id {}", id),
                    });
                }
                seen[id] = true;
                let label: usize = rest[1].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid label '{}'", rest[1]),
                })?;
                if label >= classes {
                    return Err(Error::Schema(format!(
                        "line {}: label {} >= classes {}",
                        line_no, label, classes
                    )));
                }
                labels[id] = label;
                for (j, tok) in rest[2..].iter().enumerate() {
                    let v: f64 = tok.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("invalid feature value '{}'", tok),
                    })?;
                    features.set(id, j, v);
                }
            }
            Some("edge") => {
                let rest: Vec<&str> = toks.collect();
                if rest.len() != 2 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "edge line must be `edge <u> <v>`".into(),
                    });
                }
                let u: usize = rest[0].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid node id '{}'", rest[0]),
                })?;
                let v: usize = rest[1].parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("invalid node id '{}'", rest[1]),
                })?;
                if u >= n || v >= n {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("edge ({}, {}) out of range", u, v),
                    });
                }
                if u == v {
                    report.self_loops_dropped += 1;
                    continue;
                }
                let key = (u.min(v), u.max(v));
                if !edge_set.insert(key) {
                    report.duplicate_edges_dropped += 1;
                }
            }
            Some(other) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown record type '{}'", other),
                })
            }
            None => unreachable!(),
        }
    }

    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Schema(format!("node {} never declared", missing)));
    }

    let mut adjacency = vec![Vec::new(); n];
    for &(u, v) in &edge_set {
        adjacency[u].push(v);
        adjacency[v].push(u);
    }
    for a in adjacency.iter_mut() {
        a.sort_unstable();
    }
    Ok((GlobalGraph::new(adjacency, features, labels, classes)?, report))
}

/// Serialize a graph in the same text format `load_graph` reads.
pub fn write_graph(g: &impl GraphData, num_classes: usize, feature_dim: usize) -> String {
    let n = g.node_count();
    let mut out = String::new();
    out.push_str(&format!(
        "nodes={} features={} classes={}\n",
        n, feature_dim, num_classes
    ));
    for v in 0..n {
        out.push_str(&format!("node {} {}", v, g.label(v)));
        for x in g.feature(v) {
            out.push_str(&format!(" {}", x));
        }
        out.push('\n');
    }
    for u in 0..n {
        for &v in g.neighbors(u) {
            if u < v {
                out.push_str(&format!("edge {} {}\n", u, v));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PartitionStats {
    pub subgraph_nodes: Vec<usize>,
    pub subgraph_edges: Vec<usize>,
    pub cross_edges: usize,
    pub total_edges: usize,
}

impl PartitionStats {
    pub fn cross_edge_fraction(&self) -> f64 {
        if self.total_edges == 0 {
            0.0
        } else {
            self.cross_edges as f64 / self.total_edges as f64
        }
    }
}

/// Louvain modularity maximization, then communities merged greedily into
/// `m` similar-sized groups (largest community to currently smallest group).
pub fn louvain_partition(
    g: &GlobalGraph,
    m: usize,
    seed: u64,
) -> Result<(Vec<Subgraph>, PartitionStats)> {
    if m == 0 {
        return Err(Error::Argument("client count M must be >= 1".into()));
    }
    if m > g.node_count() {
        return Err(Error::Argument(format!(
            "client count {} exceeds node count {}",
            m,
            g.node_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let communities = louvain_communities(&g.adjacency, &mut rng);

    // Gather community member lists, largest first.
    let n_comms = communities.iter().max().map_or(0, |&c| c + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_comms];
    for (v, &c) in communities.iter().enumerate() {
        members[c].push(v);
    }
    members.retain(|m| !m.is_empty());
    // Louvain may return fewer communities than requested groups; split the
    // largest until there are enough units to fill every group.
    while members.len() < m {
        members.sort_by_key(|c| std::cmp::Reverse(c.len()));
        let big = members.remove(0);
        let half = big.len() / 2;
        let (a, b) = big.split_at(half.max(1));
        members.push(a.to_vec());
        if !b.is_empty() {
            members.push(b.to_vec());
        }
    }
    members.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m];
    for c in members {
        let target = (0..m).min_by_key(|&i| (groups[i].len(), i)).unwrap();
        groups[target].extend(c);
    }
    build_partition(g, groups)
}

fn build_partition(
    g: &GlobalGraph,
    mut groups: Vec<Vec<usize>>,
) -> Result<(Vec<Subgraph>, PartitionStats)> {
    let n = g.node_count();
    let mut owner = vec![usize::MAX; n];
    for (i, grp) in groups.iter_mut().enumerate() {
        grp.sort_unstable();
        for &v in grp.iter() {
            owner[v] = i;
        }
    }
    let mut subgraphs = Vec::with_capacity(groups.len());
    let mut cross_edges = 0usize;
    for u in 0..n {
        for &v in g.neighbors(u) {
            if u < v && owner[u] != owner[v] {
                cross_edges += 1;
            }
        }
    }
    for (i, grp) in groups.iter().enumerate() {
        let mut local_id = vec![usize::MAX; n];
        for (li, &v) in grp.iter().enumerate() {
            local_id[v] = li;
        }
        let mut adjacency = vec![Vec::new(); grp.len()];
        for (li, &v) in grp.iter().enumerate() {
            for &u in g.neighbors(v) {
                if owner[u] == i {
                    adjacency[li].push(local_id[u]);
                }
            }
            adjacency[li].sort_unstable();
        }
        let mut features = Matrix::zeros(grp.len(), g.feature_dim());
        let mut labels = Vec::with_capacity(grp.len());
        for (li, &v) in grp.iter().enumerate() {
            features.row_mut(li).copy_from_slice(g.feature(v));
            labels.push(g.label(v));
        }
        subgraphs.push(Subgraph {
            owner: i,
            global_ids: grp.clone(),
            adjacency,
            features,
            labels,
            num_classes: g.num_classes(),
        });
    }
    let stats = PartitionStats {
        subgraph_nodes: subgraphs.iter().map(|s| s.global_ids.len()).collect(),
        subgraph_edges: subgraphs.iter().map(|s| s.edge_count()).collect(),
        cross_edges,
        total_edges: g.edge_count(),
    };
    Ok((subgraphs, stats))
}

/// Community assignment by Louvain local moving + graph aggregation.
fn louvain_communities(adjacency: &[Vec<usize>], rng: &mut impl Rng) -> Vec<usize> {
    let n = adjacency.len();
    // Current condensed graph: weighted adjacency and self-loop weights.
    let mut edges: Vec<Vec<(usize, f64)>> = adjacency
        .iter()
        .map(|nbrs| nbrs.iter().map(|&u| (u, 1.0)).collect())
        .collect();
    let mut self_w: Vec<f64> = vec![0.0; n];
    // node -> community on the original graph
    let mut assignment: Vec<usize> = (0..n).collect();

    loop {
        let (comm, improved) = local_moving(&edges, &self_w, rng);
        if !improved {
            break;
        }
        // Relabel communities densely.
        let mut relabel = vec![usize::MAX; comm.len()];
        let mut next = 0;
        for &c in &comm {
            if relabel[c] == usize::MAX {
                relabel[c] = next;
                next += 1;
            }
        }
        let comm: Vec<usize> = comm.iter().map(|&c| relabel[c]).collect();
        for a in assignment.iter_mut() {
            *a = comm[*a];
        }
        if next == edges.len() {
            break; // no aggregation happened
        }
        // Aggregate the condensed graph.
        let mut new_self = vec![0.0; next];
        let mut acc: Vec<std::collections::BTreeMap<usize, f64>> =
            vec![std::collections::BTreeMap::new(); next];
        for u in 0..edges.len() {
            let cu = comm[u];
            new_self[cu] += self_w[u];
            for &(v, w) in &edges[u] {
                let cv = comm[v];
                if cu == cv {
                    if u < v {
                        new_self[cu] += w;
                    }
                } else {
                    *acc[cu].entry(cv).or_insert(0.0) += w;
                }
            }
        }
        edges = acc
            .into_iter()
            .map(|m| m.into_iter().collect())
            .collect();
        self_w = new_self;
    }
    assignment
}

/// One Louvain level: greedy modularity-gain moves until a fixpoint.
fn local_moving(
    edges: &[Vec<(usize, f64)>],
    self_w: &[f64],
    rng: &mut impl Rng,
) -> (Vec<usize>, bool) {
    let n = edges.len();
    let degree: Vec<f64> = (0..n)
        .map(|u| 2.0 * self_w[u] + edges[u].iter().map(|&(_, w)| w).sum::<f64>())
        .collect();
    let two_m: f64 = degree.iter().sum();
    if two_m == 0.0 {
        return ((0..n).collect(), false);
    }
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot: Vec<f64> = degree.clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut improved_any = false;
    let mut moved = true;
    while moved {
        moved = false;
        for &u in &order {
            let cu = comm[u];
            // weight from u to each neighboring community
            let mut w_to: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
            for &(v, w) in &edges[u] {
                *w_to.entry(comm[v]).or_insert(0.0) += w;
            }
            tot[cu] -= degree[u];
            let w_own = w_to.get(&cu).copied().unwrap_or(0.0);
            let base_gain = w_own - degree[u] * tot[cu] / two_m;
            let mut best_c = cu;
            let mut best_gain = base_gain;
            for (&c, &w) in &w_to {
                if c == cu {
                    continue;
                }
                let gain = w - degree[u] * tot[c] / two_m;
                if gain > best_gain + 1e-12 {
                    best_gain = gain;
                    best_c = c;
                }
            }
            comm[u] = best_c;
            tot[best_c] += degree[u];
            if best_c != cu {
                moved = true;
                improved_any = true;
            }
        }
    }
    (comm, improved_any)
}

/// Hide a uniformly sampled floor(h * |V_i|) node set and record each
/// retained node's count of hidden neighbors.
pub fn impair(sub: &Subgraph, h: f64, seed: u64) -> Result<ImpairedView> {
    if !(0.0..1.0).contains(&h) {
        return Err(Error::Argument(format!(
            "impairing ratio h must be in [0, 1), got {}",
            h
        )));
    }
    let n = sub.node_count();
    let n_hidden = (h * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let mut hidden = vec![false; n];
    for &v in ids.iter().take(n_hidden) {
        hidden[v] = true;
    }
    let retained: Vec<usize> = (0..n).filter(|&v| !hidden[v]).collect();
    let mut retained_adj = vec![Vec::new(); n];
    let mut missing_count = vec![0usize; n];
    for v in 0..n {
        if hidden[v] {
            continue;
        }
        for &u in sub.neighbors(v) {
            if hidden[u] {
                missing_count[v] += 1;
            } else {
                retained_adj[v].push(u);
            }
        }
    }
    Ok(ImpairedView {
        sub: sub.clone(),
        hidden,
        retained,
        retained_adj,
        missing_count,
        missing_embeddings: None,
    })
}

/// Seeded shuffle then 60/20/20 partition of the retained nodes.
pub fn split_nodes(view: &ImpairedView, seed: u64) -> Result<NodeSplit> {
    let retained = view.retained();
    if retained.len() < 5 {
        return Err(Error::Argument(format!(
            "need at least 5 retained nodes to split, got {}",
            retained.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = retained.to_vec();
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    let mut roles = vec![None; view.subgraph().node_count()];
    for (i, &v) in ids.iter().enumerate() {
        roles[v] = Some(if i < n_train {
            Role::Train
        } else if i < n_train + n_val {
            Role::Val
        } else {
            Role::Test
        });
    }
    Ok(NodeSplit { roles })
}

#[derive(Debug, Clone)]
pub struct EgoGraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

/// BFS to depth `hops` from v, with induced edges; includes v.
pub fn ego_graph<G: GraphData>(g: &G, v: usize, hops: usize) -> Result<EgoGraph> {
    if v >= g.node_count() || !g.is_active(v) {
        return Err(Error::Argument(format!(
            "ego-graph center {} is hidden or absent",
            v
        )));
    }
    let mut seen = BTreeSet::new();
    seen.insert(v);
    let mut frontier = vec![v];
    for _ in 0..hops {
        let mut next = Vec::new();
        for &u in &frontier {
            for &w in g.neighbors(u) {
                if seen.insert(w) {
                    next.push(w);
                }
            }
        }
        frontier = next;
    }
    let nodes: Vec<usize> = seen.iter().copied().collect();
    let mut edges = Vec::new();
    for &u in &nodes {
        for &w in g.neighbors(u) {
            if u < w && seen.contains(&w) {
                edges.push((u, w));
            }
        }
    }
    Ok(EgoGraph { nodes, edges })
}

/// Minimum degree over retained nodes on the impaired adjacency. With hidden
/// edges removed, every node within hops-1 of a retained node is itself
/// retained, so the scan covers exactly the retained set.
pub fn min_retained_degree(view: &ImpairedView, hops: usize) -> Result<usize> {
    if hops == 0 {
        return Err(Error::Argument("hops must be >= 1".into()));
    }
    if view.retained().is_empty() {
        return Err(Error::Argument("impaired view has no retained nodes".into()));
    }
    Ok(view
        .retained()
        .iter()
        .map(|&v| view.retained_degree(v))
        .min()
        .unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> &'static str {
        "nodes=3 features=2 classes=2\n\
         node 0 0 1.0 0.0\n\
         node 1 1 0.0 1.0\n\
         node 2 0 1.0 1.0\n\
         edge 0 1\n\
         edge 1 2\n"
    }

    fn clique(k: usize, offset: usize, out: &mut Vec<(usize, usize)>) {
        for i in 0..k {
            for j in (i + 1)..k {
                out.push((offset + i, offset + j));
            }
        }
    }

    fn graph_from_edges(n: usize, edges: &[(usize, usize)], classes: usize) -> GlobalGraph {
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let feats = Matrix::from_fn(n, 2, |i, j| (i + j) as f64);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        GlobalGraph::new(adj, feats, labels, classes).unwrap()
    }

    #[test]
    fn parse_path_graph() {
        let (g, report) = parse_graph(path3()).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1]);
        assert_eq!(report.duplicate_edges_dropped, 0);
    }

    #[test]
    fn parse_deduplicates_reversed_edges() {
        let text = "nodes=2 features=1 classes=1\nnode 0 0 0.0\nnode 1 0 0.0\nedge 0 1\nedge 1 0\n";
        let (g, report) = parse_graph(text).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(report.duplicate_edges_dropped, 1);
    }

    #[test]
    fn parse_drops_self_loops() {
        let text = "nodes=1 features=1 classes=1\nnode 0 0 0.0\nedge 0 0\n";
        let (g, report) = parse_graph(text).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(report.self_loops_dropped, 1);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "nodes=2 features=1 classes=1\nnode 0 0 0.0\nnode 1 0 oops\n";
        match parse_graph(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn parse_rejects_wrong_feature_count() {
        let text = "nodes=1 features=2 classes=1\nnode 0 0 1.0\n";
        assert!(parse_graph(text).is_err());
    }

    #[test]
    fn write_then_parse_round_trips() {
        let (g, _) = parse_graph(path3()).unwrap();
        let text = write_graph(&g, g.num_classes(), g.feature_dim());
        let (g2, _) = parse_graph(&text).unwrap();
        assert_eq!(g2.node_count(), g.node_count());
        assert_eq!(g2.edge_count(), g.edge_count());
        assert_eq!(g2.neighbors(1), g.neighbors(1));
    }

    #[test]
    fn louvain_two_cliques() {
        let mut edges = Vec::new();
        clique(5, 0, &mut edges);
        clique(5, 5, &mut edges);
        let g = graph_from_edges(10, &edges, 2);
        let (subs, stats) = louvain_partition(&g, 2, 1).unwrap();
        assert_eq!(stats.cross_edges, 0);
        let mut sizes: Vec<usize> = subs.iter().map(|s| s.global_ids.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![5, 5]);
        // each subgraph is one clique
        for s in &subs {
            let first = s.global_ids[0] / 5;
            assert!(s.global_ids.iter().all(|&v| v / 5 == first));
        }
    }

    #[test]
    fn louvain_single_group() {
        let mut edges = Vec::new();
        clique(4, 0, &mut edges);
        let g = graph_from_edges(4, &edges, 2);
        let (subs, stats) = louvain_partition(&g, 1, 0).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(stats.cross_edges, 0);
        assert_eq!(subs[0].edge_count(), g.edge_count());
    }

    #[test]
    fn louvain_m_exceeds_nodes() {
        let g = graph_from_edges(3, &[(0, 1)], 2);
        assert!(louvain_partition(&g, 4, 0).is_err());
    }

    #[test]
    fn partition_is_exact() {
        let mut edges = Vec::new();
        clique(6, 0, &mut edges);
        clique(6, 6, &mut edges);
        clique(6, 12, &mut edges);
        edges.push((0, 6));
        edges.push((6, 12));
        let g = graph_from_edges(18, &edges, 3);
        let (subs, stats) = louvain_partition(&g, 3, 7).unwrap();
        let total_nodes: usize = subs.iter().map(|s| s.global_ids.len()).sum();
        assert_eq!(total_nodes, 18);
        let total_local_edges: usize = subs.iter().map(|s| s.edge_count()).sum();
        assert_eq!(total_local_edges + stats.cross_edges, g.edge_count());
    }

    #[test]
    fn impair_zero_ratio() {
        let mut edges = Vec::new();
        clique(6, 0, &mut edges);
        let g = graph_from_edges(6, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.0, 3).unwrap();
        assert!(view.hidden_nodes().is_empty());
        assert!(view.retained().iter().all(|&v| view.missing_count(v) == 0));
    }

    #[test]
    fn impair_half_of_ten() {
        let mut edges = Vec::new();
        clique(10, 0, &mut edges);
        let g = graph_from_edges(10, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.5, 3).unwrap();
        assert_eq!(view.hidden_nodes().len(), 5);
        assert_eq!(view.retained().len(), 5);
    }

    #[test]
    fn impair_counts_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut edges = Vec::new();
        for u in 0..30usize {
            for v in (u + 1)..30 {
                if rng.gen_bool(0.15) {
                    edges.push((u, v));
                }
            }
        }
        let g = graph_from_edges(30, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let sub = &subs[0];
        let view = impair(sub, 0.4, 9).unwrap();
        let hidden: BTreeSet<usize> = view.hidden_nodes().into_iter().collect();
        for &v in view.retained() {
            let brute = sub.neighbors(v).iter().filter(|u| hidden.contains(u)).count();
            assert_eq!(view.missing_count(v), brute);
            // n_v + retained degree = original degree
            assert_eq!(view.missing_count(v) + view.retained_degree(v), sub.degree(v));
        }
    }

    #[test]
    fn impair_is_reproducible() {
        let mut edges = Vec::new();
        clique(8, 0, &mut edges);
        let g = graph_from_edges(8, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let a = impair(&subs[0], 0.5, 11).unwrap();
        let b = impair(&subs[0], 0.5, 11).unwrap();
        assert_eq!(a.hidden_nodes(), b.hidden_nodes());
    }

    #[test]
    fn split_ten_nodes() {
        let mut edges = Vec::new();
        clique(10, 0, &mut edges);
        let g = graph_from_edges(10, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.0, 0).unwrap();
        let split = split_nodes(&view, 5).unwrap();
        assert_eq!(split.nodes_with(Role::Train).len(), 6);
        assert_eq!(split.nodes_with(Role::Val).len(), 2);
        assert_eq!(split.nodes_with(Role::Test).len(), 2);
    }

    #[test]
    fn split_is_deterministic() {
        let mut edges = Vec::new();
        clique(10, 0, &mut edges);
        let g = graph_from_edges(10, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.3, 0).unwrap();
        let a = split_nodes(&view, 5).unwrap();
        let b = split_nodes(&view, 5).unwrap();
        assert_eq!(a.nodes_with(Role::Train), b.nodes_with(Role::Train));
    }

    #[test]
    fn split_hundred_nodes() {
        let mut edges = Vec::new();
        for i in 0..99usize {
            edges.push((i, i + 1));
        }
        let g = graph_from_edges(100, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.0, 0).unwrap();
        let split = split_nodes(&view, 5).unwrap();
        assert_eq!(split.nodes_with(Role::Train).len(), 60);
        assert_eq!(split.nodes_with(Role::Val).len(), 20);
        assert_eq!(split.nodes_with(Role::Test).len(), 20);
    }

    #[test]
    fn split_too_few_nodes() {
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3)], 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.0, 0).unwrap();
        assert!(split_nodes(&view, 0).is_err());
    }

    #[test]
    fn ego_graph_isolated_node() {
        let g = graph_from_edges(3, &[(0, 1)], 2);
        let ego = ego_graph(&g, 2, 3).unwrap();
        assert_eq!(ego.nodes, vec![2]);
        assert!(ego.edges.is_empty());
    }

    #[test]
    fn ego_graph_path_one_hop() {
        let (g, _) = parse_graph(path3()).unwrap();
        let ego = ego_graph(&g, 0, 1).unwrap();
        assert_eq!(ego.nodes, vec![0, 1]);
        assert_eq!(ego.edges, vec![(0, 1)]);
    }

    #[test]
    fn ego_graph_matches_two_step_reachability() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut edges = Vec::new();
        for u in 0..25usize {
            for v in (u + 1)..25 {
                if rng.gen_bool(0.1) {
                    edges.push((u, v));
                }
            }
        }
        let g = graph_from_edges(25, &edges, 2);
        for v in 0..25 {
            let ego = ego_graph(&g, v, 2).unwrap();
            // brute-force: nodes reachable by paths of length <= 2
            let mut expect = BTreeSet::new();
            expect.insert(v);
            for &a in g.neighbors(v) {
                expect.insert(a);
                for &b in g.neighbors(a) {
                    expect.insert(b);
                }
            }
            assert_eq!(ego.nodes, expect.into_iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn ego_graph_hidden_center_errors() {
        let mut edges = Vec::new();
        clique(10, 0, &mut edges);
        let g = graph_from_edges(10, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.5, 1).unwrap();
        let hidden = view.hidden_nodes()[0];
        assert!(view.ego_graph(hidden, 1).is_err());
    }

    #[test]
    fn min_degree_clique_and_star() {
        let mut edges = Vec::new();
        clique(4, 0, &mut edges);
        let g = graph_from_edges(4, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.0, 0).unwrap();
        assert_eq!(min_retained_degree(&view, 1).unwrap(), 3);
        assert_eq!(min_retained_degree(&view, 3).unwrap(), 3);

        let star: Vec<(usize, usize)> = (1..6).map(|i| (0, i)).collect();
        let g = graph_from_edges(6, &star, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.0, 0).unwrap();
        assert_eq!(min_retained_degree(&view, 1).unwrap(), 1);
    }

    #[test]
    fn min_degree_matches_brute_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut edges = Vec::new();
        for u in 0..20usize {
            for v in (u + 1)..20 {
                if rng.gen_bool(0.3) {
                    edges.push((u, v));
                }
            }
        }
        let g = graph_from_edges(20, &edges, 2);
        let (subs, _) = louvain_partition(&g, 1, 0).unwrap();
        let view = impair(&subs[0], 0.3, 5).unwrap();
        let brute = view
            .retained()
            .iter()
            .map(|&v| {
                view.subgraph()
                    .neighbors(v)
                    .iter()
                    .filter(|&&u| !view.is_hidden(u))
                    .count()
            })
            .min()
            .unwrap();
        assert_eq!(min_retained_degree(&view, 2).unwrap(), brute);
    }

    use rand_chacha::ChaCha8Rng;
}
