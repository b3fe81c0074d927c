//! Mini-batch neighbor-sampled GraphSage-style convolution for local
//! pre-training and embedding extraction, plus the embedding-fused graph
//! convolution classifier.
//!
//! Training walks explicit sampled fanout trees with hand-written backward
//! passes; evaluation and property checks use a layer-wise full-neighborhood
//! pass over the whole graph, which is algebraically the same expansion
//! without sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{GraphData, ImpairedView, NodeSplit, Role};
use crate::nn::{dense_backward, dense_forward, softmax_cross_entropy, Activation, Matrix};

/// Neighbor sampling: without replacement when the degree covers the fanout,
/// with replacement when it does not, self-fallback for isolated nodes.
pub fn sample_neighbors<G: GraphData>(
    g: &G,
    v: usize,
    fanout: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let nbrs = g.neighbors(v);
    if nbrs.is_empty() {
        return vec![v];
    }
    if nbrs.len() >= fanout {
        let mut pool = nbrs.to_vec();
        pool.partial_shuffle(rng, fanout);
        pool.truncate(fanout);
        pool
    } else {
        (0..fanout).map(|_| nbrs[rng.gen_range(0..nbrs.len())]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub children: Vec<usize>,
}

/// Fanout tree rooted at a query node; node 0 is the root.
#[derive(Debug, Clone)]
pub struct SampleTree {
    pub nodes: Vec<TreeNode>,
}

impl SampleTree {
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

pub fn sample_tree<G: GraphData>(
    g: &G,
    v: usize,
    depth: usize,
    fanout: usize,
    rng: &mut impl Rng,
) -> SampleTree {
    let mut nodes = Vec::new();
    build_tree_rec(g, v, 0, depth, fanout, rng, &mut nodes);
    SampleTree { nodes }
}

fn build_tree_rec<G: GraphData>(
    g: &G,
    v: usize,
    d: usize,
    max_depth: usize,
    fanout: usize,
    rng: &mut impl Rng,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let idx = nodes.len();
    nodes.push(TreeNode {
        id: v,
        depth: d,
        children: Vec::new(),
    });
    if d < max_depth {
        let sampled = sample_neighbors(g, v, fanout, rng);
        let mut children = Vec::with_capacity(sampled.len());
        for u in sampled {
            children.push(build_tree_rec(g, u, d + 1, max_depth, fanout, rng, nodes));
        }
        nodes[idx].children = children;
    }
    idx
}

/// Forward cache of a conv pass over a sample tree: hidden states per
/// (layer, tree node), plus pre-activations and layer inputs for backward.
pub struct ConvCache {
    /// h[k][t]; h[0][t] is the raw feature column.
    pub h: Vec<Vec<Option<Matrix>>>,
    pre: Vec<Vec<Option<Matrix>>>,
    cat: Vec<Vec<Option<Matrix>>>,
}

impl ConvCache {
    pub fn root_hidden(&self) -> &Matrix {
        self.h.last().unwrap()[0].as_ref().unwrap()
    }
}

/// GraphSage layer rule over a sample tree:
/// h^k_t = act(W_k x [h^{k-1}_t || mean(h^{k-1} of sampled children)]).
pub fn conv_forward_tree<G: GraphData>(
    layers: &[Matrix],
    act: Activation,
    g: &G,
    tree: &SampleTree,
) -> Result<ConvCache> {
    let depth = layers.len();
    let t_count = tree.nodes.len();
    let mut h: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; depth + 1];
    let mut pre: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; depth];
    let mut cat: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; depth];
    for (t, node) in tree.nodes.iter().enumerate() {
        if node.depth <= depth {
            h[0][t] = Some(Matrix::column(g.feature(node.id)));
        }
    }
    for k in 1..=depth {
        for (t, node) in tree.nodes.iter().enumerate() {
            if node.depth > depth - k {
                continue;
            }
            let self_h = h[k - 1][t].clone().unwrap();
            let mut mean = Matrix::zeros(self_h.rows(), 1);
            for &c in &node.children {
                mean.add_scaled(h[k - 1][c].as_ref().unwrap(), 1.0);
            }
            mean.scale(1.0 / node.children.len().max(1) as f64);
            let input = self_h.vcat(&mean)?;
            let p = dense_forward(&layers[k - 1], &input)?;
            h[k][t] = Some(act.forward(&p));
            pre[k - 1][t] = Some(p);
            cat[k - 1][t] = Some(input);
        }
    }
    Ok(ConvCache { h, pre, cat })
}

/// Backward through `conv_forward_tree`. Returns per-layer weight gradients;
/// gradients reaching raw features are discarded.
pub fn conv_backward_tree(
    layers: &[Matrix],
    act: Activation,
    tree: &SampleTree,
    cache: &ConvCache,
    grad_root: &Matrix,
) -> Result<Vec<Matrix>> {
    let depth = layers.len();
    let t_count = tree.nodes.len();
    let mut grads: Vec<Matrix> = layers
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut gh: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; depth + 1];
    gh[depth][0] = Some(grad_root.clone());
    for k in (1..=depth).rev() {
        for t in 0..t_count {
            let g = match gh[k][t].take() {
                Some(g) => g,
                None => continue,
            };
            let pre = cache.pre[k - 1][t].as_ref().unwrap();
            let input = cache.cat[k - 1][t].as_ref().unwrap();
            let gpre = act.backward(pre, &g);
            let (gw, gcat) = dense_backward(&layers[k - 1], input, &gpre)?;
            grads[k - 1].add_scaled(&gw, 1.0);
            let d_prev = input.rows() / 2;
            let (gself, gmean) = gcat.split_rows(d_prev);
            accumulate(&mut gh[k - 1], t, &gself);
            let children = &tree.nodes[t].children;
            if !children.is_empty() {
                let mut share = gmean;
                share.scale(1.0 / children.len() as f64);
                for &c in children {
                    accumulate(&mut gh[k - 1], c, &share);
                }
            }
        }
    }
    Ok(grads)
}

fn accumulate(slot: &mut [Option<Matrix>], idx: usize, grad: &Matrix) {
    match &mut slot[idx] {
        Some(m) => m.add_scaled(grad, 1.0),
        none => *none = Some(grad.clone()),
    }
}

/// L layers of mean-aggregator convolution (hidden width d_z) plus a linear
/// classification head. The depth-L hidden vector is the node embedding.
#[derive(Debug, Clone)]
pub struct SageModel {
    pub conv: Vec<Matrix>,
    pub head: Matrix,
    pub fanout: usize,
}

impl SageModel {
    pub fn new(
        d_x: usize,
        d_z: usize,
        n_classes: usize,
        depth: usize,
        fanout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(depth >= 1);
        let mut conv = Vec::with_capacity(depth);
        conv.push(Matrix::glorot(d_z, 2 * d_x, rng));
        for _ in 1..depth {
            conv.push(Matrix::glorot(d_z, 2 * d_z, rng));
        }
        let head = Matrix::glorot(n_classes, d_z, rng);
        SageModel { conv, head, fanout }
    }

    pub fn depth(&self) -> usize {
        self.conv.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.conv[0].rows()
    }

    pub fn forward<G: GraphData>(
        &self,
        g: &G,
        v: usize,
        rng: &mut impl Rng,
    ) -> Result<SageForward> {
        let tree = sample_tree(g, v, self.depth(), self.fanout, rng);
        self.forward_on_tree(g, tree)
    }

    pub fn forward_on_tree<G: GraphData>(&self, g: &G, tree: SampleTree) -> Result<SageForward> {
        let cache = conv_forward_tree(&self.conv, Activation::Relu, g, &tree)?;
        let logits = dense_forward(&self.head, cache.root_hidden())?;
        Ok(SageForward { tree, cache, logits })
    }

    pub fn backward(&self, fwd: &SageForward, grad_logits: &Matrix) -> Result<SageGrads> {
        let (g_head, g_emb) = dense_backward(&self.head, fwd.cache.root_hidden(), grad_logits)?;
        let conv = conv_backward_tree(&self.conv, Activation::Relu, &fwd.tree, &fwd.cache, &g_emb)?;
        Ok(SageGrads { conv, head: g_head })
    }

    /// Full-neighborhood embedding of every active node (n x d_z, inactive
    /// rows zero).
    pub fn embed_all<G: GraphData>(&self, g: &G) -> Result<Matrix> {
        let feats = features_columns(g);
        let emb = sage_embed_columns(&self.conv, Activation::Relu, g, &feats)?;
        Ok(active_rows(g, &emb))
    }
}

pub struct SageForward {
    pub tree: SampleTree,
    pub cache: ConvCache,
    pub logits: Matrix,
}

pub struct SageGrads {
    pub conv: Vec<Matrix>,
    pub head: Matrix,
}

impl SageGrads {
    fn zeros_like(model: &SageModel) -> Self {
        SageGrads {
            conv: model
                .conv
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            head: Matrix::zeros(model.head.rows(), model.head.cols()),
        }
    }

    fn add(&mut self, other: &SageGrads) {
        for (a, b) in self.conv.iter_mut().zip(other.conv.iter()) {
            a.add_scaled(b, 1.0);
        }
        self.head.add_scaled(&other.head, 1.0);
    }

    fn apply(&self, model: &mut SageModel, lr: f64, scale: f64) {
        for (w, g) in model.conv.iter_mut().zip(self.conv.iter()) {
            w.add_scaled(g, -lr * scale);
        }
        model.head.add_scaled(&self.head, -lr * scale);
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub d_z: usize,
    pub depth: usize,
    pub fanout: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Mini-batch cross-entropy training of the local embedder on the impaired
/// view; afterwards computes every retained node's embedding and fills the
/// view's ground-truth missing-neighbor embeddings by running the trained
/// model on the un-impaired subgraph. No inter-client communication.
pub fn train_local_gnn(
    view: &mut ImpairedView,
    split: &NodeSplit,
    cfg: &TrainConfig,
) -> Result<(SageModel, Matrix, Vec<f64>)> {
    let train: Vec<usize> = split.nodes_with(Role::Train);
    if train.is_empty() {
        return Err(Error::Argument("split has no train nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_x = view.subgraph().feature_dim();
    let classes = view.subgraph().num_classes();
    let mut model = SageModel::new(d_x, cfg.d_z, classes, cfg.depth, cfg.fanout, &mut rng);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut grads = SageGrads::zeros_like(&model);
            for &v in chunk {
                let fwd = model.forward(view, v, &mut rng)?;
                let (loss, grad_logits) = softmax_cross_entropy(&fwd.logits, view.label(v))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        round: epoch,
                        message: format!("non-finite loss at node {}", v),
                    });
                }
                epoch_loss += loss;
                grads.add(&model.backward(&fwd, &grad_logits)?);
            }
            grads.apply(&mut model, cfg.lr, 1.0 / chunk.len() as f64);
        }
        epoch_losses.push(epoch_loss / train.len() as f64);
    }

    let embeddings = model.embed_all(view)?;

    // Ground truth for hidden neighbors: embeddings from the un-impaired
    // subgraph, ordered by neighbor id.
    let sub = view.subgraph().clone();
    let full_emb = model.embed_all(&sub)?;
    let n = sub.node_count();
    let mut missing: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    for &v in view.retained() {
        for &u in sub.neighbors(v) {
            if view.is_hidden(u) {
                missing[v].push(full_emb.row(u).to_vec());
            }
        }
    }
    view.set_missing_embeddings(missing);
    Ok((model, embeddings, epoch_losses))
}

/// Per-node lists of mended deep-neighbor embeddings.
#[derive(Debug, Clone)]
pub struct Mending {
    d_z: usize,
    lists: Vec<Vec<Vec<f64>>>,
}

impl Mending {
    pub fn empty(node_count: usize, d_z: usize) -> Self {
        Mending {
            d_z,
            lists: vec![Vec::new(); node_count],
        }
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn set(&mut self, v: usize, list: Vec<Vec<f64>>) {
        self.lists[v] = list;
    }

    pub fn list(&self, v: usize) -> &[Vec<f64>] {
        &self.lists[v]
    }

    /// Mean of v's mended embeddings, or the zero vector when none exist.
    pub fn aggregate(&self, v: usize) -> Vec<f64> {
        let list = &self.lists[v];
        let mut agg = vec![0.0; self.d_z];
        if list.is_empty() {
            return agg;
        }
        for e in list {
            for (a, x) in agg.iter_mut().zip(e.iter()) {
                *a += x;
            }
        }
        let s = 1.0 / list.len() as f64;
        agg.iter_mut().for_each(|a| *a *= s);
        agg
    }

    /// d_z x n matrix of per-node aggregates.
    pub fn agg_columns(&self) -> Matrix {
        let n = self.lists.len();
        let mut m = Matrix::zeros(self.d_z, n);
        for v in 0..n {
            for (i, x) in self.aggregate(v).into_iter().enumerate() {
                m.set(i, v, x);
            }
        }
        m
    }
}

/// K-layer embedding-fused graph convolution classifier.
///
/// Weight shapes: W0 in d_h x (d_x + d_z), Wk in d_h x (d_h + d_z) for the
/// middle layers, WK in d_y x (d_h + d_z).
#[derive(Debug, Clone)]
pub struct FusedClassifier {
    pub weights: Vec<Matrix>,
    pub d_z: usize,
    pub fanout: usize,
}

impl FusedClassifier {
    pub fn new(
        d_x: usize,
        d_z: usize,
        d_h: usize,
        d_y: usize,
        k_layers: usize,
        fanout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(k_layers >= 1);
        let mut weights = Vec::with_capacity(k_layers + 1);
        weights.push(Matrix::glorot(d_h, d_x + d_z, rng));
        for k in 1..=k_layers {
            let out = if k == k_layers { d_y } else { d_h };
            weights.push(Matrix::glorot(out, d_h + d_z, rng));
        }
        FusedClassifier {
            weights,
            d_z,
            fanout,
        }
    }

    pub fn k_layers(&self) -> usize {
        self.weights.len() - 1
    }

    fn act_at(&self, k: usize) -> Activation {
        if k == self.k_layers() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }

    pub fn forward<G: GraphData>(
        &self,
        g: &G,
        mending: Option<&Mending>,
        v: usize,
        rng: &mut impl Rng,
    ) -> Result<FusedForward> {
        let tree = sample_tree(g, v, self.k_layers(), self.fanout, rng);
        self.forward_on_tree(g, mending, tree)
    }

    /// x^0_u = relu(W0 [x_u || Agg(z~_u)]), then for k in 1..K:
    /// x^k_t = act(Wk [mean(x^{k-1} over t and its sampled children) || Agg(z~_t)]).
    pub fn forward_on_tree<G: GraphData>(
        &self,
        g: &G,
        mending: Option<&Mending>,
        tree: SampleTree,
    ) -> Result<FusedForward> {
        let k_layers = self.k_layers();
        let t_count = tree.nodes.len();
        let agg = |v: usize| -> Matrix {
            match mending {
                Some(m) => Matrix::column(&m.aggregate(v)),
                None => Matrix::zeros(self.d_z, 1),
            }
        };
        // x^0 depends only on the node id; memoize per unique id.
        let mut x0: BTreeMap<usize, (Matrix, Matrix, Matrix)> = BTreeMap::new(); // id -> (cat, pre, val)
        for node in &tree.nodes {
            if !x0.contains_key(&node.id) {
                let input = Matrix::column(g.feature(node.id)).vcat(&agg(node.id))?;
                let pre = dense_forward(&self.weights[0], &input)?;
                let val = Activation::Relu.forward(&pre);
                x0.insert(node.id, (input, pre, val));
            }
        }
        let mut x: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; k_layers + 1];
        let mut pre: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; k_layers + 1];
        let mut cat: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; k_layers + 1];
        for k in 1..=k_layers {
            for (t, node) in tree.nodes.iter().enumerate() {
                if node.depth > k_layers - k {
                    continue;
                }
                let prev = |t2: usize| -> &Matrix {
                    if k == 1 {
                        &x0[&tree.nodes[t2].id].2
                    } else {
                        x[k - 1][t2].as_ref().unwrap()
                    }
                };
                let mut mean = prev(t).clone();
                for &c in &node.children {
                    mean.add_scaled(prev(c), 1.0);
                }
                mean.scale(1.0 / (1 + node.children.len()) as f64);
                let input = mean.vcat(&agg(node.id))?;
                let p = dense_forward(&self.weights[k], &input)?;
                x[k][t] = Some(self.act_at(k).forward(&p));
                pre[k][t] = Some(p);
                cat[k][t] = Some(input);
            }
        }
        let logits = x[k_layers][0].clone().unwrap();
        Ok(FusedForward {
            tree,
            x0,
            pre,
            cat,
            logits,
        })
    }

    pub fn backward(&self, fwd: &FusedForward, grad_logits: &Matrix) -> Result<FusedGrads> {
        let k_layers = self.k_layers();
        let t_count = fwd.tree.nodes.len();
        let mut grads: Vec<Matrix> = self
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut gx: Vec<Vec<Option<Matrix>>> = vec![vec![None; t_count]; k_layers + 1];
        let mut gx0: BTreeMap<usize, Matrix> = BTreeMap::new();
        gx[k_layers][0] = Some(grad_logits.clone());
        for k in (1..=k_layers).rev() {
            for t in 0..t_count {
                let g = match gx[k][t].take() {
                    Some(g) => g,
                    None => continue,
                };
                let p = fwd.pre[k][t].as_ref().unwrap();
                let input = fwd.cat[k][t].as_ref().unwrap();
                let gpre = self.act_at(k).backward(p, &g);
                let (gw, gcat) = dense_backward(&self.weights[k], input, &gpre)?;
                grads[k].add_scaled(&gw, 1.0);
                let d_prev = input.rows() - self.d_z;
                let (gmean, _gagg) = gcat.split_rows(d_prev);
                let node = &fwd.tree.nodes[t];
                let mut share = gmean;
                share.scale(1.0 / (1 + node.children.len()) as f64);
                let mut deposit = |t2: usize, g: &Matrix| {
                    if k == 1 {
                        let id = fwd.tree.nodes[t2].id;
                        match gx0.get_mut(&id) {
                            Some(m) => m.add_scaled(g, 1.0),
                            None => {
                                gx0.insert(id, g.clone());
                            }
                        }
                    } else {
                        accumulate(&mut gx[k - 1], t2, g);
                    }
                };
                deposit(t, &share);
                for &c in &node.children.clone() {
                    deposit(c, &share);
                }
            }
        }
        for (id, g) in gx0 {
            let (input, pre, _) = &fwd.x0[&id];
            let gpre = Activation::Relu.backward(pre, &g);
            let (gw, _) = dense_backward(&self.weights[0], input, &gpre)?;
            grads[0].add_scaled(&gw, 1.0);
        }
        Ok(FusedGrads { weights: grads })
    }

    /// Full-neighborhood logits for every active node (n x d_y), the pass
    /// used for inference and evaluation. `mending = None` means all mended
    /// embeddings are zero vectors, the global-graph inference rule.
    pub fn forward_all<G: GraphData>(&self, g: &G, mending: Option<&Mending>) -> Result<Matrix> {
        let feats = features_columns(g);
        self.forward_all_with(g, mending, &feats, Activation::Relu)
    }

    pub(crate) fn forward_all_with<G: GraphData>(
        &self,
        g: &G,
        mending: Option<&Mending>,
        feats: &Matrix,
        inner_act: Activation,
    ) -> Result<Matrix> {
        let n = g.node_count();
        let agg = match mending {
            Some(m) => m.agg_columns(),
            None => Matrix::zeros(self.d_z, n),
        };
        let k_layers = self.k_layers();
        let mut x = inner_act.forward(&dense_forward(&self.weights[0], &feats.vcat(&agg)?)?);
        for k in 1..=k_layers {
            let mean = mean_with_self_columns(g, &x);
            let p = dense_forward(&self.weights[k], &mean.vcat(&agg)?)?;
            x = if k == k_layers {
                self.act_at(k).forward(&p)
            } else {
                inner_act.forward(&p)
            };
        }
        Ok(active_rows(g, &x))
    }
}

pub struct FusedForward {
    pub tree: SampleTree,
    x0: BTreeMap<usize, (Matrix, Matrix, Matrix)>,
    pre: Vec<Vec<Option<Matrix>>>,
    cat: Vec<Vec<Option<Matrix>>>,
    pub logits: Matrix,
}

pub struct FusedGrads {
    pub weights: Vec<Matrix>,
}

impl FusedGrads {
    pub fn zeros_like(f: &FusedClassifier) -> Self {
        FusedGrads {
            weights: f
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &FusedGrads) {
        for (a, b) in self.weights.iter_mut().zip(other.weights.iter()) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn apply(&self, f: &mut FusedClassifier, lr: f64, scale: f64) {
        for (w, g) in f.weights.iter_mut().zip(self.weights.iter()) {
            w.add_scaled(g, -lr * scale);
        }
    }
}

/// d x n column-per-node feature matrix; inactive columns zero.
pub(crate) fn features_columns<G: GraphData>(g: &G) -> Matrix {
    let n = g.node_count();
    let d = if n == 0 { 0 } else { g.feature(0).len() };
    let mut m = Matrix::zeros(d, n);
    for v in 0..n {
        if !g.is_active(v) {
            continue;
        }
        for (i, &x) in g.feature(v).iter().enumerate() {
            m.set(i, v, x);
        }
    }
    m
}

/// Column-per-node mean over each active node's neighbors (self-fallback
/// when it has none). Used by the sage rule.
fn mean_neighbor_columns<G: GraphData>(g: &G, h: &Matrix) -> Matrix {
    let n = g.node_count();
    let d = h.rows();
    let mut m = Matrix::zeros(d, n);
    for v in 0..n {
        if !g.is_active(v) {
            continue;
        }
        let nbrs = g.neighbors(v);
        if nbrs.is_empty() {
            for i in 0..d {
                m.set(i, v, h.get(i, v));
            }
        } else {
            let s = 1.0 / nbrs.len() as f64;
            for i in 0..d {
                let mut acc = 0.0;
                for &u in nbrs {
                    acc += h.get(i, u);
                }
                m.set(i, v, acc * s);
            }
        }
    }
    m
}

/// Column-per-node mean over {v} and v's active neighbors. The fused rule.
fn mean_with_self_columns<G: GraphData>(g: &G, h: &Matrix) -> Matrix {
    let n = g.node_count();
    let d = h.rows();
    let mut m = Matrix::zeros(d, n);
    for v in 0..n {
        if !g.is_active(v) {
            continue;
        }
        let nbrs = g.neighbors(v);
        let s = 1.0 / (1 + nbrs.len()) as f64;
        for i in 0..d {
            let mut acc = h.get(i, v);
            for &u in nbrs {
                acc += h.get(i, u);
            }
            m.set(i, v, acc * s);
        }
    }
    m
}

pub(crate) fn sage_embed_columns<G: GraphData>(
    conv: &[Matrix],
    act: Activation,
    g: &G,
    feats: &Matrix,
) -> Result<Matrix> {
    let mut h = feats.clone();
    for w in conv {
        let mean = mean_neighbor_columns(g, &h);
        h = act.forward(&dense_forward(w, &h.vcat(&mean)?)?);
    }
    Ok(h)
}

/// Transpose a column-per-node matrix to n x d rows, zeroing inactive rows.
fn active_rows<G: GraphData>(g: &G, cols: &Matrix) -> Matrix {
    let n = g.node_count();
    let d = cols.rows();
    Matrix::from_fn(n, d, |v, i| {
        if g.is_active(v) {
            cols.get(i, v)
        } else {
            0.0
        }
    })
}

/// Perturbation-sensitivity set of a (K, L) fused pipeline at node v with
/// full-neighborhood aggregation: the nodes whose feature perturbation
/// changes the fused output at v, when every node is mended with its own
/// L-layer embedding. Contractually this equals the (K+L)-hop ego node set.
pub fn sensitivity_set<G: GraphData>(
    g: &G,
    v: usize,
    k_layers: usize,
    l_layers: usize,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    if g.node_count() > 50 {
        return Err(Error::Argument(
            "sensitivity_set is an exhaustive check for graphs of at most 50 nodes".into(),
        ));
    }
    let n = g.node_count();
    let d_x = g.feature(0).len();
    let d_z = if l_layers == 0 { d_x } else { 4 };
    // Strictly positive weights and an identity activation make the pipeline
    // linear in the features with positive path coefficients, so a feature
    // bump propagates exactly along graph connectivity.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(0.05..0.5))
    };
    let conv: Vec<Matrix> = (0..l_layers)
        .map(|k| {
            let d_in = if k == 0 { d_x } else { d_z };
            pos(d_z, 2 * d_in)
        })
        .collect();
    let mut weights = vec![pos(3, d_x + d_z)];
    for k in 1..=k_layers {
        let out = if k == k_layers { 2 } else { 3 };
        weights.push(pos(out, 3 + d_z));
    }
    let fused = FusedClassifier {
        weights,
        d_z,
        fanout: 1,
    };

    let run = |feats: &Matrix| -> Result<Vec<f64>> {
        let emb = if l_layers == 0 {
            feats.clone()
        } else {
            sage_embed_columns(&conv, Activation::Identity, g, feats)?
        };
        let mut mending = Mending::empty(n, d_z);
        for u in 0..n {
            let col: Vec<f64> = (0..d_z).map(|i| emb.get(i, u)).collect();
            mending.set(u, vec![col]);
        }
        let out = fused.forward_all_with(g, Some(&mending), feats, Activation::Identity)?;
        Ok(out.row(v).to_vec())
    };

    let base_feats = features_columns(g);
    let base = run(&base_feats)?;
    let mut set = BTreeSet::new();
    for u in 0..n {
        let mut feats = base_feats.clone();
        for i in 0..d_x {
            feats.set(i, u, feats.get(i, u) + 1.0);
        }
        let out = run(&feats)?;
        let diff = out
            .iter()
            .zip(base.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if diff > 1e-9 {
            set.insert(u);
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ego_graph, impair, split_nodes, GlobalGraph};
    use crate::nn::gradcheck::rel_err;

    fn graph_from_edges(
        n: usize,
        edges: &[(usize, usize)],
        feats: Matrix,
        labels: Vec<usize>,
        classes: usize,
    ) -> GlobalGraph {
        let mut adj = vec![Vec::new(); n];
        for &(u, v) in edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        GlobalGraph::new(adj, feats, labels, classes).unwrap()
    }

    /// Two 10-cliques, labels by clique, features weakly separable.
    fn toy_two_cluster() -> GlobalGraph {
        let mut edges = Vec::new();
        for a in 0..2usize {
            for i in 0..10usize {
                for j in (i + 1)..10 {
                    edges.push((a * 10 + i, a * 10 + j));
                }
            }
        }
        let feats = Matrix::from_fn(20, 2, |v, j| {
            let cls = v / 10;
            if j == cls {
                1.0 + 0.05 * (v % 10) as f64
            } else {
                0.1
            }
        });
        let labels: Vec<usize> = (0..20).map(|v| v / 10).collect();
        graph_from_edges(20, &edges, feats, labels, 2)
    }

    fn whole_view(g: &GlobalGraph) -> ImpairedView {
        let (subs, _) = crate::graph::louvain_partition(g, 1, 0).unwrap();
        impair(&subs[0], 0.0, 0).unwrap()
    }

    #[test]
    fn sample_neighbors_cases() {
        let edges: Vec<(usize, usize)> = (1..9).map(|i| (0, i)).collect();
        let feats = Matrix::zeros(10, 1);
        let g = graph_from_edges(10, &edges, feats, vec![0; 10], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // deg 8 >= 5: distinct
        let s = sample_neighbors(&g, 0, 5, &mut rng);
        assert_eq!(s.len(), 5);
        let distinct: BTreeSet<usize> = s.iter().copied().collect();
        assert_eq!(distinct.len(), 5);
        // deg 1 < 5: with replacement, all draws are the single neighbor
        let s = sample_neighbors(&g, 1, 5, &mut rng);
        assert_eq!(s, vec![0; 5]);
        // isolated: self-fallback
        let s = sample_neighbors(&g, 9, 5, &mut rng);
        assert_eq!(s, vec![9]);
    }

    #[test]
    fn sage_isolated_zero_weights_zero_logits() {
        let g = graph_from_edges(1, &[], Matrix::from_fn(1, 3, |_, _| 1.0), vec![0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SageModel::new(3, 4, 2, 2, 5, &mut rng);
        for w in model.conv.iter_mut() {
            w.fill(0.0);
        }
        model.head.fill(0.0);
        let fwd = model.forward(&g, 0, &mut rng).unwrap();
        assert!(fwd.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sage_two_node_hand_unrolled() {
        // a -- b with averaging weights and identity-like relu inputs
        // (all values positive, so relu is the identity on this example).
        let feats = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = graph_from_edges(2, &[(0, 1)], feats, vec![0, 1], 2);
        // W0 = [0.5 I | 0.5 I]: h1_v = (x_v + x_neighbor) / 2
        let w0 = Matrix::from_vec(
            2,
            4,
            vec![0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5],
        )
        .unwrap();
        let w1 = w0.clone();
        let conv = vec![w0, w1];
        let emb = sage_embed_columns(&conv, Activation::Relu, &g, &features_columns(&g)).unwrap();
        // h1_a = ([1,2] + [3,4]) / 2 = [2,3]; h1_b = [2,3]
        // h2_a = (h1_a + h1_b) / 2 = [2,3]
        assert!((emb.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((emb.get(1, 0) - 3.0).abs() < 1e-12);
        assert!((emb.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sage_gradients_match_finite_differences() {
        let g = toy_two_cluster();
        let view = whole_view(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SageModel::new(2, 3, 2, 2, 3, &mut rng);
        let tree = sample_tree(&view, 0, 2, 3, &mut rng);
        let fwd = model.forward_on_tree(&view, tree.clone()).unwrap();
        let (_, grad_logits) = softmax_cross_entropy(&fwd.logits, view.label(0)).unwrap();
        let grads = model.backward(&fwd, &grad_logits).unwrap();

        let loss_with = |m: &SageModel| -> f64 {
            let fwd = m.forward_on_tree(&view, tree.clone()).unwrap();
            softmax_cross_entropy(&fwd.logits, view.label(0)).unwrap().0
        };
        let h = 1e-5;
        for li in 0..model.conv.len() {
            for i in 0..model.conv[li].rows() {
                for j in 0..model.conv[li].cols() {
                    let mut mp = model.clone();
                    let orig = mp.conv[li].get(i, j);
                    mp.conv[li].set(i, j, orig + h);
                    let up = loss_with(&mp);
                    mp.conv[li].set(i, j, orig - h);
                    let down = loss_with(&mp);
                    let fd = (up - down) / (2.0 * h);
                    let analytic = grads.conv[li].get(i, j);
                    if fd.abs() > 1e-10 || analytic.abs() > 1e-10 {
                        assert!(
                            rel_err(fd, analytic) < 1e-4,
                            "layer {} ({},{}): fd {} vs {}",
                            li,
                            i,
                            j,
                            fd,
                            analytic
                        );
                    }
                }
            }
        }
        for i in 0..model.head.rows() {
            for j in 0..model.head.cols() {
                let mut mp = model.clone();
                let orig = mp.head.get(i, j);
                mp.head.set(i, j, orig + h);
                let up = loss_with(&mp);
                mp.head.set(i, j, orig - h);
                let down = loss_with(&mp);
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(fd, grads.head.get(i, j)) < 1e-4);
            }
        }
    }

    #[test]
    fn train_zero_epochs_keeps_shape_contract() {
        let g = toy_two_cluster();
        let mut view = whole_view(&g);
        let split = split_nodes(&view, 1).unwrap();
        let cfg = TrainConfig {
            d_z: 4,
            depth: 2,
            fanout: 3,
            epochs: 0,
            batch: 8,
            lr: 0.1,
            seed: 5,
        };
        let (_, emb, _) = train_local_gnn(&mut view, &split, &cfg).unwrap();
        assert_eq!(emb.rows(), 20);
        assert_eq!(emb.cols(), 4);
    }

    #[test]
    fn train_is_deterministic() {
        let g = toy_two_cluster();
        let split_seed = 1;
        let cfg = TrainConfig {
            d_z: 4,
            depth: 2,
            fanout: 3,
            epochs: 3,
            batch: 8,
            lr: 0.1,
            seed: 5,
        };
        let run = || {
            let mut view = whole_view(&g);
            let split = split_nodes(&view, split_seed).unwrap();
            let (_, emb, losses) = train_local_gnn(&mut view, &split, &cfg).unwrap();
            (emb, losses)
        };
        let (e1, l1) = run();
        let (e2, l2) = run();
        assert_eq!(l1, l2);
        assert!(e1.max_abs_diff(&e2) == 0.0);
    }

    #[test]
    fn train_separable_toy_reaches_high_accuracy() {
        let g = toy_two_cluster();
        let mut view = whole_view(&g);
        let split = split_nodes(&view, 1).unwrap();
        let cfg = TrainConfig {
            d_z: 8,
            depth: 2,
            fanout: 5,
            epochs: 50,
            batch: 32,
            lr: 0.1,
            seed: 7,
        };
        let (model, _, losses) = train_local_gnn(&mut view, &split, &cfg).unwrap();
        // epoch-averaged loss non-increasing over the first 5 epochs
        for w in losses.windows(2).take(4) {
            assert!(w[1] <= w[0] + 1e-9, "losses not non-increasing: {:?}", &losses[..5]);
        }
        // train accuracy > 0.9 via full-aggregation logits
        let emb = model.embed_all(&view).unwrap();
        let train = split.nodes_with(Role::Train);
        let mut correct = 0;
        for &v in &train {
            let z = Matrix::column(emb.row(v));
            let logits = dense_forward(&model.head, &z).unwrap();
            let pred = (0..logits.rows())
                .max_by(|&a, &b| logits.get(a, 0).partial_cmp(&logits.get(b, 0)).unwrap())
                .unwrap();
            if pred == view.label(v) {
                correct += 1;
            }
        }
        assert!(correct as f64 / train.len() as f64 > 0.9);
    }

    #[test]
    fn missing_embeddings_filled_for_hidden_neighbors() {
        let g = toy_two_cluster();
        let (subs, _) = crate::graph::louvain_partition(&g, 1, 0).unwrap();
        let mut view = impair(&subs[0], 0.3, 2).unwrap();
        let split = split_nodes(&view, 1).unwrap();
        let cfg = TrainConfig {
            d_z: 4,
            depth: 2,
            fanout: 3,
            epochs: 2,
            batch: 8,
            lr: 0.1,
            seed: 5,
        };
        train_local_gnn(&mut view, &split, &cfg).unwrap();
        let missing = view.missing_embeddings().unwrap();
        for &v in view.retained() {
            assert_eq!(missing[v].len(), view.missing_count(v));
            for e in &missing[v] {
                assert_eq!(e.len(), 4);
            }
        }
    }

    #[test]
    fn fused_single_node_zero_weights_uniform_softmax() {
        let g = graph_from_edges(1, &[], Matrix::from_fn(1, 3, |_, _| 1.0), vec![0], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = FusedClassifier::new(3, 2, 4, 3, 1, 5, &mut rng);
        for w in f.weights.iter_mut() {
            w.fill(0.0);
        }
        let fwd = f.forward(&g, None, 0, &mut rng).unwrap();
        let (loss, _) = softmax_cross_entropy(&fwd.logits, 0).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fused_zeroed_z_blocks_match_plain_convolution_oracle() {
        // With all z~ empty and the W^z column blocks zeroed, the fused
        // pass must equal a plain mean-aggregation network using the W^x
        // blocks (Statement 3.1's block-split reading).
        let g = toy_two_cluster();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d_x = 2;
        let d_z = 3;
        let d_h = 4;
        let d_y = 2;
        let mut f = FusedClassifier::new(d_x, d_z, d_h, d_y, 2, 5, &mut rng);
        for w in f.weights.iter_mut() {
            let zcols = d_z;
            for i in 0..w.rows() {
                for j in (w.cols() - zcols)..w.cols() {
                    w.set(i, j, 0.0);
                }
            }
        }
        let fused_out = f.forward_all(&g, None).unwrap();

        // independent oracle: plain convolution with the W^x blocks
        let wx: Vec<Matrix> = f
            .weights
            .iter()
            .map(|w| w.split_cols(w.cols() - d_z).0)
            .collect();
        let feats = features_columns(&g);
        let mut x = Activation::Relu.forward(&dense_forward(&wx[0], &feats).unwrap());
        for k in 1..wx.len() {
            let mean = mean_with_self_columns(&g, &x);
            let p = dense_forward(&wx[k], &mean).unwrap();
            x = if k == wx.len() - 1 {
                p
            } else {
                Activation::Relu.forward(&p)
            };
        }
        for v in 0..g.node_count() {
            for j in 0..d_y {
                assert!((fused_out.get(v, j) - x.get(j, v)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_inference_none_equals_empty_mending() {
        let g = toy_two_cluster();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FusedClassifier::new(2, 3, 4, 2, 2, 5, &mut rng);
        let a = f.forward_all(&g, None).unwrap();
        let empty = Mending::empty(g.node_count(), 3);
        let b = f.forward_all(&g, Some(&empty)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn fused_gradients_match_finite_differences() {
        let g = toy_two_cluster();
        let view = whole_view(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = FusedClassifier::new(2, 3, 4, 2, 2, 3, &mut rng);
        let mut mending = Mending::empty(20, 3);
        for v in 0..20 {
            mending.set(v, vec![vec![0.1 * v as f64, -0.2, 0.3]]);
        }
        let tree = sample_tree(&view, 1, 2, 3, &mut rng);
        let fwd = f.forward_on_tree(&view, Some(&mending), tree.clone()).unwrap();
        let (_, grad_logits) = softmax_cross_entropy(&fwd.logits, view.label(1)).unwrap();
        let grads = f.backward(&fwd, &grad_logits).unwrap();

        let loss_with = |f2: &FusedClassifier| -> f64 {
            let fwd = f2
                .forward_on_tree(&view, Some(&mending), tree.clone())
                .unwrap();
            softmax_cross_entropy(&fwd.logits, view.label(1)).unwrap().0
        };
        let h = 1e-5;
        for li in 0..f.weights.len() {
            for i in 0..f.weights[li].rows() {
                for j in 0..f.weights[li].cols() {
                    let mut fp = f.clone();
                    let orig = fp.weights[li].get(i, j);
                    fp.weights[li].set(i, j, orig + h);
                    let up = loss_with(&fp);
                    fp.weights[li].set(i, j, orig - h);
                    let down = loss_with(&fp);
                    let fd = (up - down) / (2.0 * h);
                    let analytic = grads.weights[li].get(i, j);
                    if fd.abs() > 1e-10 || analytic.abs() > 1e-10 {
                        assert!(
                            rel_err(fd, analytic) < 1e-4,
                            "weight {} ({},{}): fd {} vs {}",
                            li,
                            i,
                            j,
                            fd,
                            analytic
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mean_aggregation_is_permutation_invariant() {
        let feats = Matrix::from_fn(4, 2, |v, j| (v * 2 + j) as f64);
        let adj_a = vec![vec![1, 2, 3], vec![0], vec![0], vec![0]];
        let adj_b = vec![vec![3, 1, 2], vec![0], vec![0], vec![0]];
        let ga = GlobalGraph::new(adj_a, feats.clone(), vec![0; 4], 1).unwrap();
        let gb = GlobalGraph::new(adj_b, feats, vec![0; 4], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = SageModel::new(2, 3, 1, 2, 5, &mut rng);
        let ea = model.embed_all(&ga).unwrap();
        let eb = model.embed_all(&gb).unwrap();
        assert!(ea.max_abs_diff(&eb) <= 1e-12);
        let f = FusedClassifier::new(2, 2, 3, 1, 2, 5, &mut rng);
        let fa = f.forward_all(&ga, None).unwrap();
        let fb = f.forward_all(&gb, None).unwrap();
        assert!(fa.max_abs_diff(&fb) <= 1e-12);
    }

    #[test]
    fn sensitivity_path_k1_l0() {
        let feats = Matrix::from_fn(3, 2, |v, j| ((v + j) % 2) as f64 + 0.5);
        let g = graph_from_edges(3, &[(0, 1), (1, 2)], feats, vec![0; 3], 1);
        let set = sensitivity_set(&g, 0, 1, 0, 0).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn sensitivity_path_k1_l1() {
        let feats = Matrix::from_fn(3, 2, |v, j| ((v + j) % 2) as f64 + 0.5);
        let g = graph_from_edges(3, &[(0, 1), (1, 2)], feats, vec![0; 3], 1);
        let set = sensitivity_set(&g, 0, 1, 1, 0).unwrap();
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn sensitivity_random_graph_matches_ego_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 30;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen_bool(0.08) {
                    edges.push((u, v));
                }
            }
        }
        let feats = Matrix::from_fn(n, 2, |v, j| ((v * 3 + j) % 5) as f64 * 0.2 + 0.1);
        let g = graph_from_edges(n, &edges, feats, vec![0; n], 1);
        for &v in &[0, 7, 19] {
            let set = sensitivity_set(&g, v, 2, 2, 1).unwrap();
            let ego = ego_graph(&g, v, 4).unwrap();
            assert_eq!(set.into_iter().collect::<Vec<_>>(), ego.nodes);
        }
    }
}
