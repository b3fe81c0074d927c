//! Deep-neighbor generation: a GNN encoder over the impaired view, a
//! missing-count head, a noisy embedding generator with Bernoulli
//! selection, the two reconstruction losses (local ground truth vs.
//! broadcast prototypes), and subgraph mending.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gnn::{conv_backward_tree, conv_forward_tree, sample_tree, ConvCache, Mending, SampleTree};
use crate::graph::{GraphData, ImpairedView};
use crate::nn::{dense_backward, dense_forward, smooth_l1, Activation, Matrix};
use crate::proto::PrototypeSet;

/// Generator parameters: encoder (conv stack, output dim d_e), count head
/// theta_d, feature head theta_f, Bernoulli sampler rate, and the count cap.
#[derive(Debug, Clone)]
pub struct DGenModel {
    pub encoder: Vec<Matrix>,
    /// 1 x d_e.
    pub theta_d: Matrix,
    /// d_z x d_e.
    pub theta_f: Matrix,
    pub rate: f64,
    pub n_max: usize,
    pub fanout: usize,
}

impl DGenModel {
    pub fn new(
        d_x: usize,
        d_e: usize,
        d_z: usize,
        depth: usize,
        fanout: usize,
        rate: f64,
        n_max: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!((0.0..=1.0).contains(&rate));
        assert!(n_max >= 1);
        let mut encoder = Vec::with_capacity(depth);
        encoder.push(Matrix::glorot(d_e, 2 * d_x, rng));
        for _ in 1..depth {
            encoder.push(Matrix::glorot(d_e, 2 * d_e, rng));
        }
        DGenModel {
            encoder,
            theta_d: Matrix::glorot(1, d_e, rng),
            theta_f: Matrix::glorot(d_z, d_e, rng),
            rate,
            n_max,
            fanout,
        }
    }

    pub fn d_e(&self) -> usize {
        self.encoder[0].rows()
    }

    pub fn d_z(&self) -> usize {
        self.theta_f.rows()
    }
}

/// Standard-normal draw via Box-Muller.
fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn clip_count(count_continuous: f64, n_max: usize) -> usize {
    (count_continuous.round().max(0.0) as usize).min(n_max)
}

/// Count head: count_continuous = relu(theta_d . enc), count = the rounded
/// value clipped to [0, N_max].
pub fn predict_count(model: &DGenModel, enc: &Matrix) -> Result<(f64, usize)> {
    let pre = dense_forward(&model.theta_d, enc)?;
    let cont = pre.get(0, 0).max(0.0);
    Ok((cont, clip_count(cont, model.n_max)))
}

/// Candidate pool: `count` draws of sigmoid(theta_f x (enc + g)) with fresh
/// standard-Gaussian noise per candidate.
pub fn generate_embeddings(
    model: &DGenModel,
    enc: &Matrix,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut pool = Vec::with_capacity(count);
    for _ in 0..count {
        let noise = Matrix::from_fn(model.d_e(), 1, |_, _| standard_normal(rng));
        let mut input = enc.clone();
        input.add_scaled(&noise, 1.0);
        let cand = Activation::Sigmoid.forward(&dense_forward(&model.theta_f, &input)?);
        pool.push(cand.data().to_vec());
    }
    Ok(pool)
}

/// Independent per-candidate keep with probability r, order preserved.
pub fn bernoulli_select(pool: &[Vec<f64>], r: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    pool.iter()
        .filter(|_| rng.gen_bool(r))
        .cloned()
        .collect()
}

/// One node's generation with the structural randomness (sample tree,
/// Gaussian draws, Bernoulli mask) retained, so the forward pass can be
/// recomputed under perturbed parameters for gradient checking.
pub struct NodeGeneration {
    pub node: usize,
    pub count_continuous: f64,
    pub count: usize,
    /// Selected (post-Bernoulli) embeddings.
    pub embeddings: Vec<Vec<f64>>,
    tree: SampleTree,
    noise: Vec<Matrix>,
    mask: Vec<bool>,
    cache: ConvCache,
    enc: Matrix,
    count_pre: f64,
    cand_pre: Vec<Matrix>,
    cand: Vec<Matrix>,
}

/// Run the generator at node v, drawing fresh structural randomness.
pub fn forward_node<G: GraphData>(
    model: &DGenModel,
    g: &G,
    v: usize,
    rng: &mut impl Rng,
) -> Result<NodeGeneration> {
    let tree = sample_tree(g, v, model.encoder.len(), model.fanout, rng);
    let count_probe = {
        let cache = conv_forward_tree(&model.encoder, Activation::Relu, g, &tree)?;
        let enc = cache.root_hidden().clone();
        let (_, count) = predict_count(model, &enc)?;
        count
    };
    let noise: Vec<Matrix> = (0..count_probe)
        .map(|_| Matrix::from_fn(model.d_e(), 1, |_, _| standard_normal(rng)))
        .collect();
    let mask: Vec<bool> = (0..count_probe).map(|_| rng.gen_bool(model.rate)).collect();
    recompute_node(model, g, v, tree, noise, mask)
}

/// Recompute a generation from frozen structural randomness.
fn recompute_node<G: GraphData>(
    model: &DGenModel,
    g: &G,
    v: usize,
    tree: SampleTree,
    noise: Vec<Matrix>,
    mask: Vec<bool>,
) -> Result<NodeGeneration> {
    let cache = conv_forward_tree(&model.encoder, Activation::Relu, g, &tree)?;
    let enc = cache.root_hidden().clone();
    let count_pre = dense_forward(&model.theta_d, &enc)?.get(0, 0);
    let count_continuous = count_pre.max(0.0);
    let count = noise.len();
    let mut cand_pre = Vec::with_capacity(count);
    let mut cand = Vec::with_capacity(count);
    let mut embeddings = Vec::new();
    for p in 0..count {
        let mut input = enc.clone();
        input.add_scaled(&noise[p], 1.0);
        let pre = dense_forward(&model.theta_f, &input)?;
        let c = Activation::Sigmoid.forward(&pre);
        if mask[p] {
            embeddings.push(c.data().to_vec());
        }
        cand_pre.push(pre);
        cand.push(c);
    }
    Ok(NodeGeneration {
        node: v,
        count_continuous,
        count,
        embeddings,
        tree,
        noise,
        mask,
        cache,
        enc,
        count_pre,
        cand_pre,
        cand,
    })
}

impl NodeGeneration {
    /// Same structural randomness, new parameters. The frozen pool size is
    /// kept even if the recomputed count head would round differently, so
    /// the loss stays continuous in the parameters.
    pub fn reforward<G: GraphData>(&self, model: &DGenModel, g: &G) -> Result<NodeGeneration> {
        recompute_node(
            model,
            g,
            self.node,
            self.tree.clone(),
            self.noise.clone(),
            self.mask.clone(),
        )
    }
}

pub struct DGenGrads {
    pub encoder: Vec<Matrix>,
    pub theta_d: Matrix,
    pub theta_f: Matrix,
}

impl DGenGrads {
    pub fn zeros_like(model: &DGenModel) -> Self {
        DGenGrads {
            encoder: model
                .encoder
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            theta_d: Matrix::zeros(1, model.d_e()),
            theta_f: Matrix::zeros(model.d_z(), model.d_e()),
        }
    }

    fn scale(&mut self, s: f64) {
        for g in self.encoder.iter_mut() {
            g.scale(s);
        }
        self.theta_d.scale(s);
        self.theta_f.scale(s);
    }

    pub fn apply(&self, model: &mut DGenModel, lr: f64) {
        for (w, g) in model.encoder.iter_mut().zip(self.encoder.iter()) {
            w.add_scaled(g, -lr);
        }
        model.theta_d.add_scaled(&self.theta_d, -lr);
        model.theta_f.add_scaled(&self.theta_f, -lr);
    }
}

/// Reconstruction target groups for one node: (weight, target vectors).
/// The loss takes, per selected candidate and per non-empty group, the
/// squared distance to the nearest target in that group.
type TargetGroups<'a> = Vec<(f64, Vec<&'a [f64]>)>;

/// Local loss: count term lambda_d x smooth-L1(count_continuous - n_v) plus
/// lambda_f x nearest-ground-truth reconstruction of each selected
/// embedding, averaged over the batch.
pub fn dgen_loss_local(
    view: &ImpairedView,
    gens: &[NodeGeneration],
    model: &DGenModel,
    lambda_d: f64,
    lambda_f: f64,
) -> Result<(f64, DGenGrads)> {
    let missing = view.missing_embeddings().ok_or_else(|| {
        Error::State("dgen_loss_local requires missing_embeddings (run local pre-training)".into())
    })?;
    loss_with_counts(view, gens, model, lambda_d, |v| {
        vec![(lambda_f, missing[v].iter().map(|e| e.as_slice()).collect())]
    })
}

/// Prototype loss: count term beta_d, reconstruction beta_f against the own
/// prototype set plus beta_n against each foreign set (one min per set).
pub fn dgen_loss_proto(
    view: &ImpairedView,
    gens: &[NodeGeneration],
    model: &DGenModel,
    local_protos: &PrototypeSet,
    foreign_protos: &[PrototypeSet],
    m_clients: usize,
    beta_d: f64,
    beta_f: f64,
    beta_n: f64,
) -> Result<(f64, DGenGrads)> {
    if foreign_protos.len() + 1 != m_clients {
        return Err(Error::State(format!(
            "expected {} foreign prototype sets, got {}",
            m_clients - 1,
            foreign_protos.len()
        )));
    }
    fn rows_of(set: &PrototypeSet) -> Vec<&[f64]> {
        (0..set.centroids.rows()).map(|k| set.centroids.row(k)).collect()
    }
    loss_with_counts(view, gens, model, beta_d, move |_| {
        let mut groups: TargetGroups<'_> = vec![(beta_f, rows_of(local_protos))];
        for set in foreign_protos {
            groups.push((beta_n, rows_of(set)));
        }
        groups
    })
}

fn loss_with_counts<'a>(
    view: &ImpairedView,
    gens: &[NodeGeneration],
    model: &DGenModel,
    count_weight: f64,
    groups_for: impl Fn(usize) -> TargetGroups<'a>,
) -> Result<(f64, DGenGrads)> {
    if gens.is_empty() {
        return Err(Error::Argument("dgen loss over an empty batch".into()));
    }
    let mut total = 0.0;
    let mut grads = DGenGrads::zeros_like(model);
    for gen in gens {
        let n_v = view.missing_count(gen.node) as f64;
        let (count_loss, count_deriv) = smooth_l1(gen.count_continuous - n_v);
        total += count_weight * count_loss;

        let mut g_enc = Matrix::zeros(model.d_e(), 1);
        if gen.count_pre > 0.0 {
            let gd = count_weight * count_deriv;
            for j in 0..model.d_e() {
                grads
                    .theta_d
                    .set(0, j, grads.theta_d.get(0, j) + gd * gen.enc.get(j, 0));
                g_enc.set(j, 0, g_enc.get(j, 0) + gd * model.theta_d.get(0, j));
            }
        }

        let groups = groups_for(gen.node);
        for p in 0..gen.count {
            if !gen.mask[p] {
                continue;
            }
            let cand = &gen.cand[p];
            let mut g_cand = Matrix::zeros(cand.rows(), 1);
            let mut touched = false;
            for (weight, targets) in &groups {
                if targets.is_empty() {
                    continue;
                }
                let (mut best, mut best_t) = (f64::INFINITY, 0);
                for (t, tgt) in targets.iter().enumerate() {
                    let d2: f64 = tgt
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let d = cand.get(i, 0) - x;
                            d * d
                        })
                        .sum();
                    if d2 < best {
                        best = d2;
                        best_t = t;
                    }
                }
                total += weight * best;
                for (i, &x) in targets[best_t].iter().enumerate() {
                    g_cand.set(i, 0, g_cand.get(i, 0) + weight * 2.0 * (cand.get(i, 0) - x));
                }
                touched = true;
            }
            if !touched {
                continue;
            }
            let g_pre = Activation::Sigmoid.backward(&gen.cand_pre[p], &g_cand);
            let mut input = gen.enc.clone();
            input.add_scaled(&gen.noise[p], 1.0);
            let (g_tf, g_input) = dense_backward(&model.theta_f, &input, &g_pre)?;
            grads.theta_f.add_scaled(&g_tf, 1.0);
            g_enc.add_scaled(&g_input, 1.0);
        }

        let enc_grads =
            conv_backward_tree(&model.encoder, Activation::Relu, &gen.tree, &gen.cache, &g_enc)?;
        for (a, b) in grads.encoder.iter_mut().zip(enc_grads.iter()) {
            a.add_scaled(b, 1.0);
        }
    }
    let scale = 1.0 / gens.len() as f64;
    grads.scale(scale);
    Ok((total * scale, grads))
}

/// Attach each node's selected embeddings as its mended deep-neighbor list.
/// Replaces any previous mending for the covered nodes.
pub fn mend_subgraph(view: &ImpairedView, gens: &[NodeGeneration], d_z: usize) -> Mending {
    let mut mending = Mending::empty(view.subgraph().node_count(), d_z);
    for gen in gens {
        mending.set(gen.node, gen.embeddings.clone());
    }
    mending
}
