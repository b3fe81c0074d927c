//! Federation orchestration: client lifecycle, the five-phase training
//! schedule, FedAvg aggregation of the fused classifier, ablation variants,
//! communication accounting, and global-graph evaluation.
//!
//! Clients run their local phases on worker threads with disjoint state and
//! per-client seeded generators, so parallel and serial execution produce
//! identical results.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dgen::{
    dgen_loss_local, dgen_loss_proto, forward_node, mend_subgraph, DGenGrads, DGenModel,
    NodeGeneration,
};
use crate::error::{Error, Result};
use crate::gnn::{train_local_gnn, FusedClassifier, FusedGrads, Mending, SageModel, TrainConfig};
use crate::graph::{
    impair, load_graph, louvain_partition, split_nodes, GlobalGraph, GraphData, ImpairedView,
    NodeSplit, Role, Subgraph,
};
use crate::nn::{softmax_cross_entropy, Matrix};
use crate::privacy::{budget_for_graph, DeltaMode, PrivacyBudget};
use crate::proto::{broadcast_prototypes, build_prototypes, kmeans, PrototypeSet};

/// Per-phase counters of simulated network traffic. Values are counts of
/// real numbers transferred; messages are logical sends.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    phases: BTreeMap<String, PhaseTraffic>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTraffic {
    pub messages: u64,
    pub values: u64,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, phase: &str, messages: u64, values: u64) {
        let e = self.phases.entry(phase.to_string()).or_default();
        e.messages += messages;
        e.values += values;
    }

    pub fn phase(&self, phase: &str) -> PhaseTraffic {
        self.phases.get(phase).copied().unwrap_or_default()
    }

    pub fn phases(&self) -> impl Iterator<Item = (&str, &PhaseTraffic)> {
        self.phases.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_values(&self) -> u64 {
        self.phases.values().map(|p| p.values).sum()
    }

    /// Total traffic attributable to the generator stack (everything except
    /// the classifier FL rounds shared by all federated variants).
    pub fn generator_values(&self) -> u64 {
        self.phases()
            .filter(|(name, _)| *name != "classifier_fl")
            .map(|(_, t)| t.values)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Local,
    FedAvg,
    FedDepNoDgen,
    FedDepNoProto,
    FedDep,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Local => "local",
            Variant::FedAvg => "fedavg",
            Variant::FedDepNoDgen => "feddep_no_dgen",
            Variant::FedDepNoProto => "feddep_no_proto",
            Variant::FedDep => "feddep",
        }
    }

    fn needs_embedder(&self) -> bool {
        !matches!(self, Variant::Local | Variant::FedAvg)
    }

    fn needs_dgen(&self) -> bool {
        matches!(self, Variant::FedDep | Variant::FedDepNoProto)
    }

    fn needs_prototypes(&self) -> bool {
        matches!(self, Variant::FedDep | Variant::FedDepNoDgen)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Variant::Local),
            "fedavg" => Ok(Variant::FedAvg),
            "feddep_no_dgen" => Ok(Variant::FedDepNoDgen),
            "feddep_no_proto" => Ok(Variant::FedDepNoProto),
            "feddep" => Ok(Variant::FedDep),
            other => Err(Error::Argument(format!(
                "unknown variant '{}' (expected local|fedavg|feddep_no_dgen|feddep_no_proto|feddep)",
                other
            ))),
        }
    }
}

/// Experiment configuration, loadable from a `key = value` text file.
/// Every field has a default except `dataset`.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: String,
    /// Number of clients M.
    pub m: usize,
    /// Impairing fraction h.
    pub h: f64,
    /// Classifier depth K.
    pub k_layers: usize,
    /// Embedding depth L.
    pub depth: usize,
    /// Neighbor-sampling fanout d.
    pub fanout: usize,
    /// Embedding width d_z (also the hidden width of the classifier).
    pub d_z: usize,
    /// Prototypes per client C.
    pub c: usize,
    /// Bernoulli sampler rate r.
    pub rate: f64,
    /// FL rounds N (one local epoch per round).
    pub epochs: usize,
    /// Local embedder pre-training epochs.
    pub pretrain_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_d: f64,
    pub lambda_f: f64,
    pub beta_d: f64,
    pub beta_f: f64,
    pub beta_n: f64,
    pub n_max: usize,
    pub delta_prime: f64,
    /// Audit mode reproducing the printed composed-delta formula.
    pub strict_paper_delta: bool,
    pub variant: Variant,
    pub seed: u64,
    pub repetitions: usize,
    /// Weight FedAvg uniformly instead of by train-set size.
    pub uniform_fedavg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: String::new(),
            m: 3,
            h: 0.5,
            k_layers: 2,
            depth: 2,
            fanout: 5,
            d_z: 32,
            c: 8,
            rate: 0.5,
            epochs: 50,
            pretrain_epochs: 20,
            batch: 32,
            lr: 0.1,
            lambda_d: 1.0,
            lambda_f: 1.0,
            beta_d: 1.0,
            beta_f: 1.0,
            beta_n: 1.0,
            n_max: 5,
            delta_prime: 1e-4,
            strict_paper_delta: false,
            variant: Variant::FedDep,
            seed: 1,
            repetitions: 3,
            uniform_fedavg: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0
            || self.k_layers == 0
            || self.depth == 0
            || self.fanout == 0
            || self.d_z == 0
            || self.c == 0
            || self.epochs == 0
            || self.batch == 0
            || self.n_max == 0
            || self.repetitions == 0
        {
            return Err(Error::Argument("all counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.h) {
            return Err(Error::Argument(format!("h must lie in [0,1), got {}", self.h)));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Argument(format!("r must lie in [0,1], got {}", self.rate)));
        }
        if !(0.0 < self.delta_prime && self.delta_prime < 1.0) {
            return Err(Error::Argument("delta_prime must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn delta_mode(&self) -> DeltaMode {
        if self.strict_paper_delta {
            DeltaMode::StrictPaperText
        } else {
            DeltaMode::Standard
        }
    }
}

/// Parse a `key = value` config file; `#` starts a comment. Unknown keys
/// are rejected so typos cannot silently fall back to defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            message: format!("expected key = value, got '{}'", line),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| Error::Parse {
            line: lineno + 1,
            message: format!("invalid {} value '{}'", what, value),
        };
        match key {
            "dataset" => cfg.dataset = value.to_string(),
            "m" => cfg.m = value.parse().map_err(|_| bad("m"))?,
            "h" => cfg.h = value.parse().map_err(|_| bad("h"))?,
            "k" => cfg.k_layers = value.parse().map_err(|_| bad("k"))?,
            "l" => cfg.depth = value.parse().map_err(|_| bad("l"))?,
            "fanout" => cfg.fanout = value.parse().map_err(|_| bad("fanout"))?,
            "d_z" => cfg.d_z = value.parse().map_err(|_| bad("d_z"))?,
            "c" => cfg.c = value.parse().map_err(|_| bad("c"))?,
            "r" => cfg.rate = value.parse().map_err(|_| bad("r"))?,
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "pretrain_epochs" => {
                cfg.pretrain_epochs = value.parse().map_err(|_| bad("pretrain_epochs"))?
            }
            "batch" => cfg.batch = value.parse().map_err(|_| bad("batch"))?,
            "lr" => cfg.lr = value.parse().map_err(|_| bad("lr"))?,
            "lambda_d" => cfg.lambda_d = value.parse().map_err(|_| bad("lambda_d"))?,
            "lambda_f" => cfg.lambda_f = value.parse().map_err(|_| bad("lambda_f"))?,
            "beta_d" => cfg.beta_d = value.parse().map_err(|_| bad("beta_d"))?,
            "beta_f" => cfg.beta_f = value.parse().map_err(|_| bad("beta_f"))?,
            "beta_n" => cfg.beta_n = value.parse().map_err(|_| bad("beta_n"))?,
            "n_max" => cfg.n_max = value.parse().map_err(|_| bad("n_max"))?,
            "delta_prime" => cfg.delta_prime = value.parse().map_err(|_| bad("delta_prime"))?,
            "strict_paper_delta" => {
                cfg.strict_paper_delta = value.parse().map_err(|_| bad("strict_paper_delta"))?
            }
            "variant" => cfg.variant = value.parse()?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
            "repetitions" => cfg.repetitions = value.parse().map_err(|_| bad("repetitions"))?,
            "uniform_fedavg" => {
                cfg.uniform_fedavg = value.parse().map_err(|_| bad("uniform_fedavg"))?
            }
            other => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("unknown config key '{}'", other),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &str) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// One FL round's record.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub client_losses: Vec<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Wall clock; excluded from the determinism contract.
    pub seconds: f64,
}

/// Sample-weighted parameter averaging of classifier replicas.
pub fn fedavg(replicas: &[FusedClassifier], weights: &[f64]) -> Result<FusedClassifier> {
    if replicas.is_empty() || replicas.len() != weights.len() {
        return Err(Error::State(format!(
            "fedavg needs one weight per replica ({} vs {})",
            replicas.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::State("fedavg weights must sum to > 0".into()));
    }
    let mut out = replicas[0].clone();
    for w in out.weights.iter_mut() {
        w.fill(0.0);
    }
    for (replica, &weight) in replicas.iter().zip(weights) {
        if replica.weights.len() != out.weights.len() {
            return Err(Error::State("fedavg replica layer-count mismatch".into()));
        }
        for (acc, w) in out.weights.iter_mut().zip(replica.weights.iter()) {
            if acc.rows() != w.rows() || acc.cols() != w.cols() {
                return Err(Error::State("fedavg replica shape mismatch".into()));
            }
            acc.add_scaled(w, weight / total);
        }
    }
    Ok(out)
}

/// Accuracy of the classifier on the global graph with all mended
/// embeddings set to zero vectors (the inference rule).
pub fn evaluate_global(f: &FusedClassifier, g: &GlobalGraph, queries: &[usize]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Argument("evaluation query set is empty".into()));
    }
    let logits = f.forward_all(g, None)?;
    let mut correct = 0usize;
    for &v in queries {
        let row = logits.row(v);
        let pred = (0..row.len())
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        if pred == g.label(v) {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

/// Fixed-width rendering of the ledger.
pub fn comm_report(ledger: &CommLedger) -> String {
    let mut out = String::from(format!(
        "{:<24} {:>12} {:>16}\n",
        "phase", "messages", "values"
    ));
    for (phase, t) in ledger.phases() {
        out.push_str(&format!("{:<24} {:>12} {:>16}\n", phase, t.messages, t.values));
    }
    out.push_str(&format!(
        "{:<24} {:>12} {:>16}\n",
        "total",
        ledger.phases.values().map(|p| p.messages).sum::<u64>(),
        ledger.total_values()
    ));
    out
}

pub struct RunOutput {
    pub round_logs: Vec<RoundLog>,
    pub ledger: CommLedger,
    pub budget: Option<PrivacyBudget>,
    /// Set when the accountant's degree precondition failed.
    pub budget_note: Option<String>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Global classifier (for `local`, client 0's classifier).
    pub classifier: FusedClassifier,
}

struct ClientState {
    id: usize,
    sub: Subgraph,
    view: ImpairedView,
    split: NodeSplit,
    rng: ChaCha8Rng,
    embedder: Option<SageModel>,
    embeddings: Option<Matrix>,
    dgen: Option<DGenModel>,
    classifier: FusedClassifier,
    mending: Option<Mending>,
    own_protos: Option<PrototypeSet>,
    foreign_protos: Vec<PrototypeSet>,
}

fn client_seed(master: u64, id: usize) -> u64 {
    master ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl ClientState {
    /// One local dgen epoch over the retained nodes. Returns (mean loss,
    /// embeddings shared with other clients in the no-prototype ablation).
    fn dgen_epoch(&mut self, cfg: &ExperimentConfig) -> Result<(f64, u64)> {
        let model = self.dgen.as_mut().expect("variant without dgen");
        let mut order: Vec<usize> = self.view.retained().to_vec();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        // without prototypes, cross-client supervision requires every peer to
        // hold this client's raw retained embeddings, refreshed each round;
        // prototypes replace this with a one-time C x d_z broadcast
        let shared_values = if cfg.variant == Variant::FedDepNoProto && cfg.m > 1 {
            (cfg.m as u64 - 1) * (order.len() * cfg.d_z) as u64
        } else {
            0
        };
        for chunk in order.chunks(cfg.batch) {
            let gens: Vec<NodeGeneration> = chunk
                .iter()
                .map(|&v| forward_node(model, &self.view, v, &mut self.rng))
                .collect::<Result<_>>()?;
            let (loss, grads): (f64, DGenGrads) = match cfg.variant {
                Variant::FedDep => dgen_loss_proto(
                    &self.view,
                    &gens,
                    model,
                    self.own_protos.as_ref().expect("prototypes built"),
                    &self.foreign_protos,
                    cfg.m,
                    cfg.beta_d,
                    cfg.beta_f,
                    cfg.beta_n,
                )?,
                Variant::FedDepNoProto => {
                    dgen_loss_local(&self.view, &gens, model, cfg.lambda_d, cfg.lambda_f)?
                }
                _ => unreachable!(),
            };
            total += loss;
            batches += 1;
            grads.apply(model, cfg.lr);
        }
        Ok((total / batches.max(1) as f64, shared_values))
    }

    /// Regenerate the mended subgraph from the current generator.
    fn remend(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        let model = self.dgen.as_ref().expect("variant without dgen");
        let gens: Vec<NodeGeneration> = self
            .view
            .retained()
            .to_vec()
            .into_iter()
            .map(|v| forward_node(model, &self.view, v, &mut self.rng))
            .collect::<Result<_>>()?;
        self.mending = Some(mend_subgraph(&self.view, &gens, cfg.d_z));
        Ok(())
    }

    /// One local classifier epoch over the (possibly mended) view.
    fn classifier_epoch(&mut self, cfg: &ExperimentConfig) -> Result<f64> {
        let mut train = self.split.nodes_with(Role::Train);
        train.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in train.chunks(cfg.batch) {
            let mut grads = FusedGrads::zeros_like(&self.classifier);
            let mut chunk_loss = 0.0;
            for &v in chunk {
                let fwd =
                    self.classifier
                        .forward(&self.view, self.mending.as_ref(), v, &mut self.rng)?;
                let (loss, grad_logits) = softmax_cross_entropy(&fwd.logits, self.view.label(v))?;
                chunk_loss += loss;
                grads.add(&self.classifier.backward(&fwd, &grad_logits)?);
            }
            grads.apply(&mut self.classifier, cfg.lr, 1.0 / chunk.len() as f64);
            total += chunk_loss;
        }
        Ok(total / train.len().max(1) as f64)
    }
}

/// Load the configured dataset and run the experiment.
pub fn run_training(config: &ExperimentConfig) -> Result<RunOutput> {
    if config.dataset.is_empty() {
        return Err(Error::Argument("config is missing a dataset path".into()));
    }
    let (g, _) = load_graph(&config.dataset)?;
    run_training_on(&g, config)
}

/// Run the five-phase schedule on an in-memory graph:
/// (1) partition, impair, split; (2) local embedder pre-training;
/// (3) prototype build and one-time broadcast; (4) joint rounds with
/// FedAvg of the classifier; (5) evaluation and privacy accounting.
pub fn run_training_on(g: &GlobalGraph, config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut ledger = CommLedger::new();

    // phase 1: partition + impair + split
    let (subs, _) = louvain_partition(g, config.m, config.seed)?;
    let mut clients: Vec<ClientState> = Vec::with_capacity(config.m);
    for (i, sub) in subs.into_iter().enumerate() {
        let seed = client_seed(config.seed, i);
        let view = impair(&sub, config.h, seed)?;
        let split = split_nodes(&view, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classifier = FusedClassifier::new(
            g.feature_dim(),
            config.d_z,
            config.d_z,
            g.num_classes(),
            config.k_layers,
            config.fanout,
            &mut rng,
        );
        clients.push(ClientState {
            id: i,
            sub,
            view,
            split,
            rng,
            embedder: None,
            embeddings: None,
            dgen: None,
            classifier,
            mending: None,
            own_protos: None,
            foreign_protos: Vec::new(),
        });
    }

    // phase 2: local embedder pre-training (no inter-client traffic)
    if config.variant.needs_embedder() {
        run_on_clients(&mut clients, |client| {
            let cfg = TrainConfig {
                d_z: config.d_z,
                depth: config.depth,
                fanout: config.fanout,
                epochs: config.pretrain_epochs,
                batch: config.batch,
                lr: config.lr,
                seed: client_seed(config.seed, client.id) ^ 0x5bd1,
            };
            let (model, emb, _) = train_local_gnn(&mut client.view, &client.split, &cfg)?;
            client.embedder = Some(model);
            client.embeddings = Some(emb);
            Ok(())
        })?;
    }
    ledger.record("embedder_training", 0, 0);

    // phase 3: prototypes + one-time broadcast / raw-embedding exchange
    if config.variant.needs_prototypes() {
        let mut sets = Vec::with_capacity(config.m);
        for client in clients.iter_mut() {
            let z = retained_rows(client);
            if z.rows() < config.c {
                return Err(Error::State(format!(
                    "client {} has {} retained nodes, fewer than C = {}",
                    client.id,
                    z.rows(),
                    config.c
                )));
            }
            let seed = client_seed(config.seed, client.id) ^ 0xc0de;
            if config.variant == Variant::FedDepNoDgen {
                // generator-free baseline: mend each node with its own
                // cluster's centroid
                let km = kmeans(&z, config.c, 100, seed)?;
                let mut counts = vec![0usize; config.c];
                for &a in &km.assignments {
                    counts[a] += 1;
                }
                let mut mending = Mending::empty(client.view.subgraph().node_count(), config.d_z);
                for (row, &v) in km.assignments.iter().zip(client.view.retained()) {
                    mending.set(v, vec![km.centroids.row(*row).to_vec()]);
                }
                client.mending = Some(mending);
                sets.push(PrototypeSet {
                    owner: client.id,
                    centroids: km.centroids,
                    member_counts: counts,
                });
            } else {
                sets.push(build_prototypes(client.id, &z, config.c, seed)?);
            }
        }
        let distributed = broadcast_prototypes(&sets, &mut ledger);
        for (client, mut all) in clients.iter_mut().zip(distributed) {
            let own = all.remove(client.id);
            client.foreign_protos = all;
            client.own_protos = Some(own);
        }
    } else {
        ledger.record("prototype_broadcast", 0, 0);
    }
    if config.variant.needs_dgen() {
        for client in clients.iter_mut() {
            let seed = client_seed(config.seed, client.id) ^ 0xd9e4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            client.dgen = Some(DGenModel::new(
                g.feature_dim(),
                config.d_z,
                config.d_z,
                config.depth,
                config.fanout,
                config.rate,
                config.n_max,
                &mut rng,
            ));
        }
    }
    // global query sets
    let role_queries = |role: Role| -> Vec<usize> {
        let mut q: Vec<usize> = clients
            .iter()
            .flat_map(|c| {
                c.split
                    .nodes_with(role)
                    .into_iter()
                    .map(|v| c.sub.global_ids[v])
                    .collect::<Vec<_>>()
            })
            .collect();
        q.sort_unstable();
        q
    };
    let val_queries = role_queries(Role::Val);
    let test_queries = role_queries(Role::Test);

    // phase 4: joint rounds
    let classifier_params: u64 = clients[0]
        .classifier
        .weights
        .iter()
        .map(|w| (w.rows() * w.cols()) as u64)
        .sum();
    let mut round_logs = Vec::with_capacity(config.epochs);
    for round in 0..config.epochs {
        let start = Instant::now();
        let results = run_on_clients_collect(&mut clients, |client| {
            let mut shared = 0u64;
            if config.variant.needs_dgen() {
                let (dgen_loss, s) = client.dgen_epoch(config)?;
                shared = s;
                if !dgen_loss.is_finite() || dgen_loss.abs() > 1e6 {
                    return Err(Error::Divergence {
                        round,
                        message: format!("client {} generator loss {}", client.id, dgen_loss),
                    });
                }
                client.remend(config)?;
            }
            let loss = client.classifier_epoch(config)?;
            if !loss.is_finite() || loss.abs() > 1e6 {
                return Err(Error::Divergence {
                    round,
                    message: format!("client {} classifier loss {}", client.id, loss),
                });
            }
            Ok((loss, shared))
        })?;
        let client_losses: Vec<f64> = results.iter().map(|r| r.0).collect();
        let shared: u64 = results.iter().map(|r| r.1).sum();
        if config.variant == Variant::FedDepNoProto && config.m > 1 {
            ledger.record("dgen_training", (config.m as u64 - 1) * config.m as u64, shared);
        } else {
            ledger.record("dgen_training", 0, 0);
        }

        if config.variant != Variant::Local {
            let replicas: Vec<FusedClassifier> =
                clients.iter().map(|c| c.classifier.clone()).collect();
            let weights: Vec<f64> = if config.uniform_fedavg {
                vec![1.0; config.m]
            } else {
                clients
                    .iter()
                    .map(|c| c.split.nodes_with(Role::Train).len() as f64)
                    .collect()
            };
            let global = fedavg(&replicas, &weights)?;
            for client in clients.iter_mut() {
                client.classifier = global.clone();
            }
            // uplink + downlink between each client and the server
            ledger.record(
                "classifier_fl",
                2 * config.m as u64,
                2 * config.m as u64 * classifier_params,
            );
        }

        let (val, test) = evaluate_round(&clients, g, config, &val_queries, &test_queries)?;
        round_logs.push(RoundLog {
            round,
            client_losses,
            val_accuracy: val,
            test_accuracy: test,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    // phase 5: privacy accounting (worst case over clients)
    let mut budget: Option<PrivacyBudget> = None;
    let mut budget_note = None;
    for client in &clients {
        match budget_for_graph(
            &client.view,
            config.fanout,
            config.depth,
            config.epochs,
            config.rate,
            config.delta_prime,
            config.delta_mode(),
        ) {
            Ok(b) => {
                if budget.as_ref().map_or(true, |cur| b.epsilon > cur.epsilon) {
                    budget = Some(b);
                }
            }
            Err(e) => {
                budget_note = Some(format!("client {}: {}", client.id, e));
            }
        }
    }

    let last = round_logs.last().expect("at least one round");
    Ok(RunOutput {
        val_accuracy: last.val_accuracy,
        test_accuracy: last.test_accuracy,
        round_logs,
        ledger,
        budget,
        budget_note,
        classifier: clients.swap_remove_first_classifier(),
    })
}

trait TakeClassifier {
    fn swap_remove_first_classifier(self) -> FusedClassifier;
}

impl TakeClassifier for Vec<ClientState> {
    fn swap_remove_first_classifier(mut self) -> FusedClassifier {
        self.swap_remove(0).classifier
    }
}

fn retained_rows(client: &ClientState) -> Matrix {
    let emb = client.embeddings.as_ref().expect("embedder trained");
    let retained = client.view.retained();
    Matrix::from_fn(retained.len(), emb.cols(), |i, j| emb.get(retained[i], j))
}

fn evaluate_round(
    clients: &[ClientState],
    g: &GlobalGraph,
    config: &ExperimentConfig,
    val_queries: &[usize],
    test_queries: &[usize],
) -> Result<(f64, f64)> {
    if config.variant == Variant::Local {
        // no aggregation: report the mean accuracy of the per-client models
        let mut val = 0.0;
        let mut test = 0.0;
        for client in clients {
            val += evaluate_global(&client.classifier, g, val_queries)?;
            test += evaluate_global(&client.classifier, g, test_queries)?;
        }
        Ok((val / clients.len() as f64, test / clients.len() as f64))
    } else {
        Ok((
            evaluate_global(&clients[0].classifier, g, val_queries)?,
            evaluate_global(&clients[0].classifier, g, test_queries)?,
        ))
    }
}

/// Run a closure on every client, one worker thread per client.
fn run_on_clients<F>(clients: &mut [ClientState], op: F) -> Result<()>
where
    F: Fn(&mut ClientState) -> Result<()> + Sync,
{
    run_on_clients_collect(clients, |c| op(c).map(|_| ())).map(|_| ())
}

fn run_on_clients_collect<F, T>(clients: &mut [ClientState], op: F) -> Result<Vec<T>>
where
    F: Fn(&mut ClientState) -> Result<T> + Sync,
    T: Send,
{
    let results: Vec<Result<T>> = std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter_mut()
            .map(|client| s.spawn(|| op(client)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("client worker panicked")).collect()
    });
    results.into_iter().collect()
}

// --- text serialization (documented formats, fixed field order) ---

/// One line per round:
/// `round=<i> client_losses=<a,b,...> val=<v> test=<t> seconds=<s>`
pub fn metrics_to_text(logs: &[RoundLog]) -> String {
    let mut out = String::new();
    for log in logs {
        let losses: Vec<String> = log.client_losses.iter().map(|l| format!("{:.9}", l)).collect();
        out.push_str(&format!(
            "round={} client_losses={} val={:.9} test={:.9} seconds={:.3}\n",
            log.round,
            losses.join(","),
            log.val_accuracy,
            log.test_accuracy,
            log.seconds
        ));
    }
    out
}

pub fn parse_metrics(text: &str) -> Result<Vec<RoundLog>> {
    let mut logs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected key=value, got '{}'", part),
            })?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            fields.get(k).cloned().ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("missing field '{}'", k),
            })
        };
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: format!("bad number in field '{}'", k),
            })
        };
        logs.push(RoundLog {
            round: get("round")?.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                message: "bad round index".into(),
            })?,
            client_losses: get("client_losses")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|_| Error::Parse {
                        line: lineno + 1,
                        message: "bad client loss".into(),
                    })
                })
                .collect::<Result<_>>()?,
            val_accuracy: parse_f("val")?,
            test_accuracy: parse_f("test")?,
            seconds: parse_f("seconds")?,
        });
    }
    Ok(logs)
}

/// One line per phase: `phase=<name> messages=<m> values=<v>`.
pub fn ledger_to_text(ledger: &CommLedger) -> String {
    let mut out = String::new();
    for (phase, t) in ledger.phases() {
        out.push_str(&format!(
            "phase={} messages={} values={}\n",
            phase, t.messages, t.values
        ));
    }
    out
}

pub fn parse_ledger(text: &str) -> Result<CommLedger> {
    let mut ledger = CommLedger::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::Parse {
            line: lineno + 1,
            message: m.into(),
        };
        let mut phase = None;
        let mut messages = None;
        let mut values = None;
        for part in line.split_whitespace() {
            match part.split_once('=') {
                Some(("phase", v)) => phase = Some(v.to_string()),
                Some(("messages", v)) => {
                    messages = Some(v.parse().map_err(|_| err("bad messages"))?)
                }
                Some(("values", v)) => values = Some(v.parse().map_err(|_| err("bad values"))?),
                _ => return Err(err("expected phase=/messages=/values= fields")),
            }
        }
        ledger.record(
            &phase.ok_or_else(|| err("missing phase"))?,
            messages.ok_or_else(|| err("missing messages"))?,
            values.ok_or_else(|| err("missing values"))?,
        );
    }
    Ok(ledger)
}

/// Three stage lines then the final values:
/// `stage=<name> epsilon=<e> delta=<d>` ... `epsilon=<e>` `delta=<d>`.
pub fn budget_to_text(budget: &PrivacyBudget) -> String {
    let mut out = String::new();
    for (stage, e, d) in &budget.trace {
        out.push_str(&format!("stage={} epsilon={:.9} delta={:.9}\n", stage, e, d));
    }
    out.push_str(&format!("epsilon={:.9}\n", budget.epsilon));
    out.push_str(&format!("delta={:.9}\n", budget.delta));
    out
}

/// Read back the final `epsilon=` / `delta=` lines of a budget file.
/// Returns `None` when the file records a note instead of a budget.
pub fn parse_budget(text: &str) -> Result<Option<(f64, f64)>> {
    let mut epsilon = None;
    let mut delta = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("stage=") || line.starts_with("note=") {
            continue;
        }
        let err = || Error::Parse {
            line: lineno + 1,
            message: format!("bad budget line '{}'", line),
        };
        match line.split_once('=') {
            Some(("epsilon", v)) => epsilon = Some(v.parse().map_err(|_| err())?),
            Some(("delta", v)) => delta = Some(v.parse().map_err(|_| err())?),
            _ => return Err(err()),
        }
    }
    Ok(match (epsilon, delta) {
        (Some(e), Some(d)) => Some((e, d)),
        _ => None,
    })
}
