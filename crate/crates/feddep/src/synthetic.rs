//! Seeded community-structured graph generator used by tests and the CLI's
//! `synth` subcommand: planted partitions with label-correlated features,
//! dense inside communities and sparse across them, so Louvain recovers the
//! communities and missing cross-edges carry signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::GlobalGraph;
use crate::nn::Matrix;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub nodes: usize,
    pub communities: usize,
    pub classes: usize,
    pub feature_dim: usize,
    /// Intra-community edge probability.
    pub p_in: f64,
    /// Cross-community edge probability.
    pub p_out: f64,
    /// Uniform feature noise amplitude.
    pub noise: f64,
    /// Strength of the per-class feature signal.
    pub signal: f64,
    /// Probability that a node's label deviates from its community's class,
    /// keeping client label distributions mixed after partitioning.
    pub label_flip: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            nodes: 90,
            communities: 3,
            classes: 3,
            feature_dim: 8,
            p_in: 0.25,
            p_out: 0.02,
            noise: 0.6,
            signal: 0.5,
            label_flip: 0.3,
            seed: 0,
        }
    }
}

/// Planted-partition graph. Labels mostly follow communities modulo the
/// class count, with a `label_flip` fraction reassigned uniformly so every
/// community (and hence every client) sees a mix of classes. Features carry
/// a weak per-label one-hot signal under stronger uniform noise, so
/// aggregating many neighbors denoises the class signal and lost neighbors
/// cost accuracy. Every node gets at least one intra-community edge so no
/// node is isolated.
pub fn synthetic_graph(cfg: &SyntheticConfig) -> Result<GlobalGraph> {
    let n = cfg.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let community = |v: usize| v * cfg.communities / n;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if community(u) == community(v) {
                cfg.p_in
            } else {
                cfg.p_out
            };
            if rng.gen_bool(p) {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
    }
    // connect any isolated node to a random peer in its community
    for v in 0..n {
        if adj[v].is_empty() {
            let peers: Vec<usize> = (0..n).filter(|&u| u != v && community(u) == community(v)).collect();
            let u = if peers.is_empty() {
                (v + 1) % n
            } else {
                peers[rng.gen_range(0..peers.len())]
            };
            adj[v].push(u);
            adj[u].push(v);
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    let labels: Vec<usize> = (0..n)
        .map(|v| {
            if cfg.label_flip > 0.0 && rng.gen_bool(cfg.label_flip) {
                rng.gen_range(0..cfg.classes)
            } else {
                community(v) % cfg.classes
            }
        })
        .collect();
    let per_class = cfg.feature_dim / cfg.classes.max(1);
    let features = Matrix::from_fn(n, cfg.feature_dim, |v, j| {
        let signal = if per_class > 0 && j / per_class.max(1) == labels[v] && j < per_class * cfg.classes
        {
            cfg.signal
        } else {
            0.0
        };
        signal + rng.gen_range(-cfg.noise..cfg.noise)
    });
    GlobalGraph::new(adj, features, labels, cfg.classes)
}
