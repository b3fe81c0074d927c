//! Closed-form noise-free edge-LDP accountant: base guarantees from
//! neighbor sampling, k-fold adaptive composition, and Bernoulli-subsampling
//! amplification, chained into the per-neighborhood training budget.

use crate::error::{Error, Result};
use crate::graph::{min_retained_degree, ImpairedView};

/// How the composed failure probability is formed.
///
/// `Standard` uses 1 − (1−δ)^k (1−δ′), a genuine failure probability that
/// grows with k. `StrictPaperText` reproduces the printed form
/// (1−δ)^k (1−δ′), which decreases with k and is kept only for auditing the
/// source formula; it is not a failure probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaMode {
    #[default]
    Standard,
    StrictPaperText,
}

#[derive(Debug, Clone)]
pub struct AccountantInput {
    /// Minimum relevant degree D over the neighborhoods covered by the
    /// guarantee.
    pub d_min: usize,
    /// Neighbor-sampling fanout d.
    pub fanout: usize,
    /// Embedding depth L.
    pub depth: usize,
    /// Training epochs N.
    pub epochs: usize,
    /// Bernoulli sampler rate r.
    pub rate: f64,
    /// Composition slack delta-prime.
    pub delta_prime: f64,
    pub delta_mode: DeltaMode,
}

#[derive(Debug, Clone)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    /// (stage-name, epsilon, delta) for stages base -> composed -> amplified.
    pub trace: Vec<(String, f64, f64)>,
}

/// Base guarantee of sampling d of D neighbors.
///
/// d < D samples without replacement: (ln((D+1)/(D+1−d)), d/D).
/// d ≥ D (including d = D exactly) samples with replacement:
/// (d·ln((D+1)/D), 1−((D−1)/D)^d).
pub fn nfdp_base(d_min: usize, fanout: usize) -> Result<(f64, f64)> {
    if d_min == 0 {
        return Err(Error::Argument("nfdp_base requires D >= 1".into()));
    }
    let big_d = d_min as f64;
    let d = fanout as f64;
    if fanout < d_min {
        Ok((((big_d + 1.0) / (big_d + 1.0 - d)).ln(), d / big_d))
    } else {
        Ok((
            d * ((big_d + 1.0) / big_d).ln(),
            1.0 - ((big_d - 1.0) / big_d).powi(fanout as i32),
        ))
    }
}

/// k-fold adaptive composition:
/// ε̃ = min{ kε, kε(e^ε−1)/(e^ε+1) + ε·U·√(2k) } with
/// U = min{ √ln(e + ε√k/δ′), √ln(1/δ′) }.
pub fn compose(
    epsilon: f64,
    delta: f64,
    k: usize,
    delta_prime: f64,
    mode: DeltaMode,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Argument("compose requires k >= 1".into()));
    }
    if !(0.0 < delta_prime && delta_prime < 1.0) {
        return Err(Error::Argument(format!(
            "delta-prime must lie in (0,1), got {}",
            delta_prime
        )));
    }
    let kf = k as f64;
    let linear = kf * epsilon;
    let u = ((std::f64::consts::E + epsilon * kf.sqrt() / delta_prime).ln().sqrt())
        .min((1.0 / delta_prime).ln().sqrt());
    let advanced = kf * epsilon * (epsilon.exp() - 1.0) / (epsilon.exp() + 1.0)
        + epsilon * u * (2.0 * kf).sqrt();
    let eps_tilde = linear.min(advanced);
    let survive = (1.0 - delta).powi(k as i32) * (1.0 - delta_prime);
    let delta_tilde = match mode {
        DeltaMode::Standard => 1.0 - survive,
        DeltaMode::StrictPaperText => survive,
    };
    Ok((eps_tilde, delta_tilde))
}

/// Bernoulli-subsampling amplification: (ln(1 + r(e^ε̃ − 1)), r·δ̃).
pub fn amplify(eps_tilde: f64, delta_tilde: f64, rate: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Argument(format!(
            "sampler rate must lie in [0,1], got {}",
            rate
        )));
    }
    Ok((
        (1.0 + rate * (eps_tilde.exp() - 1.0)).ln(),
        rate * delta_tilde,
    ))
}

/// Full chain: base -> compose over k = L·N steps -> amplify by r.
pub fn feddep_budget(input: &AccountantInput) -> Result<PrivacyBudget> {
    if input.depth == 0 || input.epochs == 0 {
        return Err(Error::Argument("depth and epochs must be >= 1".into()));
    }
    let (e0, d0) = nfdp_base(input.d_min, input.fanout)?;
    let k = input.depth * input.epochs;
    let (e1, d1) = compose(e0, d0, k, input.delta_prime, input.delta_mode)?;
    let (e2, d2) = amplify(e1, d1, input.rate)?;
    Ok(PrivacyBudget {
        epsilon: e2,
        delta: d2,
        trace: vec![
            ("base".to_string(), e0, d0),
            ("composed".to_string(), e1, d1),
            ("amplified".to_string(), e2, d2),
        ],
    })
}

/// Budget for a client's impaired view: D is the minimum relevant degree
/// over the receptive fields, and an isolated retained node violates the
/// degree precondition.
pub fn budget_for_graph(
    view: &ImpairedView,
    fanout: usize,
    depth: usize,
    epochs: usize,
    rate: f64,
    delta_prime: f64,
    delta_mode: DeltaMode,
) -> Result<PrivacyBudget> {
    let d_min = min_retained_degree(view, depth.max(1))?;
    if d_min == 0 {
        let offender = view
            .retained()
            .iter()
            .copied()
            .find(|&v| view.retained_degree(v) == 0)
            .unwrap_or(0);
        return Err(Error::State(format!(
            "degree precondition violated: retained node {} is isolated",
            offender
        )));
    }
    feddep_budget(&AccountantInput {
        d_min,
        fanout,
        depth,
        epochs,
        rate,
        delta_prime,
        delta_mode,
    })
}
