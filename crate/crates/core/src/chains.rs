//! Path-factorized structured mean field over the binary chains.
//!
//! Each chain keeps its full temporal distribution; cross-chain coupling
//! enters only through the current singleton means of the other chains. A
//! chain update assembles effective node potentials from the expected
//! emission terms and edge potentials from the expected log transition
//! probabilities, then runs an exact log-space forward-backward pass.
//!
//! State order everywhere is (-1, +1); a pairwise table `[f64; 4]` is indexed
//! by `2 * (s_t == +1) + (s_{t+1} == +1)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::Dataset;

use crate::numeric::{log_sum_exp, log_sum_exp2};

/// Index into a 2x2 pairwise table for states `(s1, s2)` in {-1, +1}.
pub fn pair_index(s1: i8, s2: i8) -> usize {
    2 * usize::from(s1 == 1) + usize::from(s2 == 1)
}

/// Singleton and pairwise marginals of all chains plus per-chain log
/// normalizers.
#[derive(Debug, Clone)]
pub struct ChainPosterior {
    /// `n_s` x `n_t` singleton means `E[s_t^i]`.
    pub mu: DMatrix<f64>,
    /// Per chain, per step, the 2x2 joint table `q(s_t, s_{t+1})`.
    pub pair: Vec<Vec<[f64; 4]>>,
    /// Per-chain forward-pass log normalizers.
    pub log_z: Vec<f64>,
    /// Per-chain entropies of the chain distribution.
    pub entropy: Vec<f64>,
}

impl ChainPosterior {
    /// Uninformative start: means zero except the clamped first step.
    pub fn init(n_s: usize, n_t: usize, clamp_start: bool) -> Self {
        let mut mu = DMatrix::zeros(n_s, n_t);
        if clamp_start {
            for i in 0..n_s {
                mu[(i, 0)] = -1.0;
            }
        }
        let quarter = [0.25; 4];
        let mut pair = vec![vec![quarter; n_t - 1]; n_s];
        if clamp_start {
            for tables in pair.iter_mut() {
                tables[0] = [0.5, 0.5, 0.0, 0.0];
            }
        }
        // entropy and log normalizer of the uniform start (zero potentials)
        let free_steps = if clamp_start { n_t - 1 } else { n_t };
        let h = free_steps as f64 * 2.0_f64.ln();
        ChainPosterior {
            mu,
            pair,
            log_z: vec![h; n_s],
            entropy: vec![h; n_s],
        }
    }

    /// Marginal probability `q(s_t^i = +1)`.
    pub fn prob_up(&self, chain: usize, t: usize) -> f64 {
        0.5 * (1.0 + self.mu[(chain, t)])
    }

    pub fn n_chains(&self) -> usize {
        self.mu.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.mu.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n_chains() {
            for t in 0..self.n_steps() - 1 {
                let tab = &self.pair[i][t];
                let sum: f64 = tab.iter().sum();
                if tab.iter().any(|&p| p < -1e-12) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::DomainViolation(format!(
                        "pairwise table of chain {i} step {t} is not a distribution"
                    )));
                }
                // table marginals must reproduce the singleton means
                let up_t = tab[pair_index(1, -1)] + tab[pair_index(1, 1)];
                let up_next = tab[pair_index(-1, 1)] + tab[pair_index(1, 1)];
                if (2.0 * up_t - 1.0 - self.mu[(i, t)]).abs() > 1e-9
                    || (2.0 * up_next - 1.0 - self.mu[(i, t + 1)]).abs() > 1e-9
                {
                    return Err(Error::DomainViolation(format!(
                        "pairwise table of chain {i} step {t} disagrees with singleton means"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Effective potentials of one chain: `node_log_pot[t][s]` and
/// `edge_log_pot[t][(s1, s2)]` in log space.
#[derive(Debug, Clone)]
pub struct EffectivePotentials {
    pub node_log_pot: Vec<[f64; 2]>,
    pub edge_log_pot: Vec<[f64; 4]>,
}

/// Moments of the emission posterior needed by the chain updates:
/// `ct_y[(j, t)] = [E[C]^T y_t]_j` and the full second moment
/// `m = E[C^T C]` (dense `n_s` x `n_s`).
#[derive(Debug, Clone)]
pub struct EmissionMoments {
    pub ct_y: DMatrix<f64>,
    pub ctc: DMatrix<f64>,
}

/// Node log potentials of one chain given everybody else's current means.
///
/// For state `s` at time `t`:
/// `0.5 <v> s ( [E[C]'y_t]_i - [E[C'C] 1]_i / 2 - sum_{j != i} E[C'C]_{ij} mu_t^j / 2 )`,
/// the diagonal quadratic term being constant because `s^2 = 1`.
pub fn build_node_potentials(
    moments: &EmissionMoments,
    q_v_mean: f64,
    mu: &DMatrix<f64>,
    chain: usize,
) -> Vec<[f64; 2]> {
    let n_t = mu.ncols();
    let n_s = mu.nrows();
    let row_sum: f64 = (0..n_s).map(|j| moments.ctc[(chain, j)]).sum();
    (0..n_t)
        .map(|t| {
            let mut cross = 0.0;
            for j in 0..n_s {
                if j != chain {
                    cross += moments.ctc[(chain, j)] * mu[(j, t)];
                }
            }
            let g = moments.ct_y[(chain, t)] - 0.5 * row_sum - 0.5 * cross;
            let a = 0.5 * q_v_mean * g;
            [-a, a]
        })
        .collect()
}

/// Exact marginals of one chain under the given potentials.
///
/// The chain distribution is proportional to
/// `prod_t exp(node_t(s_t)) prod_t exp(edge_t(s_t, s_{t+1}))`; `clamp_start`
/// pins `s_1 = -1`. Returns singleton marginals (probability of +1 per step),
/// pairwise tables, the log normalizer and the entropy.
pub fn forward_backward(
    node_log_pot: &[[f64; 2]],
    edge_log_pot: &[[f64; 4]],
    clamp_start: bool,
) -> Result<(Vec<f64>, Vec<[f64; 4]>, f64, f64)> {
    let n_t = node_log_pot.len();
    if n_t == 0 || edge_log_pot.len() != n_t - 1 {
        return Err(Error::DimensionMismatch(
            "need n_t node potentials and n_t - 1 edge potentials".into(),
        ));
    }
    if node_log_pot.iter().flatten().any(|v| v.is_nan() || *v == f64::INFINITY)
        || edge_log_pot.iter().flatten().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("chain potentials".into()));
    }

    // forward pass, log space with running normalization
    let mut alpha = vec![[0.0f64; 2]; n_t];
    let mut log_z = 0.0;
    alpha[0] = node_log_pot[0];
    if clamp_start {
        alpha[0][1] = f64::NEG_INFINITY;
    }
    let shift = log_sum_exp(&alpha[0]);
    alpha[0][0] -= shift;
    alpha[0][1] -= shift;
    log_z += shift;
    for t in 1..n_t {
        let mut next = [f64::NEG_INFINITY; 2];
        for (s2, slot) in next.iter_mut().enumerate() {
            let from_m = alpha[t - 1][0] + edge_log_pot[t - 1][s2];
            let from_p = alpha[t - 1][1] + edge_log_pot[t - 1][2 + s2];
            *slot = log_sum_exp2(from_m, from_p) + node_log_pot[t][s2];
        }
        let shift = log_sum_exp(&next);
        next[0] -= shift;
        next[1] -= shift;
        log_z += shift;
        alpha[t] = next;
    }

    // backward pass
    let mut beta = vec![[0.0f64; 2]; n_t];
    for t in (0..n_t - 1).rev() {
        for s1 in 0..2 {
            let to_m = edge_log_pot[t][2 * s1] + node_log_pot[t + 1][0] + beta[t + 1][0];
            let to_p = edge_log_pot[t][2 * s1 + 1] + node_log_pot[t + 1][1] + beta[t + 1][1];
            beta[t][s1] = log_sum_exp2(to_m, to_p);
        }
        let shift = beta[t][0].max(beta[t][1]);
        beta[t][0] -= shift;
        beta[t][1] -= shift;
    }

    // singletons
    let mut up = vec![0.0; n_t];
    for t in 0..n_t {
        let lm = alpha[t][0] + beta[t][0];
        let lp = alpha[t][1] + beta[t][1];
        let z = log_sum_exp2(lm, lp);
        up[t] = (lp - z).exp();
    }

    // pairwise tables, renormalized explicitly
    let mut pairs = vec![[0.0f64; 4]; n_t - 1];
    for t in 0..n_t - 1 {
        let mut logs = [f64::NEG_INFINITY; 4];
        for s1 in 0..2 {
            for s2 in 0..2 {
                logs[2 * s1 + s2] = alpha[t][s1]
                    + edge_log_pot[t][2 * s1 + s2]
                    + node_log_pot[t + 1][s2]
                    + beta[t + 1][s2];
            }
        }
        let z = log_sum_exp(&logs);
        let mut sum = 0.0;
        for k in 0..4 {
            pairs[t][k] = (logs[k] - z).exp();
            sum += pairs[t][k];
        }
        for p in pairs[t].iter_mut() {
            *p /= sum;
        }
    }

    // entropy = log Z - E[log potentials]
    let mut exp_pot = 0.0;
    for t in 0..n_t {
        let q = [1.0 - up[t], up[t]];
        for s in 0..2 {
            if q[s] > 0.0 {
                exp_pot += q[s] * node_log_pot[t][s];
            }
        }
    }
    for t in 0..n_t - 1 {
        for k in 0..4 {
            if pairs[t][k] > 0.0 {
                exp_pot += pairs[t][k] * edge_log_pot[t][k];
            }
        }
    }
    let entropy = log_z - exp_pot;

    Ok((up, pairs, log_z, entropy))
}

/// Edge log potentials `<log p(s2 | s1)>` of one chain, from either the EP
/// weight posterior (quadrature over the projected Gaussian) or a point
/// estimate (plug-in log transition probabilities).
pub fn build_edge_potentials(
    w_posterior: &crate::weights::ChainWeightPosterior,
    data: &Dataset,
    family: crate::transitions::TransitionFamily,
    b0: f64,
    ladder: &crate::numeric::QuadLadder,
) -> Result<Vec<[f64; 4]>> {
    crate::weights::expected_log_transitions(w_posterior, data, family, b0, ladder)
}

/// Inner-loop settings of the chain sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub tol: f64,
    pub max_sweeps: usize,
    pub clamp_start: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            tol: 1e-6,
            max_sweeps: 50,
            clamp_start: true,
        }
    }
}

/// Cyclic per-chain updates until the means settle. Chain `i` rebuilds its
/// node potentials from the freshest means of every other chain
/// (Gauss-Seidel); edge potentials are fixed inputs computed once per outer
/// cycle.
pub fn sweep_chains(
    posterior: &mut ChainPosterior,
    moments: &EmissionMoments,
    q_v_mean: f64,
    edge_log_pot: &[Vec<[f64; 4]>],
    cfg: &SweepConfig,
) -> Result<usize> {
    let n_s = posterior.n_chains();
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut max_delta = 0.0f64;
        for i in 0..n_s {
            let node = build_node_potentials(moments, q_v_mean, &posterior.mu, i);
            let (up, pairs, log_z, entropy) =
                forward_backward(&node, &edge_log_pot[i], cfg.clamp_start)?;
            for (t, &p) in up.iter().enumerate() {
                let m = 2.0 * p - 1.0;
                max_delta = max_delta.max((m - posterior.mu[(i, t)]).abs());
                posterior.mu[(i, t)] = m;
            }
            posterior.pair[i] = pairs;
            posterior.log_z[i] = log_z;
            posterior.entropy[i] = entropy;
        }
        if max_delta < cfg.tol || sweeps >= cfg.max_sweeps {
            return Ok(sweeps);
        }
    }
}

/// Brute-force enumeration oracle over all `2^{n_t}` paths (tests and small
/// instances only).
pub fn enumerate_chain(
    node_log_pot: &[[f64; 2]],
    edge_log_pot: &[[f64; 4]],
    clamp_start: bool,
) -> (Vec<f64>, Vec<[f64; 4]>, f64) {
    let n_t = node_log_pot.len();
    assert!(n_t <= 20, "enumeration oracle limited to short chains");
    let mut up = vec![0.0; n_t];
    let mut pairs = vec![[0.0f64; 4]; n_t.saturating_sub(1)];
    let mut weights = Vec::with_capacity(1 << n_t);
    let mut paths = Vec::with_capacity(1 << n_t);
    for mask in 0u32..(1 << n_t) {
        let path: Vec<usize> = (0..n_t).map(|t| ((mask >> t) & 1) as usize).collect();
        if clamp_start && path[0] == 1 {
            continue;
        }
        let mut lw = 0.0;
        for t in 0..n_t {
            lw += node_log_pot[t][path[t]];
        }
        for t in 0..n_t - 1 {
            lw += edge_log_pot[t][2 * path[t] + path[t + 1]];
        }
        weights.push(lw);
        paths.push(path);
    }
    let log_z = log_sum_exp(&weights);
    for (lw, path) in weights.iter().zip(&paths) {
        let w = (lw - log_z).exp();
        for t in 0..n_t {
            if path[t] == 1 {
                up[t] += w;
            }
        }
        for t in 0..n_t - 1 {
            pairs[t][2 * path[t] + path[t + 1]] += w;
        }
    }
    (up, pairs, log_z)
}
