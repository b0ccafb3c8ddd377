//! Outer coordinate descent over the four posterior blocks with free-energy
//! tracking.
//!
//! One cycle updates, in configurable order: the chain posterior (structured
//! mean field), the emission posterior (per-row EP or exact Gaussian), the
//! noise precision (conjugate gamma) and the weights (EP for `sig`,
//! penalized point estimation for the continuous-time families). The free
//! energy is recorded after every full cycle.
//!
//! In `variational-em` mode with a Gaussian prior on the emission weights,
//! every term of the composite free energy is evaluated with the exact same
//! expressions the block updates optimize, so the trace is non-increasing by
//! construction. With EP blocks the Gaussian-projected expectations act as a
//! surrogate: well defined at every point, but not a bound, and convergence
//! is not guaranteed; the loop detects stalls and stops instead of hanging.

use rayon::prelude::*;

use crate::chains::{self, ChainPosterior, EmissionMoments, SweepConfig};
use crate::emission::{self, EmissionPosterior, GammaPosterior};
use crate::ep::EPConfig;
use crate::error::{Error, Result};
use crate::model::{CPrior, Dataset, ModelSpec, SparseRowMatrix};
use crate::numeric::{QuadLadder, LN_2PI};
use crate::transitions::{ChainWeights, TransitionFamily};
use crate::weights::{self, ChainWeightPosterior, OptimConfig, WeightPosterior};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Point estimates for the weights; exact coordinate descent when the
    /// emission prior is Gaussian.
    VariationalEm,
    /// EP wherever a Gaussian site approximation exists (`q_c` always, `q_w`
    /// for `sig`; the tp families still estimate their weights).
    FactoredEp,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::VariationalEm => "variational-em",
            Mode::FactoredEp => "factored-ep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "variational-em" => Ok(Mode::VariationalEm),
            "factored-ep" => Ok(Mode::FactoredEp),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    States,
    Emission,
    Noise,
    Weights,
}

impl Block {
    fn name(&self) -> &'static str {
        match self {
            Block::States => "states",
            Block::Emission => "emission",
            Block::Noise => "noise",
            Block::Weights => "weights",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub max_outer: usize,
    /// Relative free-energy change below which the loop stops.
    pub outer_tol: f64,
    pub update_order: [Block; 4],
    pub seed: u64,
    pub mode: Mode,
    pub ep: EPConfig,
    pub chain_tol: f64,
    pub chain_max_sweeps: usize,
    /// Jitter the initial chain means by uniform(-0.01, 0.01), seeded.
    pub jitter_init: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_outer: 100,
            outer_tol: 1e-6,
            update_order: [Block::States, Block::Emission, Block::Noise, Block::Weights],
            seed: 0,
            mode: Mode::VariationalEm,
            ep: EPConfig::default(),
            chain_tol: 1e-6,
            chain_max_sweeps: 50,
            jitter_init: false,
        }
    }
}

impl LoopConfig {
    fn validate(&self) -> Result<()> {
        let mut seen = [false; 4];
        for b in self.update_order {
            let idx = match b {
                Block::States => 0,
                Block::Emission => 1,
                Block::Noise => 2,
                Block::Weights => 3,
            };
            seen[idx] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config(
                "update order must be a permutation of the four blocks".into(),
            ));
        }
        Ok(())
    }
}

/// All four approximate posteriors plus convergence metadata.
#[derive(Debug, Clone)]
pub struct RunState {
    pub q_s: ChainPosterior,
    pub q_c: EmissionPosterior,
    pub q_w: WeightPosterior,
    pub q_v: GammaPosterior,
    pub free_energy_trace: Vec<f64>,
    pub iteration: usize,
    pub converged: bool,
    pub oscillating: bool,
}

/// Composite free energy split into the pieces the report exposes. In
/// `variational-em` mode the weight entropy is zero and the prior term is
/// the plain log prior at the point estimate.
#[derive(Debug, Clone, Copy)]
pub struct FreeEnergyReport {
    pub total: f64,
    /// Negative expected emission log likelihood.
    pub emission: f64,
    /// Negative expected transition log probabilities (counts times tables).
    pub transitions: f64,
    pub c_prior: f64,
    pub w_prior: f64,
    pub v_prior: f64,
    pub neg_entropy_s: f64,
    pub neg_entropy_c: f64,
    pub neg_entropy_w: f64,
    pub neg_entropy_v: f64,
}

impl FreeEnergyReport {
    pub fn components(&self) -> [(&'static str, f64); 9] {
        [
            ("emission", self.emission),
            ("transitions", self.transitions),
            ("c_prior", self.c_prior),
            ("w_prior", self.w_prior),
            ("v_prior", self.v_prior),
            ("neg_entropy_s", self.neg_entropy_s),
            ("neg_entropy_c", self.neg_entropy_c),
            ("neg_entropy_w", self.neg_entropy_w),
            ("neg_entropy_v", self.neg_entropy_v),
        ]
    }

    /// The Gaussian-gamma sub-model part: emissions, the priors on `C` and
    /// `v`, and the matching entropies. Equals the exact negative log
    /// evidence of the emission sub-model when the chains are pinned and the
    /// remaining blocks sit at their exact conjugate posteriors.
    pub fn gaussian_submodel(&self) -> f64 {
        self.emission + self.c_prior + self.v_prior + self.neg_entropy_c + self.neg_entropy_v
    }
}

fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Initial state: uninformative chain means (optionally jittered), prior
/// moments for the emission weights and the noise, prior blocks or
/// `log w = log 0.1` for the input weights.
pub fn init_state(spec: &ModelSpec, cfg: &LoopConfig) -> Result<RunState> {
    let mut q_s = ChainPosterior::init(spec.n_s, spec.n_t, spec.clamp_start);
    if cfg.jitter_init {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(splitmix(cfg.seed, 1));
        let start = usize::from(spec.clamp_start);
        for i in 0..spec.n_s {
            for t in start..spec.n_t {
                q_s.mu[(i, t)] += 0.02 * rng.random::<f64>() - 0.01;
            }
        }
    }
    let q_c = EmissionPosterior::from_prior(spec)?;
    let q_v = GammaPosterior {
        shape: spec.hyper.v_prior.shape,
        rate: spec.hyper.v_prior.rate,
    };
    let chains_w: Vec<ChainWeightPosterior> = (0..spec.n_s)
        .map(|_| match spec.transition_family {
            TransitionFamily::Sig => weights::sig_prior_blocks(spec.n_x, &spec.hyper),
            TransitionFamily::TpScaled => {
                ChainWeightPosterior::Point(ChainWeights {
                    w_plus: vec![0.1; spec.n_x],
                    w_minus: vec![0.1; spec.n_x],
                    b_plus: 0.0,
                    b_minus: 0.0,
                })
            }
            TransitionFamily::TpExp => ChainWeightPosterior::Point(ChainWeights {
                w_plus: vec![0.1; spec.n_x],
                w_minus: vec![0.1; spec.n_x],
                b_plus: spec.hyper.bias_prior.mean,
                b_minus: spec.hyper.bias_prior.mean,
            }),
        })
        .collect();
    Ok(RunState {
        q_s,
        q_c,
        q_w: WeightPosterior { chains: chains_w },
        q_v,
        free_energy_trace: Vec::new(),
        iteration: 0,
        converged: false,
        oscillating: false,
    })
}

fn emission_moments(state: &RunState, spec: &ModelSpec, data: &Dataset) -> EmissionMoments {
    EmissionMoments {
        ct_y: state.q_c.ct_y(spec.n_s, &data.y),
        ctc: state.q_c.second_moment(spec.n_s),
    }
}

fn edge_tables(
    state: &RunState,
    spec: &ModelSpec,
    data: &Dataset,
    ladder: &QuadLadder,
) -> Result<Vec<Vec<[f64; 4]>>> {
    state
        .q_w
        .chains
        .iter()
        .map(|cw| {
            weights::expected_log_transitions(
                cw,
                data,
                spec.transition_family,
                spec.hyper.b0,
                ladder,
            )
        })
        .collect()
}

fn update_states(
    state: &mut RunState,
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &LoopConfig,
    ladder: &QuadLadder,
) -> Result<()> {
    let moments = emission_moments(state, spec, data);
    let edges = edge_tables(state, spec, data, ladder)?;
    let sweep = SweepConfig {
        tol: cfg.chain_tol,
        max_sweeps: cfg.chain_max_sweeps,
        clamp_start: spec.clamp_start,
    };
    chains::sweep_chains(&mut state.q_s, &moments, state.q_v.mean(), &edges, &sweep)?;
    Ok(())
}

fn update_emission(state: &mut RunState, spec: &ModelSpec, data: &Dataset, cfg: &LoopConfig) -> Result<()> {
    let c = spec.empty_c()?;
    let v_mean = state.q_v.mean();
    let rows: Result<Vec<_>> = (0..spec.n_y)
        .into_par_iter()
        .map(|i| {
            let problem =
                emission::assemble_row_problem(i, data, &state.q_s, v_mean, c.row_support(i));
            emission::solve_row(&problem, &spec.hyper.c_prior, &cfg.ep)
        })
        .collect();
    state.q_c = EmissionPosterior { rows: rows? };
    Ok(())
}

fn update_noise(state: &mut RunState, spec: &ModelSpec, data: &Dataset) -> Result<()> {
    state.q_v = emission::update_noise(data, &state.q_s, &state.q_c, &spec.hyper.v_prior)?;
    Ok(())
}

fn update_weights(state: &mut RunState, spec: &ModelSpec, data: &Dataset, cfg: &LoopConfig) -> Result<()> {
    let eps = weights::expected_counts(&state.q_s);
    let family = spec.transition_family;
    match (family, cfg.mode) {
        (TransitionFamily::Sig, Mode::FactoredEp) => {
            let chains: Result<Vec<_>> = (0..spec.n_s)
                .into_par_iter()
                .map(|i| weights::infer_weights_sig(i, &eps, data, &spec.hyper, &cfg.ep))
                .collect();
            state.q_w = WeightPosterior { chains: chains? };
        }
        (TransitionFamily::Sig, Mode::VariationalEm) => {
            return Err(Error::Config(
                "sig has no point-estimation mode; use factored-ep".into(),
            ));
        }
        _ => {
            let prev: Vec<ChainWeights> = state
                .q_w
                .chains
                .iter()
                .map(|cw| cw.point(spec.n_x))
                .collect();
            let chains: Result<Vec<_>> = (0..spec.n_s)
                .into_par_iter()
                .map(|i| {
                    let optim = OptimConfig {
                        seed: splitmix(cfg.seed, 1000 + i as u64),
                        ..OptimConfig::default()
                    };
                    let warm = if state.iteration == 0 { None } else { Some(&prev[i]) };
                    weights::estimate_weights_tp(i, &eps, data, family, &spec.hyper, &optim, warm)
                        .map(|(w, _)| ChainWeightPosterior::Point(w))
                })
                .collect();
            state.q_w = WeightPosterior { chains: chains? };
        }
    }
    Ok(())
}

/// Composite free energy of the current state.
pub fn free_energy(state: &RunState, spec: &ModelSpec, data: &Dataset) -> Result<FreeEnergyReport> {
    let n_data = (spec.n_y * spec.n_t) as f64;
    let e_res = emission::expected_residual(data, &state.q_s, &state.q_c);
    let emission_term =
        -(0.5 * n_data * (state.q_v.expected_log() - LN_2PI) - 0.5 * state.q_v.mean() * e_res);

    let ladder = QuadLadder::new(state_quad_nodes(state));
    let tables = edge_tables(state, spec, data, &ladder)?;
    let eps = weights::expected_counts(&state.q_s);
    let mut transitions_term = 0.0;
    for i in 0..spec.n_s {
        for t in 0..spec.n_t - 1 {
            for k in 0..4 {
                let e = eps.eps[i][t][k];
                if e > 0.0 {
                    transitions_term -= e * tables[i][t][k];
                }
            }
        }
    }
    // deterministic start under the clamp contributes log 1 = 0
    if !spec.clamp_start {
        transitions_term -= spec.n_s as f64 * 0.5f64.ln();
    }

    let c_prior = -state.q_c.expected_log_prior(&spec.hyper.c_prior);

    let mut w_prior = 0.0;
    let mut neg_entropy_w = 0.0;
    for cw in &state.q_w.chains {
        match cw {
            ChainWeightPosterior::Point(w) => {
                w_prior -= weights::point_log_prior(spec.transition_family, w, &spec.hyper)?;
            }
            ChainWeightPosterior::Ep { plus, minus } => {
                w_prior -= weights::block_expected_log_prior(plus, &spec.hyper);
                w_prior -= weights::block_expected_log_prior(minus, &spec.hyper);
                neg_entropy_w -= plus.entropy() + minus.entropy();
            }
        }
    }

    let vp = &spec.hyper.v_prior;
    let v_prior = -(vp.shape * vp.rate.ln() - statrs::function::gamma::ln_gamma(vp.shape)
        + (vp.shape - 1.0) * state.q_v.expected_log()
        - vp.rate * state.q_v.mean());

    let neg_entropy_s = -state.q_s.entropy.iter().sum::<f64>();
    let neg_entropy_c = -state.q_c.entropy();
    let neg_entropy_v = -state.q_v.entropy();

    let total = emission_term
        + transitions_term
        + c_prior
        + w_prior
        + v_prior
        + neg_entropy_s
        + neg_entropy_c
        + neg_entropy_w
        + neg_entropy_v;
    if !total.is_finite() {
        return Err(Error::NonFinite("free energy".into()));
    }
    Ok(FreeEnergyReport {
        total,
        emission: emission_term,
        transitions: transitions_term,
        c_prior,
        w_prior,
        v_prior,
        neg_entropy_s,
        neg_entropy_c,
        neg_entropy_w,
        neg_entropy_v,
    })
}

fn state_quad_nodes(_state: &RunState) -> usize {
    EPConfig::default().quadrature_nodes
}

/// Run the outer loop to convergence or `max_outer` cycles.
pub fn run_inference(spec: &ModelSpec, data: &Dataset, cfg: &LoopConfig) -> Result<RunState> {
    spec.validate()?;
    data.validate(spec)?;
    cfg.validate()?;
    if spec.transition_family == TransitionFamily::Sig && cfg.mode == Mode::VariationalEm {
        return Err(Error::Config(
            "sig has no point-estimation mode; use factored-ep".into(),
        ));
    }

    let mut cfg = cfg.clone();
    let mut state = init_state(spec, &cfg)?;
    let ladder = QuadLadder::new(cfg.ep.quadrature_nodes);

    let wrap = |block: Block, iteration: usize| {
        move |e: Error| Error::BlockFailed {
            block: block.name(),
            iteration,
            source: Box::new(e),
        }
    };

    let mut best_f = f64::INFINITY;
    let mut stalled_cycles = 0usize;
    let mut damping_halved = false;

    for cycle in 1..=cfg.max_outer {
        for block in cfg.update_order {
            match block {
                Block::States => {
                    update_states(&mut state, spec, data, &cfg, &ladder)
                        .map_err(wrap(block, cycle))?;
                }
                Block::Emission => {
                    update_emission(&mut state, spec, data, &cfg).map_err(wrap(block, cycle))?;
                }
                Block::Noise => {
                    update_noise(&mut state, spec, data).map_err(wrap(block, cycle))?;
                }
                Block::Weights => {
                    update_weights(&mut state, spec, data, &cfg).map_err(wrap(block, cycle))?;
                }
            }
        }
        let report = free_energy(&state, spec, data).map_err(wrap(Block::Noise, cycle))?;
        let f = report.total;
        state.iteration = cycle;
        state.free_energy_trace.push(f);

        if state.free_energy_trace.len() >= 2 {
            let prev = state.free_energy_trace[state.free_energy_trace.len() - 2];
            if (f - prev).abs() / (1.0 + f.abs()) < cfg.outer_tol {
                state.converged = true;
                break;
            }
        }

        // stall detection for the EP surrogate (no descent guarantee there)
        if cfg.mode == Mode::FactoredEp {
            if f < best_f - 1e-12 {
                best_f = f;
                stalled_cycles = 0;
            } else {
                stalled_cycles += 1;
                if stalled_cycles >= 5 {
                    if !damping_halved {
                        cfg.ep.damping *= 0.5;
                        damping_halved = true;
                        stalled_cycles = 0;
                    } else {
                        state.oscillating = true;
                        break;
                    }
                }
            }
        }
    }
    Ok(state)
}

/// Point summaries of a finished run.
#[derive(Debug, Clone)]
pub struct Estimates {
    pub c_hat: SparseRowMatrix,
    pub c_var: Vec<f64>,
    pub w_hat: Vec<ChainWeights>,
    pub v_hat: f64,
    /// Singleton chain means.
    pub s_marginals: nalgebra::DMatrix<f64>,
}

/// Deterministic extraction: posterior means for Gaussian emission priors,
/// the soft-threshold mode for double-exponential priors, the point
/// estimates or EP means for the weights, the posterior mean for the noise.
pub fn extract_estimates(state: &RunState, spec: &ModelSpec, data: &Dataset) -> Result<Estimates> {
    let mut c_hat = spec.empty_c()?;
    let mut c_var = Vec::with_capacity(c_hat.nnz());
    match spec.hyper.c_prior {
        CPrior::Gaussian { .. } | CPrior::Flat => {
            c_hat = state.q_c.mean_matrix(spec)?;
            for row in &state.q_c.rows {
                for a in 0..row.support.len() {
                    c_var.push(row.cov[(a, a)]);
                }
            }
        }
        CPrior::DoubleExponential { rate } => {
            let v_mean = state.q_v.mean();
            for i in 0..spec.n_y {
                let support = state.q_c.rows[i].support.clone();
                let problem =
                    emission::assemble_row_problem(i, data, &state.q_s, v_mean, &support);
                let mode = emission::row_mode_soft_threshold(&problem, rate, 1e-8);
                let vals: Vec<f64> = mode.iter().cloned().collect();
                c_hat.set_row_values(i, &vals);
                for a in 0..support.len() {
                    c_var.push(state.q_c.rows[i].cov[(a, a)]);
                }
            }
        }
    }
    let w_hat = state
        .q_w
        .chains
        .iter()
        .map(|cw| cw.point(spec.n_x))
        .collect();
    Ok(Estimates {
        c_hat,
        c_var,
        w_hat,
        v_hat: state.q_v.mean(),
        s_marginals: state.q_s.mu.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GammaPrior, GaussianPrior, Hyperparameters, WPrior};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::gamma::ln_gamma;

    fn small_spec(n_s: usize, n_y: usize, n_t: usize) -> ModelSpec {
        let mut structure = Vec::new();
        for i in 0..n_y {
            structure.push((i, i % n_s));
            if n_s > 1 && i % 3 == 0 {
                structure.push((i, (i + 1) % n_s));
            }
        }
        ModelSpec {
            n_s,
            n_y,
            n_x: 2,
            n_t,
            transition_family: TransitionFamily::TpScaled,
            c_structure: structure,
            hyper: Hyperparameters {
                w_prior: WPrior::Exponential { rate: 1.0 },
                v_prior: GammaPrior { shape: 2.0, rate: 0.2 },
                ..Hyperparameters::default()
            },
            clamp_start: true,
        }
    }

    fn random_data(spec: &ModelSpec, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            x: DMatrix::from_fn(spec.n_x, spec.n_t, |_, _| rng.random::<f64>()),
            delta: vec![1.0; spec.n_t - 1],
            y: DMatrix::from_fn(spec.n_y, spec.n_t, |_, _| 2.0 * rng.random::<f64>() - 1.0),
        }
    }

    #[test]
    fn trace_non_increasing_small_em_run() {
        let spec = small_spec(1, 3, 3);
        let data = random_data(&spec, 5);
        let cfg = LoopConfig::default();
        let state = run_inference(&spec, &data, &cfg).unwrap();
        assert!(!state.free_energy_trace.is_empty());
        for w in state.free_energy_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-8,
                "free energy increased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert_eq!(state.free_energy_trace.len(), state.iteration);
    }

    #[test]
    fn noise_only_data_recovers_precision_scale() {
        // Y drawn with C = 0: posterior C shrinks to the prior mean, <v>
        // approaches n_y n_t / sum ||y||^2
        let spec = small_spec(2, 6, 12);
        let mut data = random_data(&spec, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sigma = 0.5f64;
        for v in data.y.iter_mut() {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            *v = sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        let state = run_inference(&spec, &data, &LoopConfig::default()).unwrap();
        let sum_sq: f64 = data.y.iter().map(|v| v * v).sum();
        let expect_scale = (spec.n_y * spec.n_t) as f64 / sum_sq;
        assert!(
            (state.q_v.mean() / expect_scale - 1.0).abs() < 0.3,
            "v mean {} vs scale {}",
            state.q_v.mean(),
            expect_scale
        );
        // c means shrunk toward 0 relative to the prior scale
        for row in &state.q_c.rows {
            for m in row.mean.iter() {
                assert!(m.abs() < 1.0, "unshrunk mean {m}");
            }
        }
    }

    #[test]
    fn runs_are_bit_deterministic() {
        let spec = small_spec(2, 5, 6);
        let data = random_data(&spec, 3);
        let cfg = LoopConfig {
            seed: 42,
            jitter_init: true,
            ..LoopConfig::default()
        };
        let a = run_inference(&spec, &data, &cfg).unwrap();
        let b = run_inference(&spec, &data, &cfg).unwrap();
        assert_eq!(a.free_energy_trace, b.free_energy_trace);
        assert_eq!(a.q_s.mu, b.q_s.mu);
        assert_eq!(a.q_v, b.q_v);
    }

    #[test]
    fn stationarity_at_convergence() {
        let spec = small_spec(2, 6, 8);
        let data = random_data(&spec, 11);
        let cfg = LoopConfig {
            outer_tol: 1e-10,
            max_outer: 300,
            ..LoopConfig::default()
        };
        let state = run_inference(&spec, &data, &cfg).unwrap();
        assert!(state.converged);
        // re-running single blocks moves parameters less than 10 * tol scale
        let mut s2 = state.clone();
        let ladder = QuadLadder::new(cfg.ep.quadrature_nodes);
        update_states(&mut s2, &spec, &data, &cfg, &ladder).unwrap();
        let dmu = (&s2.q_s.mu - &state.q_s.mu).abs().max();
        assert!(dmu < 1e-5, "states moved {dmu}");
        let mut s3 = state.clone();
        update_noise(&mut s3, &spec, &data).unwrap();
        assert!((s3.q_v.mean() - state.q_v.mean()).abs() < 1e-5);
    }

    #[test]
    fn sig_em_mode_rejected() {
        let mut spec = small_spec(1, 3, 3);
        spec.transition_family = TransitionFamily::Sig;
        spec.hyper.w_prior = WPrior::DoubleExponential { rate: 1.0 };
        let data = random_data(&spec, 2);
        let cfg = LoopConfig::default();
        assert!(matches!(
            run_inference(&spec, &data, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sig_factored_ep_runs_and_terminates() {
        let mut spec = small_spec(2, 5, 8);
        spec.transition_family = TransitionFamily::Sig;
        spec.hyper.w_prior = WPrior::DoubleExponential { rate: 1.0 };
        spec.hyper.bias_prior = GaussianPrior { mean: -2.0, variance: 1.0 };
        let data = random_data(&spec, 8);
        let cfg = LoopConfig {
            mode: Mode::FactoredEp,
            max_outer: 40,
            ..LoopConfig::default()
        };
        let state = run_inference(&spec, &data, &cfg).unwrap();
        assert!(state.iteration <= 40);
        assert!(!state.free_energy_trace.is_empty());
        assert!(state.free_energy_trace.iter().all(|f| f.is_finite()));
    }

    #[test]
    fn free_energy_components_sum_to_total() {
        let spec = small_spec(2, 4, 5);
        let data = random_data(&spec, 13);
        let state = run_inference(&spec, &data, &LoopConfig::default()).unwrap();
        let report = free_energy(&state, &spec, &data).unwrap();
        let sum: f64 = report.components().iter().map(|(_, v)| v).sum();
        assert_relative_eq!(sum, report.total, epsilon = 1e-10);
    }

    #[test]
    fn gaussian_submodel_matches_exact_evidence() {
        // chains pinned at -1, q_c = prior, q_v = conjugate posterior: the
        // Gaussian-gamma component subtotal equals the exact negative log
        // evidence of the noise-only sub-model
        let spec = small_spec(2, 3, 4);
        let data = random_data(&spec, 21);
        let mut state = init_state(&spec, &LoopConfig::default()).unwrap();
        // pin the chains: point mass on all -1 paths
        state.q_s.mu.fill(-1.0);
        for i in 0..spec.n_s {
            for t in 0..spec.n_t - 1 {
                state.q_s.pair[i][t] = [1.0, 0.0, 0.0, 0.0];
            }
            state.q_s.entropy[i] = 0.0;
            state.q_s.log_z[i] = 0.0;
        }
        // conjugate noise posterior given a = 0
        let sum_sq: f64 = data.y.iter().map(|v| v * v).sum();
        let n = (spec.n_y * spec.n_t) as f64;
        let vp = spec.hyper.v_prior;
        state.q_v = GammaPosterior {
            shape: vp.shape + 0.5 * n,
            rate: vp.rate + 0.5 * sum_sq,
        };
        let report = free_energy(&state, &spec, &data).unwrap();

        // closed-form evidence of int prod N(y; 0, 1/v) Gamma(v) dv
        let evidence = vp.shape * vp.rate.ln() - ln_gamma(vp.shape) + ln_gamma(vp.shape + 0.5 * n)
            - (vp.shape + 0.5 * n) * (vp.rate + 0.5 * sum_sq).ln()
            - 0.5 * n * LN_2PI;
        assert_relative_eq!(report.gaussian_submodel(), -evidence, epsilon = 1e-8);
    }

    #[test]
    fn zero_observation_row_shifts_free_energy_by_constant() {
        // an extra all-zero observation row with empty support changes the
        // free energy by exactly its Gaussian constant
        let spec = small_spec(2, 3, 4);
        let data = random_data(&spec, 31);
        let state = run_inference(&spec, &data, &LoopConfig::default()).unwrap();
        let f1 = free_energy(&state, &spec, &data).unwrap();

        let mut spec2 = spec.clone();
        spec2.n_y += 1;
        let mut data2 = data.clone();
        data2.y = data.y.clone().insert_row(spec.n_y, 0.0);
        let mut state2 = state.clone();
        state2.q_c.rows.push(crate::emission::RowPosterior {
            support: vec![],
            mean: DVector::zeros(0),
            cov: DMatrix::zeros(0, 0),
            log_z: 0.0,
            converged: true,
            ridge: 0.0,
        });
        let f2 = free_energy(&state2, &spec2, &data2).unwrap();
        let constant = -(spec.n_t as f64) * 0.5 * (state.q_v.expected_log() - LN_2PI);
        assert_relative_eq!(f2.total - f1.total, constant, epsilon = 1e-10);
    }

    #[test]
    fn uniform_unclamped_chain_entropy_term() {
        let mut spec = small_spec(1, 2, 6);
        spec.clamp_start = false;
        let data = random_data(&spec, 41);
        let state = init_state(&spec, &LoopConfig::default()).unwrap();
        let report = free_energy(&state, &spec, &data).unwrap();
        assert_relative_eq!(
            report.neg_entropy_s,
            -(spec.n_t as f64) * 2.0_f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn extraction_modes() {
        let spec = small_spec(2, 4, 6);
        let data = random_data(&spec, 51);
        let state = run_inference(&spec, &data, &LoopConfig::default()).unwrap();
        let est = extract_estimates(&state, &spec, &data).unwrap();
        // gaussian prior: means pass through
        let means = state.q_c.mean_matrix(&spec).unwrap();
        assert_eq!(est.c_hat.values(), means.values());
        assert_eq!(est.v_hat, state.q_v.mean());
        assert_eq!(est.w_hat.len(), spec.n_s);

        // laplace prior: mode extraction soft-thresholds
        let mut spec2 = spec.clone();
        spec2.hyper.c_prior = CPrior::DoubleExponential { rate: 50.0 };
        let state2 = run_inference(&spec2, &data, &LoopConfig::default()).unwrap();
        let est2 = extract_estimates(&state2, &spec2, &data).unwrap();
        // with a heavy shrinkage rate, most mode entries collapse to zero
        let zeros = est2.c_hat.values().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 0, "no entries thresholded to zero");
    }
}
