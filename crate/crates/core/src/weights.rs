//! Per-chain handling of the input-to-chain weights.
//!
//! The chain posterior supplies expected transition counts
//! `eps[(s1, s2)] = q(s_t = s1, s_{t+1} = s2)` per step. These act as
//! fractional responses in the weight subproblem:
//!
//! - `sig`: the (w+, b+) block sees a soft logistic regression with one
//!   fractional-count site per step and prior sites per coordinate, solved by
//!   EP; the (w-, b-) block is the mirror image and solves independently.
//! - `tp-scaled` / `tp-exp`: penalized point estimation of the expected
//!   complete-data log likelihood, by BFGS with backtracking line search;
//!   `tp-scaled` optimizes log-weights so positivity holds by construction.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chains::{pair_index, ChainPosterior};
use crate::ep::{self, EPConfig, GaussianSiteModel, Site, SiteKind};
use crate::error::{Error, Result};
use crate::model::{Dataset, GaussianPrior, Hyperparameters, WPrior};
use crate::numeric::{expected_log_sigmoid, QuadLadder, LN_2PI};
use crate::transitions::{self, ChainWeights, TransitionFamily};

/// Expected transition counts per chain and step, relabelled from the
/// pairwise tables; `eps[chain][t][pair_index(s1, s2)]`.
#[derive(Debug, Clone)]
pub struct ExpectedTransitionCounts {
    pub eps: Vec<Vec<[f64; 4]>>,
}

/// Expectation of the transition indicator over the pairwise marginals.
pub fn expected_counts(q_s: &ChainPosterior) -> ExpectedTransitionCounts {
    ExpectedTransitionCounts {
        eps: q_s.pair.clone(),
    }
}

/// Gaussian posterior block of one half of a `sig` weight problem, latent
/// order `(w_1 .. w_nx, bias)`.
#[derive(Debug, Clone)]
pub struct GaussianBlock {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_z: f64,
    pub converged: bool,
    pub ridge: f64,
}

impl GaussianBlock {
    /// Mean and variance of the projection `u = w . x + b`.
    pub fn project(&self, x_t: &[f64]) -> (f64, f64) {
        let mut a = DVector::zeros(self.mean.len());
        for (j, &x) in x_t.iter().enumerate() {
            a[j] = x;
        }
        a[self.mean.len() - 1] = 1.0;
        let sa = &self.cov * &a;
        (self.mean.dot(&a), a.dot(&sa).max(0.0))
    }

    pub fn entropy(&self) -> f64 {
        let k = self.mean.len();
        let chol = Cholesky::new(self.cov.clone()).expect("block covariance must be p.d.");
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        0.5 * (k as f64 * (1.0 + LN_2PI) + log_det)
    }
}

/// Weight treatment of one chain: EP blocks for `sig`, a point estimate for
/// the continuous-time families.
#[derive(Debug, Clone)]
pub enum ChainWeightPosterior {
    Ep {
        plus: GaussianBlock,
        minus: GaussianBlock,
    },
    Point(ChainWeights),
}

impl ChainWeightPosterior {
    /// Magnitude scores of the `(w+, w-)` coordinates, used for pattern
    /// recovery.
    pub fn weight_scores(&self, n_x: usize) -> Vec<f64> {
        match self {
            ChainWeightPosterior::Ep { plus, minus } => {
                let mut out = Vec::with_capacity(2 * n_x);
                for j in 0..n_x {
                    out.push(plus.mean[j].abs());
                }
                for j in 0..n_x {
                    out.push(minus.mean[j].abs());
                }
                out
            }
            ChainWeightPosterior::Point(w) => w
                .w_plus
                .iter()
                .chain(w.w_minus.iter())
                .map(|v| v.abs())
                .collect(),
        }
    }

    /// Point representation: EP means or the estimate itself.
    pub fn point(&self, n_x: usize) -> ChainWeights {
        match self {
            ChainWeightPosterior::Ep { plus, minus } => ChainWeights {
                w_plus: (0..n_x).map(|j| plus.mean[j]).collect(),
                w_minus: (0..n_x).map(|j| minus.mean[j]).collect(),
                b_plus: plus.mean[n_x],
                b_minus: minus.mean[n_x],
            },
            ChainWeightPosterior::Point(w) => w.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightPosterior {
    pub chains: Vec<ChainWeightPosterior>,
}

// ---------------------------------------------------------------------------
// sig: EP on the soft logistic regression
// ---------------------------------------------------------------------------

fn prior_sites(n_x: usize, w_prior: &WPrior, bias_prior: &GaussianPrior) -> Result<Vec<Site>> {
    let dim = n_x + 1;
    let mut sites = Vec::with_capacity(dim);
    for j in 0..n_x {
        let mut e = DVector::zeros(dim);
        e[j] = 1.0;
        let kind = match *w_prior {
            WPrior::DoubleExponential { rate } => SiteKind::LaplacePrior { rate },
            WPrior::Exponential { .. } => {
                return Err(Error::Config(
                    "exponential weight prior is reserved for tp-scaled estimation".into(),
                ))
            }
        };
        sites.push(Site::new(e, kind));
    }
    let mut e = DVector::zeros(dim);
    e[n_x] = 1.0;
    sites.push(Site::new(
        e,
        SiteKind::GaussianPrior {
            mean: bias_prior.mean,
            variance: bias_prior.variance,
        },
    ));
    Ok(sites)
}

fn solve_sig_block(
    data: &Dataset,
    eps_up: impl Fn(usize) -> (f64, f64),
    hyper: &Hyperparameters,
    cfg: &EPConfig,
) -> Result<GaussianBlock> {
    let n_x = data.x.nrows();
    let dim = n_x + 1;
    let mut sites = prior_sites(n_x, &hyper.w_prior, &hyper.bias_prior)?;
    for t in 0..data.y.ncols() - 1 {
        let (eps1, eps0) = eps_up(t);
        let mut a = DVector::zeros(dim);
        for j in 0..n_x {
            a[j] = data.x[(j, t)];
        }
        a[n_x] = 1.0;
        sites.push(Site::new(a, SiteKind::SoftLogistic { eps1, eps0 }));
    }
    let model = GaussianSiteModel::new(DVector::zeros(dim), DMatrix::zeros(dim, dim), sites)?;
    let mut sol = ep::ep_solve(&model, cfg)?;
    if !sol.converged && cfg.fraction > 0.5 {
        // fractional retry
        let mut softer = *cfg;
        softer.fraction = 0.5;
        softer.damping = 0.5 * cfg.damping;
        sol = ep::ep_solve(&model, &softer)?;
    }
    Ok(GaussianBlock {
        mean: sol.mean,
        cov: sol.cov,
        log_z: sol.log_evidence,
        converged: sol.converged,
        ridge: sol.ridge,
    })
}

/// EP inference of the `sig` weights of one chain. The rising block `(w+, b+)`
/// depends only on departures from -1 (`eps[(-1, .)]`), the falling block on
/// departures from +1.
pub fn infer_weights_sig(
    chain: usize,
    eps: &ExpectedTransitionCounts,
    data: &Dataset,
    hyper: &Hyperparameters,
    cfg: &EPConfig,
) -> Result<ChainWeightPosterior> {
    let tables = &eps.eps[chain];
    let plus = solve_sig_block(
        data,
        |t| (tables[t][pair_index(-1, 1)], tables[t][pair_index(-1, -1)]),
        hyper,
        cfg,
    )?;
    let minus = solve_sig_block(
        data,
        |t| (tables[t][pair_index(1, -1)], tables[t][pair_index(1, 1)]),
        hyper,
        cfg,
    )?;
    Ok(ChainWeightPosterior::Ep { plus, minus })
}

// ---------------------------------------------------------------------------
// tp families: penalized point estimation
// ---------------------------------------------------------------------------

/// Parameter layout of the estimation objective:
/// - `tp-scaled`: `rho = [log w+, log w-]` (length `2 n_x`),
/// - `tp-exp`: `[w+, b+, w-, b-]` (length `2 n_x + 2`).
pub fn param_len(family: TransitionFamily, n_x: usize) -> usize {
    match family {
        TransitionFamily::TpScaled => 2 * n_x,
        TransitionFamily::TpExp => 2 * n_x + 2,
        TransitionFamily::Sig => 0,
    }
}

fn unpack_tp_scaled(params: &[f64], n_x: usize) -> ChainWeights {
    ChainWeights {
        w_plus: params[..n_x].iter().map(|r| r.exp()).collect(),
        w_minus: params[n_x..2 * n_x].iter().map(|r| r.exp()).collect(),
        b_plus: 0.0,
        b_minus: 0.0,
    }
}

fn unpack_tp_exp(params: &[f64], n_x: usize) -> ChainWeights {
    ChainWeights {
        w_plus: params[..n_x].to_vec(),
        b_plus: params[n_x],
        w_minus: params[n_x + 1..2 * n_x + 1].to_vec(),
        b_minus: params[2 * n_x + 1],
    }
}

pub fn unpack_params(family: TransitionFamily, params: &[f64], n_x: usize) -> ChainWeights {
    match family {
        TransitionFamily::TpScaled => unpack_tp_scaled(params, n_x),
        TransitionFamily::TpExp => unpack_tp_exp(params, n_x),
        TransitionFamily::Sig => unreachable!("sig has no point estimation"),
    }
}

/// Penalized expected complete-data log likelihood of one chain and its
/// analytic gradient in the optimization parameterisation.
pub fn objective_and_gradient(
    family: TransitionFamily,
    params: &[f64],
    eps_tables: &[[f64; 4]],
    data: &Dataset,
    hyper: &Hyperparameters,
) -> Result<(f64, Vec<f64>)> {
    let n_x = data.x.nrows();
    if params.len() != param_len(family, n_x) {
        return Err(Error::DimensionMismatch("parameter vector length".into()));
    }
    let w = unpack_params(family, params, n_x);
    let b0 = hyper.b0;

    let mut value = 0.0;
    // gradient w.r.t. (f+, f-) accumulated per step, then chained
    let mut grad = vec![0.0; params.len()];

    for (t, tab) in eps_tables.iter().enumerate() {
        let x_t = data.input_at(t);
        let dt = data.delta[t];
        let r = transitions::rates(family, &w, &x_t, b0)?;
        let (fp, fm) = (r.f_plus, r.f_minus);
        let total = fp + fm;
        let e = (-dt * total).exp();
        let g = (1.0 - e) / total;
        let p_up = fp * g;
        let p_down = fm * g;
        let stay_m = fm + fp * e; // (1 - p_up) * total
        let stay_p = fp + fm * e; // (1 - p_down) * total

        let e_mm = tab[pair_index(-1, -1)];
        let e_mp = tab[pair_index(-1, 1)];
        let e_pm = tab[pair_index(1, -1)];
        let e_pp = tab[pair_index(1, 1)];

        value += e_mp * (fp.ln() - total.ln() + (-(-dt * total).exp_m1()).ln());
        value += e_mm * (stay_m.ln() - total.ln());
        value += e_pm * (fm.ln() - total.ln() + (-(-dt * total).exp_m1()).ln());
        value += e_pp * (stay_p.ln() - total.ln());

        let dg_df = (dt * e - g) / total;
        // jump probabilities
        let dpup_dfp = g + fp * dg_df;
        let dpup_dfm = fp * dg_df;
        let dpdn_dfm = g + fm * dg_df;
        let dpdn_dfp = fm * dg_df;

        let mut dl_dfp = 0.0;
        let mut dl_dfm = 0.0;
        if e_mp > 0.0 {
            dl_dfp += e_mp / p_up * dpup_dfp;
            dl_dfm += e_mp / p_up * dpup_dfm;
        }
        if e_mm > 0.0 {
            let q = e_mm / (1.0 - p_up);
            dl_dfp -= q * dpup_dfp;
            dl_dfm -= q * dpup_dfm;
        }
        if e_pm > 0.0 {
            dl_dfm += e_pm / p_down * dpdn_dfm;
            dl_dfp += e_pm / p_down * dpdn_dfp;
        }
        if e_pp > 0.0 {
            let q = e_pp / (1.0 - p_down);
            dl_dfm -= q * dpdn_dfm;
            dl_dfp -= q * dpdn_dfp;
        }

        match family {
            TransitionFamily::TpScaled => {
                for j in 0..n_x {
                    let x = x_t[j];
                    grad[j] += dl_dfp * x + dl_dfm * (1.0 - x);
                    grad[n_x + j] += dl_dfp * (1.0 - x) + dl_dfm * x;
                }
            }
            TransitionFamily::TpExp => {
                for j in 0..n_x {
                    grad[j] += dl_dfp * fp * x_t[j];
                    grad[n_x + 1 + j] += dl_dfm * fm * x_t[j];
                }
                grad[n_x] += dl_dfp * fp;
                grad[2 * n_x + 1] += dl_dfm * fm;
            }
            TransitionFamily::Sig => unreachable!(),
        }
    }

    // priors and the chain rule into the optimization parameterisation
    value += point_log_prior(family, &w, hyper)?;
    match family {
        TransitionFamily::TpScaled => {
            let rate = hyper.w_prior.rate();
            for j in 0..2 * n_x {
                let wv = if j < n_x { w.w_plus[j] } else { w.w_minus[j - n_x] };
                grad[j] -= rate;
                // d/d rho = d/dw * w
                grad[j] *= wv;
            }
        }
        TransitionFamily::TpExp => {
            let rate = hyper.w_prior.rate();
            for j in 0..n_x {
                for (idx, wv) in [(j, w.w_plus[j]), (n_x + 1 + j, w.w_minus[j])] {
                    let (_, da) = smooth_abs(wv);
                    grad[idx] -= rate * da;
                }
            }
            for (idx, b) in [(n_x, w.b_plus), (2 * n_x + 1, w.b_minus)] {
                grad[idx] -= (b - hyper.bias_prior.mean) / hyper.bias_prior.variance;
            }
        }
        TransitionFamily::Sig => unreachable!(),
    }

    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("weight objective".into()));
    }
    Ok((value, grad))
}

/// Log prior of a point weight configuration, exactly as the estimation
/// objective scores it (the `tp-exp` double-exponential penalty uses the
/// smoothed absolute value).
pub fn point_log_prior(
    family: TransitionFamily,
    w: &ChainWeights,
    hyper: &Hyperparameters,
) -> Result<f64> {
    let rate = hyper.w_prior.rate();
    let mut value = 0.0;
    match family {
        TransitionFamily::TpScaled => {
            for &wv in w.w_plus.iter().chain(w.w_minus.iter()) {
                value += rate.ln() - rate * wv;
            }
        }
        TransitionFamily::TpExp => {
            match hyper.w_prior {
                WPrior::DoubleExponential { .. } => {}
                WPrior::Exponential { .. } => {
                    return Err(Error::Config(
                        "exponential weight prior requires tp-scaled".into(),
                    ))
                }
            }
            for &wv in w.w_plus.iter().chain(w.w_minus.iter()) {
                let (a, _) = smooth_abs(wv);
                value += (rate / 2.0).ln() - rate * a;
            }
            for b in [w.b_plus, w.b_minus] {
                value += -0.5 * (LN_2PI + hyper.bias_prior.variance.ln())
                    - (b - hyper.bias_prior.mean) * (b - hyper.bias_prior.mean)
                        / (2.0 * hyper.bias_prior.variance);
            }
        }
        TransitionFamily::Sig => {
            return Err(Error::Config("sig weights are not point-estimated".into()))
        }
    }
    Ok(value)
}

/// Differentiable stand-in for `|w|` in the estimation objective,
/// `sqrt(w^2 + mu^2) - mu`; keeps the line search away from the kink at zero
/// while staying within `mu` of the true penalty.
const SMOOTH_ABS_MU: f64 = 1e-4;

fn smooth_abs(w: f64) -> (f64, f64) {
    let r = (w * w + SMOOTH_ABS_MU * SMOOTH_ABS_MU).sqrt();
    (r - SMOOTH_ABS_MU, w / r)
}

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub grad_tol: f64,
    pub max_iters: usize,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            grad_tol: 1e-6,
            max_iters: 500,
            max_restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub params: Vec<f64>,
    pub objective: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub restarts: usize,
    pub converged: bool,
    /// Objective value after every accepted step.
    pub trace: Vec<f64>,
}

/// Maximize a smooth objective by BFGS with backtracking (Armijo) line
/// search; internally minimizes the negated objective with the textbook
/// inverse-Hessian update. Line-search failure restarts from a perturbed
/// point.
fn bfgs_maximize<F>(start: &[f64], cfg: &OptimConfig, mut eval: F) -> Result<OptimOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dim = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<OptimOutcome> = None;
    let mut x0 = start.to_vec();

    // phi = -objective
    let mut eval_phi = |p: &[f64]| -> Result<(f64, DVector<f64>)> {
        let (v, g) = eval(p)?;
        Ok((-v, -DVector::from_row_slice(&g)))
    };

    for restart in 0..=cfg.max_restarts {
        let mut x = DVector::from_row_slice(&x0);
        let (mut phi, mut g) = eval_phi(x.as_slice())?;
        let mut h = DMatrix::identity(dim, dim);
        let mut trace = vec![-phi];
        let mut converged = false;
        let mut iters = 0;
        let mut line_search_failed = false;

        while iters < cfg.max_iters {
            iters += 1;
            if g.amax() < cfg.grad_tol {
                converged = true;
                break;
            }
            let mut d = -(&h * &g);
            let mut slope = d.dot(&g);
            if slope >= 0.0 {
                h = DMatrix::identity(dim, dim);
                d = -g.clone();
                slope = d.dot(&g);
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-18 {
                let xn = &x + alpha * &d;
                match eval_phi(xn.as_slice()) {
                    Ok((pn, gn)) if pn.is_finite() && pn <= phi + 1e-4 * alpha * slope => {
                        accepted = Some((xn, pn, gn));
                        break;
                    }
                    _ => alpha *= 0.5,
                }
            }
            let Some((xn, pn, gn)) = accepted else {
                line_search_failed = true;
                break;
            };
            let s = &xn - &x;
            let y = &gn - &g;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                let hy_s = &hy * s.transpose();
                let s_hy = &s * hy.transpose();
                let ss = &s * s.transpose();
                h = h - rho * (hy_s + s_hy) + (rho * rho * yhy + rho) * ss;
            }
            x = xn;
            phi = pn;
            g = gn;
            trace.push(-phi);
        }

        let outcome = OptimOutcome {
            params: x.as_slice().to_vec(),
            objective: -phi,
            grad_inf_norm: g.amax(),
            iterations: iters,
            restarts: restart,
            converged,
            trace,
        };
        let better = best
            .as_ref()
            .map(|b| outcome.objective > b.objective)
            .unwrap_or(true);
        if better {
            best = Some(outcome.clone());
        }
        if converged {
            return Ok(best.unwrap());
        }
        if !line_search_failed && iters >= cfg.max_iters {
            break;
        }
        // restart from a perturbed point
        x0 = best
            .as_ref()
            .unwrap()
            .params
            .iter()
            .map(|v| v + rng.random::<f64>() - 0.5)
            .collect();
    }
    let best = best.unwrap();
    if best.converged || best.grad_inf_norm < 1e-3 {
        Ok(best)
    } else {
        Err(Error::OptimFailure(format!(
            "gradient norm {} after {} restarts",
            best.grad_inf_norm, best.restarts
        )))
    }
}

/// Point estimation of the continuous-time weight families. Without a warm
/// start, `tp-scaled` begins at `log w = log 0.1`; a warm start from the
/// previous outer iteration keeps the block update monotone in the free
/// energy (the optimizer never accepts a decrease from its start).
pub fn estimate_weights_tp(
    chain: usize,
    eps: &ExpectedTransitionCounts,
    data: &Dataset,
    family: TransitionFamily,
    hyper: &Hyperparameters,
    cfg: &OptimConfig,
    warm: Option<&ChainWeights>,
) -> Result<(ChainWeights, OptimOutcome)> {
    if !family.is_continuous_time() {
        return Err(Error::Config("point estimation needs a tp family".into()));
    }
    let n_x = data.x.nrows();
    let start = match (family, warm) {
        (TransitionFamily::TpScaled, None) => vec![0.1f64.ln(); 2 * n_x],
        (TransitionFamily::TpScaled, Some(w)) => w
            .w_plus
            .iter()
            .chain(w.w_minus.iter())
            .map(|v| v.max(1e-300).ln())
            .collect(),
        (TransitionFamily::TpExp, None) => {
            let mut s = vec![0.0; 2 * n_x + 2];
            s[n_x] = hyper.bias_prior.mean;
            s[2 * n_x + 1] = hyper.bias_prior.mean;
            s
        }
        (TransitionFamily::TpExp, Some(w)) => {
            let mut s = Vec::with_capacity(2 * n_x + 2);
            s.extend_from_slice(&w.w_plus);
            s.push(w.b_plus);
            s.extend_from_slice(&w.w_minus);
            s.push(w.b_minus);
            s
        }
        (TransitionFamily::Sig, _) => unreachable!(),
    };
    let tables = &eps.eps[chain];
    let outcome = bfgs_maximize(&start, cfg, |params| {
        objective_and_gradient(family, params, tables, data, hyper)
    })?;
    let w = unpack_params(family, &outcome.params, n_x);
    Ok((w, outcome))
}

/// Prior-moment initialisation of the `sig` EP blocks.
pub fn sig_prior_blocks(n_x: usize, hyper: &Hyperparameters) -> ChainWeightPosterior {
    let dim = n_x + 1;
    let w_var = match hyper.w_prior {
        WPrior::DoubleExponential { rate } => 2.0 / (rate * rate),
        WPrior::Exponential { rate } => 1.0 / (rate * rate),
    };
    let mut mean = DVector::zeros(dim);
    mean[n_x] = hyper.bias_prior.mean;
    let mut cov = DMatrix::zeros(dim, dim);
    for j in 0..n_x {
        cov[(j, j)] = w_var;
    }
    cov[(n_x, n_x)] = hyper.bias_prior.variance;
    let block = GaussianBlock {
        mean,
        cov,
        log_z: 0.0,
        converged: true,
        ridge: 0.0,
    };
    ChainWeightPosterior::Ep {
        plus: block.clone(),
        minus: block,
    }
}

/// `sum E[log p0]` of an EP block under its Gaussian marginals
/// (double-exponential weights, Gaussian bias).
pub fn block_expected_log_prior(block: &GaussianBlock, hyper: &Hyperparameters) -> f64 {
    let n_x = block.mean.len() - 1;
    let rate = hyper.w_prior.rate();
    let mut total = 0.0;
    for j in 0..n_x {
        total += (rate / 2.0).ln()
            - rate * crate::emission::gaussian_abs_mean(block.mean[j], block.cov[(j, j)]);
    }
    let (m, v) = (block.mean[n_x], block.cov[(n_x, n_x)]);
    let gp = &hyper.bias_prior;
    total += -0.5 * (LN_2PI + gp.variance.ln())
        - ((m - gp.mean) * (m - gp.mean) + v) / (2.0 * gp.variance);
    total
}

// ---------------------------------------------------------------------------
// Expected log transition tables (adapter for the chain updates)
// ---------------------------------------------------------------------------

/// `<log p(s2 | s1)>` tables per step for one chain: Gauss-Hermite over the
/// projected Gaussian for EP blocks, plug-in log probabilities for point
/// estimates.
pub fn expected_log_transitions(
    chain_posterior: &ChainWeightPosterior,
    data: &Dataset,
    family: TransitionFamily,
    b0: f64,
    ladder: &QuadLadder,
) -> Result<Vec<[f64; 4]>> {
    let n_t = data.y.ncols();
    let mut out = Vec::with_capacity(n_t - 1);
    match chain_posterior {
        ChainWeightPosterior::Point(w) => {
            for t in 0..n_t - 1 {
                let x_t = data.input_at(t);
                let table =
                    transitions::log_transition_table(family, w, &x_t, data.delta[t], b0)?;
                out.push([table[0][0], table[0][1], table[1][0], table[1][1]]);
            }
        }
        ChainWeightPosterior::Ep { plus, minus } => {
            for t in 0..n_t - 1 {
                let x_t = data.input_at(t);
                let (mp, vp) = plus.project(&x_t);
                let (mm, vm) = minus.project(&x_t);
                let mut tab = [0.0; 4];
                tab[pair_index(-1, 1)] = expected_log_sigmoid(mp, vp, ladder);
                tab[pair_index(-1, -1)] = expected_log_sigmoid(-mp, vp, ladder);
                tab[pair_index(1, -1)] = expected_log_sigmoid(mm, vm, ladder);
                tab[pair_index(1, 1)] = expected_log_sigmoid(-mm, vm, ladder);
                out.push(tab);
            }
        }
    }
    Ok(out)
}
