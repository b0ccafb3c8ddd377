//! Expectation propagation for latent Gaussian models with scalar-projection
//! sites.
//!
//! The model is `f(z) = exp(h0.z - z'Q0 z / 2) prod_i t_i(a_i.z)` with a
//! multivariate Gaussian base factor and independent non-Gaussian sites, each
//! acting on one linear projection `u_i = a_i.z`. Every site is approximated
//! by an unnormalised scalar Gaussian `s_i exp(h_i u - q_i u^2 / 2)`; a sweep
//! removes each site from its projected marginal (optionally fractionally),
//! moment-matches the tilted distribution, and damps the resulting natural
//! parameter step. Parallel scheduling computes all updates from one shared
//! covariance per sweep; sequential scheduling applies rank-1 covariance
//! updates per site, with a full refresh at the end of the sweep.
//!
//! The returned log evidence is the standard EP approximation: the Gaussian
//! log partition of the assembled approximation plus the per-site matching
//! constants, exact whenever every site is Gaussian.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::{
    adaptive_gh_moments, log_sigmoid, sigmoid, soft_logistic_mode, truncated_normal_lower,
    truncated_normal_upper, QuadLadder, LN_2PI,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SiteKind {
    GaussianPrior { mean: f64, variance: f64 },
    LaplacePrior { rate: f64 },
    ExponentialPrior { rate: f64 },
    /// `sigma(u)^eps1 (1 - sigma(u))^eps0` with fractional counts.
    SoftLogistic { eps1: f64, eps0: f64 },
}

#[derive(Debug, Clone)]
pub struct Site {
    pub projection: DVector<f64>,
    pub kind: SiteKind,
    /// Scalar natural parameters of the site approximation.
    pub site_h: f64,
    pub site_q: f64,
}

impl Site {
    pub fn new(projection: DVector<f64>, kind: SiteKind) -> Self {
        Site {
            projection,
            kind,
            site_h: 0.0,
            site_q: 0.0,
        }
    }

    fn is_exact_gaussian(&self) -> bool {
        matches!(self.kind, SiteKind::GaussianPrior { .. })
    }
}

#[derive(Debug, Clone)]
pub struct GaussianSiteModel {
    pub dim: usize,
    pub base_h: DVector<f64>,
    pub base_q: DMatrix<f64>,
    pub sites: Vec<Site>,
}

impl GaussianSiteModel {
    pub fn new(base_h: DVector<f64>, base_q: DMatrix<f64>, sites: Vec<Site>) -> Result<Self> {
        let dim = base_h.len();
        if base_q.nrows() != dim || base_q.ncols() != dim {
            return Err(Error::DimensionMismatch("base precision shape".into()));
        }
        for s in &sites {
            if s.projection.len() != dim {
                return Err(Error::DimensionMismatch("site projection length".into()));
            }
        }
        Ok(GaussianSiteModel {
            dim,
            base_h,
            base_q,
            sites,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy)]
pub struct EPConfig {
    /// Step fraction applied to site updates, in (0, 1].
    pub damping: f64,
    /// Power-EP exponent, in (0, 1].
    pub fraction: f64,
    pub max_sweeps: usize,
    /// Convergence threshold on the damped change of site naturals.
    pub tol: f64,
    pub quadrature_nodes: usize,
    pub schedule: Schedule,
}

impl Default for EPConfig {
    fn default() -> Self {
        EPConfig {
            damping: 0.8,
            fraction: 1.0,
            max_sweeps: 200,
            tol: 1e-8,
            quadrature_nodes: 61,
            schedule: Schedule::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TiltedMoments {
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone)]
pub struct EpSolution {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Final site naturals `(site_h, site_q)` in site order.
    pub site_state: Vec<(f64, f64)>,
    pub log_evidence: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// Ridge added to the base precision when it was singular (0 when none).
    pub ridge: f64,
    /// Largest moment-matching residual over sites at the solution.
    pub max_residual: f64,
    /// Sites skipped in the last sweep because no valid cavity existed.
    pub skipped_sites: usize,
}

/// Log partition `log int exp(h u - q u^2 / 2) du` of a scalar Gaussian in
/// natural parameters.
fn log_zn(h: f64, q: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI / q).ln() + h * h / (2.0 * q)
}

/// Moments of the tilted distribution `t(u)^frac N(u; cavity_mean, cavity_var)`.
///
/// Laplace and exponential sites use closed forms built on scaled-erfc
/// truncated-normal moments; soft-logistic sites use Gauss-Hermite quadrature.
pub fn tilted_moments(
    kind: SiteKind,
    cavity_mean: f64,
    cavity_var: f64,
    frac: f64,
    quad: &QuadLadder,
) -> Result<TiltedMoments> {
    if !(cavity_var > 0.0 && cavity_var.is_finite()) {
        return Err(Error::DomainViolation(format!(
            "cavity variance must be positive, got {cavity_var}"
        )));
    }
    let out = match kind {
        SiteKind::GaussianPrior { mean, variance } => {
            let q_c = 1.0 / cavity_var;
            let h_c = cavity_mean * q_c;
            let q_t = q_c + frac / variance;
            let h_t = h_c + frac * mean / variance;
            let log_z = log_zn(h_t, q_t)
                - log_zn(h_c, q_c)
                - 0.5 * frac * (LN_2PI + variance.ln())
                - frac * mean * mean / (2.0 * variance);
            TiltedMoments {
                log_z,
                mean: h_t / q_t,
                var: 1.0 / q_t,
            }
        }
        SiteKind::LaplacePrior { rate } => {
            let b = frac * rate;
            let log_amp = frac * (rate / 2.0).ln() + b * b * cavity_var / 2.0;
            // positive branch: exp(-b u), negative branch: exp(+b u)
            let mu_p = cavity_mean - b * cavity_var;
            let mu_n = cavity_mean + b * cavity_var;
            let (mass_p, mean_p, var_p) = truncated_normal_lower(mu_p, cavity_var);
            let (mass_n, mean_n, var_n) = truncated_normal_upper(mu_n, cavity_var);
            let lw_p = log_amp - b * cavity_mean + mass_p;
            let lw_n = log_amp + b * cavity_mean + mass_n;
            mix_two(lw_p, mean_p, var_p, lw_n, mean_n, var_n)
        }
        SiteKind::ExponentialPrior { rate } => {
            let b = frac * rate;
            let mu = cavity_mean - b * cavity_var;
            let (mass, mean, var) = truncated_normal_lower(mu, cavity_var);
            let log_z = frac * rate.ln() - b * cavity_mean + b * b * cavity_var / 2.0 + mass;
            TiltedMoments { log_z, mean, var }
        }
        SiteKind::SoftLogistic { eps1, eps0 } => {
            if eps1 < 0.0 || eps0 < 0.0 {
                return Err(Error::DomainViolation(
                    "soft-logistic counts must be non-negative".into(),
                ));
            }
            let (e1, e0) = (frac * eps1, frac * eps0);
            if e1 == 0.0 && e0 == 0.0 {
                return Ok(TiltedMoments {
                    log_z: 0.0,
                    mean: cavity_mean,
                    var: cavity_var,
                });
            }
            let mode = soft_logistic_mode(cavity_mean, cavity_var, e1, e0);
            let s = sigmoid(mode);
            let width = 1.0 / ((e1 + e0) * s * (1.0 - s) + 1.0 / cavity_var).sqrt();
            let (log_z, mean, var) =
                adaptive_gh_moments(cavity_mean, cavity_var, mode, width, quad, |u| {
                    e1 * log_sigmoid(u) + e0 * log_sigmoid(-u)
                });
            TiltedMoments { log_z, mean, var }
        }
    };
    if !out.log_z.is_finite() || !out.mean.is_finite() || !out.var.is_finite() {
        return Err(Error::NonFinite("tilted moments".into()));
    }
    if out.var < 1e-14 {
        return Err(Error::DomainViolation(format!(
            "tilted variance collapsed to {}",
            out.var
        )));
    }
    Ok(out)
}

fn mix_two(lw1: f64, m1: f64, v1: f64, lw2: f64, m2: f64, v2: f64) -> TiltedMoments {
    let log_z = crate::numeric::log_sum_exp2(lw1, lw2);
    let p1 = (lw1 - log_z).exp();
    let p2 = (lw2 - log_z).exp();
    let mean = p1 * m1 + p2 * m2;
    let second = p1 * (v1 + m1 * m1) + p2 * (v2 + m2 * m2);
    TiltedMoments {
        log_z,
        mean,
        var: (second - mean * mean).max(0.0),
    }
}

struct Assembled {
    cov: DMatrix<f64>,
    mean: DVector<f64>,
    log_det_q: f64,
    h: DVector<f64>,
}

fn assemble(model: &GaussianSiteModel, sites: &[(f64, f64)], ridge: f64) -> Option<Assembled> {
    let dim = model.dim;
    let mut q = model.base_q.clone();
    let mut h = model.base_h.clone();
    for i in 0..dim {
        q[(i, i)] += ridge;
    }
    for (site, &(sh, sq)) in model.sites.iter().zip(sites) {
        let a = &site.projection;
        // rank-1 update q += sq * a a'; exactly symmetric since x = y
        q.ger(sq, a, a, 1.0);
        h.axpy(sh, a, 1.0);
    }
    let chol = Cholesky::new(q)?;
    let log_det_q = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let cov = chol.inverse();
    let mean = &cov * &h;
    Some(Assembled {
        cov,
        mean,
        log_det_q,
        h,
    })
}

/// Solve the EP fixed point. See the module docs for the update scheme and
/// the failure policy (fraction retry, skip-site, damping halving).
pub fn ep_solve(model: &GaussianSiteModel, cfg: &EPConfig) -> Result<EpSolution> {
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) || !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::Config("EP damping and fraction must lie in (0,1]".into()));
    }
    let quad = QuadLadder::new(cfg.quadrature_nodes);
    let n_sites = model.sites.len();

    // site naturals; exact Gaussian sites are absorbed once and never move
    let mut sites: Vec<(f64, f64)> = model
        .sites
        .iter()
        .map(|s| match s.kind {
            SiteKind::GaussianPrior { mean, variance } => (mean / variance, 1.0 / variance),
            _ => (0.0, 0.0),
        })
        .collect();

    // ridge if the initial precision is singular
    let mut ridge = 0.0;
    let mut assembled = match assemble(model, &sites, 0.0) {
        Some(a) => a,
        None => {
            ridge = 1e-8;
            assemble(model, &sites, ridge).ok_or_else(|| {
                Error::EpFailure("base precision not positive definite even with ridge".into())
            })?
        }
    };

    let mut damping = cfg.damping;
    let mut converged = false;
    let mut sweeps = 0;
    let mut skipped_last = 0;

    let all_fixed = model.sites.iter().all(|s| s.is_exact_gaussian());
    if all_fixed {
        converged = true;
        sweeps = 1;
    }

    while !converged && sweeps < cfg.max_sweeps {
        sweeps += 1;
        let snapshot = sites.clone();
        let mut max_delta: f64 = 0.0;
        let mut skipped = 0;

        // proposed updates; in parallel mode all sites see the same moments
        let mut proposals: Vec<Option<(f64, f64)>> = vec![None; n_sites];
        for (idx, site) in model.sites.iter().enumerate() {
            if site.is_exact_gaussian() {
                continue;
            }
            let a = &site.projection;
            let sa = &assembled.cov * a;
            let (m_i, v_i) = (assembled.mean.dot(a), a.dot(&sa));
            if !(v_i > 0.0) {
                skipped += 1;
                continue;
            }
            let q_m = 1.0 / v_i;
            let h_m = m_i / v_i;
            let (sh, sq) = sites[idx];

            let mut updated = None;
            for frac in [cfg.fraction, 0.5 * cfg.fraction] {
                let q_c = q_m - frac * sq;
                if q_c <= 1e-14 {
                    continue;
                }
                let h_c = h_m - frac * sh;
                let cav_var = 1.0 / q_c;
                let cav_mean = h_c * cav_var;
                match tilted_moments(site.kind, cav_mean, cav_var, frac, &quad) {
                    Ok(tm) => {
                        let q_new = (1.0 / tm.var - q_c) / frac;
                        let h_new = (tm.mean / tm.var - h_c) / frac;
                        if q_new.is_finite() && h_new.is_finite() {
                            updated = Some((h_new, q_new));
                            break;
                        }
                    }
                    Err(_) => continue,
                }
            }
            match updated {
                Some((h_new, q_new)) => {
                    let dh = damping * (h_new - sh);
                    let dq = damping * (q_new - sq);
                    proposals[idx] = Some((sh + dh, sq + dq));
                    max_delta = max_delta.max(dh.abs()).max(dq.abs());
                    if cfg.schedule == Schedule::Sequential {
                        // apply immediately with a rank-1 covariance update
                        let denom = 1.0 + dq * v_i;
                        if denom > 1e-12 {
                            let scale = dq / denom;
                            let sa_mat = &sa * sa.transpose();
                            assembled.cov -= scale * sa_mat;
                            sites[idx] = (sh + dh, sq + dq);
                            assembled.h.axpy(dh, a, 1.0);
                            assembled.mean = &assembled.cov * &assembled.h;
                            proposals[idx] = None;
                        } else {
                            skipped += 1;
                            proposals[idx] = None;
                        }
                    }
                }
                None => skipped += 1,
            }
        }

        if cfg.schedule == Schedule::Parallel {
            for (idx, p) in proposals.iter().enumerate() {
                if let Some(np) = p {
                    sites[idx] = *np;
                }
            }
        }

        match assemble(model, &sites, ridge) {
            Some(a) => assembled = a,
            None => {
                // global precision lost positive definiteness: back off
                sites = snapshot;
                damping *= 0.5;
                sweeps -= 1;
                if damping < 1e-3 {
                    let mut sol = finish(model, &sites, ridge, cfg, &quad)?;
                    sol.converged = false;
                    sol.sweeps = sweeps;
                    sol.skipped_sites = skipped;
                    return Ok(sol);
                }
                match assemble(model, &sites, ridge) {
                    Some(a) => assembled = a,
                    None => {
                        return Err(Error::EpFailure(
                            "precision became indefinite and the previous state is unusable".into(),
                        ))
                    }
                }
                continue;
            }
        }

        skipped_last = skipped;
        if max_delta < cfg.tol && skipped == 0 {
            converged = true;
        }
    }

    let mut sol = finish(model, &sites, ridge, cfg, &quad)?;
    sol.converged = converged;
    sol.sweeps = sweeps;
    sol.skipped_sites = skipped_last;
    Ok(sol)
}

/// Final moments, evidence and moment-matching residual for a site state.
fn finish(
    model: &GaussianSiteModel,
    sites: &[(f64, f64)],
    ridge: f64,
    cfg: &EPConfig,
    quad: &QuadLadder,
) -> Result<EpSolution> {
    let assembled = assemble(model, sites, ridge)
        .ok_or_else(|| Error::EpFailure("final precision not positive definite".into()))?;
    let dim = model.dim as f64;
    let mut log_evidence =
        0.5 * dim * LN_2PI - 0.5 * assembled.log_det_q + 0.5 * assembled.h.dot(&assembled.mean);

    let mut max_residual = 0.0_f64;
    for (site, &(sh, sq)) in model.sites.iter().zip(sites) {
        if let SiteKind::GaussianPrior { mean, variance } = site.kind {
            log_evidence += -0.5 * (LN_2PI + variance.ln()) - mean * mean / (2.0 * variance);
            continue;
        }
        let a = &site.projection;
        let sa = &assembled.cov * a;
        let v_i = a.dot(&sa);
        let m_i = assembled.mean.dot(a);
        if v_i <= 0.0 {
            continue;
        }
        let frac = cfg.fraction;
        let q_c = 1.0 / v_i - frac * sq;
        if q_c <= 1e-14 {
            // no valid cavity: leave the evidence contribution out and flag
            max_residual = f64::INFINITY;
            continue;
        }
        let h_c = m_i / v_i - frac * sh;
        let cav_var = 1.0 / q_c;
        let cav_mean = h_c * cav_var;
        let tm = tilted_moments(site.kind, cav_mean, cav_var, frac, quad)?;
        log_evidence +=
            (tm.log_z + log_zn(h_c, q_c) - log_zn(h_c + frac * sh, q_c + frac * sq)) / frac;
        max_residual = max_residual
            .max((tm.mean - m_i).abs())
            .max((tm.var - v_i).abs());
    }

    Ok(EpSolution {
        mean: assembled.mean,
        cov: assembled.cov,
        site_state: sites.to_vec(),
        log_evidence,
        converged: false,
        sweeps: 0,
        ridge,
        max_residual,
        skipped_sites: 0,
    })
}

/// Marginal `(mean, variance)` of one latent coordinate.
pub fn posterior_marginal(solution: &EpSolution, index: usize) -> Result<(f64, f64)> {
    if index >= solution.mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "coordinate {index} out of range for dimension {}",
            solution.mean.len()
        )));
    }
    Ok((solution.mean[index], solution.cov[(index, index)]))
}
