//! Approximate posterior over the structural non-zeros of the emission
//! matrix and the conjugate gamma posterior of the noise precision.
//!
//! With a diagonal noise precision the rows of `C` are conditionally
//! independent, so inference runs as `n_y` small EP problems, one per row,
//! restricted to the row's support. The canonical Gaussian parameters of the
//! row problem come from the chain means:
//!
//! - `h_j = <v>/2 sum_t y_t (1 + mu_t^j)`
//! - `Q_jk = <v>/4 sum_t [(1 + mu_t^j)(1 + mu_t^k) + delta_jk (1 - (mu_t^j)^2)]`
//!
//! The diagonal correction is the mean-field state covariance, which keeps
//! `Q` positive semi-definite.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::chains::ChainPosterior;
use crate::ep::{self, EPConfig, GaussianSiteModel, Site, SiteKind};
use crate::error::{Error, Result};
use crate::model::{CPrior, Dataset, ModelSpec};
use crate::numeric::{erf, LN_2PI};

/// Gamma posterior over the noise precision, rate parameterisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPosterior {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[log v]`.
    pub fn expected_log(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    pub fn entropy(&self) -> f64 {
        self.shape - self.rate.ln() + ln_gamma(self.shape)
            + (1.0 - self.shape) * digamma(self.shape)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.rate > 0.0) {
            return Err(Error::DomainViolation(format!(
                "gamma posterior needs positive parameters, got ({}, {})",
                self.shape, self.rate
            )));
        }
        Ok(())
    }
}

/// Canonical parameters of one row subproblem restricted to its support.
#[derive(Debug, Clone)]
pub struct RowProblem {
    pub row: usize,
    pub support: Vec<usize>,
    pub h: DVector<f64>,
    pub q: DMatrix<f64>,
}

/// Gaussian posterior of one row of `C` over its support.
#[derive(Debug, Clone)]
pub struct RowPosterior {
    pub support: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// EP evidence contribution `log Z` of the row subproblem.
    pub log_z: f64,
    pub converged: bool,
    pub ridge: f64,
}

/// Collection of per-row posteriors forming `q_c`.
#[derive(Debug, Clone)]
pub struct EmissionPosterior {
    pub rows: Vec<RowPosterior>,
}

impl EmissionPosterior {
    /// Prior moments per coordinate (used to initialise the outer loop).
    pub fn from_prior(spec: &ModelSpec) -> Result<Self> {
        let c = spec.empty_c()?;
        let (mean, var) = match spec.hyper.c_prior {
            CPrior::Gaussian { mean, variance } => (mean, variance),
            CPrior::Flat => (0.0, crate::model::FLAT_PRIOR_VARIANCE),
            CPrior::DoubleExponential { rate } => (0.0, 2.0 / (rate * rate)),
        };
        let rows = (0..spec.n_y)
            .map(|i| {
                let support = c.row_support(i).to_vec();
                let k = support.len();
                RowPosterior {
                    support,
                    mean: DVector::from_element(k, mean),
                    cov: DMatrix::from_diagonal_element(k, k, var),
                    log_z: 0.0,
                    converged: true,
                    ridge: 0.0,
                }
            })
            .collect();
        Ok(EmissionPosterior { rows })
    }

    /// Posterior means scattered into the sparse structure.
    pub fn mean_matrix(&self, spec: &ModelSpec) -> Result<crate::model::SparseRowMatrix> {
        let mut c = spec.empty_c()?;
        for (i, row) in self.rows.iter().enumerate() {
            let vals: Vec<f64> = row.mean.iter().cloned().collect();
            c.set_row_values(i, &vals);
        }
        Ok(c)
    }

    /// `E[C^T C] = sum_i (m_i m_i^T + Cov_i)` scattered over supports; exact
    /// under per-row EP because cross-row covariances vanish.
    pub fn second_moment(&self, n_s: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n_s, n_s);
        for row in &self.rows {
            let k = row.support.len();
            for a in 0..k {
                for b in 0..k {
                    m[(row.support[a], row.support[b])] +=
                        row.mean[a] * row.mean[b] + row.cov[(a, b)];
                }
            }
        }
        m
    }

    /// `E[C]^T Y` (size `n_s` x `n_t`).
    pub fn ct_y(&self, n_s: usize, y: &DMatrix<f64>) -> DMatrix<f64> {
        let n_t = y.ncols();
        let mut out = DMatrix::zeros(n_s, n_t);
        for (i, row) in self.rows.iter().enumerate() {
            for (a, &j) in row.support.iter().enumerate() {
                let m = row.mean[a];
                for t in 0..n_t {
                    out[(j, t)] += m * y[(i, t)];
                }
            }
        }
        out
    }

    /// Sum of Gaussian entropies of the row posteriors.
    pub fn entropy(&self) -> f64 {
        self.rows
            .iter()
            .map(|row| {
                let k = row.support.len();
                if k == 0 {
                    return 0.0;
                }
                let chol = Cholesky::new(row.cov.clone())
                    .expect("row covariance must be positive definite");
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                0.5 * (k as f64 * (1.0 + LN_2PI) + log_det)
            })
            .sum()
    }

    /// `sum_ij E[log p0(c_ij)]` under the Gaussian marginals.
    pub fn expected_log_prior(&self, prior: &CPrior) -> f64 {
        let mut total = 0.0;
        for row in &self.rows {
            for a in 0..row.support.len() {
                let m = row.mean[a];
                let var = row.cov[(a, a)];
                total += match *prior {
                    CPrior::Gaussian { mean, variance } => {
                        -0.5 * (LN_2PI + variance.ln())
                            - ((m - mean) * (m - mean) + var) / (2.0 * variance)
                    }
                    CPrior::Flat => {
                        let variance = crate::model::FLAT_PRIOR_VARIANCE;
                        -0.5 * (LN_2PI + variance.ln()) - (m * m + var) / (2.0 * variance)
                    }
                    CPrior::DoubleExponential { rate } => {
                        (rate / 2.0).ln() - rate * gaussian_abs_mean(m, var)
                    }
                };
            }
        }
        total
    }
}

/// `E|c|` for `c ~ N(mean, var)`.
pub fn gaussian_abs_mean(mean: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return mean.abs();
    }
    let sigma = var.sqrt();
    mean * erf(mean / (sigma * std::f64::consts::SQRT_2))
        + sigma * (2.0 / std::f64::consts::PI).sqrt() * (-mean * mean / (2.0 * var)).exp()
}

/// Assemble the canonical Gaussian parameters of row `i` from the chain
/// means; under path factorization the state covariance is diagonal.
pub fn assemble_row_problem(
    row: usize,
    data: &Dataset,
    q_s: &ChainPosterior,
    q_v_mean: f64,
    support: &[usize],
) -> RowProblem {
    let k = support.len();
    let n_t = q_s.n_steps();
    let mut h = DVector::zeros(k);
    let mut q = DMatrix::zeros(k, k);
    for t in 0..n_t {
        let y = data.y[(row, t)];
        for a in 0..k {
            let mu_a = q_s.mu[(support[a], t)];
            h[a] += 0.5 * q_v_mean * y * (1.0 + mu_a);
            for b in 0..k {
                let mu_b = q_s.mu[(support[b], t)];
                let mut term = (1.0 + mu_a) * (1.0 + mu_b);
                if a == b {
                    term += 1.0 - mu_a * mu_a;
                }
                q[(a, b)] += 0.25 * q_v_mean * term;
            }
        }
    }
    RowProblem {
        row,
        support: support.to_vec(),
        h,
        q,
    }
}

/// Solve one row subproblem: Gaussian priors are absorbed exactly, the
/// double-exponential prior runs per-element EP sites.
pub fn solve_row(problem: &RowProblem, prior: &CPrior, cfg: &EPConfig) -> Result<RowPosterior> {
    let k = problem.support.len();
    let sites = (0..k)
        .map(|a| {
            let mut e = DVector::zeros(k);
            e[a] = 1.0;
            let kind = match *prior {
                CPrior::Gaussian { mean, variance } => SiteKind::GaussianPrior { mean, variance },
                CPrior::Flat => SiteKind::GaussianPrior {
                    mean: 0.0,
                    variance: crate::model::FLAT_PRIOR_VARIANCE,
                },
                CPrior::DoubleExponential { rate } => SiteKind::LaplacePrior { rate },
            };
            Site::new(e, kind)
        })
        .collect();
    let model = GaussianSiteModel::new(problem.h.clone(), problem.q.clone(), sites)?;
    let sol = ep::ep_solve(&model, cfg)?;
    Ok(RowPosterior {
        support: problem.support.clone(),
        mean: sol.mean,
        cov: sol.cov,
        log_z: sol.log_evidence,
        converged: sol.converged,
        ridge: sol.ridge,
    })
}

/// Posterior mode of the row under a double-exponential prior, by
/// coordinate-wise soft thresholding of the Gaussian-plus-Laplace objective
/// `h'c - c'Qc/2 - rate ||c||_1`.
pub fn row_mode_soft_threshold(problem: &RowProblem, rate: f64, tol: f64) -> DVector<f64> {
    let k = problem.support.len();
    let mut c = DVector::zeros(k);
    if k == 0 {
        return c;
    }
    for _ in 0..10_000 {
        let mut max_delta = 0.0f64;
        for j in 0..k {
            let qjj = problem.q[(j, j)].max(1e-12);
            let mut lin = problem.h[j];
            for l in 0..k {
                if l != j {
                    lin -= problem.q[(j, l)] * c[l];
                }
            }
            let new = if lin.abs() <= rate {
                0.0
            } else {
                (lin - rate.copysign(lin)) / qjj
            };
            max_delta = max_delta.max((new - c[j]).abs());
            c[j] = new;
        }
        if max_delta < tol {
            break;
        }
    }
    c
}

/// Expected squared residual `sum_ti E[(y_t^i - c_i . (1 + s_t)/2)^2]` under
/// the factored posterior; all cross moments expand exactly.
pub fn expected_residual(data: &Dataset, q_s: &ChainPosterior, q_c: &EmissionPosterior) -> f64 {
    let n_t = q_s.n_steps();
    let mut total = 0.0;
    for (i, row) in q_c.rows.iter().enumerate() {
        let k = row.support.len();
        for t in 0..n_t {
            let y = data.y[(i, t)];
            let mut mean_dot = 0.0;
            let mut second = 0.0;
            for a in 0..k {
                let abar_a = 0.5 * (1.0 + q_s.mu[(row.support[a], t)]);
                mean_dot += row.mean[a] * abar_a;
                for b in 0..k {
                    let abar_b = 0.5 * (1.0 + q_s.mu[(row.support[b], t)]);
                    let mut a_moment = abar_a * abar_b;
                    if a == b {
                        // E[a^2] = E[a] for 0-1 variables
                        a_moment = abar_a;
                    }
                    second += (row.mean[a] * row.mean[b] + row.cov[(a, b)]) * a_moment;
                }
            }
            total += y * y - 2.0 * y * mean_dot + second;
        }
    }
    total
}

/// Conjugate gamma update of the noise precision.
pub fn update_noise(
    data: &Dataset,
    q_s: &ChainPosterior,
    q_c: &EmissionPosterior,
    prior: &crate::model::GammaPrior,
) -> Result<GammaPosterior> {
    let n_y = data.y.nrows() as f64;
    let n_t = data.y.ncols() as f64;
    let e_res = expected_residual(data, q_s, q_c);
    if e_res < -1e-9 {
        return Err(Error::NonFinite(format!(
            "expected residual is negative ({e_res}); invalid moments"
        )));
    }
    let post = GammaPosterior {
        shape: prior.shape + 0.5 * n_y * n_t,
        rate: prior.rate + 0.5 * e_res.max(0.0),
    };
    post.validate()?;
    Ok(post)
}
