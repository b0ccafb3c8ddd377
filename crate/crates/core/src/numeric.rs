//! Shared numerical kernels: stable log-space primitives, scaled error
//! functions, truncated-normal moments and Gauss-Hermite quadrature rules.
//!
//! Everything probability-like is computed in log space; no probability
//! smaller than `exp(-745)` is ever materialized linearly.

use std::sync::OnceLock;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// `log(exp(a) + exp(b))` with proper handling of `-inf` inputs.
pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Log-sum-exp over a slice; returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 33.0 {
        x
    } else if x < -33.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log sigma(x)`; tends to `x` as `x -> -inf`, never returns `-inf` for finite input.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// Cody's rational approximations for the error function family
// (the SPECFUN scheme): three branches at 0.46875 and 4.0.

const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];

fn erf_small(x: f64) -> f64 {
    let z = x * x;
    let mut num = ERF_A[4] * z;
    let mut den = z;
    for i in 0..3 {
        num = (num + ERF_A[i]) * z;
        den = (den + ERF_B[i]) * z;
    }
    x * (num + ERF_A[3]) / (den + ERF_B[3])
}

/// `exp(y^2) erfc(y)` for `y >= 0.46875`.
fn erfcx_large(y: f64) -> f64 {
    if y <= 4.0 {
        let mut num = ERF_C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + ERF_C[i]) * y;
            den = (den + ERF_D[i]) * y;
        }
        (num + ERF_C[7]) / (den + ERF_D[7])
    } else {
        let z = 1.0 / (y * y);
        let mut num = ERF_P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + ERF_P[i]) * z;
            den = (den + ERF_Q[i]) * z;
        }
        let r = z * (num + ERF_P[4]) / (den + ERF_Q[4]);
        (FRAC_1_SQRT_PI - r) / y
    }
}

pub fn erf(x: f64) -> f64 {
    if x.abs() <= 0.46875 {
        erf_small(x)
    } else {
        let e = 1.0 - erfc(x.abs());
        if x < 0.0 {
            -e
        } else {
            e
        }
    }
}

pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let r = if y <= 0.46875 {
        1.0 - erf_small(y)
    } else {
        // split the exponent to keep exp(-y^2) accurate
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * erfcx_large(y)
    };
    if x < 0.0 {
        2.0 - r
    } else {
        r
    }
}

/// Scaled complementary error function `exp(x^2) erfc(x)`; the reflection
/// `erfcx(-x) = 2 exp(x^2) - erfcx(x)` covers negative inputs (overflows for
/// x < -26.6, as does the function itself).
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        let e = (x * x).min(709.0).exp();
        return 2.0 * e - erfcx(-x);
    }
    if x <= 0.46875 {
        (x * x).exp() * (1.0 - erf_small(x))
    } else {
        erfcx_large(x)
    }
}

/// `log Phi(x)`, stable over the whole real line.
pub fn log_ndtr(x: f64) -> f64 {
    if x > -1.0 {
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        // Phi(x) = 1/2 erfcx(-x/sqrt2) exp(-x^2/2)
        (0.5 * erfcx(-x / SQRT_2)).ln() - 0.5 * x * x
    }
}

/// Hazard (inverse Mills) ratio `phi(x) / Phi(-x)`.
pub fn normal_hazard(x: f64) -> f64 {
    if x < -30.0 {
        // Phi(-x) ~ 1
        return normal_pdf(x);
    }
    (2.0 / std::f64::consts::PI).sqrt() / erfcx(x / SQRT_2)
}

/// Moments of `N(mu, var)` truncated to `u >= 0`.
///
/// Returns `(log_mass, mean, var)` of the truncated distribution, where
/// `log_mass = log Phi(mu/sigma)` is the untruncated mass above zero.
pub fn truncated_normal_lower(mu: f64, var: f64) -> (f64, f64, f64) {
    let sigma = var.sqrt();
    let alpha = -mu / sigma;
    let log_mass = log_ndtr(-alpha);
    if alpha > 100.0 {
        // Deep truncation: series for the Mills ratio avoids catastrophic
        // cancellation in 1 + alpha*h - h^2.
        let a2 = alpha * alpha;
        let mean = sigma * (1.0 / alpha - 2.0 / (alpha * a2) + 10.0 / (alpha * a2 * a2));
        let v = var * (1.0 / a2 - 6.0 / (a2 * a2));
        return (log_mass, mean, v);
    }
    let h = normal_hazard(alpha);
    let mean = mu + sigma * h;
    let v = var * (1.0 + alpha * h - h * h);
    (log_mass, mean, v.max(0.0))
}

/// Moments of `N(mu, var)` truncated to `u <= 0`; mirror of `truncated_normal_lower`.
pub fn truncated_normal_upper(mu: f64, var: f64) -> (f64, f64, f64) {
    let (log_mass, m, v) = truncated_normal_lower(-mu, var);
    (log_mass, -m, v)
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature
// ---------------------------------------------------------------------------

/// Gauss-Hermite rule for the physicists' weight `exp(-x^2)`; weights sum to
/// `sqrt(pi)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Build an `n`-point rule. Nodes are the eigenvalues of the Jacobi matrix
    /// (implicit-shift QL, eigenvalues only); weights come from the
    /// Christoffel identity `w_i = 1 / sum_k p_k(x_i)^2` over the orthonormal
    /// Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature rule needs at least one node");
        let mut diag = vec![0.0; n];
        // off[k] couples rows k and k+1; last slot stays zero.
        let mut off = vec![0.0; n];
        for k in 1..n {
            off[k - 1] = (k as f64 / 2.0).sqrt();
        }
        tridiagonal_eigenvalues(&mut diag, &mut off);
        diag.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let weights = diag
            .iter()
            .map(|&x| {
                let mut sum = 0.0;
                // orthonormal recurrence p_{k+1} = (x sqrt2 p_k - sqrt(k) p_{k-1}) / sqrt(k+1)
                let mut pm = 0.0_f64;
                let mut pc = std::f64::consts::PI.powf(-0.25);
                sum += pc * pc;
                for k in 0..n - 1 {
                    let pn = (x * SQRT_2 * pc - (k as f64).sqrt() * pm) / ((k + 1) as f64).sqrt();
                    pm = pc;
                    pc = pn;
                    sum += pc * pc;
                }
                1.0 / sum
            })
            .collect();
        GaussHermite {
            nodes: diag,
            weights,
        }
    }

    /// `E[f(u)]` for `u ~ N(mean, var)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, mean: f64, var: f64, f: F) -> f64 {
        let scale = SQRT_2 * var.sqrt();
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mean + scale * t);
        }
        acc * FRAC_1_SQRT_PI
    }

    /// Zeroth/first/second moments of `exp(log_f(u)) N(u; mean, var)` computed
    /// in log space: returns `(log_z, tilted_mean, tilted_var)`.
    pub fn tilted_moments<F: Fn(f64) -> f64>(&self, mean: f64, var: f64, log_f: F) -> (f64, f64, f64) {
        let scale = SQRT_2 * var.sqrt();
        let n = self.nodes.len();
        let mut logs = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(n);
        let mut max = f64::NEG_INFINITY;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            let u = mean + scale * t;
            let l = w.ln() + log_f(u);
            max = max.max(l);
            logs.push(l);
            us.push(u);
        }
        if max == f64::NEG_INFINITY {
            return (f64::NEG_INFINITY, mean, var);
        }
        let mut z = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (l, u) in logs.iter().zip(&us) {
            let e = (l - max).exp();
            z += e;
            m1 += e * u;
            m2 += e * u * u;
        }
        m1 /= z;
        m2 /= z;
        let log_z = max + z.ln() - 0.5 * std::f64::consts::PI.ln();
        (log_z, m1, (m2 - m1 * m1).max(0.0))
    }
}

/// Gauss-Hermite rules at integer multiples of a base node count, built
/// lazily and shared across threads. Wide tilted distributions need finer
/// node spacing; the multiple is chosen from the estimated width.
#[derive(Debug)]
pub struct QuadLadder {
    base: usize,
    rungs: [OnceLock<GaussHermite>; MAX_RUNG],
}

const MAX_RUNG: usize = 8;

impl QuadLadder {
    pub fn new(base: usize) -> Self {
        QuadLadder {
            base: base.max(1),
            rungs: std::array::from_fn(|_| OnceLock::new()),
        }
    }

    pub fn base_nodes(&self) -> usize {
        self.base
    }

    pub fn rule(&self, multiple: usize) -> &GaussHermite {
        let k = multiple.clamp(1, MAX_RUNG);
        self.rungs[k - 1].get_or_init(|| GaussHermite::new(self.base * k))
    }

    pub fn base_rule(&self) -> &GaussHermite {
        self.rule(1)
    }
}

/// One mode-centred Gauss-Hermite pass over `exp(log_f(u)) N(u; mean, var)`:
/// returns `(log_z, tilted_mean, tilted_var)` of the integrand treated as an
/// unnormalised density.
fn gh_logspace_pass<F: Fn(f64) -> f64>(
    rule: &GaussHermite,
    center: f64,
    width: f64,
    mean: f64,
    var: f64,
    log_f: &F,
) -> (f64, f64, f64) {
    let mut max = f64::NEG_INFINITY;
    let n = rule.nodes.len();
    let mut logs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        if w == 0.0 {
            continue; // far-tail node with underflowed weight; mass ~ exp(-t^2)
        }
        let u = center + width * t;
        let l = w.ln() + t * t + log_f(u) - (u - mean) * (u - mean) / (2.0 * var);
        max = max.max(l);
        logs.push(l);
        us.push(u);
    }
    if max == f64::NEG_INFINITY {
        return (f64::NEG_INFINITY, center, width * width);
    }
    let mut z = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for (l, u) in logs.iter().zip(&us) {
        let e = (l - max).exp();
        z += e;
        m1 += e * u;
        m2 += e * u * u;
    }
    m1 /= z;
    m2 /= z;
    let log_z = max + z.ln() + width.ln() - 0.5 * (LN_2PI + var.ln());
    (log_z, m1, (m2 - m1 * m1).max(0.0))
}

/// Moments of `exp(log_f(u)) N(u; mean, var)` by adaptive Gauss-Hermite:
/// a first pass at the supplied mode and width estimate, then re-centred
/// passes whose node count scales with the measured width. `log_f` must make
/// the integrand unimodal.
pub fn adaptive_gh_moments<F: Fn(f64) -> f64>(
    mean: f64,
    var: f64,
    mode: f64,
    width_hint: f64,
    ladder: &QuadLadder,
    log_f: F,
) -> (f64, f64, f64) {
    let base = ladder.base_rule();
    let (_, m1, v1) = gh_logspace_pass(base, mode, width_hint.max(1e-12), mean, var, &log_f);
    let w1 = v1.sqrt().max(1e-12);
    let rung = (w1.ceil() as usize).max(1);
    let rule = ladder.rule(rung);
    let (_, m2, v2) = gh_logspace_pass(rule, m1, w1, mean, var, &log_f);
    gh_logspace_pass(rule, m2, v2.sqrt().max(1e-12), mean, var, &log_f)
}

/// Mode of `e1 log sigma(u) + e0 log sigma(-u) - (u - mean)^2 / (2 var)`
/// by bisection-safeguarded Newton (the objective is strictly concave).
pub fn soft_logistic_mode(mean: f64, var: f64, e1: f64, e0: f64) -> f64 {
    let g1 = |u: f64| e1 * sigmoid(-u) - e0 * sigmoid(u) - (u - mean) / var;
    let mut lo = mean - (e1 + e0) * var - 10.0;
    let mut hi = mean + (e1 + e0) * var + 10.0;
    while g1(lo) < 0.0 {
        lo -= var.max(1.0);
    }
    while g1(hi) > 0.0 {
        hi += var.max(1.0);
    }
    let mut u = 0.5 * (lo + hi);
    for _ in 0..200 {
        let s = sigmoid(u);
        let g = e1 * (1.0 - s) - e0 * s - (u - mean) / var;
        if g > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let curv = (e1 + e0) * s * (1.0 - s) + 1.0 / var;
        let mut next = u + g / curv;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() < 1e-14 * (1.0 + u.abs()) {
            return next;
        }
        u = next;
    }
    u
}

/// `E[log sigma(u)]` for `u ~ N(mean, var)`, stable over the whole plane.
///
/// Uses `log sigma(u) = min(u, 0) - log(1 + e^{-|u|})`: the first part has a
/// closed form, the bounded remainder is integrated adaptively.
pub fn expected_log_sigmoid(mean: f64, var: f64, ladder: &QuadLadder) -> f64 {
    if var < 1e-12 {
        return log_sigmoid(mean);
    }
    let sigma = var.sqrt();
    let a = mean / sigma;
    let expected_min = mean * (0.5 * erfc(a / SQRT_2)) - sigma * normal_pdf(a);
    // remainder r(u) = log(1 + e^{-|u|}) is positive with peak log 2 at zero
    let log_r = |u: f64| softplus(-u.abs()).ln();
    // mode of log r + log N lies between 0 and mean
    let mode = if mean.abs() < 1.0 {
        0.0
    } else {
        // ternary search on the concave objective
        let g = |u: f64| log_r(u) - (u - mean) * (u - mean) / (2.0 * var);
        let (mut lo, mut hi) = (-mean.abs() - 2.0 * sigma - 2.0, mean.abs() + 2.0 * sigma + 2.0);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if g(m1) < g(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
            if hi - lo < 1e-11 * (1.0 + lo.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let (log_z, _, _) = adaptive_gh_moments(mean, var, mode, sigma.min(2.0), ladder, log_r);
    expected_min - log_z.exp()
}

/// Eigenvalues of a symmetric tridiagonal matrix by the implicit QL algorithm
/// with Wilkinson shifts (in-place in `diag`; `off` must have the same length
/// with the trailing slot zero).
fn tridiagonal_eigenvalues(diag: &mut [f64], off: &mut [f64]) {
    let n = diag.len();
    if n <= 1 {
        return;
    }
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m < n - 1 {
                let dd = diag[m].abs() + diag[m + 1].abs();
                if off[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter < 80, "tridiagonal QL failed to converge");
            let mut g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
            let mut r = g.hypot(1.0);
            g = diag[m] - diag[l] + off[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * off[i];
                let b = c * off[i];
                r = f.hypot(g);
                off[i + 1] = r;
                if r == 0.0 {
                    diag[i + 1] -= p;
                    off[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + 2.0 * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            diag[l] -= p;
            off[l] = g;
            off[m] = 0.0;
        }
    }
}
