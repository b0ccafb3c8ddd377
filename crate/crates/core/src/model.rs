//! Model definition: dimensions, priors, data containers and the exact joint
//! log-density used as the reference for every approximate computation.
//!
//! Observations are `y_t ~ N(C (1 + s_t) / 2, v^{-1} I)` where `C` is sparse
//! with fixed structure, the binary chains `s_t^i` evolve under one of the
//! transition families, and `(C, W, v)` carry independent priors.

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numeric::LN_2PI;
use crate::transitions::{self, ChainWeights, TransitionFamily};

/// Variance used to realise the "flat" prior as a wide Gaussian; exact
/// flatness would break the EP site arithmetic.
pub const FLAT_PRIOR_VARIANCE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CPrior {
    Gaussian { mean: f64, variance: f64 },
    Flat,
    DoubleExponential { rate: f64 },
}

impl CPrior {
    /// Gaussian parameters when the prior is (effectively) Gaussian.
    pub fn as_gaussian(&self) -> Option<(f64, f64)> {
        match *self {
            CPrior::Gaussian { mean, variance } => Some((mean, variance)),
            CPrior::Flat => Some((0.0, FLAT_PRIOR_VARIANCE)),
            CPrior::DoubleExponential { .. } => None,
        }
    }

    pub fn log_density(&self, c: f64) -> f64 {
        match *self {
            CPrior::Gaussian { mean, variance } => {
                -0.5 * (LN_2PI + variance.ln()) - (c - mean).powi(2) / (2.0 * variance)
            }
            CPrior::Flat => {
                -0.5 * (LN_2PI + FLAT_PRIOR_VARIANCE.ln()) - c * c / (2.0 * FLAT_PRIOR_VARIANCE)
            }
            CPrior::DoubleExponential { rate } => (rate / 2.0).ln() - rate * c.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WPrior {
    DoubleExponential { rate: f64 },
    /// Non-negative weights only; valid for `tp-scaled`.
    Exponential { rate: f64 },
}

impl WPrior {
    pub fn log_density(&self, w: f64) -> f64 {
        match *self {
            WPrior::DoubleExponential { rate } => (rate / 2.0).ln() - rate * w.abs(),
            WPrior::Exponential { rate } => {
                if w < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    rate.ln() - rate * w
                }
            }
        }
    }

    pub fn rate(&self) -> f64 {
        match *self {
            WPrior::DoubleExponential { rate } | WPrior::Exponential { rate } => rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrior {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        -0.5 * (LN_2PI + self.variance.ln()) - (x - self.mean).powi(2) / (2.0 * self.variance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn log_density(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * v.ln()
            - self.rate * v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub c_prior: CPrior,
    pub w_prior: WPrior,
    /// Prior on the bias terms of `sig` / `tp-exp`.
    pub bias_prior: GaussianPrior,
    pub v_prior: GammaPrior,
    /// Base rate for `tp-scaled` (dimensionless); unused by the other families.
    pub b0: f64,
}

impl Hyperparameters {
    pub fn validate(&self, family: TransitionFamily) -> Result<()> {
        match self.c_prior {
            CPrior::Gaussian { variance, .. } if variance <= 0.0 => {
                return Err(Error::DomainViolation("c prior variance must be > 0".into()))
            }
            CPrior::DoubleExponential { rate } if rate <= 0.0 => {
                return Err(Error::DomainViolation("c prior rate must be > 0".into()))
            }
            _ => {}
        }
        if self.w_prior.rate() <= 0.0 {
            return Err(Error::DomainViolation("w prior rate must be > 0".into()));
        }
        if matches!(self.w_prior, WPrior::Exponential { .. })
            && family != TransitionFamily::TpScaled
        {
            return Err(Error::Config(
                "exponential w prior requires the tp-scaled family".into(),
            ));
        }
        if self.bias_prior.variance <= 0.0 {
            return Err(Error::DomainViolation("bias prior variance must be > 0".into()));
        }
        if self.v_prior.shape <= 0.0 || self.v_prior.rate <= 0.0 {
            return Err(Error::DomainViolation(
                "gamma prior on v needs shape > 0 and rate > 0".into(),
            ));
        }
        if family == TransitionFamily::TpScaled && !(self.b0 > 0.0) {
            return Err(Error::DomainViolation(
                "tp-scaled needs a strictly positive base rate b0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            c_prior: CPrior::Gaussian {
                mean: 0.0,
                variance: 4.0,
            },
            w_prior: WPrior::Exponential { rate: 1.0 },
            bias_prior: GaussianPrior {
                mean: 0.0,
                variance: 1.0,
            },
            v_prior: GammaPrior {
                shape: 2.0,
                rate: 0.2,
            },
            // calibrated -log(1 - 0.05)
            b0: -(0.95_f64.ln()),
        }
    }
}

// ---------------------------------------------------------------------------
// Sparse emission matrix
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix over a fixed structure; only the structural
/// non-zeros are stored or inferred.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRowMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRowMatrix {
    /// Zero-valued matrix over the given (row, col) structure. Positions may
    /// arrive in any order; duplicates and out-of-range indices are rejected.
    pub fn from_structure(
        n_rows: usize,
        n_cols: usize,
        structure: &[(usize, usize)],
    ) -> Result<Self> {
        let mut per_row: Vec<Vec<usize>> = vec![Vec::new(); n_rows];
        for &(r, c) in structure {
            if r >= n_rows || c >= n_cols {
                return Err(Error::DimensionMismatch(format!(
                    "structure entry ({r}, {c}) outside {n_rows} x {n_cols}"
                )));
            }
            per_row[r].push(c);
        }
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut cols = Vec::with_capacity(structure.len());
        row_ptr.push(0);
        for row in &mut per_row {
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::DomainViolation("duplicate structure entry".into()));
            }
            cols.extend_from_slice(row);
            row_ptr.push(cols.len());
        }
        let nnz = cols.len();
        Ok(SparseRowMatrix {
            n_rows,
            n_cols,
            row_ptr,
            cols,
            vals: vec![0.0; nnz],
        })
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    pub fn row_support(&self, i: usize) -> &[usize] {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        &self.cols[lo..hi]
    }

    pub fn set_row_values(&mut self, i: usize, values: &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        assert_eq!(values.len(), hi - lo);
        self.vals[lo..hi].copy_from_slice(values);
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    /// Structure as (row, col) pairs in row-major order.
    pub fn structure(&self) -> Vec<(usize, usize)> {
        (0..self.n_rows)
            .flat_map(|r| self.row_support(r).iter().map(move |&c| (r, c)))
            .collect()
    }

    pub fn same_structure(&self, other: &SparseRowMatrix) -> bool {
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.row_ptr == other.row_ptr
            && self.cols == other.cols
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// `C^T y` for a dense vector `y` of length `n_rows`.
    pub fn transpose_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[c] += v * y[r];
            }
        }
        out
    }
}

/// `C (1 + s) / 2` exploiting sparsity: only the `+1` states contribute.
pub fn emission_mean(c: &SparseRowMatrix, s_t: &[i8]) -> Result<Vec<f64>> {
    if s_t.len() != c.n_cols {
        return Err(Error::DimensionMismatch(format!(
            "state length {} vs {} chains",
            s_t.len(),
            c.n_cols
        )));
    }
    let mut out = vec![0.0; c.n_rows];
    for r in 0..c.n_rows {
        let (cols, vals) = c.row(r);
        out[r] = cols
            .iter()
            .zip(vals)
            .filter(|(&j, _)| s_t[j] == 1)
            .map(|(_, &v)| v)
            .sum();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Spec, data, states
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub n_s: usize,
    pub n_y: usize,
    pub n_x: usize,
    pub n_t: usize,
    pub transition_family: TransitionFamily,
    /// Structural non-zeros of `C` as (row, col) pairs.
    pub c_structure: Vec<(usize, usize)>,
    pub hyper: Hyperparameters,
    /// Identifiability convention: chains start at -1.
    pub clamp_start: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_t < 2 {
            return Err(Error::DomainViolation("need n_t >= 2".into()));
        }
        if self.n_s == 0 || self.n_y == 0 {
            return Err(Error::DomainViolation("need n_s >= 1 and n_y >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut col_hit = vec![false; self.n_s];
        for &(r, c) in &self.c_structure {
            if r >= self.n_y || c >= self.n_s {
                return Err(Error::DimensionMismatch(format!(
                    "structure entry ({r}, {c}) out of range"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::DomainViolation(format!(
                    "duplicate structure entry ({r}, {c})"
                )));
            }
            col_hit[c] = true;
        }
        if let Some(j) = col_hit.iter().position(|&h| !h) {
            return Err(Error::DomainViolation(format!(
                "chain {j} influences no observation"
            )));
        }
        self.hyper.validate(self.transition_family)
    }

    pub fn empty_c(&self) -> Result<SparseRowMatrix> {
        SparseRowMatrix::from_structure(self.n_y, self.n_s, &self.c_structure)
    }
}

/// Input series, physical time-lags and observations.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `n_x` x `n_t` inputs.
    pub x: DMatrix<f64>,
    /// `n_t - 1` positive time-lags.
    pub delta: Vec<f64>,
    /// `n_y` x `n_t` observations.
    pub y: DMatrix<f64>,
}

impl Dataset {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.x.nrows() != spec.n_x || self.x.ncols() != spec.n_t {
            return Err(Error::DimensionMismatch(format!(
                "X is {}x{}, expected {}x{}",
                self.x.nrows(),
                self.x.ncols(),
                spec.n_x,
                spec.n_t
            )));
        }
        if self.y.nrows() != spec.n_y || self.y.ncols() != spec.n_t {
            return Err(Error::DimensionMismatch(format!(
                "Y is {}x{}, expected {}x{}",
                self.y.nrows(),
                self.y.ncols(),
                spec.n_y,
                spec.n_t
            )));
        }
        if self.delta.len() != spec.n_t - 1 {
            return Err(Error::DimensionMismatch(format!(
                "delta length {} vs n_t - 1 = {}",
                self.delta.len(),
                spec.n_t - 1
            )));
        }
        if self.delta.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::DomainViolation("time-lags must be positive".into()));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset contains a non-finite entry".into()));
        }
        if spec.transition_family == TransitionFamily::TpScaled
            && self.x.iter().any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::DomainViolation(
                "tp-scaled inputs must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn input_at(&self, t: usize) -> Vec<f64> {
        self.x.column(t).iter().cloned().collect()
    }
}

/// Matrix of chain states in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    /// `n_s` x `n_t`.
    pub s: DMatrix<i8>,
}

impl StateMatrix {
    pub fn validate(&self, clamp_start: bool) -> Result<()> {
        if self.s.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::DomainViolation(
                "states must be -1 or +1".into(),
            ));
        }
        if clamp_start && self.s.column(0).iter().any(|&v| v != -1) {
            return Err(Error::DomainViolation(
                "identifiability convention requires chains to start at -1".into(),
            ));
        }
        Ok(())
    }

    pub fn column_states(&self, t: usize) -> Vec<i8> {
        self.s.column(t).iter().cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Joint log density (test oracle)
// ---------------------------------------------------------------------------

/// Exact log of the joint density: Gaussian emissions, per-chain transition
/// probabilities and the parameter priors. The reference every approximate
/// computation is tested against.
pub fn joint_log_density(
    spec: &ModelSpec,
    data: &Dataset,
    states: &StateMatrix,
    c: &SparseRowMatrix,
    w: &[ChainWeights],
    v: f64,
) -> Result<f64> {
    spec.validate()?;
    data.validate(spec)?;
    states.validate(spec.clamp_start)?;
    if states.s.nrows() != spec.n_s || states.s.ncols() != spec.n_t {
        return Err(Error::DimensionMismatch("state matrix shape".into()));
    }
    let expected = spec.empty_c()?;
    if !expected.same_structure(c) {
        return Err(Error::DimensionMismatch(
            "C does not match the declared sparsity structure".into(),
        ));
    }
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::DomainViolation(format!("noise precision v = {v}")));
    }
    if w.len() != spec.n_s {
        return Err(Error::DimensionMismatch(format!(
            "{} weight sets for {} chains",
            w.len(),
            spec.n_s
        )));
    }
    for wi in w {
        wi.validate(spec.transition_family)?;
        if wi.w_plus.len() != spec.n_x {
            return Err(Error::DimensionMismatch("weight vector length".into()));
        }
    }

    let family = spec.transition_family;
    let hyper = &spec.hyper;
    let mut total = 0.0;

    // emissions
    for t in 0..spec.n_t {
        let s_t = states.column_states(t);
        let mean = emission_mean(c, &s_t)?;
        let mut sq = 0.0;
        for i in 0..spec.n_y {
            let r = data.y[(i, t)] - mean[i];
            sq += r * r;
        }
        total += 0.5 * spec.n_y as f64 * (v.ln() - LN_2PI) - 0.5 * v * sq;
    }

    // transitions (+ deterministic start under the clamp, else uniform)
    if !spec.clamp_start {
        total += spec.n_s as f64 * (0.5_f64).ln();
    }
    for t in 0..spec.n_t - 1 {
        let x_t = data.input_at(t);
        for (i, wi) in w.iter().enumerate() {
            total += transitions::log_transition_prob(
                family,
                wi,
                &x_t,
                data.delta[t],
                states.s[(i, t)],
                states.s[(i, t + 1)],
                hyper.b0,
            )?;
        }
    }

    // priors
    for &val in c.values() {
        total += hyper.c_prior.log_density(val);
    }
    for wi in w {
        for &wv in wi.w_plus.iter().chain(wi.w_minus.iter()) {
            total += hyper.w_prior.log_density(wv);
        }
        if family != TransitionFamily::TpScaled {
            total += hyper.bias_prior.log_density(wi.b_plus);
            total += hyper.bias_prior.log_density(wi.b_minus);
        }
    }
    total += hyper.v_prior.log_density(v);

    if !total.is_finite() {
        return Err(Error::NonFinite(
            "joint log density is not finite; invalid parameters".into(),
        ));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(family: TransitionFamily) -> ModelSpec {
        let w_prior = if family == TransitionFamily::TpScaled {
            WPrior::Exponential { rate: 1.0 }
        } else {
            WPrior::DoubleExponential { rate: 1.0 }
        };
        ModelSpec {
            n_s: 2,
            n_y: 3,
            n_x: 2,
            n_t: 3,
            transition_family: family,
            c_structure: vec![(0, 0), (0, 1), (1, 1), (2, 0)],
            hyper: Hyperparameters {
                w_prior,
                ..Hyperparameters::default()
            },
            clamp_start: true,
        }
    }

    fn tiny_data(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Dataset {
        Dataset {
            x: DMatrix::from_fn(spec.n_x, spec.n_t, |_, _| rng.random::<f64>()),
            delta: vec![1.0; spec.n_t - 1],
            y: DMatrix::from_fn(spec.n_y, spec.n_t, |_, _| 2.0 * rng.random::<f64>() - 1.0),
        }
    }

    /// Naive factor-by-factor recomputation with dense arithmetic.
    fn naive_joint(
        spec: &ModelSpec,
        data: &Dataset,
        states: &StateMatrix,
        c: &SparseRowMatrix,
        w: &[ChainWeights],
        v: f64,
    ) -> f64 {
        let dense = c.to_dense();
        let mut total = 0.0;
        for t in 0..spec.n_t {
            for i in 0..spec.n_y {
                let mut mean = 0.0;
                for j in 0..spec.n_s {
                    mean += dense[(i, j)] * (1.0 + states.s[(j, t)] as f64) / 2.0;
                }
                let r = data.y[(i, t)] - mean;
                total += 0.5 * (v.ln() - LN_2PI) - 0.5 * v * r * r;
            }
        }
        for t in 0..spec.n_t - 1 {
            let x_t = data.input_at(t);
            for i in 0..spec.n_s {
                let p = transitions::transition_prob(
                    spec.transition_family,
                    &w[i],
                    &x_t,
                    data.delta[t],
                    states.s[(i, t)],
                    states.s[(i, t + 1)],
                    spec.hyper.b0,
                )
                .unwrap();
                total += p.ln();
            }
        }
        for &val in c.values() {
            total += spec.hyper.c_prior.log_density(val);
        }
        for wi in w {
            for &wv in wi.w_plus.iter().chain(wi.w_minus.iter()) {
                total += spec.hyper.w_prior.log_density(wv);
            }
            if spec.transition_family != TransitionFamily::TpScaled {
                total += spec.hyper.bias_prior.log_density(wi.b_plus);
                total += spec.hyper.bias_prior.log_density(wi.b_minus);
            }
        }
        total + spec.hyper.v_prior.log_density(v)
    }

    fn random_instance(
        family: TransitionFamily,
        rng: &mut ChaCha8Rng,
    ) -> (ModelSpec, Dataset, StateMatrix, SparseRowMatrix, Vec<ChainWeights>, f64) {
        let spec = tiny_spec(family);
        let data = tiny_data(&spec, rng);
        let mut s = DMatrix::from_element(spec.n_s, spec.n_t, -1i8);
        for i in 0..spec.n_s {
            for t in 1..spec.n_t {
                s[(i, t)] = if rng.random::<bool>() { 1 } else { -1 };
            }
        }
        let mut c = spec.empty_c().unwrap();
        for v in c.values_mut() {
            *v = 2.0 * rng.random::<f64>() - 1.0;
        }
        let w: Vec<ChainWeights> = (0..spec.n_s)
            .map(|_| ChainWeights {
                w_plus: (0..spec.n_x).map(|_| rng.random::<f64>()).collect(),
                w_minus: (0..spec.n_x).map(|_| rng.random::<f64>()).collect(),
                b_plus: rng.random::<f64>() - 0.5,
                b_minus: rng.random::<f64>() - 0.5,
            })
            .collect();
        let v = 0.5 + rng.random::<f64>();
        (spec, data, StateMatrix { s }, c, w, v)
    }

    #[test]
    fn joint_matches_naive_factor_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for family in [TransitionFamily::Sig, TransitionFamily::TpScaled, TransitionFamily::TpExp] {
            for _ in 0..10 {
                let (spec, data, s, c, w, v) = random_instance(family, &mut rng);
                let got = joint_log_density(&spec, &data, &s, &c, &w, v).unwrap();
                let want = naive_joint(&spec, &data, &s, &c, &w, v);
                assert_relative_eq!(got, want, epsilon = 1e-10, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn emission_term_is_standard_normal_constant() {
        // one observation, mean zero, y = 0, v = 1: the per-step emission
        // factor is -log(2 pi)/2; removing it changes the joint by exactly that.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (spec, mut data, s, mut c, w, _) = random_instance(TransitionFamily::Sig, &mut rng);
        for v in c.values_mut() {
            *v = 0.0;
        }
        data.y.fill(0.0);
        let full = joint_log_density(&spec, &data, &s, &c, &w, 1.0).unwrap();
        // each of the n_y * n_t emission factors is N(0; 0, 1)
        let per_factor = -0.5 * LN_2PI;
        let emissions = (spec.n_y * spec.n_t) as f64 * per_factor;
        let mut no_emission = naive_like_without_emissions(&spec, &data, &s, &c, &w, 1.0);
        no_emission += emissions;
        assert_relative_eq!(full, no_emission, epsilon = 1e-10);
    }

    fn naive_like_without_emissions(
        spec: &ModelSpec,
        data: &Dataset,
        states: &StateMatrix,
        c: &SparseRowMatrix,
        w: &[ChainWeights],
        v: f64,
    ) -> f64 {
        let mut total = 0.0;
        for t in 0..spec.n_t - 1 {
            let x_t = data.input_at(t);
            for i in 0..spec.n_s {
                total += transitions::log_transition_prob(
                    spec.transition_family,
                    &w[i],
                    &x_t,
                    data.delta[t],
                    states.s[(i, t)],
                    states.s[(i, t + 1)],
                    spec.hyper.b0,
                )
                .unwrap();
            }
        }
        for &val in c.values() {
            total += spec.hyper.c_prior.log_density(val);
        }
        for wi in w {
            for &wv in wi.w_plus.iter().chain(wi.w_minus.iter()) {
                total += spec.hyper.w_prior.log_density(wv);
            }
            if spec.transition_family != TransitionFamily::TpScaled {
                total += spec.hyper.bias_prior.log_density(wi.b_plus);
                total += spec.hyper.bias_prior.log_density(wi.b_minus);
            }
        }
        total + spec.hyper.v_prior.log_density(v)
    }

    #[test]
    fn additive_over_emission_factors() {
        // dropping one time step's emission term shifts the value by exactly
        // that term, recomputed independently
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (spec, data, s, c, w, v) = random_instance(TransitionFamily::TpExp, &mut rng);
        let full = joint_log_density(&spec, &data, &s, &c, &w, v).unwrap();
        let t_drop = 1;
        let s_t = s.column_states(t_drop);
        let mean = emission_mean(&c, &s_t).unwrap();
        let mut term = 0.0;
        for i in 0..spec.n_y {
            let r = data.y[(i, t_drop)] - mean[i];
            term += 0.5 * (v.ln() - LN_2PI) - 0.5 * v * r * r;
        }
        let without = full - term;
        // recompute with that step's observations moved onto the mean: residual zero,
        // then subtract the zero-residual constant
        let mut data2 = data.clone();
        for i in 0..spec.n_y {
            data2.y[(i, t_drop)] = mean[i];
        }
        let shifted = joint_log_density(&spec, &data2, &s, &c, &w, v).unwrap();
        let const_term = spec.n_y as f64 * 0.5 * (v.ln() - LN_2PI);
        assert_relative_eq!(shifted - const_term, without, epsilon = 1e-10, max_relative = 1e-12);
    }

    #[test]
    fn forbidden_state_value_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (spec, data, mut s, c, w, v) = random_instance(TransitionFamily::Sig, &mut rng);
        s.s[(0, 1)] = 0;
        assert!(matches!(
            joint_log_density(&spec, &data, &s, &c, &w, v),
            Err(Error::DomainViolation(_))
        ));
    }

    #[test]
    fn clamp_violation_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (spec, data, mut s, c, w, v) = random_instance(TransitionFamily::Sig, &mut rng);
        s.s[(0, 0)] = 1;
        assert!(joint_log_density(&spec, &data, &s, &c, &w, v).is_err());
    }

    #[test]
    fn tp_scaled_rejects_inputs_outside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (spec, mut data, s, c, mut w, v) = random_instance(TransitionFamily::TpScaled, &mut rng);
        for wi in &mut w {
            for x in wi.w_plus.iter_mut().chain(wi.w_minus.iter_mut()) {
                *x = x.abs();
            }
        }
        data.x[(0, 0)] = 1.2;
        assert!(joint_log_density(&spec, &data, &s, &c, &w, v).is_err());
    }

    #[test]
    fn emission_mean_degenerate_states() {
        let c = {
            let mut c = SparseRowMatrix::from_structure(3, 2, &[(0, 0), (1, 1), (2, 0), (2, 1)])
                .unwrap();
            c.values_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
            c
        };
        assert_eq!(emission_mean(&c, &[-1, -1]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(emission_mean(&c, &[1, 1]).unwrap(), vec![1.0, 2.0, 7.0]);
        // mixed states match the dense product
        let dense = c.to_dense();
        let s = [1i8, -1];
        let got = emission_mean(&c, &s).unwrap();
        for i in 0..3 {
            let want: f64 = (0..2)
                .map(|j| dense[(i, j)] * (1.0 + s[j] as f64) / 2.0)
                .sum();
            assert_relative_eq!(got[i], want);
        }
        // dimension mismatch
        assert!(emission_mean(&c, &[1]).is_err());
    }

    #[test]
    fn spec_validation_catches_structure_defects() {
        let mut spec = tiny_spec(TransitionFamily::Sig);
        spec.c_structure.push((0, 0));
        assert!(spec.validate().is_err()); // duplicate
        let mut spec = tiny_spec(TransitionFamily::Sig);
        spec.c_structure.retain(|&(_, c)| c != 1);
        assert!(spec.validate().is_err()); // chain 1 uncovered
        let mut spec = tiny_spec(TransitionFamily::Sig);
        spec.n_t = 1;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec(TransitionFamily::Sig);
        spec.hyper.w_prior = WPrior::Exponential { rate: 1.0 };
        assert!(spec.validate().is_err()); // exponential prior needs tp-scaled
    }
}
