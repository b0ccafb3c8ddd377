//! Transition-probability families for the binary chains.
//!
//! Three parameterisations are supported:
//!
//! - `sig`: direct sigmoid transition probabilities driven by a linear
//!   function of the inputs; the physical time-lag is ignored.
//! - `tp-scaled`: continuous-time chains with non-negative rates mixing the
//!   input and its complement (`f+ = w+.x + w-.(1-x) + b0`), integrated over
//!   the time-lag.
//! - `tp-exp`: continuous-time chains with exponentiated-linear rates.
//!
//! For the continuous-time families the jump probability over a lag `dt` is
//! `f+ (1 - exp(-dt (f+ + f-))) / (f+ + f-)`, which interpolates between the
//! infinitesimal probability `dt f+` and the stationary probability
//! `f+ / (f+ + f-)`.

use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionFamily {
    Sig,
    TpScaled,
    TpExp,
}

impl TransitionFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransitionFamily::Sig => "sig",
            TransitionFamily::TpScaled => "tp-scaled",
            TransitionFamily::TpExp => "tp-exp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sig" => Ok(TransitionFamily::Sig),
            "tp-scaled" => Ok(TransitionFamily::TpScaled),
            "tp-exp" => Ok(TransitionFamily::TpExp),
            other => Err(Error::Config(format!("unknown transition family '{other}'"))),
        }
    }

    /// Point estimation is the only weight treatment for the continuous-time
    /// families; `sig` admits EP inference.
    pub fn is_continuous_time(&self) -> bool {
        !matches!(self, TransitionFamily::Sig)
    }
}

/// Per-chain weights. For `tp-scaled` the bias fields are unused (the shared
/// base rate `b0` lives in the hyperparameters) and the weights must be
/// non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainWeights {
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub b_plus: f64,
    pub b_minus: f64,
}

impl ChainWeights {
    pub fn zeros(n_x: usize) -> Self {
        ChainWeights {
            w_plus: vec![0.0; n_x],
            w_minus: vec![0.0; n_x],
            b_plus: 0.0,
            b_minus: 0.0,
        }
    }

    pub fn validate(&self, family: TransitionFamily) -> Result<()> {
        let all = self
            .w_plus
            .iter()
            .chain(self.w_minus.iter())
            .chain([&self.b_plus, &self.b_minus]);
        for &v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite("chain weight".into()));
            }
        }
        if self.w_plus.len() != self.w_minus.len() {
            return Err(Error::DimensionMismatch(
                "w_plus and w_minus lengths differ".into(),
            ));
        }
        if family == TransitionFamily::TpScaled
            && self.w_plus.iter().chain(self.w_minus.iter()).any(|&w| w < 0.0)
        {
            return Err(Error::DomainViolation(
                "tp-scaled weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Switching rates of a continuous-time chain: `f_plus` drives -1 -> +1,
/// `f_minus` drives +1 -> -1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePair {
    pub f_plus: f64,
    pub f_minus: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Switching rates for the continuous-time families. Errors for `sig`
/// (which has no rates) and for `tp-scaled` inputs outside `[0,1]`.
pub fn rates(
    family: TransitionFamily,
    w: &ChainWeights,
    x_t: &[f64],
    b0: f64,
) -> Result<RatePair> {
    if x_t.len() != w.w_plus.len() {
        return Err(Error::DimensionMismatch(format!(
            "input length {} vs weight length {}",
            x_t.len(),
            w.w_plus.len()
        )));
    }
    match family {
        TransitionFamily::Sig => Err(Error::DomainViolation(
            "sig has no switching rates".into(),
        )),
        TransitionFamily::TpScaled => {
            if x_t.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::DomainViolation(
                    "tp-scaled inputs must lie in [0,1]".into(),
                ));
            }
            let on_plus = dot(&w.w_plus, x_t);
            let on_minus = dot(&w.w_minus, x_t);
            let sum_plus: f64 = w.w_plus.iter().sum();
            let sum_minus: f64 = w.w_minus.iter().sum();
            Ok(RatePair {
                f_plus: on_plus + (sum_minus - on_minus) + b0,
                f_minus: on_minus + (sum_plus - on_plus) + b0,
            })
        }
        TransitionFamily::TpExp => Ok(RatePair {
            f_plus: (dot(&w.w_plus, x_t) + w.b_plus).exp(),
            f_minus: (dot(&w.w_minus, x_t) + w.b_minus).exp(),
        }),
    }
}

/// Jump probability of a two-state continuous-time chain over lag `dt`:
/// `f_from (1 - exp(-dt (f+ + f-))) / (f+ + f-)`, via `expm1` for small
/// exponents.
pub fn integrated_jump_prob(f_from: f64, f_to_back: f64, dt: f64) -> f64 {
    let total = f_from + f_to_back;
    if total <= 0.0 {
        return 0.0;
    }
    f_from * (-(-dt * total).exp_m1()) / total
}

/// Log of `integrated_jump_prob`.
pub fn log_integrated_jump_prob(f_from: f64, f_to_back: f64, dt: f64) -> f64 {
    let total = f_from + f_to_back;
    f_from.ln() - total.ln() + (-(-dt * total).exp_m1()).ln()
}

/// Log of the staying probability `1 - p(jump)`, in the cancellation-free
/// form `(f_back + f_from exp(-dt total)) / total`.
pub fn log_integrated_stay_prob(f_from: f64, f_to_back: f64, dt: f64) -> f64 {
    let total = f_from + f_to_back;
    (f_to_back + f_from * (-dt * total).exp()).ln() - total.ln()
}

fn check_transition_args(family: TransitionFamily, delta_t: f64, from: i8, to: i8) -> Result<()> {
    if from.abs() != 1 || to.abs() != 1 {
        return Err(Error::DomainViolation(format!(
            "states must be -1 or +1, got ({from}, {to})"
        )));
    }
    if family.is_continuous_time() && !(delta_t > 0.0 && delta_t.is_finite()) {
        return Err(Error::DomainViolation(format!(
            "time-lag must be positive for {}, got {delta_t}",
            family.as_str()
        )));
    }
    Ok(())
}

/// Transition probability `p(to | from)` for one step with lag `delta_t`.
pub fn transition_prob(
    family: TransitionFamily,
    w: &ChainWeights,
    x_t: &[f64],
    delta_t: f64,
    from: i8,
    to: i8,
    b0: f64,
) -> Result<f64> {
    check_transition_args(family, delta_t, from, to)?;
    match family {
        TransitionFamily::Sig => {
            let u = if from == -1 {
                dot(&w.w_plus, x_t) + w.b_plus
            } else {
                dot(&w.w_minus, x_t) + w.b_minus
            };
            let jump = sigmoid(u);
            Ok(if to == from { 1.0 - jump } else { jump })
        }
        _ => {
            let r = rates(family, w, x_t, b0)?;
            let (f_from, f_back) = if from == -1 {
                (r.f_plus, r.f_minus)
            } else {
                (r.f_minus, r.f_plus)
            };
            let p = integrated_jump_prob(f_from, f_back, delta_t);
            Ok(if to == from { 1.0 - p } else { p })
        }
    }
}

/// Numerically stable log transition probability; never `-inf` for the
/// continuous-time families when both rates are positive.
pub fn log_transition_prob(
    family: TransitionFamily,
    w: &ChainWeights,
    x_t: &[f64],
    delta_t: f64,
    from: i8,
    to: i8,
    b0: f64,
) -> Result<f64> {
    check_transition_args(family, delta_t, from, to)?;
    match family {
        TransitionFamily::Sig => {
            let u = if from == -1 {
                dot(&w.w_plus, x_t) + w.b_plus
            } else {
                dot(&w.w_minus, x_t) + w.b_minus
            };
            Ok(if to == from {
                log_sigmoid(-u)
            } else {
                log_sigmoid(u)
            })
        }
        _ => {
            let r = rates(family, w, x_t, b0)?;
            let (f_from, f_back) = if from == -1 {
                (r.f_plus, r.f_minus)
            } else {
                (r.f_minus, r.f_plus)
            };
            Ok(if to == from {
                log_integrated_stay_prob(f_from, f_back, delta_t)
            } else {
                log_integrated_jump_prob(f_from, f_back, delta_t)
            })
        }
    }
}

/// 2x2 table of log transition probabilities, indexed `[from][to]` with
/// state order (-1, +1).
pub fn log_transition_table(
    family: TransitionFamily,
    w: &ChainWeights,
    x_t: &[f64],
    delta_t: f64,
    b0: f64,
) -> Result<[[f64; 2]; 2]> {
    let states = [-1i8, 1i8];
    let mut table = [[0.0; 2]; 2];
    for (a, &from) in states.iter().enumerate() {
        for (b, &to) in states.iter().enumerate() {
            table[a][b] = log_transition_prob(family, w, x_t, delta_t, from, to, b0)?;
        }
    }
    Ok(table)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Calibration constants for the simulation protocol: base transition
/// probability `p0` with no input effect, jump probability `p1` when a single
/// input with the given mean weight is active.
///
/// Returns `(bias, input_scale)`:
/// - `tp-scaled`: `b0 = -log(1 - p0)`, scale `= -log(1 - p1) / mean_weight`;
/// - `sig`: `bias = logit(p0)`, scale `= (logit(p1) - bias) / mean_weight`.
pub fn calibrate_simulation(
    family: TransitionFamily,
    p0: f64,
    p1: f64,
    mean_weight: f64,
) -> Result<(f64, f64)> {
    if !(p0 > 0.0 && p1 > p0 && p1 < 1.0) {
        return Err(Error::DomainViolation(format!(
            "calibration needs 0 < p0 < p1 < 1, got ({p0}, {p1})"
        )));
    }
    if !(mean_weight > 0.0) {
        return Err(Error::DomainViolation("mean weight must be positive".into()));
    }
    match family {
        TransitionFamily::TpScaled => {
            Ok((-(1.0 - p0).ln(), -(1.0 - p1).ln() / mean_weight))
        }
        TransitionFamily::Sig => {
            let bias = logit(p0);
            Ok((bias, (logit(p1) - bias) / mean_weight))
        }
        TransitionFamily::TpExp => {
            // same calibration as sig for the bias of the log rates
            let bias = p0.ln();
            Ok((bias, (p1.ln() - bias) / mean_weight))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights(wp: &[f64], wm: &[f64]) -> ChainWeights {
        ChainWeights {
            w_plus: wp.to_vec(),
            w_minus: wm.to_vec(),
            b_plus: 0.0,
            b_minus: 0.0,
        }
    }

    #[test]
    fn tp_scaled_zero_weights_give_base_rate() {
        let w = weights(&[0.0, 0.0], &[0.0, 0.0]);
        let r = rates(TransitionFamily::TpScaled, &w, &[0.3, 0.9], 0.0513).unwrap();
        assert_relative_eq!(r.f_plus, 0.0513);
        assert_relative_eq!(r.f_minus, 0.0513);
    }

    #[test]
    fn tp_scaled_rates_formula() {
        let w = weights(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let r = rates(TransitionFamily::TpScaled, &w, &[1.0, 1.0, 1.0], 0.0513).unwrap();
        assert_relative_eq!(r.f_plus, 1.0513, epsilon = 1e-12);
        assert_relative_eq!(r.f_minus, 0.0513, epsilon = 1e-12);
    }

    #[test]
    fn tp_exp_zero_weights_unit_rate() {
        let w = weights(&[0.0], &[0.0]);
        let r = rates(TransitionFamily::TpExp, &w, &[0.7], 0.0).unwrap();
        assert_relative_eq!(r.f_plus, 1.0);
        assert_relative_eq!(r.f_minus, 1.0);
    }

    #[test]
    fn tp_scaled_rejects_out_of_range_input() {
        let w = weights(&[0.1], &[0.1]);
        assert!(rates(TransitionFamily::TpScaled, &w, &[1.5], 0.05).is_err());
        assert!(rates(TransitionFamily::TpScaled, &w, &[-0.01], 0.05).is_err());
    }

    #[test]
    fn sig_has_no_rates() {
        let w = weights(&[0.1], &[0.1]);
        assert!(rates(TransitionFamily::Sig, &w, &[0.5], 0.0).is_err());
    }

    #[test]
    fn stationary_limit_for_large_lag() {
        // f+ = f- = 1, huge lag: p -> 1/2
        let w = ChainWeights {
            w_plus: vec![0.0],
            w_minus: vec![0.0],
            b_plus: 0.0,
            b_minus: 0.0,
        };
        let p = transition_prob(TransitionFamily::TpExp, &w, &[0.0], 1e3, -1, 1, 0.0).unwrap();
        assert_relative_eq!(p, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn infinitesimal_limit_for_small_lag() {
        // f+ = 2 via exp family, dt = 1e-6: p ~ 2e-6 within 1%
        let w = ChainWeights {
            w_plus: vec![0.0],
            w_minus: vec![0.0],
            b_plus: 2.0_f64.ln(),
            b_minus: 0.0,
        };
        let p = transition_prob(TransitionFamily::TpExp, &w, &[0.0], 1e-6, -1, 1, 0.0).unwrap();
        assert!((p - 2e-6).abs() / 2e-6 < 0.01, "p = {p}");
    }

    #[test]
    fn sig_zero_argument_is_half() {
        let w = ChainWeights {
            w_plus: vec![0.0],
            w_minus: vec![0.0],
            b_plus: 0.0,
            b_minus: 0.0,
        };
        let p = transition_prob(TransitionFamily::Sig, &w, &[0.4], 1.0, -1, 1, 0.0).unwrap();
        assert_relative_eq!(p, 0.5);
    }

    #[test]
    fn rows_sum_to_one_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for family in [TransitionFamily::Sig, TransitionFamily::TpScaled, TransitionFamily::TpExp] {
            for _ in 0..50 {
                let n_x = 3;
                let w = ChainWeights {
                    w_plus: (0..n_x).map(|_| rng.random::<f64>() * 2.0).collect(),
                    w_minus: (0..n_x).map(|_| rng.random::<f64>() * 2.0).collect(),
                    b_plus: rng.random::<f64>() - 0.5,
                    b_minus: rng.random::<f64>() - 0.5,
                };
                let x: Vec<f64> = (0..n_x).map(|_| rng.random::<f64>()).collect();
                let dt = 0.1 + rng.random::<f64>();
                for from in [-1i8, 1] {
                    let a = transition_prob(family, &w, &x, dt, from, -1, 0.05).unwrap();
                    let b = transition_prob(family, &w, &x, dt, from, 1, 0.05).unwrap();
                    // complements by construction
                    assert_eq!(a + b, 1.0);
                }
            }
        }
    }

    #[test]
    fn log_prob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for family in [TransitionFamily::Sig, TransitionFamily::TpScaled, TransitionFamily::TpExp] {
            for _ in 0..100 {
                let w = ChainWeights {
                    w_plus: vec![rng.random::<f64>() * 3.0],
                    w_minus: vec![rng.random::<f64>() * 3.0],
                    b_plus: 2.0 * rng.random::<f64>() - 1.0,
                    b_minus: 2.0 * rng.random::<f64>() - 1.0,
                };
                let x = vec![rng.random::<f64>()];
                let dt = 0.05 + 2.0 * rng.random::<f64>();
                for from in [-1i8, 1] {
                    for to in [-1i8, 1] {
                        let p = transition_prob(family, &w, &x, dt, from, to, 0.05).unwrap();
                        let lp = log_transition_prob(family, &w, &x, dt, from, to, 0.05).unwrap();
                        assert_relative_eq!(lp.exp(), p, epsilon = 1e-12, max_relative = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn log_sig_deep_tail_is_linear() {
        let w = ChainWeights {
            w_plus: vec![0.0],
            w_minus: vec![0.0],
            b_plus: -40.0,
            b_minus: 0.0,
        };
        let lp = log_transition_prob(TransitionFamily::Sig, &w, &[0.0], 1.0, -1, 1, 0.0).unwrap();
        assert_relative_eq!(lp, -40.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_rates_symmetric_jumps() {
        let w = weights(&[0.4], &[0.4]);
        let a = log_transition_prob(TransitionFamily::TpScaled, &w, &[0.5], 0.7, -1, 1, 0.05).unwrap();
        let b = log_transition_prob(TransitionFamily::TpScaled, &w, &[0.5], 0.7, 1, -1, 0.05).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn jump_prob_monotone_in_lag_and_bounded() {
        let (fp, fm) = (0.8, 0.3);
        let bound = fp / (fp + fm);
        let mut prev = 0.0;
        for k in 1..200 {
            let dt = k as f64 * 0.05;
            let p = integrated_jump_prob(fp, fm, dt);
            assert!(p > prev, "not increasing at dt={dt}");
            assert!(p < bound + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn limit_regimes_match_spec_tolerances() {
        // small dt*(f+ + f-): relative error vs dt*f+ below 1e-3
        let (fp, fm) = (0.6, 0.4);
        let dt = 1e-4 / (fp + fm) * 0.99;
        let p = integrated_jump_prob(fp, fm, dt);
        assert!(((p - dt * fp) / (dt * fp)).abs() < 1e-3);
        // large dt*(f+ + f-): within 1e-6 of stationary
        let dt = 31.0 / (fp + fm);
        let p = integrated_jump_prob(fp, fm, dt);
        assert!((p - fp / (fp + fm)).abs() < 1e-6);
    }

    #[test]
    fn tp_scaled_exchange_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let w = weights(
                &[rng.random::<f64>(), rng.random::<f64>()],
                &[rng.random::<f64>(), rng.random::<f64>()],
            );
            let swapped = ChainWeights {
                w_plus: w.w_minus.clone(),
                w_minus: w.w_plus.clone(),
                b_plus: 0.0,
                b_minus: 0.0,
            };
            let x: Vec<f64> = (0..2).map(|_| rng.random::<f64>()).collect();
            let flipped: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
            let r1 = rates(TransitionFamily::TpScaled, &w, &x, 0.05).unwrap();
            let r2 = rates(TransitionFamily::TpScaled, &swapped, &flipped, 0.05).unwrap();
            assert_relative_eq!(r1.f_plus, r2.f_plus, epsilon = 1e-12);
            assert_relative_eq!(r1.f_minus, r2.f_minus, epsilon = 1e-12);
        }
    }

    #[test]
    fn calibration_reproduces_protocol_constants() {
        let (b0, scale) =
            calibrate_simulation(TransitionFamily::TpScaled, 0.05, 0.95, 1.0).unwrap();
        assert_relative_eq!(b0, -(0.95_f64.ln()), epsilon = 1e-15);
        assert_relative_eq!(b0, 0.051293, epsilon = 1e-6);
        assert_relative_eq!(scale, -(0.05_f64.ln()), epsilon = 1e-15);
        assert_relative_eq!(scale, 2.9957, epsilon = 1e-4);

        let (bias, sig_scale) =
            calibrate_simulation(TransitionFamily::Sig, 0.05, 0.95, 1.0).unwrap();
        assert_relative_eq!(bias, -2.9444, epsilon = 1e-4);
        // round trip: a unit active input at the calibrated scale yields p1
        assert_relative_eq!(sigmoid(bias + sig_scale * 1.0), 0.95, epsilon = 1e-12);
        assert_relative_eq!(sigmoid(bias), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn calibration_rejects_degenerate_probabilities() {
        assert!(calibrate_simulation(TransitionFamily::Sig, 0.0, 0.9, 1.0).is_err());
        assert!(calibrate_simulation(TransitionFamily::Sig, 0.5, 0.4, 1.0).is_err());
        assert!(calibrate_simulation(TransitionFamily::Sig, 0.05, 1.0, 1.0).is_err());
        assert!(calibrate_simulation(TransitionFamily::Sig, 0.05, 0.95, 0.0).is_err());
    }
}
