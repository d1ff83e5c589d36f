//! Convergence bounds for the prototype-regularized local objective.
//!
//! With smoothness `L₁`, embedding Lipschitz constant `L₂`, gradient bound
//! `G`, stochastic-gradient variance `σ²`, step size `η`, prototype weight `λ`
//! and `E` local steps per round, one round changes the expected loss by at
//! most
//!
//! ```text
//! −(η − L₁η²/2) Σₑ‖∇L‖² + L₁Eη²σ²/2 + λL₂ηEG
//! ```
//!
//! The functions here evaluate that bound, the step-size and `λ` limits that
//! make it a decrease, and the round count needed to push the average squared
//! gradient norm below `ε`. [`probe`] estimates the constants empirically and
//! [`verify`] checks recorded runs against the bounds.

pub mod probe;
pub mod verify;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use probe::{estimate_constants, ClientObjective, Objective, Probe};
pub use verify::{
    run_theory_check, verify_run, BoundReport, ClientTrace, RoundBound, RoundTrace, RoundCountCheck,
    TheoryCheckReport,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Gradient Lipschitz constant.
    pub l1: f64,
    /// Lipschitz constant of the class-mean embeddings in `φ`.
    pub l2: f64,
    /// Gradient norm bound.
    pub g: f64,
    /// Variance of mini-batch gradients around the full gradient.
    pub sigma2: f64,
}

impl TheoryConstants {
    /// Component-wise maximum.
    pub fn max(self, other: TheoryConstants) -> TheoryConstants {
        TheoryConstants {
            l1: self.l1.max(other.l1),
            l2: self.l2.max(other.l2),
            g: self.g.max(other.g),
            sigma2: self.sigma2.max(other.sigma2),
        }
    }
}

/// The three additive pieces of the one-round bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `−(η − L₁η²/2) Σ‖∇L‖²`
    pub descent: f64,
    /// `L₁Eη²σ²/2`
    pub variance: f64,
    /// `λL₂ηEG`, the cost of the prototypes moving between rounds.
    pub drift: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.descent + self.variance + self.drift
    }
}

pub fn one_round_terms(
    c: &TheoryConstants,
    grad_sq_norms: &[f64],
    eta: f64,
    lambda: f64,
    epochs: usize,
) -> BoundTerms {
    let e = epochs as f64;
    let sum: f64 = grad_sq_norms.iter().sum();
    BoundTerms {
        descent: -(eta - c.l1 * eta * eta / 2.0) * sum,
        variance: c.l1 * e * eta * eta * c.sigma2 / 2.0,
        drift: lambda * c.l2 * eta * e * c.g,
    }
}

/// Upper bound on `L_{(t+1)E+1/2} − L_{tE+1/2}`.
pub fn one_round_bound(
    c: &TheoryConstants,
    grad_sq_norms: &[f64],
    eta: f64,
    lambda: f64,
    epochs: usize,
) -> f64 {
    one_round_terms(c, grad_sq_norms, eta, lambda, epochs).total()
}

/// Largest admissible step size after each local step `e′`, given the running
/// sums `Σ_{e≤e′} ‖∇L‖²`. A non-positive numerator yields 0: no step size
/// guarantees descent at that `λ`.
pub fn eta_bound(
    partial_grad_sq_sums: &[f64],
    lambda: f64,
    c: &TheoryConstants,
    epochs: usize,
) -> Result<Vec<f64>> {
    if c.l1 <= 0.0 {
        return Err(Error::input("L1 must be positive to bound the step size"));
    }
    let e = epochs as f64;
    Ok(partial_grad_sq_sums
        .iter()
        .map(|&s| {
            let numerator = 2.0 * (s - lambda * c.l2 * e * c.g);
            if numerator <= 0.0 {
                0.0
            } else {
                numerator / (c.l1 * (s + e * c.sigma2))
            }
        })
        .collect())
}

/// Largest admissible `λ` for a round whose first gradient has squared norm
/// `first_grad_sq_norm`.
pub fn lambda_bound(first_grad_sq_norm: f64, c: &TheoryConstants, epochs: usize) -> Result<f64> {
    let denominator = c.l2 * epochs as f64 * c.g;
    if denominator <= 0.0 {
        return Err(Error::input("L2·E·G must be positive to bound λ"));
    }
    if first_grad_sq_norm < 0.0 {
        return Err(Error::input("squared gradient norm must be ≥ 0"));
    }
    Ok(first_grad_sq_norm / denominator)
}

/// Rounds after which the average squared gradient norm is below `eps`,
/// starting `delta` above the optimum. The caller rounds up.
pub fn rounds_for_epsilon(
    delta: f64,
    eps: f64,
    c: &TheoryConstants,
    eta: f64,
    lambda: f64,
    epochs: usize,
) -> Result<f64> {
    if !(delta >= 0.0) {
        return Err(Error::input("Δ must be ≥ 0"));
    }
    if !(eps > 0.0) {
        return Err(Error::input("ε must be positive"));
    }
    if !(eta > 0.0) {
        return Err(Error::input("η must be positive"));
    }
    let lg = c.l2 * c.g;
    if lambda * lg >= eps {
        return Err(Error::input(format!(
            "λ < ε/(L2·G) fails: λ = {lambda}, ε/(L2·G) = {}",
            eps / lg
        )));
    }
    let eta_max = 2.0 * (eps - lambda * lg) / (c.l1 * (eps + c.sigma2));
    if eta >= eta_max {
        return Err(Error::input(format!(
            "η < 2(ε − λL2G)/(L1(ε + σ²)) fails: η = {eta}, bound = {eta_max}"
        )));
    }
    let e = epochs as f64;
    let denominator = e * eps * (2.0 * eta - c.l1 * eta * eta)
        - e * eta * (c.l1 * eta * c.sigma2 + 2.0 * lambda * lg);
    if denominator <= 0.0 {
        return Err(Error::input(format!(
            "round-count denominator is {denominator}; E must be ≥ 1"
        )));
    }
    Ok(2.0 * delta / denominator)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn consts(l1: f64, l2: f64, g: f64, sigma2: f64) -> TheoryConstants {
        TheoryConstants { l1, l2, g, sigma2 }
    }

    // Second evaluator: the bound expanded term by term.
    fn bound_expanded(c: &TheoryConstants, s: f64, eta: f64, lambda: f64, e: f64) -> f64 {
        -eta * s
            + c.l1 * eta * eta * s / 2.0
            + c.l1 * e * eta * eta * c.sigma2 / 2.0
            + lambda * c.l2 * eta * e * c.g
    }

    fn t_expanded(delta: f64, eps: f64, c: &TheoryConstants, eta: f64, lambda: f64, e: f64) -> f64 {
        let per_round = e
            * eta
            * (2.0 * eps - c.l1 * eta * eps - c.l1 * eta * c.sigma2 - 2.0 * lambda * c.l2 * c.g);
        2.0 * delta / per_round
    }

    #[test]
    fn stationary_and_frozen() {
        let c = consts(3.0, 2.0, 5.0, 0.0);
        assert_eq!(one_round_bound(&c, &[0.0, 0.0], 0.1, 0.0, 2), 0.0);
        let c = consts(3.0, 2.0, 5.0, 0.7);
        assert_eq!(one_round_bound(&c, &[1.0, 4.0], 0.0, 0.9, 2), 0.0);
    }

    #[test]
    fn hand_evaluation() {
        let c = consts(1.0, 1.0, 2.0, 0.5);
        let got = one_round_bound(&c, &[1.5, 2.5], 0.1, 0.5, 2);
        // −0.095·4 + 0.01·0.5 + 0.2
        assert!((got - (-0.175)).abs() < 1e-12, "{got}");
        let t = one_round_terms(&c, &[4.0], 0.1, 0.5, 2);
        assert!((t.descent + 0.38).abs() < 1e-12);
        assert!((t.variance - 0.005).abs() < 1e-12);
        assert!((t.drift - 0.2).abs() < 1e-12);
    }

    #[test]
    fn eta_bound_cases() {
        let c = consts(4.0, 1.0, 1.0, 0.0);
        assert_eq!(eta_bound(&[1.0, 3.0], 0.0, &c, 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(eta_bound(&[1.0, 3.0], 2.0, &c, 2).unwrap(), vec![0.0, 0.0]);
        assert!(eta_bound(&[1.0], 0.0, &consts(0.0, 1.0, 1.0, 0.0), 1).is_err());
    }

    #[test]
    fn lambda_bound_cases() {
        let c = consts(1.0, 1.0, 2.0, 0.0);
        assert_eq!(lambda_bound(0.0, &c, 2).unwrap(), 0.0);
        assert_eq!(lambda_bound(4.0, &c, 2).unwrap(), 1.0);
        let scaled = lambda_bound(4.0, &consts(1.0, 1.0, 20.0, 0.0), 2).unwrap();
        assert!((scaled - 0.1).abs() < 1e-15);
        assert!(lambda_bound(4.0, &consts(1.0, 0.0, 2.0, 0.0), 2).is_err());
    }

    #[test]
    fn rounds_example() {
        let c = consts(1.0, 1.0, 1.0, 0.0);
        let t = rounds_for_epsilon(10.0, 0.5, &c, 0.1, 0.0, 5).unwrap();
        assert!((t - 20.0 / 0.475).abs() < 1e-9, "{t}");
        assert_eq!(t.ceil(), 43.0);
        assert_eq!(rounds_for_epsilon(0.0, 0.5, &c, 0.1, 0.0, 5).unwrap(), 0.0);
    }

    #[test]
    fn rounds_side_conditions() {
        let c = consts(1.0, 2.0, 0.5, 0.0);
        let err = rounds_for_epsilon(1.0, 0.5, &c, 0.1, 0.5, 1).unwrap_err();
        assert!(err.to_string().contains("λ < ε/(L2·G)"), "{err}");
        let err = rounds_for_epsilon(1.0, 0.5, &c, 2.5, 0.0, 1).unwrap_err();
        assert!(err.to_string().contains("η < 2(ε − λL2G)"), "{err}");
    }

    #[test]
    fn matches_expanded_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c = consts(
                rng.random_range(0.1..10.0),
                rng.random_range(0.0..5.0),
                rng.random_range(0.0..5.0),
                rng.random_range(0.0..2.0),
            );
            let e = rng.random_range(1..6);
            let norms: Vec<f64> = (0..e).map(|_| rng.random_range(0.0..3.0)).collect();
            let s: f64 = norms.iter().sum();
            let eta = rng.random_range(0.0..0.5);
            let lambda = rng.random_range(0.0..1.0);
            let got = one_round_bound(&c, &norms, eta, lambda, e);
            let want = bound_expanded(&c, s, eta, lambda, e as f64);
            assert!(
                (got - want).abs() <= 1e-12 * (1.0 + want.abs()),
                "{got} vs {want}"
            );

            let partial: Vec<f64> = norms
                .iter()
                .scan(0.0, |acc, n| {
                    *acc += n;
                    Some(*acc)
                })
                .collect();
            for (b, &p) in eta_bound(&partial, lambda, &c, e)
                .unwrap()
                .iter()
                .zip(&partial)
            {
                let num = 2.0 * p - 2.0 * lambda * c.l2 * e as f64 * c.g;
                let want = if num > 0.0 {
                    num / (c.l1 * p + c.l1 * e as f64 * c.sigma2)
                } else {
                    0.0
                };
                assert!((b - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }

            if c.l2 * c.g > 0.0 {
                let l = lambda_bound(s, &c, e).unwrap();
                let want = s / c.l2 / c.g / e as f64;
                assert!((l - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }

            let eps = rng.random_range(0.1..5.0);
            let delta = rng.random_range(0.0..10.0);
            if let Ok(t) = rounds_for_epsilon(delta, eps, &c, eta, lambda, e) {
                let want = t_expanded(delta, eps, &c, eta, lambda, e as f64);
                assert!(
                    (t - want).abs() <= 1e-12 * (1.0 + want.abs()),
                    "{t} vs {want}"
                );
            }
        }
    }

    #[test]
    fn monotone_in_lambda_and_sigma() {
        let c = consts(2.0, 1.5, 3.0, 0.2);
        let norms = [0.8, 0.6, 0.5];
        let grid: Vec<f64> = (0..50).map(|i| i as f64 * 0.05).collect();
        for w in grid.windows(2) {
            assert!(
                one_round_bound(&c, &norms, 0.1, w[0], 3)
                    <= one_round_bound(&c, &norms, 0.1, w[1], 3)
            );
            let lo = TheoryConstants { sigma2: w[0], ..c };
            let hi = TheoryConstants { sigma2: w[1], ..c };
            assert!(
                one_round_bound(&lo, &norms, 0.1, 0.3, 3)
                    <= one_round_bound(&hi, &norms, 0.1, 0.3, 3)
            );
            let a = eta_bound(&[0.8, 1.4, 1.9], w[0], &c, 3).unwrap();
            let b = eta_bound(&[0.8, 1.4, 1.9], w[1], &c, 3).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x >= y));
        }
    }
}
