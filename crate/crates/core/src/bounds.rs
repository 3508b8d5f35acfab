//! Calculator for the cross-validation oracle inequality: the `B_f` slack
//! term, the full right-hand side, and the covering-number bound for an index
//! set contained in a Euclidean ball.
//!
//! All logarithms are natural.

use crate::error::{Error, Result};

/// Where the covering count `N` inside `log(1 + N)` comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Covering {
    /// An explicit covering number of the index set at scale `ε/ℓ`.
    Count(f64),
    /// Index set inside a ball of radius `radius` in `dim` dimensions, with
    /// the map from index to loss `lipschitz`-Lipschitz; the count is bounded
    /// by [`covering_upper_bound`].
    Ball {
        lipschitz: f64,
        radius: f64,
        dim: usize,
    },
    /// A finite family of this many members: `N = |J|` and the trailing
    /// `ε` summand is dropped.
    Finite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    /// First Bernstein number `M` (loss units).
    pub bernstein_m: f64,
    /// Second Bernstein number `v` (squared loss units).
    pub bernstein_v: f64,
    pub delta: f64,
    pub p: f64,
    /// Validation sample size.
    pub n1: f64,
    /// Covering scale `ε_{n1}`.
    pub eps: f64,
    /// Worst-case (smallest) expected loss over the family, standing in for
    /// `∫ f dP` in the supremum.
    pub mean_loss: f64,
    pub covering: Covering,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(1.0..=2.0).contains(&self.p) {
            return Err(Error::InvalidP(self.p));
        }
        let positive = [
            ("delta", self.delta),
            ("eps", self.eps),
            ("mean_loss", self.mean_loss),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.n1 >= 1.0 && self.n1.is_finite()) {
            return Err(Error::invalid(format!("n1 must be at least 1, got {}", self.n1)));
        }
        for (name, v) in [("M", self.bernstein_m), ("v", self.bernstein_v)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("Bernstein number {name} must be nonnegative, got {v}")));
            }
        }
        match self.covering {
            Covering::Count(n) if !(n >= 0.0) => {
                Err(Error::invalid(format!("covering count must be nonnegative, got {n}")))
            }
            Covering::Ball {
                lipschitz,
                radius,
                dim,
            } if !(lipschitz > 0.0 && radius > 0.0 && dim > 0) => Err(Error::invalid(
                "Lipschitz constant, radius and dimension must be positive",
            )),
            _ => Ok(()),
        }
    }
}

/// `(4ℓK√dim / ε)^dim`; `+∞` when the power overflows.
pub fn covering_upper_bound(lipschitz: f64, radius: f64, dim: usize, eps: f64) -> Result<f64> {
    Ok(log_covering_upper_bound(lipschitz, radius, dim, eps)?.exp())
}

/// Natural log of [`covering_upper_bound`], finite for all positive inputs.
pub fn log_covering_upper_bound(lipschitz: f64, radius: f64, dim: usize, eps: f64) -> Result<f64> {
    if !(lipschitz > 0.0 && radius > 0.0 && dim > 0 && eps > 0.0) {
        return Err(Error::invalid("covering bound inputs must be positive"));
    }
    let d = dim as f64;
    Ok(d * (4.0 * lipschitz * radius * d.sqrt() / eps).ln())
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(1 + extra + N)`, computed in log space so huge covering bounds stay finite.
pub fn log_count_term(inputs: &BoundInputs, extra_algorithms: usize) -> Result<f64> {
    let base = (extra_algorithms as f64).ln_1p();
    Ok(match inputs.covering {
        Covering::Count(n) => (n + extra_algorithms as f64).ln_1p(),
        Covering::Finite(size) => ((size + extra_algorithms) as f64).ln_1p(),
        Covering::Ball {
            lipschitz,
            radius,
            dim,
        } => log_add_exp(base, log_covering_upper_bound(lipschitz, radius, dim, inputs.eps)?),
    })
}

fn bf_from_log(inputs: &BoundInputs, log_term: f64) -> f64 {
    let p = inputs.p;
    let n1 = inputs.n1;
    let first = inputs.bernstein_m / n1.powf(1.0 - 1.0 / p);
    let second = (inputs.bernstein_v / (inputs.delta * inputs.mean_loss).powf(2.0 - p)).powf(1.0 / p);
    16.0 * (first + second) * log_term / n1.powf(1.0 / p - 0.5)
}

/// The `B_f` slack term.
pub fn bound_bf(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(bf_from_log(inputs, log_count_term(inputs, 0)?))
}

/// `2((1 + δ)√n1 + 1/√n1)·ε`; zero for finite families.
pub fn eps_term(inputs: &BoundInputs) -> f64 {
    match inputs.covering {
        Covering::Finite(_) => 0.0,
        _ => {
            let root = inputs.n1.sqrt();
            2.0 * ((1.0 + inputs.delta) * root + 1.0 / root) * inputs.eps
        }
    }
}

/// Labeled pieces of the oracle-inequality right-hand side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleBound {
    /// `(1 + 2δ)` times the oracle loss.
    pub oracle_term: f64,
    pub bf_term: f64,
    pub eps_term: f64,
    pub total: f64,
    /// Covering count used inside the log (`+∞` if the derived bound overflowed).
    pub covering: f64,
    /// Whether the count came from the ball bound rather than the caller.
    pub covering_derived: bool,
}

/// `(1 + 2δ)·oracle_loss + B_f + 2((1 + δ)√n1 + 1/√n1)·ε`, with
/// `extra_algorithms` added to the count inside the log when the guarantee
/// should also cover the base learners.
pub fn oracle_rhs(inputs: &BoundInputs, oracle_loss: f64, extra_algorithms: usize) -> Result<OracleBound> {
    inputs.validate()?;
    if !(oracle_loss >= 0.0 && oracle_loss.is_finite()) {
        return Err(Error::invalid(format!("oracle loss must be nonnegative, got {oracle_loss}")));
    }
    let oracle_term = (1.0 + 2.0 * inputs.delta) * oracle_loss;
    let bf_term = bf_from_log(inputs, log_count_term(inputs, extra_algorithms)?);
    let eps_term = eps_term(inputs);
    let (covering, covering_derived) = match inputs.covering {
        Covering::Count(n) => (n, false),
        Covering::Finite(size) => (size as f64, false),
        Covering::Ball {
            lipschitz,
            radius,
            dim,
        } => (covering_upper_bound(lipschitz, radius, dim, inputs.eps)?, true),
    };
    Ok(OracleBound {
        oracle_term,
        bf_term,
        eps_term,
        total: oracle_term + bf_term + eps_term,
        covering,
        covering_derived,
    })
}
