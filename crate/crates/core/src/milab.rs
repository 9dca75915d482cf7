//! Exact information quantities over a four-variable discrete joint `(A1, A2, B1, B2)`.
//!
//! All quantities are in nats and computed by full enumeration of the table, so the
//! identities below hold up to floating-point rounding only.

use serde::Serialize;
use thiserror::Error;

use crate::rng::{KeyedRng, Stream};

pub const MAX_SUPPORT: usize = 6;
const NORMALIZATION_TOL: f64 = 1e-12;

/// Variable indices within the joint.
pub const A1: usize = 0;
pub const A2: usize = 1;
pub const B1: usize = 2;
pub const B2: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InfoError {
    #[error("support size {size} of variable {var} is outside 1..={MAX_SUPPORT}")]
    Support { var: usize, size: usize },
    #[error("table has {found} entries, expected {expected}")]
    TableSize { expected: usize, found: usize },
    #[error("probability {value} at entry {index} is negative or non-finite")]
    Negative { index: usize, value: f64 },
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("variable sets overlap or name a variable outside 0..4")]
    BadSets,
}

/// Joint table over `(A1, A2, B1, B2)`, row-major with `B2` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    sizes: [usize; 4],
    probs: Vec<f64>,
}

/// Bitmask over the four variables.
pub type VarSet = u8;

pub const fn vars(list: &[usize]) -> VarSet {
    let mut mask = 0u8;
    let mut k = 0;
    while k < list.len() {
        mask |= 1 << list[k];
        k += 1;
    }
    mask
}

impl DiscreteJoint {
    pub fn new(sizes: [usize; 4], probs: Vec<f64>) -> Result<Self, InfoError> {
        for (var, &size) in sizes.iter().enumerate() {
            if size == 0 || size > MAX_SUPPORT {
                return Err(InfoError::Support { var, size });
            }
        }
        let expected: usize = sizes.iter().product();
        if probs.len() != expected {
            return Err(InfoError::TableSize {
                expected,
                found: probs.len(),
            });
        }
        if let Some((index, &value)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0 && p.is_finite()))
        {
            return Err(InfoError::Negative { index, value });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(InfoError::NotNormalized(total));
        }
        Ok(Self { sizes, probs })
    }

    /// Builds a table from a function of the outcome, then normalizes it.
    pub fn from_fn(
        sizes: [usize; 4],
        mut f: impl FnMut([usize; 4]) -> f64,
    ) -> Result<Self, InfoError> {
        let mut raw = Vec::with_capacity(sizes.iter().product());
        for a in 0..sizes[0] {
            for b in 0..sizes[1] {
                for c in 0..sizes[2] {
                    for d in 0..sizes[3] {
                        raw.push(f([a, b, c, d]));
                    }
                }
            }
        }
        let total: f64 = raw.iter().sum();
        Self::new(sizes, raw.into_iter().map(|p| p / total).collect())
    }

    /// Dirichlet(1, ..., 1) joint: normalized `-ln U` draws.
    pub fn random_dirichlet(sizes: [usize; 4], seed: u64, trial: u64) -> Result<Self, InfoError> {
        let mut rng = KeyedRng::new(seed, Stream::InfoTrials, trial, 0);
        Self::from_fn(sizes, |_| -(1.0 - rng.uniform()).ln())
    }

    pub fn sizes(&self) -> [usize; 4] {
        self.sizes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn outcomes(&self) -> impl Iterator<Item = ([usize; 4], f64)> + '_ {
        let s = self.sizes;
        self.probs.iter().enumerate().map(move |(idx, &p)| {
            let d = idx % s[3];
            let c = (idx / s[3]) % s[2];
            let b = (idx / (s[3] * s[2])) % s[1];
            let a = idx / (s[3] * s[2] * s[1]);
            ([a, b, c, d], p)
        })
    }

    /// Marginal over `set`, indexed by the mixed-radix code of the kept variables.
    fn marginal(&self, set: VarSet) -> Vec<f64> {
        let kept: Vec<usize> = (0..4).filter(|v| set & (1 << v) != 0).collect();
        let len: usize = kept.iter().map(|&v| self.sizes[v]).product();
        let mut out = vec![0.0; len];
        for (x, p) in self.outcomes() {
            let idx = kept.iter().fold(0, |acc, &v| acc * self.sizes[v] + x[v]);
            out[idx] += p;
        }
        out
    }

    /// `H(V) = -sum p ln p`, with `0 ln 0 = 0`. The empty set has entropy 0.
    pub fn entropy(&self, set: VarSet) -> Result<f64, InfoError> {
        check_sets(&[set])?;
        Ok(self
            .marginal(set)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum())
    }

    /// `I(X;Y) = H(X) + H(Y) - H(X,Y)`.
    pub fn mutual_info(&self, x: VarSet, y: VarSet) -> Result<f64, InfoError> {
        self.cond_mutual_info(x, y, 0)
    }

    /// `I(X;Y|Z) = H(X,Z) + H(Y,Z) - H(Z) - H(X,Y,Z)`.
    pub fn cond_mutual_info(&self, x: VarSet, y: VarSet, z: VarSet) -> Result<f64, InfoError> {
        check_sets(&[x, y, z])?;
        if x == 0 || y == 0 {
            return Err(InfoError::BadSets);
        }
        Ok(self.entropy(x | z)? + self.entropy(y | z)?
            - self.entropy(z)?
            - self.entropy(x | y | z)?)
    }

    /// `|I(X1,X2;Y) - I(X1;Y) - I(X2;Y|X1)|`.
    pub fn verify_chain_rule(&self, x1: VarSet, x2: VarSet, y: VarSet) -> Result<f64, InfoError> {
        check_sets(&[x1, x2, y])?;
        let lhs = self.mutual_info(x1 | x2, y)?;
        let rhs = self.mutual_info(x1, y)? + self.cond_mutual_info(x2, y, x1)?;
        Ok((lhs - rhs).abs())
    }

    /// Both sides of the blend-then-predict decomposition:
    ///
    /// `I(A2; A1,B2) + I(B1; A1,B2)
    ///   = 1/2 [I(A1;B1) + I(A2;B2) + I(A1;B1|B2) + I(A2;B2|A1)]
    ///   + 1/2 [I(A1;A2) + I(B1;B2) + I(A1;A2|B2) + I(B1;B2|A1)]`.
    pub fn decomposition_sides(&self) -> Result<(f64, f64), InfoError> {
        let [a1, a2, b1, b2] = [1 << A1, 1 << A2, 1 << B1, 1 << B2];
        let lhs = self.mutual_info(a2, a1 | b2)? + self.mutual_info(b1, a1 | b2)?;
        let cross = self.mutual_info(a1, b1)?
            + self.mutual_info(a2, b2)?
            + self.cond_mutual_info(a1, b1, b2)?
            + self.cond_mutual_info(a2, b2, a1)?;
        let within = self.mutual_info(a1, a2)?
            + self.mutual_info(b1, b2)?
            + self.cond_mutual_info(a1, a2, b2)?
            + self.cond_mutual_info(b1, b2, a1)?;
        Ok((lhs, 0.5 * cross + 0.5 * within))
    }

    pub fn verify_decomposition(&self) -> Result<f64, InfoError> {
        let (lhs, rhs) = self.decomposition_sides()?;
        Ok((lhs - rhs).abs())
    }
}

fn check_sets(sets: &[VarSet]) -> Result<(), InfoError> {
    let mut seen = 0u8;
    for &s in sets {
        if s & !0b1111 != 0 || s & seen != 0 {
            return Err(InfoError::BadSets);
        }
        seen |= s;
    }
    Ok(())
}

/// Residuals of one random trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialResidual {
    pub trial: u64,
    pub sizes: [usize; 4],
    pub chain_rule: f64,
    pub decomposition: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfoCheckReport {
    pub seed: u64,
    pub trials: Vec<TrialResidual>,
    pub max_chain_rule: f64,
    pub max_decomposition: f64,
}

/// Draws `trials` Dirichlet joints with supports in `2..=max_support` and records both residuals.
///
/// The chain rule is checked as `I(A1,A2; B1) = I(A1;B1) + I(A2;B1|A1)` and as
/// `I(A1,B2; A2,B1) = I(B2; A2,B1) + I(A1; A2,B1 | B2)`.
pub fn run_trials(
    trials: u64,
    seed: u64,
    max_support: usize,
) -> Result<InfoCheckReport, InfoError> {
    if !(2..=MAX_SUPPORT).contains(&max_support) {
        return Err(InfoError::Support {
            var: 0,
            size: max_support,
        });
    }
    let mut out = Vec::with_capacity(trials as usize);
    for trial in 0..trials {
        let mut rng = KeyedRng::new(seed, Stream::InfoTrials, trial, 1);
        let sizes = [0; 4].map(|_| rng.range_inclusive(2, max_support));
        let joint = DiscreteJoint::random_dirichlet(sizes, seed, trial)?;
        let chain = joint
            .verify_chain_rule(vars(&[A1]), vars(&[A2]), vars(&[B1]))?
            .max(joint.verify_chain_rule(vars(&[B2]), vars(&[A1]), vars(&[A2, B1]))?);
        out.push(TrialResidual {
            trial,
            sizes,
            chain_rule: chain,
            decomposition: joint.verify_decomposition()?,
        });
    }
    Ok(InfoCheckReport {
        seed,
        max_chain_rule: out.iter().map(|t| t.chain_rule).fold(0.0, f64::max),
        max_decomposition: out.iter().map(|t| t.decomposition).fold(0.0, f64::max),
        trials: out,
    })
}
