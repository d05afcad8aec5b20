//! Divergence measures between two token distributions.
//!
//! All measures use natural logarithms and require both inputs to have full
//! support (see [`crate::distcore::smooth`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distcore::TokenDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    ForwardKl,
    ReverseKl,
    #[default]
    SymmetricKl,
    Hellinger,
    Bhattacharyya,
}

impl DivergenceKind {
    pub const ALL: [DivergenceKind; 5] = [
        DivergenceKind::ForwardKl,
        DivergenceKind::ReverseKl,
        DivergenceKind::SymmetricKl,
        DivergenceKind::Hellinger,
        DivergenceKind::Bhattacharyya,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::ForwardKl => "forward-kl",
            DivergenceKind::ReverseKl => "reverse-kl",
            DivergenceKind::SymmetricKl => "symmetric-kl",
            DivergenceKind::Hellinger => "hellinger",
            DivergenceKind::Bhattacharyya => "bhattacharyya",
        }
    }
}

impl fmt::Display for DivergenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DivergenceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown divergence {s:?}; expected one of forward-kl, reverse-kl, \
                     symmetric-kl, hellinger, bhattacharyya"
                ))
            })
    }
}

fn check_pair(p: &TokenDistribution, q: &TokenDistribution) -> Result<()> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p.vocab_size(),
            right: q.vocab_size(),
        });
    }
    if !p.has_full_support() || !q.has_full_support() {
        return Err(Error::Precondition(
            "divergence requires smoothed distributions without zero probabilities".into(),
        ));
    }
    Ok(())
}

fn kl_unchecked(p: &TokenDistribution, q: &TokenDistribution) -> f64 {
    let sum: f64 = p
        .probs()
        .iter()
        .zip(p.log_probs())
        .zip(q.log_probs())
        .map(|((pi, lpi), lqi)| pi * (lpi - lqi))
        .sum();
    sum.max(0.0)
}

/// Bhattacharyya coefficient `Σ sqrt(p_i q_i)`.
fn bc_unchecked(p: &TokenDistribution, q: &TokenDistribution) -> f64 {
    p.log_probs()
        .iter()
        .zip(q.log_probs())
        .map(|(a, b)| (0.5 * (a + b)).exp())
        .sum()
}

/// `KL(p || q)`.
pub fn forward_kl(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    check_pair(p, q)?;
    Ok(kl_unchecked(p, q))
}

/// `KL(q || p)`.
pub fn reverse_kl(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    forward_kl(q, p)
}

/// `KL(p || q) + KL(q || p)`, summed in one pass as `Σ (p_i - q_i)(log p_i - log q_i)`.
pub fn symmetric_kl(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    check_pair(p, q)?;
    let sum: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .zip(p.log_probs().iter().zip(q.log_probs()))
        .map(|((pi, qi), (lpi, lqi))| (pi - qi) * (lpi - lqi))
        .sum();
    Ok(sum.max(0.0))
}

/// Hellinger distance in the bounded convention, `sqrt(1 - BC)`.
pub fn hellinger(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    check_pair(p, q)?;
    Ok((1.0 - bc_unchecked(p, q)).clamp(0.0, 1.0).sqrt())
}

/// `-ln BC`.
pub fn bhattacharyya(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    check_pair(p, q)?;
    Ok((-bc_unchecked(p, q).min(1.0).ln()).max(0.0))
}

pub fn divergence(
    kind: DivergenceKind,
    p: &TokenDistribution,
    q: &TokenDistribution,
) -> Result<f64> {
    match kind {
        DivergenceKind::ForwardKl => forward_kl(p, q),
        DivergenceKind::ReverseKl => reverse_kl(p, q),
        DivergenceKind::SymmetricKl => symmetric_kl(p, q),
        DivergenceKind::Hellinger => hellinger(p, q),
        DivergenceKind::Bhattacharyya => bhattacharyya(p, q),
    }
}
