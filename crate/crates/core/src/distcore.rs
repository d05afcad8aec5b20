//! Probability-distribution primitives over a token vocabulary.
//!
//! Everything is kept in log space. A [`TokenDistribution`] also caches the
//! exponentiated probabilities so divergence and fusion passes do not pay for
//! a second round of `exp` calls.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Tolerance on `|logsumexp(log_probs)|` for a valid distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Default smoothing floor.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Raw, unnormalized model scores for one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Input("logit vector must be non-empty".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite logit {} at token {i}",
                scores[i]
            )));
        }
        Ok(Self(scores))
    }

    pub fn vocab_size(&self) -> usize {
        self.0.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Highest-scoring token, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// A normalized distribution stored as log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    log_probs: Vec<f64>,
    probs: Vec<f64>,
    full_support: bool,
}

impl TokenDistribution {
    /// Builds from log-probabilities, checking normalization.
    pub fn from_log_probs(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::Input("distribution must be non-empty".into()));
        }
        if log_probs.iter().any(|lp| lp.is_nan() || *lp > 1e-12) {
            return Err(Error::Input(
                "log-probabilities must be non-positive and not NaN".into(),
            ));
        }
        let lse = logsumexp(&log_probs);
        if !(lse.abs() <= NORMALIZATION_TOLERANCE) {
            return Err(Error::Input(format!(
                "distribution not normalized: logsumexp = {lse}"
            )));
        }
        Ok(Self::from_normalized(log_probs))
    }

    /// Builds from probabilities (renormalized; must have positive mass).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Input("probabilities sum to zero".into()));
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect::<Vec<_>>();
        Ok(Self::normalize_log(log_probs))
    }

    /// Shifts unnormalized log-scores by their logsumexp.
    pub(crate) fn normalize_log(mut scores: Vec<f64>) -> Self {
        let lse = logsumexp(&scores);
        for s in &mut scores {
            *s -= lse;
        }
        Self::from_normalized(scores)
    }

    fn from_normalized(log_probs: Vec<f64>) -> Self {
        let mut full_support = true;
        let probs = log_probs
            .iter()
            .map(|lp| {
                full_support &= lp.is_finite();
                lp.exp()
            })
            .collect();
        Self { log_probs, probs, full_support }
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.len()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token]
    }

    pub fn log_prob(&self, token: TokenId) -> f64 {
        self.log_probs[token]
    }

    pub fn argmax(&self) -> TokenId {
        argmax(&self.log_probs)
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// True when every token has non-zero probability.
    pub fn has_full_support(&self) -> bool {
        self.full_support
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| -p * lp)
            .sum()
    }
}

/// Stable `ln Σ exp(x_i)`; `-inf` entries contribute nothing.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Index of the largest value, lowest index on ties. NaN never wins.
pub fn argmax(xs: &[f64]) -> TokenId {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    best
}

pub fn softmax_with_temperature(
    logits: &LogitVector,
    temperature: f64,
) -> Result<TokenDistribution> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let scaled = logits.0.iter().map(|x| x / temperature).collect();
    Ok(TokenDistribution::normalize_log(scaled))
}

/// Mixes with the uniform distribution when any probability is below `eps`:
/// `p' = (1 - eps * V) * p + eps`, then renormalizes. Distributions that
/// already satisfy the floor are only renormalized.
pub fn smooth(dist: &TokenDistribution, eps: f64) -> Result<TokenDistribution> {
    let v = dist.vocab_size() as f64;
    if !(eps > 0.0 && eps * v < 1.0) {
        return Err(Error::Config(format!(
            "smoothing eps must lie in (0, 1/{}), got {eps}",
            dist.vocab_size()
        )));
    }
    let log_floor = eps.ln();
    // A relative slack of 1e-9 lets an already-smoothed distribution pass
    // after renormalization jitter.
    let satisfied = dist
        .log_probs
        .iter()
        .all(|&lp| lp >= log_floor + (1.0 - 1e-9f64).ln());
    if satisfied {
        return Ok(TokenDistribution::normalize_log(dist.log_probs.clone()));
    }
    let keep = 1.0 - eps * v;
    let mixed = dist
        .probs
        .iter()
        .map(|p| (keep * p + eps).ln())
        .collect();
    Ok(TokenDistribution::normalize_log(mixed))
}

/// The `k` most probable tokens, descending, lowest id first on ties.
pub fn top_k(dist: &TokenDistribution, k: usize) -> Result<Vec<(TokenId, f64)>> {
    if k == 0 || k > dist.vocab_size() {
        return Err(Error::Input(format!(
            "k must lie in 1..={}, got {k}",
            dist.vocab_size()
        )));
    }
    let mut best: Vec<(TokenId, f64)> = Vec::with_capacity(k + 1);
    for (id, &p) in dist.probs.iter().enumerate() {
        if best.len() == k && p <= best[k - 1].1 {
            continue;
        }
        // Strictly-greater comparison keeps earlier ids ahead of equal probs.
        let pos = best.partition_point(|&(_, q)| q >= p);
        best.insert(pos, (id, p));
        best.truncate(k);
    }
    Ok(best)
}

/// Bidirectional token string ↔ id mapping.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VocabMap {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl VocabMap {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("vocabulary must be non-empty".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Serialize for VocabMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for VocabMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        VocabMap::new(tokens).map_err(serde::de::Error::custom)
    }
}
