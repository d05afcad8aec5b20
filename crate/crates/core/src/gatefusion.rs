//! Divergence-driven gate and gated geometric fusion of the two streams.
//!
//! The gate is a single scalar per step: `g = sigmoid(eta * D)`. The fused
//! distribution is `p_I^g * p_E^(1-g) / Z`, computed in log space.

use serde::{Deserialize, Serialize};

use crate::distcore::{TokenDistribution, TokenId};
use crate::divergence::{divergence, DivergenceKind};
use crate::error::{Error, Result};

pub const DEFAULT_ETA: f64 = -3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub eta: f64,
    #[serde(rename = "divergence")]
    pub divergence_kind: DivergenceKind,
    /// Permits `eta > 0`, which rewards disagreement instead of
    /// suppressing it. Only meant for ablations.
    #[serde(default)]
    pub unsafe_eta: bool,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            divergence_kind: DivergenceKind::SymmetricKl,
            unsafe_eta: false,
        }
    }
}

impl GateParams {
    pub fn new(eta: f64, divergence_kind: DivergenceKind) -> Result<Self> {
        let p = Self {
            eta,
            divergence_kind,
            unsafe_eta: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be finite, got {}", self.eta)));
        }
        if self.eta > 0.0 && !self.unsafe_eta {
            return Err(Error::Config(format!(
                "eta = {} > 0 inverts the gate; pass the unsafe-eta flag to allow it",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Per-step divergence and gate value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub step: usize,
    #[serde(rename = "d")]
    pub divergence_value: f64,
    #[serde(rename = "g")]
    pub gate_value: f64,
    pub kind: DivergenceKind,
}

// Smallest and largest f64 strictly inside (0, 1).
const GATE_MIN: f64 = f64::MIN_POSITIVE;
const GATE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// `exp(eta * d) / (1 + exp(eta * d))`, evaluated without overflow and kept
/// strictly inside (0, 1).
pub fn gate(divergence_value: f64, eta: f64) -> Result<f64> {
    if divergence_value.is_nan() || eta.is_nan() {
        return Err(Error::Input("gate inputs must not be NaN".into()));
    }
    if divergence_value < 0.0 {
        return Err(Error::Input(format!(
            "divergence must be non-negative, got {divergence_value}"
        )));
    }
    if !eta.is_finite() {
        return Err(Error::Input(format!("eta must be finite, got {eta}")));
    }
    let x = eta * divergence_value;
    if x == 0.0 || x.is_nan() {
        // 0 * inf lands here too; treat as no contrast.
        return Ok(0.5);
    }
    let g = if x < 0.0 {
        let e = x.exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + (-x).exp())
    };
    Ok(g.clamp(GATE_MIN, GATE_MAX))
}

fn check_fusion_inputs(
    p_instruction: &TokenDistribution,
    p_evidence: &TokenDistribution,
    g: f64,
) -> Result<()> {
    if p_instruction.vocab_size() != p_evidence.vocab_size() {
        return Err(Error::VocabMismatch {
            left: p_instruction.vocab_size(),
            right: p_evidence.vocab_size(),
        });
    }
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::Config(format!("gate value must lie in [0, 1], got {g}")));
    }
    Ok(())
}

#[inline]
fn fused_score(g: f64, lp_i: f64, lp_e: f64) -> f64 {
    // Zero weight must not multiply a -inf log-probability.
    let a = if g == 0.0 { 0.0 } else { g * lp_i };
    let b = if g == 1.0 { 0.0 } else { (1.0 - g) * lp_e };
    a + b
}

/// Unnormalized fused log-scores `g * log p_I + (1 - g) * log p_E`.
pub fn fused_log_scores(
    p_instruction: &TokenDistribution,
    p_evidence: &TokenDistribution,
    g: f64,
) -> Result<Vec<f64>> {
    check_fusion_inputs(p_instruction, p_evidence, g)?;
    Ok(p_instruction
        .log_probs()
        .iter()
        .zip(p_evidence.log_probs())
        .map(|(&a, &b)| fused_score(g, a, b))
        .collect())
}

pub fn fuse(
    p_instruction: &TokenDistribution,
    p_evidence: &TokenDistribution,
    g: f64,
) -> Result<TokenDistribution> {
    let scores = fused_log_scores(p_instruction, p_evidence, g)?;
    Ok(TokenDistribution::normalize_log(scores))
}

/// Argmax of the fused distribution without normalizing it. The partition
/// function is a per-step constant, so the selected token is the same.
pub fn fused_argmax(
    p_instruction: &TokenDistribution,
    p_evidence: &TokenDistribution,
    g: f64,
) -> Result<TokenId> {
    check_fusion_inputs(p_instruction, p_evidence, g)?;
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, (&a, &b)) in p_instruction
        .log_probs()
        .iter()
        .zip(p_evidence.log_probs())
        .enumerate()
    {
        let s = fused_score(g, a, b);
        if s > best_val {
            best = i;
            best_val = s;
        }
    }
    Ok(best)
}

/// Divergence and gate for one step, without fusing.
pub fn step_gate(
    p_instruction: &TokenDistribution,
    p_evidence: &TokenDistribution,
    params: &GateParams,
    step: usize,
) -> Result<GateRecord> {
    let d = divergence(params.divergence_kind, p_instruction, p_evidence)?;
    let g = gate(d, params.eta)?;
    Ok(GateRecord {
        step,
        divergence_value: d,
        gate_value: g,
        kind: params.divergence_kind,
    })
}

pub fn step_fuse(
    p_instruction: &TokenDistribution,
    p_evidence: &TokenDistribution,
    params: &GateParams,
    step: usize,
) -> Result<(TokenDistribution, GateRecord)> {
    let record = step_gate(p_instruction, p_evidence, params, step)?;
    let fused = fuse(p_instruction, p_evidence, record.gate_value)?;
    Ok((fused, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distcore::smooth;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::from_probs(p).unwrap()
    }

    #[test]
    fn gate_at_zero_divergence() {
        for eta in [-5.0, -3.0, -2.0, 0.0, 4.0] {
            assert_eq!(gate(0.0, eta).unwrap(), 0.5);
        }
    }

    #[test]
    fn gate_reference_value() {
        // exp(-3) / (1 + exp(-3)), 50-digit reference
        assert!((gate(1.0, -3.0).unwrap() - 0.047_425_873_177_566_78).abs() < 1e-15);
    }

    #[test]
    fn gate_is_stable_far_out() {
        let g = gate(100.0, -3.0).unwrap();
        assert!(g > 0.0 && g < 1e-30 && g.is_finite());
        assert!((g / 5.148_200_222_412_014e-131 - 1.0).abs() < 1e-12);
        let g = gate(1e6, -3.0).unwrap();
        assert!(g > 0.0 && g < 1.0);
        let g = gate(1e6, 3.0).unwrap();
        assert!(g > 0.0 && g < 1.0);
    }

    #[test]
    fn gate_rejects_nan() {
        assert!(gate(f64::NAN, -3.0).is_err());
        assert!(gate(1.0, f64::NAN).is_err());
        assert!(gate(-1.0, -3.0).is_err());
    }

    #[test]
    fn params_reject_positive_eta_without_flag() {
        assert!(GateParams::new(1.0, DivergenceKind::SymmetricKl).is_err());
        assert!(GateParams::new(0.0, DivergenceKind::SymmetricKl).is_ok());
        let p = GateParams {
            eta: 1.0,
            unsafe_eta: true,
            ..GateParams::default()
        };
        assert!(p.validate().is_ok());
    }

    #[test]
    fn fuse_degenerate_weights() {
        let pi = dist(&[0.8, 0.2]);
        let pe = dist(&[0.3, 0.7]);
        let f1 = fuse(&pi, &pe, 1.0).unwrap();
        let f0 = fuse(&pi, &pe, 0.0).unwrap();
        for i in 0..2 {
            assert!((f1.prob(i) - pi.prob(i)).abs() < 1e-12);
            assert!((f0.prob(i) - pe.prob(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_geometric_mean_renormalizes() {
        let f = fuse(&dist(&[0.8, 0.2]), &dist(&[0.2, 0.8]), 0.5).unwrap();
        assert!((f.prob(0) - 0.5).abs() < 1e-12);
        assert!((f.prob(1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fuse_errors() {
        let a = dist(&[0.5, 0.5]);
        let b = dist(&[0.2, 0.3, 0.5]);
        assert!(matches!(fuse(&a, &b, 0.5), Err(Error::VocabMismatch { .. })));
        assert!(matches!(fuse(&a, &a, 1.5), Err(Error::Config(_))));
        assert!(matches!(fuse(&a, &a, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn step_fuse_agreeing_streams() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let (f, r) = step_fuse(&p, &p, &GateParams::default(), 4).unwrap();
        assert_eq!(r.step, 4);
        assert!(r.divergence_value.abs() < 1e-15);
        assert_eq!(r.gate_value, 0.5);
        for i in 0..3 {
            assert!((f.prob(i) - p.prob(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn step_fuse_disagreeing_streams() {
        let pi = dist(&[0.9, 0.1]);
        let pe = dist(&[0.1, 0.9]);
        let (f, r) = step_fuse(&pi, &pe, &GateParams::default(), 0).unwrap();
        // 50-digit references for D, sigmoid(-3 D) and the fused pair.
        assert!((r.divergence_value - 3.515_559_323_737_951).abs() < 1e-12);
        assert!((r.gate_value - 2.627_995_040_543_684_5e-5).abs() < 1e-15);
        assert!((f.prob(0) - 0.100_010_394_211_668_39).abs() < 1e-12);
        assert!((f.prob(1) - 0.899_989_605_788_331_6).abs() < 1e-12);
        assert!((f.prob(0) - pe.prob(0)).abs() < 1e-4);

        let params = GateParams::new(0.0, DivergenceKind::SymmetricKl).unwrap();
        let (_, r) = step_fuse(&pi, &pe, &params, 0).unwrap();
        assert_eq!(r.gate_value, 0.5);
    }

    #[test]
    fn gate_strictly_decreasing_on_grid() {
        let gs: Vec<f64> = (0..100)
            .map(|i| gate(i as f64 * 0.1, -3.0).unwrap())
            .collect();
        assert!(gs.windows(2).all(|w| w[1] < w[0]));
    }

    fn pair() -> impl Strategy<Value = (TokenDistribution, TokenDistribution)> {
        (2usize..32).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..1.0, n),
                prop::collection::vec(0.0f64..1.0, n),
            )
                .prop_filter_map("zero mass", |(a, b)| {
                    let p = TokenDistribution::from_probs(&a).ok()?;
                    let q = TokenDistribution::from_probs(&b).ok()?;
                    Some((smooth(&p, 1e-8).ok()?, smooth(&q, 1e-8).ok()?))
                })
        })
    }

    proptest! {
        #[test]
        fn gate_in_open_interval(d in 0.0f64..1e4, eta in -50.0f64..50.0) {
            let g = gate(d, eta).unwrap();
            prop_assert!(g > 0.0 && g < 1.0);
        }

        #[test]
        fn fused_scores_bounded_by_streams((p, q) in pair(), g in 0.0f64..=1.0) {
            let scores = fused_log_scores(&p, &q, g).unwrap();
            for ((s, a), b) in scores.iter().zip(p.log_probs()).zip(q.log_probs()) {
                prop_assert!(*s >= a.min(*b) - 1e-12 && *s <= a.max(*b) + 1e-12);
            }
        }

        #[test]
        fn fusion_exchange_symmetry((p, q) in pair(), g in 0.0f64..=1.0) {
            let a = fuse(&p, &q, g).unwrap();
            let b = fuse(&q, &p, 1.0 - g).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn fused_argmax_matches_normalized((p, q) in pair(), g in 0.0f64..=1.0) {
            let f = fuse(&p, &q, g).unwrap();
            prop_assert_eq!(fused_argmax(&p, &q, g).unwrap(), f.argmax());
        }

        #[test]
        fn suppression_of_unsupported_tokens((p, q) in pair(), d1 in 0.0f64..20.0, d2 in 0.0f64..20.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let g_lo = gate(lo, -3.0).unwrap();
            let g_hi = gate(hi, -3.0).unwrap();
            let s_lo = fused_log_scores(&p, &q, g_lo).unwrap();
            let s_hi = fused_log_scores(&p, &q, g_hi).unwrap();
            for v in 0..p.vocab_size() {
                if p.prob(v) > q.prob(v) {
                    prop_assert!(s_hi[v] <= s_lo[v] + 1e-12);
                }
            }
        }
    }
}
