//! Brute-force reference decoder working directly in probability space from
//! a toy scene's raw tables. Shares no numeric code with the library.

#![allow(dead_code)]

use iecd2_core::backends::ToyScene;
use iecd2_core::divergence::DivergenceKind;

pub struct OracleConfig {
    pub eta: f64,
    pub t_instruction: f64,
    pub t_evidence: f64,
    pub eps: f64,
    pub kind: DivergenceKind,
    pub max_tokens: usize,
    pub stop_token: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct OracleStep {
    pub instruction: Vec<f64>,
    pub evidence: Vec<f64>,
    pub divergence: f64,
    pub gate: f64,
    pub fused: Vec<f64>,
    pub token: usize,
}

pub fn plain_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn temper(p: &[f64], t: f64) -> Vec<f64> {
    let w: Vec<f64> = p.iter().map(|x| x.powf(1.0 / t)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn floor(p: &[f64], eps: f64) -> Vec<f64> {
    if p.iter().all(|&x| x >= eps) {
        let s: f64 = p.iter().sum();
        return p.iter().map(|x| x / s).collect();
    }
    let v = p.len() as f64;
    let w: Vec<f64> = p.iter().map(|x| (1.0 - v * eps) * x + eps).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn bc(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum()
}

pub fn measure(kind: DivergenceKind, p: &[f64], q: &[f64]) -> f64 {
    match kind {
        DivergenceKind::ForwardKl => kl(p, q),
        DivergenceKind::ReverseKl => kl(q, p),
        DivergenceKind::SymmetricKl => kl(p, q) + kl(q, p),
        DivergenceKind::Hellinger => (1.0 - bc(p, q)).max(0.0).sqrt(),
        DivergenceKind::Bhattacharyya => -bc(p, q).ln(),
    }
}

pub fn geometric_mix(p: &[f64], q: &[f64], g: f64) -> Vec<f64> {
    let w: Vec<f64> = p.iter().zip(q).map(|(a, b)| a.powf(g) * b.powf(1.0 - g)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn first_max(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Raw (untempered) stream probabilities after `prev`.
pub fn stream_probs(scene: &ToyScene, prev: usize) -> (Vec<f64>, Vec<f64>) {
    let s = plain_softmax(scene.scene[prev].scores());
    let pr = plain_softmax(scene.prior[prev].scores());
    let l = scene.lambda;
    let inst = s.iter().zip(&pr).map(|(a, b)| (1.0 - l) * a + l * b).collect();
    (inst, s)
}

pub fn step_at(scene: &ToyScene, prev: usize, cfg: &OracleConfig) -> OracleStep {
    let (raw_i, raw_e) = stream_probs(scene, prev);
    let pi = floor(&temper(&raw_i, cfg.t_instruction), cfg.eps);
    let pe = floor(&temper(&raw_e, cfg.t_evidence), cfg.eps);
    let d = measure(cfg.kind, &pi, &pe);
    let g = 1.0 / (1.0 + (-cfg.eta * d).exp());
    let fused = geometric_mix(&pi, &pe, g);
    let token = first_max(&fused);
    OracleStep { instruction: pi, evidence: pe, divergence: d, gate: g, fused, token }
}

/// Greedy dual-stream decode. Steps include the stop step if one occurs, so
/// callers can compare its distributions too; `tokens` excludes it.
pub fn decode(scene: &ToyScene, cfg: &OracleConfig) -> (Vec<usize>, Vec<OracleStep>) {
    let mut prev = 0;
    let mut tokens = Vec::new();
    let mut steps = Vec::new();
    for _ in 0..cfg.max_tokens {
        let st = step_at(scene, prev, cfg);
        let tok = st.token;
        steps.push(st);
        if Some(tok) == cfg.stop_token {
            break;
        }
        tokens.push(tok);
        prev = tok;
    }
    (tokens, steps)
}

/// Greedy single-stream decode at the given temperature.
pub fn decode_single(scene: &ToyScene, instruction: bool, cfg: &OracleConfig) -> Vec<usize> {
    let mut prev = 0;
    let mut tokens = Vec::new();
    for _ in 0..cfg.max_tokens {
        let (raw_i, raw_e) = stream_probs(scene, prev);
        let p = if instruction {
            floor(&temper(&raw_i, cfg.t_instruction), cfg.eps)
        } else {
            floor(&temper(&raw_e, cfg.t_evidence), cfg.eps)
        };
        let tok = first_max(&p);
        if Some(tok) == cfg.stop_token {
            break;
        }
        tokens.push(tok);
        prev = tok;
    }
    tokens
}
