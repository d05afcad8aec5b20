//! The dual-stream decoding loop.
//!
//! Per step: read logits from both sessions, apply each stream's temperature,
//! smooth, compute divergence and gate, fuse, select one token and append it
//! to both sessions.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{
    Alignment, Backend, LogitTrace, StreamRole, StreamSession, TraceStep,
};
use crate::distcore::{
    smooth, softmax_with_temperature, top_k, LogitVector, TokenDistribution, TokenId,
};
use crate::error::{Error, Result};
use crate::gatefusion::{fuse, fused_argmax, step_gate, GateRecord};

mod config;
pub mod prompts;

pub use config::{
    DecoderConfig, Selection, TaskProfile, DEFAULT_T_EVIDENCE, DEFAULT_T_INSTRUCTION,
};
pub use prompts::{render_prompt, PromptPair};

/// Per-stream candidates kept in each trace record.
pub const TRACE_TOP_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    #[serde(flatten)]
    pub gate: GateRecord,
    pub token: TokenId,
    pub instruction_top: Vec<(TokenId, f64)>,
    pub evidence_top: Vec<(TokenId, f64)>,
    pub off_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub config: DecoderConfig,
    pub prompt_digest: String,
    pub records: Vec<StepRecord>,
}

#[derive(Serialize)]
struct TraceHeader<'a> {
    config: &'a DecoderConfig,
    prompt_digest: &'a str,
    steps: usize,
}

impl GateTrace {
    pub fn mean_divergence(&self) -> f64 {
        mean(self.records.iter().map(|r| r.gate.divergence_value))
    }

    pub fn mean_gate(&self) -> f64 {
        mean(self.records.iter().map(|r| r.gate.gate_value))
    }

    pub fn off_trace_count(&self) -> usize {
        self.records.iter().filter(|r| r.off_trace).count()
    }

    /// One header line followed by one JSON object per step.
    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let header = TraceHeader {
            config: &self.config,
            prompt_digest: &self.prompt_digest,
            steps: self.records.len(),
        };
        serde_json::to_writer(&mut *out, &header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Hex SHA-256 of both prompts.
pub fn prompt_digest(prompts: &PromptPair) -> String {
    let mut h = Sha256::new();
    h.update(prompts.instruction_prompt.as_bytes());
    h.update([0u8]);
    h.update(prompts.evidence_prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Everything the loop computed for one emitted token.
pub struct StepView<'a> {
    pub step: usize,
    pub instruction_logits: &'a LogitVector,
    pub evidence_logits: &'a LogitVector,
    /// Tempered and smoothed instruction distribution.
    pub instruction: &'a TokenDistribution,
    /// Tempered and smoothed evidence distribution.
    pub evidence: &'a TokenDistribution,
    /// Present when the observer asked for it or sampling needed it.
    pub fused: Option<&'a TokenDistribution>,
    pub gate: &'a GateRecord,
    pub token: TokenId,
}

pub trait StepObserver {
    /// Forces the fused distribution to be normalized at every step.
    fn wants_fused(&self) -> bool {
        false
    }

    fn observe(&mut self, view: &StepView<'_>);
}

impl StepObserver for () {
    fn observe(&mut self, _: &StepView<'_>) {}
}

struct Selector {
    rng: Option<(ChaCha8Rng, f64)>,
}

impl Selector {
    fn new(selection: Selection) -> Self {
        Self {
            rng: match selection {
                Selection::Greedy => None,
                Selection::Sample { temperature, seed } => {
                    Some((ChaCha8Rng::seed_from_u64(seed), temperature))
                }
            },
        }
    }

    fn is_greedy(&self) -> bool {
        self.rng.is_none()
    }

    /// Picks from `dist`, never choosing a `banned` token unless nothing else
    /// is left.
    fn select(&mut self, dist: &TokenDistribution, banned: Option<&BTreeSet<TokenId>>) -> TokenId {
        let allowed = |i: &TokenId| banned.map_or(true, |b| !b.contains(i));
        match &mut self.rng {
            None => {
                let mut best = None::<(TokenId, f64)>;
                for (i, &lp) in dist.log_probs().iter().enumerate() {
                    if allowed(&i) && best.map_or(true, |(_, b)| lp > b) {
                        best = Some((i, lp));
                    }
                }
                best.map_or_else(|| dist.argmax(), |(i, _)| i)
            }
            Some((rng, temperature)) => {
                let scaled: Vec<f64> = dist
                    .log_probs()
                    .iter()
                    .enumerate()
                    .map(|(i, lp)| if allowed(&i) { lp / *temperature } else { f64::NEG_INFINITY })
                    .collect();
                let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return dist.argmax();
                }
                let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut last = 0;
                for (i, w) in weights.iter().enumerate() {
                    if *w > 0.0 {
                        last = i;
                        if u < *w {
                            return i;
                        }
                        u -= w;
                    }
                }
                last
            }
        }
    }
}

fn stream_distribution(logits: &LogitVector, temperature: f64, eps: f64) -> Result<TokenDistribution> {
    smooth(&softmax_with_temperature(logits, temperature)?, eps)
}

fn trace_top(dist: &TokenDistribution) -> Vec<(TokenId, f64)> {
    top_k(dist, TRACE_TOP_K.min(dist.vocab_size())).expect("k within vocabulary")
}

fn read_pair<S: StreamSession>(inst: &mut S, evid: &mut S) -> Result<(LogitVector, LogitVector)> {
    let li = inst.next_logits()?;
    let le = evid.next_logits()?;
    if li.vocab_size() != le.vocab_size() {
        return Err(Error::VocabMismatch {
            left: li.vocab_size(),
            right: le.vocab_size(),
        });
    }
    Ok((li, le))
}

fn exhausted<S: StreamSession>(s: &S) -> bool {
    s.remaining() == Some(0)
}

/// Dual-stream decode. Returns the generated tokens (stop token excluded)
/// and the per-step gate trace.
pub fn decode<B: Backend>(
    backend: &B,
    prompts: &PromptPair,
    image_ref: &str,
    config: &DecoderConfig,
) -> Result<(Vec<TokenId>, GateTrace)> {
    decode_observed(backend, prompts, image_ref, config, &mut ())
}

pub fn decode_observed<B: Backend, O: StepObserver>(
    backend: &B,
    prompts: &PromptPair,
    image_ref: &str,
    config: &DecoderConfig,
    observer: &mut O,
) -> Result<(Vec<TokenId>, GateTrace)> {
    config.validate()?;
    prompts.validate()?;
    let params = config.gate_params();
    let mut inst = backend.open_session(StreamRole::Instruction, &prompts.instruction_prompt, image_ref)?;
    let mut evid = backend.open_session(StreamRole::Evidence, &prompts.evidence_prompt, image_ref)?;
    let mut selector = Selector::new(config.selection);
    let mut tokens = Vec::new();
    let mut records = Vec::new();
    let mut off_trace = false;

    for step in 0..config.max_tokens {
        if exhausted(&inst) || exhausted(&evid) {
            break;
        }
        let (li, le) = read_pair(&mut inst, &mut evid).map_err(|e| e.at_step(step))?;
        let pi = stream_distribution(&li, config.t_instruction, config.eps)?;
        let pe = stream_distribution(&le, config.t_evidence, config.eps)?;
        let gate = step_gate(&pi, &pe, &params, step).map_err(|e| e.at_step(step))?;

        let banned = (step < config.min_tokens && !config.stop_tokens.is_empty())
            .then_some(&config.stop_tokens);
        let need_fused = !selector.is_greedy() || banned.is_some() || observer.wants_fused();
        let fused = if need_fused {
            Some(fuse(&pi, &pe, gate.gate_value)?)
        } else {
            None
        };
        let token = match &fused {
            Some(f) => selector.select(f, banned),
            None => fused_argmax(&pi, &pe, gate.gate_value)?,
        };
        if banned.is_none() && config.stop_tokens.contains(&token) {
            break;
        }

        observer.observe(&StepView {
            step,
            instruction_logits: &li,
            evidence_logits: &le,
            instruction: &pi,
            evidence: &pe,
            fused: fused.as_ref(),
            gate: &gate,
            token,
        });

        let a = inst.append_token(token).map_err(|e| e.at_step(step))?;
        let b = evid.append_token(token).map_err(|e| e.at_step(step))?;
        off_trace |= a != Alignment::Aligned || b != Alignment::Aligned;
        records.push(StepRecord {
            gate,
            token,
            instruction_top: trace_top(&pi),
            evidence_top: trace_top(&pe),
            off_trace,
        });
        tokens.push(token);
    }

    Ok((
        tokens,
        GateTrace {
            config: config.clone(),
            prompt_digest: prompt_digest(prompts),
            records,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleStepRecord {
    pub step: usize,
    pub token: TokenId,
    pub top: Vec<(TokenId, f64)>,
    pub off_trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTrace {
    pub role: StreamRole,
    pub config: DecoderConfig,
    pub records: Vec<SingleStepRecord>,
}

/// Baseline decode with one stream and no fusion. The stream's own
/// temperature (`t_instruction` or `t_evidence`) applies.
pub fn decode_single_stream<B: Backend>(
    backend: &B,
    role: StreamRole,
    prompt: &str,
    image_ref: &str,
    config: &DecoderConfig,
) -> Result<(Vec<TokenId>, StreamTrace)> {
    config.validate()?;
    let temperature = match role {
        StreamRole::Instruction => config.t_instruction,
        StreamRole::Evidence => config.t_evidence,
    };
    let mut session = backend.open_session(role, prompt, image_ref)?;
    let mut selector = Selector::new(config.selection);
    let mut tokens = Vec::new();
    let mut records = Vec::new();
    let mut off_trace = false;

    for step in 0..config.max_tokens {
        if exhausted(&session) {
            break;
        }
        let logits = session.next_logits().map_err(|e| e.at_step(step))?;
        let dist = stream_distribution(&logits, temperature, config.eps)?;
        let banned = (step < config.min_tokens && !config.stop_tokens.is_empty())
            .then_some(&config.stop_tokens);
        let token = if selector.is_greedy() && banned.is_none() {
            dist.argmax()
        } else {
            selector.select(&dist, banned)
        };
        if banned.is_none() && config.stop_tokens.contains(&token) {
            break;
        }
        off_trace |= session.append_token(token).map_err(|e| e.at_step(step))? != Alignment::Aligned;
        records.push(SingleStepRecord {
            step,
            token,
            top: trace_top(&dist),
            off_trace,
        });
        tokens.push(token);
    }

    Ok((
        tokens,
        StreamTrace {
            role,
            config: config.clone(),
            records,
        },
    ))
}

struct LogitRecorder {
    steps: Vec<TraceStep>,
}

impl StepObserver for LogitRecorder {
    fn observe(&mut self, view: &StepView<'_>) {
        self.steps.push(TraceStep {
            instruction_logits: view.instruction_logits.clone(),
            evidence_logits: view.evidence_logits.clone(),
            source_token: view.token,
        });
    }
}

/// Runs a dual-stream decode and records both streams' raw logits with the
/// selected token, producing a replayable trace.
pub fn export_trace<B: Backend>(
    backend: &B,
    prompts: &PromptPair,
    image_ref: &str,
    config: &DecoderConfig,
) -> Result<LogitTrace> {
    let mut rec = LogitRecorder { steps: Vec::new() };
    decode_observed(backend, prompts, image_ref, config, &mut rec)?;
    LogitTrace::new(
        backend.vocab().clone(),
        prompts.instruction_prompt.clone(),
        prompts.evidence_prompt.clone(),
        rec.steps,
    )
}
