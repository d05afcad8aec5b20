use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use iecd2_core::backends::{
    write_trace, Backend, LogitTrace, StreamRole, StreamSession, TraceBackend, TraceFormat,
    TraceStep,
};
use iecd2_core::decoder::{decode, decode_single_stream, DecoderConfig, PromptPair};
use iecd2_core::distcore::{smooth, softmax_with_temperature, LogitVector, VocabMap};
use iecd2_core::gatefusion::{fused_argmax, step_gate};

use crate::config::{DecoderFlags, RunConfig};
use crate::error::{CliError, CliResult};

/// Allowed dual-stream cost relative to running both streams alone.
pub const OVERHEAD_LIMIT: f64 = 1.06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    InstructionOnly,
    EvidenceOnly,
    DualReuse,
    DualFresh,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Trace to replay; a synthetic one is generated when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Vocabulary size of the synthetic trace.
    #[arg(long, default_value_t = 32000)]
    pub vocab: usize,
    #[arg(long, default_value_t = 9)]
    pub repetitions: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![16, 32, 64])]
    pub lengths: Vec<usize>,
    /// Skip the fresh-sessions variant.
    #[arg(long)]
    pub skip_fresh: bool,
    /// Exit with status 1 when the overhead or monotonicity check fails.
    #[arg(long)]
    pub check: bool,
    #[command(flatten)]
    pub decoder: DecoderFlags,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    pub include_fresh: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub length: usize,
    pub variant: Variant,
    pub median_ms: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn median(&self, length: usize, variant: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.length == length && r.variant == variant)
            .map(|r| r.median_ms)
    }

    fn lengths(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.rows.iter().map(|r| r.length).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Dual-with-reuse time over instruction-only plus evidence-only, at the
    /// longest length.
    pub fn overhead_ratio(&self) -> f64 {
        let n = *self.lengths().last().expect("non-empty report");
        let dual = self.median(n, Variant::DualReuse).expect("measured");
        let single = self.median(n, Variant::InstructionOnly).expect("measured")
            + self.median(n, Variant::EvidenceOnly).expect("measured");
        dual / single
    }

    /// Dual-with-reuse time strictly increases with length.
    pub fn monotone(&self) -> bool {
        let t: Vec<f64> = self
            .lengths()
            .iter()
            .map(|&n| self.median(n, Variant::DualReuse).expect("measured"))
            .collect();
        t.windows(2).all(|w| w[1] > w[0])
    }

    /// Dual-with-reuse time at the longest length over the shortest.
    pub fn length_ratio(&self) -> f64 {
        let l = self.lengths();
        let first = self.median(l[0], Variant::DualReuse).expect("measured");
        let last = self.median(*l.last().expect("non-empty"), Variant::DualReuse).expect("measured");
        last / first
    }

    pub fn contract_holds(&self) -> bool {
        self.overhead_ratio() <= OVERHEAD_LIMIT && self.monotone()
    }

    pub fn summary(&self) -> String {
        format!(
            "overhead_ratio={:.4} (limit {OVERHEAD_LIMIT}) monotone={} length_ratio={:.3}",
            self.overhead_ratio(),
            self.monotone(),
            self.length_ratio()
        )
    }
}

/// Random dual-stream trace whose recorded tokens are the greedy
/// dual-stream choices under `config`.
pub fn synthetic_trace(
    vocab_size: usize,
    steps: usize,
    seed: u64,
    config: &DecoderConfig,
) -> CliResult<LogitTrace> {
    if vocab_size < 2 || steps == 0 {
        return Err(CliError::usage("synthetic trace needs vocab >= 2 and at least one step"));
    }
    let vocab = VocabMap::new((0..vocab_size).map(|i| format!("t{i}")).collect())?;
    let prompts = PromptPair::from_registry("caption", None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0, 2.0).expect("valid normal");
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let inst: Vec<f64> = (0..vocab_size).map(|_| base.sample(&mut rng)).collect();
        let evid: Vec<f64> = inst.iter().map(|x| 0.8 * x + noise.sample(&mut rng)).collect();
        records.push(TraceStep {
            instruction_logits: LogitVector::new(inst)?,
            evidence_logits: LogitVector::new(evid)?,
            source_token: 0,
        });
    }
    let draft = LogitTrace::new(
        vocab,
        prompts.instruction_prompt.clone(),
        prompts.evidence_prompt.clone(),
        records,
    )?;
    let replay = TraceBackend::from_trace(draft.clone())?;
    let c = DecoderConfig { max_tokens: steps, ..config.clone() };
    let (tokens, _) = decode(&replay, &prompts, "", &c)?;
    let mut trace = draft;
    for (step, t) in trace.steps.iter_mut().zip(tokens) {
        step.source_token = t;
    }
    Ok(trace)
}

/// Dual-stream greedy decode that opens new sessions at every step and
/// replays the history into them.
pub fn decode_fresh_sessions<B: Backend>(
    backend: &B,
    prompts: &PromptPair,
    image_ref: &str,
    config: &DecoderConfig,
) -> CliResult<Vec<usize>> {
    let params = config.gate_params();
    let mut history = Vec::new();
    for step in 0..config.max_tokens {
        let mut inst =
            backend.open_session(StreamRole::Instruction, &prompts.instruction_prompt, image_ref)?;
        let mut evid =
            backend.open_session(StreamRole::Evidence, &prompts.evidence_prompt, image_ref)?;
        for &t in &history {
            inst.append_token(t)?;
            evid.append_token(t)?;
        }
        if inst.remaining() == Some(0) {
            break;
        }
        let pi = smooth(&softmax_with_temperature(&inst.next_logits()?, config.t_instruction)?, config.eps)?;
        let pe = smooth(&softmax_with_temperature(&evid.next_logits()?, config.t_evidence)?, config.eps)?;
        let gate = step_gate(&pi, &pe, &params, step)?;
        let token = fused_argmax(&pi, &pe, gate.gate_value)?;
        if config.stop_tokens.contains(&token) {
            break;
        }
        history.push(token);
    }
    Ok(history)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_ms(f: impl FnOnce() -> CliResult<usize>) -> CliResult<f64> {
    let start = Instant::now();
    let n = f()?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(n);
    Ok(elapsed)
}

/// Times each variant on the trace at `path`. Repetitions are interleaved
/// across variants and lengths; medians are reported.
pub fn run_bench(path: &Path, base: &DecoderConfig, spec: &BenchSpec) -> CliResult<BenchReport> {
    if spec.repetitions < 3 {
        return Err(CliError::usage("bench needs at least 3 repetitions"));
    }
    if spec.lengths.is_empty() || spec.lengths.contains(&0) {
        return Err(CliError::usage("bench lengths must be positive"));
    }
    let backend = TraceBackend::open(path)?;
    if let Some(&n) = spec.lengths.iter().find(|&&n| n > backend.len()) {
        return Err(CliError::usage(format!(
            "length {n} exceeds the trace's {} steps",
            backend.len()
        )));
    }
    let prompts = PromptPair::new(
        backend.prompt(StreamRole::Instruction),
        backend.prompt(StreamRole::Evidence),
    )?;
    let variants = [Variant::InstructionOnly, Variant::EvidenceOnly, Variant::DualReuse];
    let run_once = |variant: Variant, config: &DecoderConfig| -> CliResult<f64> {
        time_ms(|| {
            Ok(match variant {
                Variant::InstructionOnly => {
                    decode_single_stream(&backend, StreamRole::Instruction, &prompts.instruction_prompt, "", config)?.0.len()
                }
                Variant::EvidenceOnly => {
                    decode_single_stream(&backend, StreamRole::Evidence, &prompts.evidence_prompt, "", config)?.0.len()
                }
                Variant::DualReuse => decode(&backend, &prompts, "", config)?.0.len(),
                Variant::DualFresh => decode_fresh_sessions(&backend, &prompts, "", config)?.len(),
            })
        })
    };

    let configs: Vec<DecoderConfig> = spec
        .lengths
        .iter()
        .map(|&n| DecoderConfig { max_tokens: n, min_tokens: 0, ..base.clone() })
        .collect();
    for &v in &variants {
        run_once(v, &configs[0])?;
    }
    let mut samples: BTreeMap<(usize, Variant), Vec<f64>> = BTreeMap::new();
    let mut record = |rep: usize, c: &DecoderConfig, v: Variant| -> CliResult<()> {
        let ms = run_once(v, c)?;
        log::debug!("rep {rep} length {} {v:?}: {ms:.3} ms", c.max_tokens);
        samples.entry((c.max_tokens, v)).or_default().push(ms);
        Ok(())
    };
    // The variant order rotates each repetition so no variant always runs
    // right after another.
    for rep in 0..spec.repetitions {
        for c in &configs {
            for k in 0..variants.len() {
                record(rep, c, variants[(k + rep) % variants.len()])?;
            }
        }
    }
    // Fresh sessions cost an order of magnitude more; timed separately so
    // they do not disturb the comparison above.
    if spec.include_fresh {
        for rep in 0..spec.repetitions {
            for c in &configs {
                record(rep, c, Variant::DualFresh)?;
            }
        }
    }
    let rows = samples
        .into_iter()
        .map(|((length, variant), xs)| BenchRow {
            length,
            variant,
            repetitions: xs.len(),
            median_ms: median(xs),
        })
        .collect();
    Ok(BenchReport { rows })
}

pub fn write_csv<W: Write>(report: &BenchReport, out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(mut run: RunConfig, args: &BenchArgs) -> CliResult<BenchReport> {
    args.decoder.apply(&mut run.decoder);
    let spec = BenchSpec {
        lengths: args.lengths.clone(),
        repetitions: args.repetitions,
        include_fresh: !args.skip_fresh,
    };
    let config = run.decoder.clone();
    let report = match &args.trace {
        Some(path) => run_bench(path, &config, &spec)?,
        None => {
            let steps = spec.lengths.iter().copied().max().unwrap_or(0);
            let trace = synthetic_trace(args.vocab, steps, args.decoder.seed.unwrap_or(0), &config)?;
            let file = tempfile::NamedTempFile::new()?;
            write_trace(&trace, file.path(), TraceFormat::Binary)?;
            run_bench(file.path(), &config, &spec)?
        }
    };
    match &args.out {
        Some(path) => write_csv(&report, std::fs::File::create(path)?)?,
        None => write_csv(&report, std::io::stdout().lock())?,
    }
    eprintln!("{}", report.summary());
    if args.check && !report.contract_holds() {
        return Err(CliError::failed(format!("runtime contract failed: {}", report.summary())));
    }
    Ok(report)
}
