use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use iecd2_core::backends::{Backend, StreamRole, ToyBackend, TraceBackend};
use iecd2_core::decoder::{decode, DecoderConfig, GateTrace, PromptPair};
use iecd2_core::divergence::DivergenceKind;

use crate::config::{cap_to_trace, DecoderFlags, RunConfig, SweepSpec};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Toy scene directory (or file) to sweep over.
    #[arg(long, conflicts_with = "traces")]
    pub scene: Option<PathBuf>,
    /// Trace files to sweep over; repeatable.
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub prompts: Option<String>,
    #[arg(long)]
    pub question: Option<String>,
    #[command(flatten)]
    pub decoder: DecoderFlags,
    /// Comma-separated eta grid.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub etas: Vec<f64>,
    #[arg(long = "t-instrs", value_delimiter = ',')]
    pub t_instructions: Vec<f64>,
    #[arg(long = "t-evids", value_delimiter = ',')]
    pub t_evidences: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub divergences: Vec<DivergenceKind>,
    #[arg(long)]
    pub max_cells: Option<usize>,
    /// Worker threads for sweep cells.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub eta: f64,
    pub t_instruction: f64,
    pub t_evidence: f64,
    pub divergence: DivergenceKind,
}

/// Grid cells in lexicographic order over (eta, t_instruction, t_evidence,
/// divergence), each axis in the order given.
pub fn cells(spec: &SweepSpec) -> Vec<Cell> {
    let mut out = Vec::with_capacity(spec.cell_count());
    for &eta in &spec.etas {
        for &t_instruction in &spec.t_instructions {
            for &t_evidence in &spec.t_evidences {
                for &divergence in &spec.divergences {
                    out.push(Cell {
                        index: out.len(),
                        eta,
                        t_instruction,
                        t_evidence,
                        divergence,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: usize,
    pub eta: f64,
    pub t_instruction: f64,
    pub t_evidence: f64,
    pub divergence: DivergenceKind,
    pub items: usize,
    pub tokens: Option<usize>,
    /// Fraction of scenes with at least one ungrounded token.
    pub chair_analogue: Option<f64>,
    /// Mean over scenes of the fraction of grounded tokens emitted.
    pub coverage_analogue: Option<f64>,
    /// Ungrounded tokens over all emitted tokens.
    pub hal_analogue: Option<f64>,
    pub mean_d: Option<f64>,
    pub mean_g: Option<f64>,
    pub runtime_ms: Option<f64>,
    pub error: Option<String>,
}

pub enum Corpus {
    Toy(ToyBackend),
    Traces(Vec<TraceBackend>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Toy(b) => b.scene_ids().count(),
            Corpus::Traces(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Default)]
struct Tally {
    items: usize,
    tokens: usize,
    ungrounded: usize,
    scenes_with_ungrounded: usize,
    coverage_sum: f64,
    d_sum: f64,
    g_sum: f64,
    steps: usize,
}

impl Tally {
    fn add_trace(&mut self, t: &GateTrace) {
        self.d_sum += t.records.iter().map(|r| r.gate.divergence_value).sum::<f64>();
        self.g_sum += t.records.iter().map(|r| r.gate.gate_value).sum::<f64>();
        self.steps += t.records.len();
    }

    fn mean(sum: f64, n: usize) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

fn cell_config(base: &DecoderConfig, cell: &Cell) -> DecoderConfig {
    DecoderConfig {
        eta: cell.eta,
        t_instruction: cell.t_instruction,
        t_evidence: cell.t_evidence,
        divergence: cell.divergence,
        ..base.clone()
    }
}

fn run_cell(corpus: &Corpus, prompts: &PromptPair, base: &DecoderConfig, cell: &Cell) -> AblationRow {
    let config = cell_config(base, cell);
    let start = Instant::now();
    let mut tally = Tally::default();
    let result: CliResult<bool> = (|| match corpus {
        Corpus::Toy(backend) => {
            for id in backend.scene_ids() {
                let scene = backend.scene(id).expect("listed id");
                let (tokens, trace) = decode(backend, prompts, id, &config)?;
                let bad = tokens.iter().filter(|t| !scene.is_grounded(**t)).count();
                let hit: BTreeSet<_> = tokens.iter().filter(|t| scene.is_grounded(**t)).collect();
                tally.items += 1;
                tally.tokens += tokens.len();
                tally.ungrounded += bad;
                tally.scenes_with_ungrounded += usize::from(bad > 0);
                if !scene.grounded.is_empty() {
                    tally.coverage_sum += hit.len() as f64 / scene.grounded.len() as f64;
                }
                tally.add_trace(&trace);
            }
            Ok(true)
        }
        Corpus::Traces(traces) => {
            for backend in traces {
                let mut c = config.clone();
                cap_to_trace(backend, &mut c);
                let p = PromptPair::new(
                    backend.prompt(StreamRole::Instruction),
                    backend.prompt(StreamRole::Evidence),
                )?;
                let (tokens, trace) = decode(backend, &p, "", &c)?;
                tally.items += 1;
                tally.tokens += tokens.len();
                tally.add_trace(&trace);
            }
            Ok(false)
        }
    })();
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut row = AblationRow {
        cell: cell.index,
        eta: cell.eta,
        t_instruction: cell.t_instruction,
        t_evidence: cell.t_evidence,
        divergence: cell.divergence,
        items: tally.items,
        tokens: None,
        chair_analogue: None,
        coverage_analogue: None,
        hal_analogue: None,
        mean_d: None,
        mean_g: None,
        runtime_ms: None,
        error: None,
    };
    match result {
        Ok(grounded) => {
            row.tokens = Some(tally.tokens);
            row.mean_d = Tally::mean(tally.d_sum, tally.steps);
            row.mean_g = Tally::mean(tally.g_sum, tally.steps);
            row.runtime_ms = Some(runtime_ms);
            if grounded {
                row.chair_analogue = Tally::mean(tally.scenes_with_ungrounded as f64, tally.items);
                row.coverage_analogue = Tally::mean(tally.coverage_sum, tally.items);
                row.hal_analogue = Some(if tally.tokens == 0 {
                    0.0
                } else {
                    tally.ungrounded as f64 / tally.tokens as f64
                });
            }
        }
        Err(e) => {
            log::warn!("cell {} failed: {e}", cell.index);
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Runs every cell over the corpus. Cell failures are recorded in their row.
pub fn run_sweep(
    corpus: &Corpus,
    prompts: &PromptPair,
    base: &DecoderConfig,
    spec: &SweepSpec,
    jobs: Option<usize>,
) -> CliResult<Vec<AblationRow>> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(CliError::usage("ablation corpus is empty"));
    }
    let grid = cells(spec);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::failed(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        grid.par_iter()
            .map(|cell| run_cell(corpus, prompts, base, cell))
            .collect()
    }))
}

pub fn write_csv<W: Write>(rows: &[AblationRow], out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(HEADER)?;
    }
    w.flush()?;
    Ok(())
}

pub const HEADER: [&str; 14] = [
    "cell",
    "eta",
    "t_instruction",
    "t_evidence",
    "divergence",
    "items",
    "tokens",
    "chair_analogue",
    "coverage_analogue",
    "hal_analogue",
    "mean_d",
    "mean_g",
    "runtime_ms",
    "error",
];

pub fn run(mut run: RunConfig, args: &AblateArgs) -> CliResult<Vec<AblationRow>> {
    args.decoder.apply(&mut run.decoder);
    if let Some(f) = &args.prompts {
        run.prompts.family = Some(f.clone());
    }
    if let Some(q) = &args.question {
        run.prompts.question = Some(q.clone());
    }
    let mut spec = run.sweep.clone();
    let pick = |grid: &Vec<f64>, single: Option<f64>, current: &mut Vec<f64>| {
        if !grid.is_empty() {
            *current = grid.clone();
        } else if let Some(v) = single {
            *current = vec![v];
        }
    };
    pick(&args.etas, args.decoder.eta, &mut spec.etas);
    pick(&args.t_instructions, args.decoder.t_instruction, &mut spec.t_instructions);
    pick(&args.t_evidences, args.decoder.t_evidence, &mut spec.t_evidences);
    if !args.divergences.is_empty() {
        spec.divergences = args.divergences.clone();
    } else if let Some(d) = args.decoder.divergence {
        spec.divergences = vec![d];
    }
    if let Some(n) = args.max_cells {
        spec.max_cells = n;
    }

    let mut config = run.decoder.clone();
    let scene = args.scene.clone().or(run.backend.scene.clone());
    let traces = if args.traces.is_empty() {
        run.backend.trace.iter().cloned().collect()
    } else {
        args.traces.clone()
    };
    let corpus = match (scene, traces.is_empty()) {
        (Some(path), true) => {
            let backend = ToyBackend::load(&path)?;
            run.backend.apply_stop(backend.vocab(), true, &mut config)?;
            Corpus::Toy(backend)
        }
        (None, false) => {
            let backends = traces
                .iter()
                .map(|p| TraceBackend::open(p))
                .collect::<iecd2_core::Result<Vec<_>>>()?;
            if let Some(first) = backends.first() {
                run.backend.apply_stop(first.vocab(), false, &mut config)?;
            }
            Corpus::Traces(backends)
        }
        (None, true) => return Err(CliError::usage("select a corpus with --scene or --trace")),
        (Some(_), false) => return Err(CliError::usage("--scene and --trace are mutually exclusive")),
    };
    let prompts = run.prompts.resolve()?;
    let rows = run_sweep(&corpus, &prompts, &config, &spec, args.jobs)?;
    match &args.out {
        Some(path) => write_csv(&rows, std::fs::File::create(path)?)?,
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(rows)
}
