use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use iecd2_core::backends::{
    write_trace, Backend, StreamRole, ToyBackend, TraceBackend, TraceFormat,
};
use iecd2_core::decoder::{
    decode, decode_single_stream, export_trace, DecoderConfig, GateTrace, PromptPair, StreamTrace,
};
use iecd2_core::distcore::TokenId;

use crate::config::{cap_to_trace, BackendChoice, DecoderFlags, RunConfig, SourceFlags};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum StreamChoice {
    #[default]
    Dual,
    Instruction,
    Evidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum TraceFormatArg {
    #[default]
    Text,
    Binary,
}

impl From<TraceFormatArg> for TraceFormat {
    fn from(f: TraceFormatArg) -> Self {
        match f {
            TraceFormatArg::Text => TraceFormat::Text,
            TraceFormatArg::Binary => TraceFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub source: SourceFlags,
    #[command(flatten)]
    pub decoder: DecoderFlags,
    /// Decode with both streams or a single one.
    #[arg(long, value_enum, default_value_t)]
    pub stream: StreamChoice,
    /// Directory for tokens.json and the gate trace.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also record both streams' logits as a replayable trace.
    #[arg(long)]
    pub export_trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub trace_format: TraceFormatArg,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub text: String,
    #[serde(skip)]
    pub gate_trace: Option<GateTrace>,
    #[serde(skip)]
    pub stream_trace: Option<StreamTrace>,
}

impl DecodeOutput {
    pub fn summary(&self) -> String {
        match &self.gate_trace {
            Some(t) => format!(
                "tokens={} mean_d={} mean_g={} off_trace={}",
                self.tokens.len(),
                t.mean_divergence(),
                t.mean_gate(),
                t.off_trace_count()
            ),
            None => format!("tokens={}", self.tokens.len()),
        }
    }
}

fn run_backend<B: Backend>(
    backend: &B,
    prompts: &PromptPair,
    image_ref: &str,
    config: &DecoderConfig,
    args: &DecodeArgs,
) -> CliResult<DecodeOutput> {
    let (tokens, gate_trace, stream_trace) = match args.stream {
        StreamChoice::Dual => {
            let (t, g) = decode(backend, prompts, image_ref, config)?;
            (t, Some(g), None)
        }
        StreamChoice::Instruction | StreamChoice::Evidence => {
            let (role, prompt) = if args.stream == StreamChoice::Instruction {
                (StreamRole::Instruction, &prompts.instruction_prompt)
            } else {
                (StreamRole::Evidence, &prompts.evidence_prompt)
            };
            let (t, s) = decode_single_stream(backend, role, prompt, image_ref, config)?;
            (t, None, Some(s))
        }
    };
    if let Some(path) = &args.export_trace {
        if args.stream != StreamChoice::Dual {
            return Err(CliError::usage("--export-trace needs --stream dual"));
        }
        let trace = export_trace(backend, prompts, image_ref, config)?;
        write_trace(&trace, path, args.trace_format.into())?;
    }
    Ok(DecodeOutput {
        text: backend.vocab().render(&tokens),
        tokens,
        gate_trace,
        stream_trace,
    })
}

pub fn run(mut run: RunConfig, args: &DecodeArgs) -> CliResult<DecodeOutput> {
    args.source.apply(&mut run);
    args.decoder.apply(&mut run.decoder);
    if let Some(out) = &args.out {
        run.output.dir = Some(out.clone());
    }
    let mut config = run.decoder.clone();
    let output = match run.backend.choice()? {
        BackendChoice::Toy { path, scene_id } => {
            let backend = ToyBackend::load(&path)?;
            let id = match scene_id {
                Some(id) => id,
                None => {
                    let ids: Vec<&str> = backend.scene_ids().collect();
                    if ids.len() != 1 {
                        return Err(CliError::usage(format!(
                            "{} holds {} scenes; pick one with --scene-id",
                            path.display(),
                            ids.len()
                        )));
                    }
                    ids[0].to_string()
                }
            };
            run.backend.apply_stop(backend.vocab(), true, &mut config)?;
            let prompts = run.prompts.resolve()?;
            run_backend(&backend, &prompts, &id, &config, args)?
        }
        BackendChoice::Trace(path) => {
            let backend = TraceBackend::open(&path)?;
            run.backend.apply_stop(backend.vocab(), false, &mut config)?;
            cap_to_trace(&backend, &mut config);
            let prompts = run.prompts.resolve_for_trace(&backend)?;
            run_backend(&backend, &prompts, "", &config, args)?
        }
    };
    if let Some(dir) = &run.output.dir {
        write_outputs(dir, &output)?;
    }
    Ok(output)
}

fn write_outputs(dir: &Path, output: &DecodeOutput) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    let tokens = serde_json::to_string_pretty(output).expect("tokens serialize");
    fs::write(dir.join("tokens.json"), tokens + "\n")?;
    if let Some(t) = &output.gate_trace {
        let mut w = BufWriter::new(fs::File::create(dir.join("gate_trace.jsonl"))?);
        t.write_jsonl(&mut w)?;
        w.flush()?;
    }
    if let Some(s) = &output.stream_trace {
        let text = serde_json::to_string_pretty(s).expect("trace serializes");
        fs::write(dir.join("stream_trace.json"), text + "\n")?;
    }
    Ok(())
}
