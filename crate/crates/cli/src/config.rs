//! Run configuration: an optional TOML file with `[decoder]`, `[backend]`,
//! `[prompts]`, `[output]` and `[sweep]` tables, overridden by flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use iecd2_core::backends::toy::BOUNDARY_NAME;
use iecd2_core::backends::{StreamRole, TraceBackend};
use iecd2_core::decoder::{DecoderConfig, PromptPair, Selection, TaskProfile};
use iecd2_core::distcore::VocabMap;
use iecd2_core::divergence::DivergenceKind;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub decoder: DecoderConfig,
    pub backend: BackendSelection,
    pub prompts: PromptSelection,
    pub output: OutputSelection,
    pub sweep: SweepSpec,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSelection {
    /// Toy scene file or directory of scene files.
    pub scene: Option<PathBuf>,
    pub scene_id: Option<String>,
    pub trace: Option<PathBuf>,
    /// Stop tokens by name. Unset means `<s>` for toy scenes and none for
    /// traces.
    pub stop: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSelection {
    /// Registry family: caption, yesno or openqa.
    pub family: Option<String>,
    pub question: Option<String>,
    /// Literal prompts; both must be given to bypass the registry.
    pub instruction: Option<String>,
    pub evidence: Option<String>,
}

impl PromptSelection {
    pub fn is_unset(&self) -> bool {
        self.family.is_none() && self.instruction.is_none() && self.evidence.is_none()
    }

    /// Resolves to a prompt pair, using the caption family when nothing was
    /// chosen.
    pub fn resolve(&self) -> CliResult<PromptPair> {
        match (&self.instruction, &self.evidence) {
            (Some(i), Some(e)) => Ok(PromptPair::new(i.clone(), e.clone())?),
            (None, None) => Ok(PromptPair::from_registry(
                self.family.as_deref().unwrap_or("caption"),
                self.question.as_deref(),
            )?),
            _ => Err(CliError::usage("literal prompts need both instruction and evidence")),
        }
    }

    /// Like `resolve`, but falls back to the prompts a trace was recorded
    /// with.
    pub fn resolve_for_trace(&self, trace: &TraceBackend) -> CliResult<PromptPair> {
        if self.is_unset() {
            return Ok(PromptPair::new(
                trace.prompt(StreamRole::Instruction),
                trace.prompt(StreamRole::Evidence),
            )?);
        }
        self.resolve()
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSelection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub etas: Vec<f64>,
    pub t_instructions: Vec<f64>,
    pub t_evidences: Vec<f64>,
    pub divergences: Vec<DivergenceKind>,
    pub max_cells: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            etas: vec![-2.0, -3.0, -5.0],
            t_instructions: vec![1.0],
            t_evidences: vec![0.9],
            divergences: vec![DivergenceKind::SymmetricKl],
            max_cells: 512,
        }
    }
}

impl SweepSpec {
    pub fn cell_count(&self) -> usize {
        self.etas.len() * self.t_instructions.len() * self.t_evidences.len() * self.divergences.len()
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.cell_count() == 0 {
            return Err(CliError::usage("every sweep grid must be non-empty"));
        }
        if self.cell_count() > self.max_cells {
            return Err(CliError::usage(format!(
                "sweep has {} cells, above the cap of {}",
                self.cell_count(),
                self.max_cells
            )));
        }
        Ok(())
    }
}

pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Flags shared by every subcommand that decodes.
#[derive(Debug, Clone, Default, Args)]
pub struct DecoderFlags {
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long = "t-instr")]
    pub t_instruction: Option<f64>,
    #[arg(long = "t-evid")]
    pub t_evidence: Option<f64>,
    #[arg(long)]
    pub divergence: Option<DivergenceKind>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// vqa or caption.
    #[arg(long)]
    pub profile: Option<TaskProfile>,
    /// Sample from the fused distribution at this temperature instead of
    /// taking the argmax.
    #[arg(long)]
    pub sample: Option<f64>,
    /// Sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow eta > 0.
    #[arg(long)]
    pub unsafe_eta: bool,
}

impl DecoderFlags {
    pub fn apply(&self, c: &mut DecoderConfig) {
        if let Some(p) = self.profile {
            c.task_profile = p;
            c.max_tokens = p.default_max_tokens();
        }
        if let Some(v) = self.eta {
            c.eta = v;
        }
        if let Some(v) = self.t_instruction {
            c.t_instruction = v;
        }
        if let Some(v) = self.t_evidence {
            c.t_evidence = v;
        }
        if let Some(v) = self.divergence {
            c.divergence = v;
        }
        if let Some(v) = self.max_tokens {
            c.max_tokens = v;
        }
        if let Some(v) = self.min_tokens {
            c.min_tokens = v;
        }
        if let Some(v) = self.eps {
            c.eps = v;
        }
        if self.unsafe_eta {
            c.unsafe_eta = true;
        }
        match (self.sample, c.selection) {
            (Some(temperature), _) => {
                c.selection = Selection::Sample {
                    temperature,
                    seed: self.seed.unwrap_or(0),
                }
            }
            (None, Selection::Sample { temperature, seed }) => {
                c.selection = Selection::Sample {
                    temperature,
                    seed: self.seed.unwrap_or(seed),
                }
            }
            (None, Selection::Greedy) => {}
        }
    }
}

/// Flags choosing the backend and prompts.
#[derive(Debug, Clone, Default, Args)]
pub struct SourceFlags {
    /// Toy scene file or directory.
    #[arg(long, conflicts_with = "trace")]
    pub scene: Option<PathBuf>,
    /// Scene to decode when the scene path holds several.
    #[arg(long)]
    pub scene_id: Option<String>,
    /// LogitTrace file to replay.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Prompt family from the registry: caption, yesno or openqa.
    #[arg(long)]
    pub prompts: Option<String>,
    #[arg(long)]
    pub question: Option<String>,
    /// Stop token by name; repeatable.
    #[arg(long = "stop")]
    pub stop: Vec<String>,
    /// Decode without any stop token.
    #[arg(long, conflicts_with = "stop")]
    pub no_stop: bool,
}

impl SourceFlags {
    pub fn apply(&self, run: &mut RunConfig) {
        if let Some(p) = &self.scene {
            run.backend.scene = Some(p.clone());
            run.backend.trace = None;
        }
        if let Some(p) = &self.trace {
            run.backend.trace = Some(p.clone());
            run.backend.scene = None;
        }
        if let Some(id) = &self.scene_id {
            run.backend.scene_id = Some(id.clone());
        }
        if let Some(f) = &self.prompts {
            run.prompts.family = Some(f.clone());
            run.prompts.instruction = None;
            run.prompts.evidence = None;
        }
        if let Some(q) = &self.question {
            run.prompts.question = Some(q.clone());
        }
        if self.no_stop {
            run.backend.stop = Some(Vec::new());
        } else if !self.stop.is_empty() {
            run.backend.stop = Some(self.stop.clone());
        }
    }
}

/// Which backend a run uses, already validated.
pub enum BackendChoice {
    Toy { path: PathBuf, scene_id: Option<String> },
    Trace(PathBuf),
}

impl BackendSelection {
    pub fn choice(&self) -> CliResult<BackendChoice> {
        match (&self.scene, &self.trace) {
            (Some(path), None) => Ok(BackendChoice::Toy {
                path: path.clone(),
                scene_id: self.scene_id.clone(),
            }),
            (None, Some(path)) => Ok(BackendChoice::Trace(path.clone())),
            (None, None) => Err(CliError::usage("select a backend with --scene or --trace")),
            (Some(_), Some(_)) => Err(CliError::usage("--scene and --trace are mutually exclusive")),
        }
    }

    /// Resolves stop token names against `vocab` into `config`.
    pub fn apply_stop(&self, vocab: &VocabMap, is_toy: bool, config: &mut DecoderConfig) -> CliResult<()> {
        let names: Vec<String> = match &self.stop {
            Some(names) => names.clone(),
            None if is_toy && config.stop_tokens.is_empty() => vec![BOUNDARY_NAME.to_string()],
            None => return Ok(()),
        };
        config.stop_tokens.clear();
        for n in names {
            let id = vocab
                .id(&n)
                .ok_or_else(|| CliError::usage(format!("stop token {n:?} not in vocabulary")))?;
            config.stop_tokens.insert(id);
        }
        Ok(())
    }
}

/// Caps `max_tokens` at the trace length so a replay never runs past it.
pub fn cap_to_trace(backend: &TraceBackend, config: &mut DecoderConfig) {
    let n = backend.len().max(1);
    if config.max_tokens > n {
        log::info!("capping max_tokens {} at trace length {n}", config.max_tokens);
        config.max_tokens = n;
        config.min_tokens = config.min_tokens.min(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_sections_parse() {
        let run: RunConfig = toml::from_str(
            r#"
            [decoder]
            eta = -5.0
            max_tokens = 10
            divergence = "hellinger"

            [decoder.selection]
            mode = "sample"
            temperature = 0.8
            seed = 9

            [backend]
            scene = "scenes"
            stop = []

            [prompts]
            family = "yesno"
            question = "Is there a dog?"

            [sweep]
            etas = [-2.0, -5.0]
            divergences = ["symmetric-kl", "hellinger"]
            "#,
        )
        .unwrap();
        assert_eq!(run.decoder.eta, -5.0);
        assert_eq!(run.decoder.t_evidence, 0.9);
        assert_eq!(run.decoder.divergence, DivergenceKind::Hellinger);
        assert_eq!(run.decoder.selection, Selection::Sample { temperature: 0.8, seed: 9 });
        assert_eq!(run.backend.stop, Some(vec![]));
        assert_eq!(run.sweep.cell_count(), 4);
        assert_eq!(run.prompts.resolve().unwrap().template_id.as_deref(), Some("yesno"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[decoder]\netaa = 1.0").is_err());
    }

    #[test]
    fn flags_override_file() {
        let mut c = DecoderConfig { eta: -5.0, ..Default::default() };
        DecoderFlags {
            eta: Some(-2.0),
            profile: Some(TaskProfile::Vqa),
            seed: Some(3),
            ..Default::default()
        }
        .apply(&mut c);
        assert_eq!(c.eta, -2.0);
        assert_eq!(c.max_tokens, 16);
        assert_eq!(c.selection, Selection::Greedy);

        let mut c = DecoderConfig::default();
        DecoderFlags { sample: Some(0.7), seed: Some(3), ..Default::default() }.apply(&mut c);
        assert_eq!(c.selection, Selection::Sample { temperature: 0.7, seed: 3 });
    }

    #[test]
    fn sweep_cap_enforced() {
        let s = SweepSpec { max_cells: 2, ..Default::default() };
        assert!(s.validate().is_err());
        let s = SweepSpec { etas: vec![], ..Default::default() };
        assert!(s.validate().is_err());
        SweepSpec::default().validate().unwrap();
    }
}
