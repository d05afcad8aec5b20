use std::path::{Path, PathBuf};

use clap::Args;

use iecd2_core::backends::{generate_corpus, ToyCorpusSpec};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct GenToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n_scenes: usize,
    #[arg(long, default_value_t = 12)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Output directory for scene-NNN.json files.
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes one JSON file per scene and returns the paths.
pub fn write_corpus(spec: &ToyCorpusSpec, dir: &Path) -> CliResult<Vec<PathBuf>> {
    if spec.n_scenes == 0 {
        return Err(CliError::usage("n_scenes must be positive"));
    }
    let scenes = generate_corpus(spec)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))?;
    scenes
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.json", s.scene_id));
            std::fs::write(&path, s.to_json() + "\n")?;
            Ok(path)
        })
        .collect()
}

pub fn run(args: &GenToyArgs) -> CliResult<Vec<PathBuf>> {
    write_corpus(
        &ToyCorpusSpec {
            seed: args.seed,
            n_scenes: args.n_scenes,
            vocab_size: args.vocab_size,
            lambda: args.lambda,
        },
        &args.out,
    )
}
