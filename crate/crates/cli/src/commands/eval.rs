use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use iecd2_core::metrics::{
    amber_generative_with, binary_scores, chair, AnnotationSet, CaptionRecord, CogDenominator,
    YesNoRecord,
};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Chair,
    Amber,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum CogArg {
    #[default]
    PerCaption,
    Corpus,
}

impl From<CogArg> for CogDenominator {
    fn from(c: CogArg) -> Self {
        match c {
            CogArg::PerCaption => CogDenominator::PerCaptionMentions,
            CogArg::Corpus => CogDenominator::CorpusHallucinated,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// JSON Lines (or a JSON array) of caption or yes/no records.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Annotation file; required for chair and amber.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Denominator for the amber cog score.
    #[arg(long, value_enum, default_value_t)]
    pub cog: CogArg,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: &'static str,
    pub value: f64,
    pub n: usize,
}

fn row(metric: &'static str, value: f64, n: usize) -> MetricRow {
    MetricRow { metric, value, n }
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::usage(format!("{}: {e}", path.display()));
    let records: Vec<T> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(bad)?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(bad))
            .collect::<CliResult<_>>()?
    };
    if records.is_empty() {
        return Err(CliError::usage(format!("no records in {}", path.display())));
    }
    Ok(records)
}

fn annotations(path: Option<&Path>) -> CliResult<AnnotationSet> {
    let path = path.ok_or_else(|| CliError::usage("this metric needs --annotations"))?;
    Ok(AnnotationSet::load(path)?)
}

pub fn evaluate(
    metric: Metric,
    predictions: &Path,
    annotations_path: Option<&Path>,
    cog: CogArg,
) -> CliResult<Vec<MetricRow>> {
    match metric {
        Metric::Chair => {
            let caps: Vec<CaptionRecord> = read_records(predictions)?;
            let a = annotations(annotations_path)?;
            let s = chair(&caps, &a)?;
            Ok(vec![row("chair_s", s.chair_s, s.captions), row("chair_i", s.chair_i, s.mentions)])
        }
        Metric::Amber => {
            let caps: Vec<CaptionRecord> = read_records(predictions)?;
            let a = annotations(annotations_path)?;
            let s = amber_generative_with(&caps, &a, a.target_list(), cog.into())?;
            Ok(vec![
                row("chair", s.chair, s.captions),
                row("cover", s.cover, s.cover_captions),
                row("hal", s.hal, s.captions),
                row("cog", s.cog, s.captions),
            ])
        }
        Metric::Binary => {
            let recs: Vec<YesNoRecord> = read_records(predictions)?;
            let s = binary_scores(&recs)?;
            Ok(vec![
                row("accuracy", s.accuracy, s.n),
                row("precision", s.precision, s.n),
                row("recall", s.recall, s.n),
                row("f1", s.f1, s.n),
            ])
        }
    }
}

pub fn write_report<W: Write>(rows: &[MetricRow], out: W) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &EvalArgs) -> CliResult<Vec<MetricRow>> {
    let rows = evaluate(args.metric, &args.predictions, args.annotations.as_deref(), args.cog)?;
    match &args.out {
        Some(path) => write_report(&rows, std::fs::File::create(path)?)?,
        None => write_report(&rows, std::io::stdout().lock())?,
    }
    Ok(rows)
}
