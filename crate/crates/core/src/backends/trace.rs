//! Recorded dual-stream logits and their replay backend.
//!
//! File layout: one JSON header line
//!
//! ```text
//! {"version":1,"format":"text"|"binary","vocab":[...],"instruction_prompt":"...","evidence_prompt":"...","steps":N}
//! ```
//!
//! followed by `N` step records. Text records are one JSON object per line,
//! `{"il":[...],"el":[...],"src":id}`. Binary records are a little-endian
//! `u32` payload length, then the payload: `src` as `u32`, then `V` `f64`
//! instruction logits and `V` `f64` evidence logits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Alignment, Backend, StreamRole, StreamSession};
use crate::distcore::{LogitVector, TokenId, VocabMap};
use crate::error::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    #[default]
    Text,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub instruction_logits: LogitVector,
    pub evidence_logits: LogitVector,
    pub source_token: TokenId,
}

impl TraceStep {
    pub fn logits(&self, role: StreamRole) -> &LogitVector {
        match role {
            StreamRole::Instruction => &self.instruction_logits,
            StreamRole::Evidence => &self.evidence_logits,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitTrace {
    pub version: u32,
    pub vocab: VocabMap,
    pub instruction_prompt: String,
    pub evidence_prompt: String,
    pub steps: Vec<TraceStep>,
}

impl LogitTrace {
    pub fn new(
        vocab: VocabMap,
        instruction_prompt: impl Into<String>,
        evidence_prompt: impl Into<String>,
        steps: Vec<TraceStep>,
    ) -> Result<Self> {
        let t = Self {
            version: TRACE_VERSION,
            vocab,
            instruction_prompt: instruction_prompt.into(),
            evidence_prompt: evidence_prompt.into(),
            steps,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != TRACE_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        let v = self.vocab.len();
        for (i, s) in self.steps.iter().enumerate() {
            validate_step(s, v).map_err(|message| Error::Parse {
                step: Some(i),
                message,
            })?;
        }
        Ok(())
    }

    pub fn prompt(&self, role: StreamRole) -> &str {
        match role {
            StreamRole::Instruction => &self.instruction_prompt,
            StreamRole::Evidence => &self.evidence_prompt,
        }
    }

    pub fn source_tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.source_token).collect()
    }
}

fn validate_step(s: &TraceStep, v: usize) -> std::result::Result<(), String> {
    if s.instruction_logits.vocab_size() != v || s.evidence_logits.vocab_size() != v {
        return Err(format!(
            "logit length mismatch: il={}, el={}, vocab={v}",
            s.instruction_logits.vocab_size(),
            s.evidence_logits.vocab_size()
        ));
    }
    if s.source_token >= v {
        return Err(format!("source token {} outside vocabulary of {v}", s.source_token));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    format: TraceFormat,
    vocab: VocabMap,
    instruction_prompt: String,
    evidence_prompt: String,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct TextStep {
    il: Vec<f64>,
    el: Vec<f64>,
    src: TokenId,
}

pub fn write_trace(trace: &LogitTrace, path: &Path, format: TraceFormat) -> Result<()> {
    trace.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    write_trace_to(trace, &mut out, format)?;
    out.flush()?;
    Ok(())
}

pub fn write_trace_to<W: Write>(trace: &LogitTrace, out: &mut W, format: TraceFormat) -> Result<()> {
    let header = Header {
        version: trace.version,
        format,
        vocab: trace.vocab.clone(),
        instruction_prompt: trace.instruction_prompt.clone(),
        evidence_prompt: trace.evidence_prompt.clone(),
        steps: trace.steps.len(),
    };
    serde_json::to_writer(&mut *out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    let v = trace.vocab.len();
    for step in &trace.steps {
        match format {
            TraceFormat::Text => {
                let rec = TextStep {
                    il: step.instruction_logits.scores().to_vec(),
                    el: step.evidence_logits.scores().to_vec(),
                    src: step.source_token,
                };
                serde_json::to_writer(&mut *out, &rec).map_err(std::io::Error::from)?;
                out.write_all(b"\n")?;
            }
            TraceFormat::Binary => {
                let len = 4 + 16 * v;
                let mut buf = Vec::with_capacity(4 + len);
                buf.extend_from_slice(&(len as u32).to_le_bytes());
                buf.extend_from_slice(&(step.source_token as u32).to_le_bytes());
                for x in step.instruction_logits.scores() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                for x in step.evidence_logits.scores() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                out.write_all(&buf)?;
            }
        }
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<LogitTrace> {
    let mut reader = open_reader(path, true)?;
    let header = reader.header.take().expect("full header requested");
    let mut steps = Vec::with_capacity(header.steps);
    while let Some(step) = reader.next_step()? {
        steps.push(step);
    }
    Ok(LogitTrace {
        version: header.version,
        vocab: header.vocab,
        instruction_prompt: header.instruction_prompt,
        evidence_prompt: header.evidence_prompt,
        steps,
    })
}

fn header_error(message: impl Into<String>) -> Error {
    Error::Parse {
        step: None,
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u64>,
}

/// The header fields a replay session needs; vocabulary entries are skipped.
#[derive(Deserialize)]
struct SessionHeader {
    format: TraceFormat,
    vocab: Vec<serde::de::IgnoredAny>,
    steps: usize,
}

/// Opens `path` and parses its header. With `full` false the vocabulary and
/// prompts are skipped and `header` is left empty.
fn open_reader(path: &Path, full: bool) -> Result<RecordReader> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open trace {}: {e}", path.display())))?;
    let mut input = BufReader::with_capacity(1 << 16, file);
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(header_error("empty file"));
    }
    let probe: VersionProbe =
        serde_json::from_str(&line).map_err(|e| header_error(format!("malformed header: {e}")))?;
    let version = probe.version.ok_or_else(|| header_error("missing version"))?;
    if version != u64::from(TRACE_VERSION) {
        return Err(Error::UnsupportedVersion(version.min(u64::from(u32::MAX)) as u32));
    }
    let malformed = |e: serde_json::Error| header_error(format!("malformed header: {e}"));
    if full {
        let header: Header = serde_json::from_str(&line).map_err(malformed)?;
        Ok(RecordReader {
            input,
            format: header.format,
            vocab_size: header.vocab.len(),
            total: header.steps,
            next_index: 0,
            header: Some(header),
        })
    } else {
        let header: SessionHeader = serde_json::from_str(&line).map_err(malformed)?;
        Ok(RecordReader {
            input,
            format: header.format,
            vocab_size: header.vocab.len(),
            total: header.steps,
            next_index: 0,
            header: None,
        })
    }
}

/// Sequential step reader over a trace file.
struct RecordReader {
    input: BufReader<File>,
    format: TraceFormat,
    vocab_size: usize,
    total: usize,
    next_index: usize,
    header: Option<Header>,
}

impl RecordReader {
    fn next_step(&mut self) -> Result<Option<TraceStep>> {
        if self.next_index == self.total {
            return Ok(None);
        }
        let index = self.next_index;
        let err = |message: String| Error::Parse {
            step: Some(index),
            message,
        };
        let step = match self.format {
            TraceFormat::Text => {
                let mut line = String::new();
                if self.input.read_line(&mut line)? == 0 {
                    return Err(err("unexpected end of file".into()));
                }
                let rec: TextStep = serde_json::from_str(&line)
                    .map_err(|e| err(format!("malformed record: {e}")))?;
                TraceStep {
                    instruction_logits: LogitVector::new(rec.il).map_err(|e| err(e.to_string()))?,
                    evidence_logits: LogitVector::new(rec.el).map_err(|e| err(e.to_string()))?,
                    source_token: rec.src,
                }
            }
            TraceFormat::Binary => {
                let mut len = [0u8; 4];
                read_exact_or(&mut self.input, &mut len).map_err(|m| err(m))?;
                let len = u32::from_le_bytes(len) as usize;
                let expected = 4 + 16 * self.vocab_size;
                if len != expected {
                    return Err(err(format!("record length {len}, expected {expected}")));
                }
                let mut buf = vec![0u8; len];
                read_exact_or(&mut self.input, &mut buf).map_err(|m| err(m))?;
                let src = u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as TokenId;
                let (il, el) = buf[4..].split_at(8 * self.vocab_size);
                let floats = |bytes: &[u8]| -> Vec<f64> {
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect()
                };
                TraceStep {
                    instruction_logits: LogitVector::new(floats(il))
                        .map_err(|e| err(e.to_string()))?,
                    evidence_logits: LogitVector::new(floats(el))
                        .map_err(|e| err(e.to_string()))?,
                    source_token: src,
                }
            }
        };
        validate_step(&step, self.vocab_size).map_err(err)?;
        self.next_index += 1;
        Ok(Some(step))
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> std::result::Result<(), String> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => "truncated record".to_string(),
        _ => e.to_string(),
    })
}

enum Source {
    Memory(Arc<LogitTrace>),
    File {
        path: PathBuf,
        vocab: VocabMap,
        instruction_prompt: String,
        evidence_prompt: String,
        steps: usize,
    },
}

/// Replays recorded logits. Memory-backed replay serves steps from a loaded
/// trace; file-backed replay streams each session's records from disk, so a
/// reused session reads every record once while a fresh session has to
/// re-open the file and skip to its position.
pub struct TraceBackend {
    source: Source,
}

impl TraceBackend {
    pub fn from_trace(trace: LogitTrace) -> Result<Self> {
        trace.validate()?;
        Ok(Self {
            source: Source::Memory(Arc::new(trace)),
        })
    }

    /// Streams from `path`. Only the header is read up front.
    pub fn open(path: &Path) -> Result<Self> {
        let mut reader = open_reader(path, true)?;
        let header = reader.header.take().expect("full header requested");
        Ok(Self {
            source: Source::File {
                path: path.to_path_buf(),
                vocab: header.vocab,
                instruction_prompt: header.instruction_prompt,
                evidence_prompt: header.evidence_prompt,
                steps: header.steps,
            },
        })
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Memory(t) => t.steps.len(),
            Source::File { steps, .. } => *steps,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompt(&self, role: StreamRole) -> &str {
        match (&self.source, role) {
            (Source::Memory(t), r) => t.prompt(r),
            (Source::File { instruction_prompt, .. }, StreamRole::Instruction) => instruction_prompt,
            (Source::File { evidence_prompt, .. }, StreamRole::Evidence) => evidence_prompt,
        }
    }
}

impl Backend for TraceBackend {
    type Session = TraceSession;

    fn vocab(&self) -> &VocabMap {
        match &self.source {
            Source::Memory(t) => &t.vocab,
            Source::File { vocab, .. } => vocab,
        }
    }

    fn open_session(&self, role: StreamRole, prompt: &str, _image_ref: &str) -> Result<TraceSession> {
        if prompt.is_empty() {
            return Err(Error::Input("prompt must be non-empty".into()));
        }
        if prompt != self.prompt(role) {
            return Err(Error::Input(format!(
                "{role:?} prompt does not match the prompt the trace was recorded with"
            )));
        }
        let cursor = match &self.source {
            Source::Memory(t) => Cursor::Memory(Arc::clone(t)),
            Source::File { path, .. } => {
                let reader = open_reader(path, false)?;
                Cursor::File {
                    reader: Box::new(reader),
                    current: None,
                }
            }
        };
        Ok(TraceSession {
            cursor,
            role,
            total: self.len(),
            history: Vec::new(),
            off_trace_steps: Vec::new(),
        })
    }
}

enum Cursor {
    Memory(Arc<LogitTrace>),
    File {
        reader: Box<RecordReader>,
        current: Option<TraceStep>,
    },
}

pub struct TraceSession {
    cursor: Cursor,
    role: StreamRole,
    total: usize,
    history: Vec<TokenId>,
    off_trace_steps: Vec<usize>,
}

impl TraceSession {
    /// Steps at which the appended token differed from the recorded one.
    pub fn off_trace_steps(&self) -> &[usize] {
        &self.off_trace_steps
    }

    fn current_source(&mut self) -> Result<TokenId> {
        let step = self.history.len();
        match &mut self.cursor {
            Cursor::Memory(t) => t
                .steps
                .get(step)
                .map(|s| s.source_token)
                .ok_or(Error::EndOfTrace { step }),
            Cursor::File { reader, current } => {
                if current.is_none() {
                    *current = Some(reader.next_step()?.ok_or(Error::EndOfTrace { step })?);
                }
                Ok(current.as_ref().expect("filled").source_token)
            }
        }
    }
}

impl StreamSession for TraceSession {
    fn next_logits(&mut self) -> Result<LogitVector> {
        let step = self.history.len();
        match &mut self.cursor {
            Cursor::Memory(t) => t
                .steps
                .get(step)
                .map(|s| s.logits(self.role).clone())
                .ok_or(Error::EndOfTrace { step }),
            Cursor::File { reader, current } => {
                if current.is_none() {
                    *current = Some(reader.next_step()?.ok_or(Error::EndOfTrace { step })?);
                }
                Ok(current.as_ref().expect("filled").logits(self.role).clone())
            }
        }
    }

    fn append_token(&mut self, token: TokenId) -> Result<Alignment> {
        let v = match &self.cursor {
            Cursor::Memory(t) => t.vocab.len(),
            Cursor::File { reader, .. } => reader.vocab_size,
        };
        if token >= v {
            return Err(Error::Input(format!("token id {token} outside vocabulary of {v}")));
        }
        let expected = self.current_source()?;
        let step = self.history.len();
        self.history.push(token);
        if let Cursor::File { current, .. } = &mut self.cursor {
            *current = None;
        }
        if token == expected {
            Ok(Alignment::Aligned)
        } else {
            self.off_trace_steps.push(step);
            Ok(Alignment::OffTrace { expected })
        }
    }

    fn history(&self) -> &[TokenId] {
        &self.history
    }

    fn remaining(&self) -> Option<usize> {
        Some(self.total.saturating_sub(self.history.len()))
    }
}
