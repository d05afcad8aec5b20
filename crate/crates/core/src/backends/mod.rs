//! Sources of per-stream next-token logits.
//!
//! A [`Backend`] opens one [`StreamSession`] per prompt. The decoder keeps the
//! two sessions' histories identical by appending the same selected token to
//! both after every step.

use serde::{Deserialize, Serialize};

use crate::distcore::{LogitVector, TokenId, VocabMap};
use crate::error::Result;

pub mod toy;
pub mod trace;

pub use toy::{generate_corpus, ToyBackend, ToyCorpusSpec, ToyScene};
pub use trace::{read_trace, write_trace, LogitTrace, TraceBackend, TraceFormat, TraceStep};

/// Which prompt a session is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamRole {
    Instruction,
    Evidence,
}

/// Outcome of appending a token to a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    Aligned,
    /// The appended token differs from the one a replayed recording chose.
    OffTrace { expected: TokenId },
}

pub trait Backend: Sync {
    type Session: StreamSession;

    fn vocab(&self) -> &VocabMap;

    fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    /// Opens a session positioned right after `prompt`, with no history.
    fn open_session(
        &self,
        role: StreamRole,
        prompt: &str,
        image_ref: &str,
    ) -> Result<Self::Session>;
}

/// One conditioned stream. Sessions are `Send` but used from one thread at a
/// time.
pub trait StreamSession: Send {
    /// Logits for the next token given prompt and full history.
    fn next_logits(&mut self) -> Result<LogitVector>;

    fn append_token(&mut self, token: TokenId) -> Result<Alignment>;

    fn history(&self) -> &[TokenId];

    /// Steps left before the session is exhausted, if bounded.
    fn remaining(&self) -> Option<usize> {
        None
    }
}
