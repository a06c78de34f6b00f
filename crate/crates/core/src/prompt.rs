//! Bias prompt construction.
//!
//! The decoder is conditioned through a single structured prompt. With no
//! candidates it degenerates to the context-free instruction; with
//! candidates, each hotword is wrapped in mathematical angle brackets
//! (U+27E8/U+27E9, not ASCII `<`/`>`) and appended in rank order.

use crate::error::{Error, Result};
use crate::retriever::RetrievalResult;

/// The context-free instruction; also the full prompt when no biasing
/// words are supplied.
pub const PROMPT_BASE: &str = "Transcribe the audio into text.";

/// Lead-in for the candidate list.
pub const PROMPT_BIAS_LEADIN: &str = "These biasing words you may use:";

pub const HOTWORD_OPEN: char = '\u{27E8}';
pub const HOTWORD_CLOSE: char = '\u{27E9}';

/// A rendered bias prompt. `rendered` is a pure function of `hotwords`,
/// which keep the retrieval rank order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasPrompt {
    pub hotwords: Vec<String>,
    pub rendered: String,
}

/// Renders the structured bias prompt. Hotwords containing the bracket
/// delimiters are rejected so a crafted surface cannot forge list entries.
pub fn build_prompt<S: AsRef<str>>(hotwords: &[S]) -> Result<BiasPrompt> {
    let mut rendered = String::from(PROMPT_BASE);
    if !hotwords.is_empty() {
        rendered.push(' ');
        rendered.push_str(PROMPT_BIAS_LEADIN);
        for hw in hotwords {
            let hw = hw.as_ref();
            if hw.contains(HOTWORD_OPEN) || hw.contains(HOTWORD_CLOSE) {
                return Err(Error::DelimiterInHotword(hw.to_string()));
            }
            rendered.push(' ');
            rendered.push(HOTWORD_OPEN);
            rendered.push_str(hw);
            rendered.push(HOTWORD_CLOSE);
        }
    }
    Ok(BiasPrompt {
        hotwords: hotwords.iter().map(|s| s.as_ref().to_string()).collect(),
        rendered,
    })
}

/// Renders the prompt for a retrieval result, keeping rank order.
pub fn build_prompt_from_result(result: &RetrievalResult) -> Result<BiasPrompt> {
    build_prompt(&result.surfaces())
}

/// The context-free prompt used by the no-bias arm and by joint decoding.
pub fn context_free_prompt() -> BiasPrompt {
    BiasPrompt {
        hotwords: Vec::new(),
        rendered: PROMPT_BASE.to_string(),
    }
}

/// Recovers the hotword list from a rendered prompt, in order. Inverse of
/// [`build_prompt`] for any accepted input.
pub fn extract_hotwords(rendered: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = rendered;
    while let Some(start) = rest.find(HOTWORD_OPEN) {
        rest = &rest[start + HOTWORD_OPEN.len_utf8()..];
        let Some(end) = rest.find(HOTWORD_CLOSE) else {
            break;
        };
        out.push(rest[..end].to_string());
        rest = &rest[end + HOTWORD_CLOSE.len_utf8()..];
    }
    out
}
