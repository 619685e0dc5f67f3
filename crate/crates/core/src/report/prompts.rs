// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use crate::error::{Result, SpectroError};
use crate::model::{ByteTokenizer, TokenSequence};

/// How a prompt file is read: one prompt per non-empty line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptFormat {
    /// Whitespace-separated token ids; `bos` is prepended when set.
    Ids { bos: Option<usize> },
    /// Raw text through the byte tokenizer (BoS 256 prepended).
    Bytes,
}

impl Default for PromptFormat {
    fn default() -> Self {
        Self::Ids { bos: Some(1) }
    }
}

pub fn parse_prompts(text: &str, format: PromptFormat) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seq = match format {
            PromptFormat::Bytes => ByteTokenizer.encode(line),
            PromptFormat::Ids { bos } => {
                let ids = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<usize>().map_err(|_| {
                            SpectroError::parse("prompt", line, format!("line {}: `{t}` is not a token id", i + 1))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                match bos {
                    Some(b) => TokenSequence::with_bos(b, ids),
                    None => TokenSequence::new(ids, false),
                }
            }
        };
        out.push(seq);
    }
    if out.is_empty() {
        return Err(SpectroError::InvalidArgument("prompt file has no prompts".into()));
    }
    Ok(out)
}

pub fn load_prompts(path: &Path, format: PromptFormat) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| SpectroError::io(path, e))?;
    parse_prompts(&text, format)
}
