// SPDX-License-Identifier: MIT OR Apache-2.0

use super::TokenSequence;

/// Byte-level fallback tokenizer: ids `0..=255` are bytes, `256` is BoS.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: usize = 256;
    pub const VOCAB: usize = 257;

    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence::with_bos(Self::BOS, text.bytes().map(usize::from))
    }

    /// Drops BoS and any id outside the byte range; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
