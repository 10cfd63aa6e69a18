//! Byte-level tokenizer: every UTF-8 byte is a token, plus one end marker.

use crate::error::{NetError, Result};

pub const VOCAB_SIZE: usize = 257;
pub const EOS: u32 = 256;

/// Token ids for `text` without the end marker.
pub fn tokenize(text: &str, max_tokens: usize) -> Result<Vec<u32>> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(NetError::EmptyPrompt);
    }
    let ids: Vec<u32> = trimmed.bytes().map(u32::from).collect();
    if ids.len() > max_tokens {
        return Err(NetError::PromptTooLong {
            tokens: ids.len(),
            limit: max_tokens,
        });
    }
    Ok(ids)
}
