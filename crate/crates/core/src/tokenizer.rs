//! Byte-level vocabulary with the three protocol specials.
//!
//! Ids `0..256` are raw UTF-8 bytes. [`SOD`] marks the start of a
//! transformation, [`EOT`] ends generated text and [`PAD`] exists only for
//! batching. The loss sentinel [`IGN`](crate::numerics::IGN) is a label
//! value, never a vocabulary entry.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BYTE_VOCAB: usize = 256;
pub const SOD: TokenId = 256;
pub const EOT: TokenId = 257;
pub const PAD: TokenId = 258;
pub const VOCAB_SIZE: usize = 259;

pub const SPECIALS: [TokenId; 3] = [SOD, EOT, PAD];

pub fn is_special(id: TokenId) -> bool {
    id as usize >= BYTE_VOCAB
}

pub fn encode_text(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`encode_text`]. Invalid UTF-8 runs are rendered with the
/// replacement character.
pub fn decode_tokens(ids: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if is_special(id) {
            return Err(Error::SpecialInText(id));
        }
        bytes.push(id as u8);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Validates that every id is inside the vocabulary.
pub fn check_ids(ids: &[TokenId]) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
        Some(&id) => Err(Error::TokenOutOfRange {
            id: id as usize,
            vocab: VOCAB_SIZE,
        }),
        None => Ok(()),
    }
}
