//! Byte-level vocabulary: 256 byte tokens plus reserved ids.

use crate::masking::TokenSeq;

/// Fixed byte-level vocabulary.
///
/// Ids 0..=255 are raw bytes. EOS doubles as the padding token; id 259 is a
/// spare kept so the vocabulary size is a round 260. Reserved ids decode to
/// escape strings and are never produced by `encode`.
pub struct Vocab;

impl Vocab {
    pub const SIZE: usize = 260;
    pub const EOS: u32 = 256;
    pub const MASK: u32 = 257;
    pub const BOS: u32 = 258;
    /// Padding is an alias of EOS.
    pub const PAD: u32 = Self::EOS;

    pub const EOS_STR: &'static str = "<|eos|>";
    pub const MASK_STR: &'static str = "<|mask|>";
    pub const BOS_STR: &'static str = "<|bos|>";

    pub fn encode(text: &str) -> TokenSeq {
        Self::encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(bytes: &[u8]) -> TokenSeq {
        TokenSeq::new(bytes.iter().map(|&b| b as u32).collect())
    }

    pub fn decode_bytes(seq: &TokenSeq) -> Vec<u8> {
        let mut out = Vec::with_capacity(seq.len());
        for &id in &seq.ids {
            match id {
                0..=255 => out.push(id as u8),
                Self::EOS => out.extend_from_slice(Self::EOS_STR.as_bytes()),
                Self::MASK => out.extend_from_slice(Self::MASK_STR.as_bytes()),
                Self::BOS => out.extend_from_slice(Self::BOS_STR.as_bytes()),
                _ => out.extend_from_slice(format!("<|{id}|>").as_bytes()),
            }
        }
        out
    }

    pub fn decode(seq: &TokenSeq) -> String {
        String::from_utf8_lossy(&Self::decode_bytes(seq)).into_owned()
    }
}
