//! SFT corpus: line-delimited JSON records of multi-turn dialogs, formatted
//! into (visible prompt, EOS-padded target response) pairs.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::masking::TokenSeq;
use crate::rng::StreamKey;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftTurn {
    pub prompt: String,
    pub response: String,
}

/// One dialog: an ordered list of (prompt, response) turns.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub turns: Vec<SftTurn>,
}

impl SftRecord {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Data("SFT record with no turns".into()));
        }
        for t in &self.turns {
            if t.prompt.is_empty() || t.response.is_empty() {
                return Err(Error::Data("SFT turn with empty prompt or response".into()));
            }
        }
        Ok(())
    }
}

pub fn load_sft_records(path: &Path) -> Result<Vec<SftRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read SFT corpus {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SftRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: bad SFT record: {e}", path.display(), lineno + 1))
        })?;
        record.validate()?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("SFT corpus {} is empty", path.display())));
    }
    Ok(records)
}

/// One formatted training example. Every position of `response` (padding
/// included) is a loss position; no prompt position ever is.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt: TokenSeq,
    pub response: TokenSeq,
}

#[derive(Debug, Clone)]
pub struct SftBatch {
    pub examples: Vec<SftExample>,
    /// Records skipped because the formatted sample exceeded `l_max`.
    pub dropped: usize,
    /// Response-region length shared by the batch (max response length).
    pub response_len: usize,
}

const LANE_TURN: u64 = 20;

/// Visible prompt for target turn `tau` (1-based): BOS, then each earlier
/// turn's prompt and response, then the target turn's prompt, all with EOS
/// separators.
fn format_prompt(record: &SftRecord, tau: usize) -> TokenSeq {
    let mut ids = vec![Vocab::BOS];
    for turn in &record.turns[..tau - 1] {
        ids.extend(&Vocab::encode(&turn.prompt).ids);
        ids.push(Vocab::EOS);
        ids.extend(&Vocab::encode(&turn.response).ids);
        ids.push(Vocab::EOS);
    }
    ids.extend(&Vocab::encode(&record.turns[tau - 1].prompt).ids);
    ids.push(Vocab::EOS);
    TokenSeq::new(ids)
}

/// Format a batch: sample a target turn per record, pad responses with EOS
/// to the batch maximum, drop records whose formatted length exceeds
/// `l_max`.
pub fn sft_batch(records: &[SftRecord], l_max: usize, key: StreamKey) -> Result<SftBatch> {
    if records.is_empty() {
        return Err(Error::Data("empty SFT batch".into()));
    }
    let mut pairs: Vec<(TokenSeq, TokenSeq)> = Vec::with_capacity(records.len());
    let mut dropped = 0usize;
    for (i, record) in records.iter().enumerate() {
        record.validate()?;
        let t = record.turns.len();
        let tau = if t == 1 {
            1
        } else {
            key.rng_at(i as u64, LANE_TURN).gen_range(1..=t)
        };
        let prompt = format_prompt(record, tau);
        let response = Vocab::encode(&record.turns[tau - 1].response);
        if prompt.len() + response.len() > l_max {
            dropped += 1;
            continue;
        }
        pairs.push((prompt, response));
    }
    if pairs.is_empty() {
        return Err(Error::Data("every SFT record exceeded l_max".into()));
    }
    let response_len = pairs.iter().map(|(_, r)| r.len()).max().unwrap();
    let mut examples = Vec::with_capacity(pairs.len());
    for (prompt, mut response) in pairs {
        // Padding to the batch max can push a sample over the limit too.
        if prompt.len() + response_len > l_max {
            dropped += 1;
            continue;
        }
        response.ids.resize(response_len, Vocab::PAD);
        examples.push(SftExample { prompt, response });
    }
    if examples.is_empty() {
        return Err(Error::Data("every SFT record exceeded l_max after padding".into()));
    }
    Ok(SftBatch {
        examples,
        dropped,
        response_len,
    })
}
