//! Pretraining corpus loading and packed batch assembly.
//!
//! Documents are tokenized at byte level, joined with an EOS separator into
//! one token stream per corpus, and read out in consecutive `l_ctx` windows
//! (wrapping at the end). In a small fraction of steps the whole batch is
//! truncated to a random target length to close the train/test context gap.

use std::path::Path;

use rand::Rng;

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::masking::TokenSeq;
use crate::rng::StreamKey;

/// Fraction of steps that use a random target length.
pub const VARLEN_PROB: f64 = 0.01;
/// Shortest target length a variable-length step may pick.
pub const VARLEN_MIN: usize = 8;

/// One named token stream.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub tokens: Vec<u32>,
}

impl Corpus {
    /// Tokenize text: documents are separated by blank lines, and an EOS
    /// token separates documents in the packed stream.
    pub fn from_text(name: &str, text: &str) -> Result<Self> {
        let mut tokens = Vec::with_capacity(text.len() + 16);
        let mut any = false;
        for doc in split_documents(text) {
            any = true;
            tokens.extend(&Vocab::encode(doc).ids);
            tokens.push(Vocab::EOS);
        }
        if !any {
            return Err(Error::Data(format!("corpus '{name}' is empty")));
        }
        Ok(Corpus {
            name: name.to_string(),
            tokens,
        })
    }
}

fn split_documents(text: &str) -> impl Iterator<Item = &str> {
    text.split("\n\n").map(str::trim).filter(|d| !d.is_empty())
}

pub fn load_corpus_text(name: &str, text: &str) -> Result<Corpus> {
    Corpus::from_text(name, text)
}

pub fn load_corpus_file(name: &str, path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    Corpus::from_text(name, &text)
}

/// One emitted batch.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub seqs: Vec<TokenSeq>,
    /// Sequence length of this batch (`l_ctx`, or the sampled target length
    /// on a variable-length step).
    pub target_len: usize,
    pub varlen: bool,
}

impl PretrainBatch {
    pub fn token_count(&self) -> usize {
        self.seqs.iter().map(|s| s.len()).sum()
    }
}

/// Weighted multi-corpus batch producer with explicit cursors, so training
/// can checkpoint and resume the data stream exactly.
pub struct PretrainBatcher {
    corpora: Vec<Corpus>,
    weights: Vec<f64>,
    cursors: Vec<usize>,
    l_ctx: usize,
    batch_size: usize,
}

const LANE_CORPUS: u64 = 10;
const LANE_VARLEN: u64 = 11;

impl PretrainBatcher {
    pub fn new(
        corpora: Vec<Corpus>,
        weights: Vec<f64>,
        l_ctx: usize,
        batch_size: usize,
    ) -> Result<Self> {
        if corpora.is_empty() {
            return Err(Error::Data("no corpora configured".into()));
        }
        if corpora.len() != weights.len() {
            return Err(Error::Data(format!(
                "{} corpora but {} weights",
                corpora.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Data("corpus weights must be nonnegative with a positive sum".into()));
        }
        if l_ctx < VARLEN_MIN {
            return Err(Error::Data(format!("l_ctx {l_ctx} below minimum {VARLEN_MIN}")));
        }
        if batch_size == 0 {
            return Err(Error::Data("batch_size must be positive".into()));
        }
        let cursors = vec![0; corpora.len()];
        Ok(PretrainBatcher {
            corpora,
            weights,
            cursors,
            l_ctx,
            batch_size,
        })
    }

    pub fn cursors(&self) -> &[usize] {
        &self.cursors
    }

    pub fn set_cursors(&mut self, cursors: &[usize]) -> Result<()> {
        if cursors.len() != self.corpora.len() {
            return Err(Error::Data("cursor count mismatch".into()));
        }
        self.cursors.copy_from_slice(cursors);
        Ok(())
    }

    pub fn l_ctx(&self) -> usize {
        self.l_ctx
    }

    /// Change the context window (stage transitions).
    pub fn set_l_ctx(&mut self, l_ctx: usize) -> Result<()> {
        if l_ctx < VARLEN_MIN {
            return Err(Error::Data(format!("l_ctx {l_ctx} below minimum {VARLEN_MIN}")));
        }
        self.l_ctx = l_ctx;
        Ok(())
    }

    fn pick_corpus(&self, u: f64) -> usize {
        let total: f64 = self.weights.iter().sum();
        let mut acc = 0.0;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w / total;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    fn take_window(&mut self, corpus: usize, len: usize) -> TokenSeq {
        let stream = &self.corpora[corpus].tokens;
        let mut ids = Vec::with_capacity(len);
        let mut cur = self.cursors[corpus];
        for _ in 0..len {
            ids.push(stream[cur]);
            cur += 1;
            if cur == stream.len() {
                cur = 0;
            }
        }
        self.cursors[corpus] = cur;
        TokenSeq::new(ids)
    }

    /// Assemble the batch for one training step.
    pub fn next_batch(&mut self, key: StreamKey) -> PretrainBatch {
        let mut varlen_rng = key.rng(LANE_VARLEN);
        let varlen = varlen_rng.gen::<f64>() < VARLEN_PROB;
        let target_len = if varlen {
            varlen_rng.gen_range(VARLEN_MIN..=self.l_ctx)
        } else {
            self.l_ctx
        };
        let mut seqs = Vec::with_capacity(self.batch_size);
        for i in 0..self.batch_size {
            let u: f64 = key.rng_at(i as u64, LANE_CORPUS).gen();
            let corpus = self.pick_corpus(u);
            // Always consume a full l_ctx window so the stream position does
            // not depend on variable-length steps, then truncate.
            let mut seq = self.take_window(corpus, self.l_ctx);
            seq.ids.truncate(target_len);
            seqs.push(seq);
        }
        PretrainBatch {
            seqs,
            target_len,
            varlen,
        }
    }
}
