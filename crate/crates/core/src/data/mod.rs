//! Corpus ingestion, byte-level tokenization, pretraining batch assembly
//! with the occasional variable-length step, and SFT formatting with EOS
//! padding.

mod pretrain;
mod sft;
pub mod synth;
mod vocab;

pub use pretrain::{load_corpus_file, load_corpus_text, Corpus, PretrainBatch, PretrainBatcher};
pub use sft::{load_sft_records, sft_batch, SftBatch, SftExample, SftRecord, SftTurn};
pub use vocab::Vocab;
