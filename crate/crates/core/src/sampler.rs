//! Inference: reverse-process generation and semi-autoregressive block
//! decoding with low-confidence remasking, over any mask predictor.

use crate::error::{Error, Result};
use crate::masking::{draw_token, reverse_step, NoisySeq, TokenPolicy, TokenSeq};
use crate::model::MaskPredictor;
use crate::rng::StreamKey;

/// Remasking strategy within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemaskStrategy {
    /// Keep only the most confident predictions each step, on a linear
    /// cumulative schedule; remask the rest.
    LowConfidence,
    /// Plain reverse-process schedule: the mask/unmask coin decides.
    None,
}

/// Generation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodePlan {
    pub gen_len: usize,
    pub block_size: usize,
    pub steps_per_block: usize,
    pub policy: TokenPolicy,
    pub remask: RemaskStrategy,
    pub seed: u64,
}

impl DecodePlan {
    pub fn validate(&self) -> Result<()> {
        if self.gen_len == 0 || self.block_size == 0 {
            return Err(Error::invalid("generation and block length must be positive"));
        }
        if self.gen_len % self.block_size != 0 {
            return Err(Error::invalid(format!(
                "block size {} must divide generation length {}",
                self.block_size, self.gen_len
            )));
        }
        if self.steps_per_block == 0 || self.steps_per_block > self.block_size {
            return Err(Error::invalid(format!(
                "steps_per_block {} outside [1, {}]",
                self.steps_per_block, self.block_size
            )));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.gen_len / self.block_size
    }
}

/// Snapshot passed to an observer after each denoising step.
pub struct StepTrace<'a> {
    pub block: usize,
    pub step: usize,
    /// The full generated region (all blocks), prompt excluded.
    pub generated: &'a [u32],
}

/// One block's proposals for a denoising step.
pub struct PredictedBlock {
    /// Proposed token per position (finalized positions keep their token).
    pub tokens: Vec<u32>,
    /// Chosen-token probability per position.
    pub confidence: Vec<f64>,
    /// Positions locked by earlier steps; never remasked.
    pub finalized: Vec<bool>,
}

/// Keep the `n_keep` highest-confidence newly predicted positions, remask
/// the rest. Ties break to the lower position index.
pub fn low_confidence_remask(
    block: &PredictedBlock,
    n_keep: usize,
    mask_id: u32,
) -> Result<Vec<u32>> {
    let predicted: Vec<usize> = (0..block.tokens.len())
        .filter(|&i| !block.finalized[i])
        .collect();
    if n_keep > predicted.len() {
        return Err(Error::invalid(format!(
            "n_keep {} exceeds {} newly predicted positions",
            n_keep,
            predicted.len()
        )));
    }
    let mut order = predicted.clone();
    order.sort_by(|&a, &b| {
        block.confidence[b]
            .partial_cmp(&block.confidence[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let keep: std::collections::HashSet<usize> = order[..n_keep].iter().copied().collect();
    let out = (0..block.tokens.len())
        .map(|i| {
            if block.finalized[i] || keep.contains(&i) {
                block.tokens[i]
            } else {
                mask_id
            }
        })
        .collect();
    Ok(out)
}

/// Prefix strictly before the first EOS; the whole sequence if none.
pub fn truncate_at_eos(y: &TokenSeq, eos_id: u32) -> TokenSeq {
    match y.ids.iter().position(|&id| id == eos_id) {
        Some(i) => TokenSeq::new(y.ids[..i].to_vec()),
        None => y.clone(),
    }
}

/// Vanilla reverse-process generation: the whole sequence is one block.
pub fn generate_vanilla(
    prompt: &TokenSeq,
    plan: &DecodePlan,
    model: &dyn MaskPredictor,
    mask_id: u32,
) -> Result<TokenSeq> {
    if plan.block_size != plan.gen_len {
        return Err(Error::invalid(
            "vanilla generation requires block_size == gen_len",
        ));
    }
    generate_semi_ar(prompt, plan, model, mask_id)
}

/// Semi-autoregressive block decoding: blocks denoised left to right; later
/// blocks stay fully masked until the current one completes.
pub fn generate_semi_ar(
    prompt: &TokenSeq,
    plan: &DecodePlan,
    model: &dyn MaskPredictor,
    mask_id: u32,
) -> Result<TokenSeq> {
    generate_semi_ar_observed(prompt, plan, model, mask_id, &mut |_| {})
}

/// Same as [`generate_semi_ar`] but calls `observer` after every denoising
/// step, for instrumentation.
pub fn generate_semi_ar_observed(
    prompt: &TokenSeq,
    plan: &DecodePlan,
    model: &dyn MaskPredictor,
    mask_id: u32,
    observer: &mut dyn FnMut(&StepTrace),
) -> Result<TokenSeq> {
    plan.validate()?;
    if prompt.len() + plan.gen_len > model.max_context() {
        return Err(Error::invalid(format!(
            "prompt {} + generation {} exceeds max context {}",
            prompt.len(),
            plan.gen_len,
            model.max_context()
        )));
    }

    let mut context = prompt.ids.clone();
    context.extend(std::iter::repeat(mask_id).take(plan.gen_len));
    let base = prompt.len();
    let b = plan.block_size;
    let s_steps = plan.steps_per_block;
    let mut step_counter = 0u64;

    for block in 0..plan.n_blocks() {
        let block_start = base + block * b;
        match plan.remask {
            RemaskStrategy::None => {
                let mut t_cur = 1.0;
                for step in 1..=s_steps {
                    let t_next = 1.0 - step as f64 / s_steps as f64;
                    let dists = model.predict(&context)?;
                    let block_dists: Vec<Vec<f64>> =
                        dists[block_start..block_start + b].to_vec();
                    let noisy = NoisySeq {
                        ids: context[block_start..block_start + b].to_vec(),
                        t: t_cur,
                    };
                    let key = StreamKey::new(plan.seed, step_counter);
                    let out =
                        reverse_step(&noisy, t_next, &block_dists, key, plan.policy, mask_id)?;
                    context[block_start..block_start + b].copy_from_slice(&out.ids);
                    t_cur = t_next;
                    step_counter += 1;
                    observer(&StepTrace {
                        block,
                        step,
                        generated: &context[base..],
                    });
                }
            }
            RemaskStrategy::LowConfidence => {
                for step in 1..=s_steps {
                    let target_cum = (b * step).div_ceil(s_steps);
                    let dists = model.predict(&context)?;
                    let key = StreamKey::new(plan.seed, step_counter);
                    let mut tokens = Vec::with_capacity(b);
                    let mut confidence = Vec::with_capacity(b);
                    let mut finalized = Vec::with_capacity(b);
                    let mut n_final = 0usize;
                    for i in 0..b {
                        let pos = block_start + i;
                        if context[pos] != mask_id {
                            tokens.push(context[pos]);
                            confidence.push(1.0);
                            finalized.push(true);
                            n_final += 1;
                        } else {
                            let mut rng = key.rng_at(pos as u64, 1);
                            let tok = draw_token(&dists[pos], plan.policy, &mut rng);
                            tokens.push(tok);
                            confidence.push(dists[pos][tok as usize]);
                            finalized.push(false);
                        }
                    }
                    let n_keep = target_cum.saturating_sub(n_final);
                    let state = PredictedBlock {
                        tokens,
                        confidence,
                        finalized,
                    };
                    let new_block = low_confidence_remask(&state, n_keep, mask_id)?;
                    context[block_start..block_start + b].copy_from_slice(&new_block);
                    step_counter += 1;
                    observer(&StepTrace {
                        block,
                        step,
                        generated: &context[base..],
                    });
                }
            }
        }
        debug_assert!(context[block_start..block_start + b]
            .iter()
            .all(|&id| id != mask_id));
    }
    Ok(TokenSeq::new(context[base..].to_vec()))
}
