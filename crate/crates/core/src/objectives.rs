//! Training losses: the diffusion objective for pretraining and SFT, the
//! load-balancing and z auxiliary losses, and their weighted combination.
//!
//! Every loss exists twice: a value-level form over plain distributions
//! (used for evaluation and as a test oracle) and a tape-level builder used
//! for training. The two are checked against each other in tests.

use crate::error::{Error, Result};
use crate::masking::{NoisySeq, TokenSeq};
use crate::model::{LayerRouting, RouterDecision};
use crate::tensor::{Elem, Tape, VarId};

/// Weight of the load-balancing loss in the total.
pub const LB_WEIGHT: f64 = 0.01;
/// Weight of the z-loss in the total.
pub const Z_WEIGHT: f64 = 0.001;

/// One training sample's losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub lb_loss: f64,
    pub z_loss: f64,
    pub total: f64,
    pub masked_count: usize,
}

impl LossBreakdown {
    pub fn new(task_loss: f64, lb_loss: f64, z_loss: f64, masked_count: usize) -> Self {
        LossBreakdown {
            task_loss,
            lb_loss,
            z_loss,
            total: combine(task_loss, lb_loss, z_loss),
            masked_count,
        }
    }
}

/// Monte-Carlo estimate of the diffusion objective for one sample:
/// `(1/t) * sum_i 1[y_t_i = MASK] * (-log p(y_i))`.
pub fn pretrain_loss(
    y: &TokenSeq,
    y_t: &NoisySeq,
    dists: &[Vec<f64>],
    mask_id: u32,
) -> Result<f64> {
    if y.len() != y_t.ids.len() || dists.len() != y.len() {
        return Err(Error::shape(format!(
            "pretrain_loss: y {} / y_t {} / dists {}",
            y.len(),
            y_t.ids.len(),
            dists.len()
        )));
    }
    let t = y_t.t;
    let masked: Vec<usize> = (0..y.len()).filter(|&i| y_t.ids[i] == mask_id).collect();
    if masked.is_empty() {
        return Ok(0.0);
    }
    if t <= 0.0 {
        return Err(Error::invalid(
            "masked positions present at noise level t = 0",
        ));
    }
    let mut sum = 0.0;
    for &i in &masked {
        let p = dists[i][y.ids[i] as usize];
        sum -= p.ln();
    }
    Ok(sum / t)
}

/// SFT objective: the diffusion loss restricted to the response region,
/// conditioned on a clean prompt. `y_t` is the full noisy sequence
/// (prompt followed by the corrupted response, EOS padding included).
pub fn sft_loss(
    x: &TokenSeq,
    y: &TokenSeq,
    y_t: &NoisySeq,
    dists: &[Vec<f64>],
    mask_id: u32,
) -> Result<f64> {
    let total_len = x.len() + y.len();
    if y_t.ids.len() != total_len || dists.len() != total_len {
        return Err(Error::shape(format!(
            "sft_loss: prompt {} + response {} vs y_t {} / dists {}",
            x.len(),
            y.len(),
            y_t.ids.len(),
            dists.len()
        )));
    }
    if y_t.ids[..x.len()].iter().any(|&id| id == mask_id) {
        return Err(Error::invalid("masked prompt position"));
    }
    let t = y_t.t;
    let mut sum = 0.0;
    let mut masked = 0usize;
    for (i, &target) in y.ids.iter().enumerate() {
        let g = x.len() + i;
        if y_t.ids[g] == mask_id {
            masked += 1;
            sum -= dists[g][target as usize].ln();
        }
    }
    if masked == 0 {
        return Ok(0.0);
    }
    if t <= 0.0 {
        return Err(Error::invalid(
            "masked positions present at noise level t = 0",
        ));
    }
    Ok(sum / t)
}

/// Load-balancing loss `N * sum_i f_i * P_i` over a routing decision.
pub fn load_balance_loss(decision: &RouterDecision) -> Result<f64> {
    if decision.n_tokens() == 0 {
        return Err(Error::invalid("load balance loss over empty batch"));
    }
    let n = decision.n_experts() as f64;
    Ok(n * decision
        .f
        .iter()
        .zip(&decision.p_mean)
        .map(|(&f, &p)| f * p)
        .sum::<f64>())
}

/// Router z-loss: mean squared logsumexp of the router logits over tokens.
pub fn z_loss(logits: &[Vec<f64>]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::invalid("z-loss over zero tokens"));
    }
    let mut total = 0.0;
    for row in logits {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        total += lse * lse;
    }
    Ok(total / logits.len() as f64)
}

/// `task + 0.01 * lb + 0.001 * z`.
pub fn combine(task: f64, lb: f64, z: f64) -> f64 {
    combine_weighted(task, lb, z, LB_WEIGHT, Z_WEIGHT)
}

pub fn combine_weighted(task: f64, lb: f64, z: f64, lb_weight: f64, z_weight: f64) -> f64 {
    task + lb_weight * lb + z_weight * z
}

/// Tape builder for the diffusion objective of one sequence. `targets` is
/// the clean sequence, `noisy` the corrupted one; positions where `noisy`
/// is MASK contribute cross-entropy with weight 1/t. Serves both the
/// pretrain case (whole sequence maskable) and SFT (prompt never masked, so
/// prompt positions get weight zero automatically).
pub fn diffusion_loss_graph<E: Elem>(
    tape: &mut Tape<E>,
    logits: VarId,
    targets: &[u32],
    noisy: &[u32],
    t: f64,
    mask_id: u32,
) -> Result<VarId> {
    if targets.len() != noisy.len() {
        return Err(Error::shape(format!(
            "diffusion loss: {} targets vs {} noisy tokens",
            targets.len(),
            noisy.len()
        )));
    }
    let any_masked = noisy.iter().any(|&id| id == mask_id);
    if any_masked && t <= 0.0 {
        return Err(Error::invalid(
            "masked positions present at noise level t = 0",
        ));
    }
    let w = if t > 0.0 { 1.0 / t } else { 0.0 };
    let weights: Vec<f64> = noisy
        .iter()
        .map(|&id| if id == mask_id { w } else { 0.0 })
        .collect();
    tape.masked_ce(logits, targets, &weights)
}

/// Tape builder for the auxiliary losses, averaged across MoE layers.
/// Returns (lb, z) scalar nodes. The selection frequencies `f` enter as
/// constants; gradients flow through the mean routing probabilities and the
/// router logits, as in standard top-k MoE training.
pub fn aux_losses_graph<E: Elem>(
    tape: &mut Tape<E>,
    routing: &[LayerRouting],
) -> Result<(VarId, VarId)> {
    if routing.is_empty() {
        return Err(Error::invalid("auxiliary losses need at least one MoE layer"));
    }
    let mut lb_acc: Option<VarId> = None;
    let mut z_acc: Option<VarId> = None;
    for layer in routing {
        let n = layer.decision.n_experts() as f64;
        let f_scaled: Vec<f64> = layer.decision.f.iter().map(|&f| f * n).collect();
        let p_mean = tape.col_mean(layer.probs_id)?;
        let lb = tape.dot_const(p_mean, &f_scaled)?;

        let n_tokens = tape.value(layer.logits_id).rows();
        let lse = tape.logsumexp_rows(layer.logits_id)?;
        let sq = tape.mul(lse, lse)?;
        let z_sum = tape.sum(sq);
        let z = tape.scale(z_sum, 1.0 / n_tokens as f64);

        lb_acc = Some(match lb_acc {
            Some(a) => tape.add(a, lb)?,
            None => lb,
        });
        z_acc = Some(match z_acc {
            Some(a) => tape.add(a, z)?,
            None => z,
        });
    }
    let inv = 1.0 / routing.len() as f64;
    let lb_mean = tape.scale(lb_acc.unwrap(), inv);
    let z_mean = tape.scale(z_acc.unwrap(), inv);
    Ok((lb_mean, z_mean))
}

/// Tape builder for the auxiliary losses over a whole micro-batch of
/// forward passes. Routing statistics (`f`, mean probabilities, the z-loss
/// token mean) are taken over all tokens of the batch, weighting each
/// sequence by its token count, then averaged across layers. With a single
/// sequence this coincides with [`aux_losses_graph`].
pub fn batch_aux_losses_graph<E: Elem>(
    tape: &mut Tape<E>,
    per_seq: &[Vec<LayerRouting>],
) -> Result<(VarId, VarId)> {
    if per_seq.is_empty() || per_seq[0].is_empty() {
        return Err(Error::invalid("auxiliary losses need at least one MoE layer"));
    }
    let n_layers = per_seq[0].len();
    if per_seq.iter().any(|r| r.len() != n_layers) {
        return Err(Error::shape("layer count differs across batch"));
    }
    let token_counts: Vec<usize> = per_seq
        .iter()
        .map(|r| r[0].decision.n_tokens())
        .collect();
    let total_tokens: usize = token_counts.iter().sum();

    let mut lb_acc: Option<VarId> = None;
    let mut z_acc: Option<VarId> = None;
    for l in 0..n_layers {
        let n_experts = per_seq[0][l].decision.n_experts();
        // Batch-level selection frequencies: token-weighted mean of the
        // per-sequence frequencies. These enter the loss as constants.
        let mut f_batch = vec![0.0f64; n_experts];
        for (s, routing) in per_seq.iter().enumerate() {
            let w = token_counts[s] as f64 / total_tokens as f64;
            for (fb, &fv) in f_batch.iter_mut().zip(&routing[l].decision.f) {
                *fb += w * fv;
            }
        }
        let f_scaled: Vec<f64> = f_batch.iter().map(|&f| f * n_experts as f64).collect();

        let mut p_acc: Option<VarId> = None;
        let mut zl_acc: Option<VarId> = None;
        for (s, routing) in per_seq.iter().enumerate() {
            let w = token_counts[s] as f64 / total_tokens as f64;
            let pm = tape.col_mean(routing[l].probs_id)?;
            let pm_w = tape.scale(pm, w);
            p_acc = Some(match p_acc {
                Some(a) => tape.add(a, pm_w)?,
                None => pm_w,
            });

            let lse = tape.logsumexp_rows(routing[l].logits_id)?;
            let sq = tape.mul(lse, lse)?;
            let z_sum = tape.sum(sq);
            let z_w = tape.scale(z_sum, 1.0 / total_tokens as f64);
            zl_acc = Some(match zl_acc {
                Some(a) => tape.add(a, z_w)?,
                None => z_w,
            });
        }
        let lb = tape.dot_const(p_acc.unwrap(), &f_scaled)?;
        lb_acc = Some(match lb_acc {
            Some(a) => tape.add(a, lb)?,
            None => lb,
        });
        let zl = zl_acc.unwrap();
        z_acc = Some(match z_acc {
            Some(a) => tape.add(a, zl)?,
            None => zl,
        });
    }
    let inv = 1.0 / n_layers as f64;
    Ok((
        tape.scale(lb_acc.unwrap(), inv),
        tape.scale(z_acc.unwrap(), inv),
    ))
}

/// Weighted total on the tape.
pub fn total_loss_graph<E: Elem>(
    tape: &mut Tape<E>,
    task: VarId,
    lb: VarId,
    z: VarId,
    lb_weight: f64,
    z_weight: f64,
) -> Result<VarId> {
    let lb_w = tape.scale(lb, lb_weight);
    let z_w = tape.scale(z, z_weight);
    let partial = tape.add(task, lb_w)?;
    tape.add(partial, z_w)
}
