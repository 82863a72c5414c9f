//! The bidirectional mask-predictor transformer: embeddings, RoPE attention
//! with per-head QK RMS-norm, and sparse MoE feed-forward blocks with
//! dropless top-k routing.

mod config;
mod params;
mod router;

pub use config::{param_counts, ModelConfig, ParamCounts};
pub use params::ParamSet;
pub use router::{route, route_from_probs, top_k_indices, RouterDecision};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tape, Tensor, VarId};
use rand::Rng;

/// RMS normalization epsilon used everywhere in the model.
pub const NORM_EPS: f64 = 1e-6;

/// Anything that maps a (partially masked) sequence to per-position token
/// distributions. The sampler is generic over this so tests can plug in
/// exact-posterior oracles.
pub trait MaskPredictor {
    fn predict(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>>;
    fn max_context(&self) -> usize;
}

/// Routing info for one MoE layer of one forward pass.
pub struct LayerRouting {
    /// Router logits on the tape, shape [tokens, N].
    pub logits_id: VarId,
    /// Full softmax over experts on the tape, shape [tokens, N].
    pub probs_id: VarId,
    pub decision: RouterDecision,
}

/// Result of one forward pass on a tape.
pub struct ForwardOutput {
    /// Vocabulary logits, shape [tokens, K].
    pub logits: VarId,
    pub routing: Vec<LayerRouting>,
    /// Parameter leaf ids, aligned with the model's `ParamSet` order.
    pub leaves: Vec<VarId>,
}

pub struct Model<E> {
    pub cfg: ModelConfig,
    pub params: ParamSet<E>,
}

impl<E: Elem> Model<E> {
    /// Fresh model. Matrices get Gaussian init, norm gains start at one and
    /// the output projection starts at zero so the untrained predictor is
    /// exactly uniform.
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let k_vocab = cfg.vocab;
        let std = 0.02;

        params.insert("embed", Tensor::randn(&[k_vocab, d], std, rng));
        params.insert("out_proj", Tensor::zeros(&[d, k_vocab]));
        params.insert("final_norm", Tensor::full(&[d], E::one()));
        for l in 0..cfg.n_layers {
            params.insert(&format!("l{l}.attn_norm"), Tensor::full(&[d], E::one()));
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("l{l}.{w}"), Tensor::randn(&[d, d], std, rng));
            }
            params.insert(&format!("l{l}.q_gain"), Tensor::full(&[d], E::one()));
            params.insert(&format!("l{l}.k_gain"), Tensor::full(&[d], E::one()));
            params.insert(&format!("l{l}.ffn_norm"), Tensor::full(&[d], E::one()));
            params.insert(
                &format!("l{l}.router"),
                Tensor::randn(&[d, cfg.n_experts], std, rng),
            );
            for e in 0..cfg.n_experts {
                params.insert(
                    &format!("l{l}.e{e}.w_gate"),
                    Tensor::randn(&[d, cfg.d_expert], std, rng),
                );
                params.insert(
                    &format!("l{l}.e{e}.w_up"),
                    Tensor::randn(&[d, cfg.d_expert], std, rng),
                );
                params.insert(
                    &format!("l{l}.e{e}.w_down"),
                    Tensor::randn(&[cfg.d_expert, d], std, rng),
                );
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamSet<E>) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    /// Full forward pass on a fresh region of the tape.
    pub fn forward(&self, tape: &mut Tape<E>, tokens: &[u32]) -> Result<ForwardOutput> {
        let leaves = self.params.push_leaves(tape);
        self.forward_with_leaves(tape, tokens, leaves)
    }

    /// Forward pass reusing existing parameter leaves, so several sequences
    /// of one batch share leaves and gradients accumulate across them.
    pub fn forward_with_leaves(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        leaves: Vec<VarId>,
    ) -> Result<ForwardOutput> {
        if tokens.len() > self.cfg.max_context {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max context {}",
                tokens.len(),
                self.cfg.max_context
            )));
        }
        if tokens.is_empty() {
            return Err(Error::invalid("empty input sequence"));
        }
        for &id in tokens {
            if id as usize >= self.cfg.vocab {
                return Err(Error::invalid(format!(
                    "token id {id} outside vocabulary {}",
                    self.cfg.vocab
                )));
            }
        }
        let at = |name: &str| -> VarId { leaves[self.params.index_of(name).expect(name)] };

        let n_tokens = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let mut h = tape.gather_rows(at("embed"), &ids)?;
        let mut routing = Vec::with_capacity(self.cfg.n_layers);

        for l in 0..self.cfg.n_layers {
            let attn_out = self.attention_block(tape, h, l, &at)?;
            h = tape.add(h, attn_out)?;
            let (moe_out, layer_routing) = self.moe_block(tape, h, l, n_tokens, &at)?;
            h = tape.add(h, moe_out)?;
            routing.push(layer_routing);
        }

        let hn = tape.rmsnorm(h, at("final_norm"), 1, NORM_EPS)?;
        let logits = tape.matmul(hn, at("out_proj"))?;
        tape.check_finite(logits, "vocabulary logits")?;
        Ok(ForwardOutput {
            logits,
            routing,
            leaves,
        })
    }

    /// Pre-norm bidirectional multi-head attention with QK RMS-norm and RoPE.
    /// Returns the block output before the residual add.
    fn attention_block(
        &self,
        tape: &mut Tape<E>,
        h: VarId,
        layer: usize,
        at: &dyn Fn(&str) -> VarId,
    ) -> Result<VarId> {
        let d = self.cfg.d_model;
        let n_heads = self.cfg.n_heads;
        let dh = d / n_heads;
        let x = tape.rmsnorm(h, at(&format!("l{layer}.attn_norm")), 1, NORM_EPS)?;
        let q = tape.matmul(x, at(&format!("l{layer}.wq")))?;
        let k = tape.matmul(x, at(&format!("l{layer}.wk")))?;
        let v = tape.matmul(x, at(&format!("l{layer}.wv")))?;
        let q = tape.rmsnorm(q, at(&format!("l{layer}.q_gain")), n_heads, NORM_EPS)?;
        let k = tape.rmsnorm(k, at(&format!("l{layer}.k_gain")), n_heads, NORM_EPS)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let qh = tape.rope(qh, self.cfg.rope_base, 0)?;
            let kh = tape.rope(kh, self.cfg.rope_base, 0)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&head_outputs)?;
        tape.matmul(merged, at(&format!("l{layer}.wo")))
    }

    /// Pre-norm sparse MoE block: route, run the k selected SwiGLU experts
    /// per token, combine with the un-renormalized softmax scores. Returns
    /// (block output before residual, routing info).
    fn moe_block(
        &self,
        tape: &mut Tape<E>,
        h: VarId,
        layer: usize,
        n_tokens: usize,
        at: &dyn Fn(&str) -> VarId,
    ) -> Result<(VarId, LayerRouting)> {
        let x = tape.rmsnorm(h, at(&format!("l{layer}.ffn_norm")), 1, NORM_EPS)?;
        let logits_id = tape.matmul(x, at(&format!("l{layer}.router")))?;
        let probs_id = tape.softmax_rows(logits_id)?;

        let probs_rows: Vec<Vec<f64>> = (0..n_tokens)
            .map(|i| tape.value(probs_id).row(i).iter().map(|&v| v.to_f64()).collect())
            .collect();
        let decision = route_from_probs(&probs_rows, self.cfg.n_active)?;

        // Token lists per expert; experts processed in index order so the
        // summation order is deterministic.
        let mut expert_tokens: Vec<Vec<usize>> = vec![Vec::new(); self.cfg.n_experts];
        for (tok, selected) in decision.indices.iter().enumerate() {
            for &e in selected {
                expert_tokens[e].push(tok);
            }
        }

        let mut acc: Option<VarId> = None;
        for (e, rows) in expert_tokens.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(x, rows)?;
            let gate_pre = tape.matmul(xe, at(&format!("l{layer}.e{e}.w_gate")))?;
            let gate = tape.silu(gate_pre);
            let up = tape.matmul(xe, at(&format!("l{layer}.e{e}.w_up")))?;
            let inner = tape.mul(gate, up)?;
            let down = tape.matmul(inner, at(&format!("l{layer}.e{e}.w_down")))?;
            let gate_idx: Vec<(usize, usize)> = rows.iter().map(|&tok| (tok, e)).collect();
            let weights = tape.gather_elems(probs_id, &gate_idx)?;
            let weighted = tape.scale_rows(down, weights)?;
            let scattered = tape.scatter_add_rows(weighted, rows, n_tokens)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scattered)?,
                None => scattered,
            });
        }
        let out = acc.expect("n_active >= 1 guarantees at least one expert ran");
        Ok((
            out,
            LayerRouting {
                logits_id,
                probs_id,
                decision,
            },
        ))
    }

    /// Per-position token distributions (softmax of the vocabulary logits),
    /// in f64 regardless of model precision.
    pub fn predict(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens)?;
        Ok(softmax_rows_f64(tape.value(out.logits)))
    }
}

impl<E: Elem> MaskPredictor for Model<E> {
    fn predict(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        Model::predict(self, tokens)
    }

    fn max_context(&self) -> usize {
        self.cfg.max_context
    }
}

/// Stable row softmax of a rank-2 tensor, computed in f64.
pub fn softmax_rows_f64<E: Elem>(t: &Tensor<E>) -> Vec<Vec<f64>> {
    let r = t.rows();
    (0..r)
        .map(|i| {
            let row: Vec<f64> = t.row(i).iter().map(|&v| v.to_f64()).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|&e| e / z).collect()
        })
        .collect()
}
