//! Staged training: the step loop (corrupt, forward, loss, backward,
//! update), metrics, checkpointing, and the Monte-Carlo evaluation bound.
//!
//! All randomness in a step is keyed by (seed, global step), so a run can
//! stop at any checkpoint and continue bit-identically.

mod checkpoint;
mod optimizer;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, Checkpoint};
pub use optimizer::{apply_update, LrSchedule, OptimState, OptimizerConfig, UpdateStats};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, PretrainBatcher, SftRecord};
use crate::error::{Error, Result};
use crate::masking::{forward_mask, sample_noise_level, TokenSeq};
use crate::model::Model;
use crate::objectives::{
    batch_aux_losses_graph, diffusion_loss_graph, pretrain_loss, total_loss_graph, LB_WEIGHT,
    Z_WEIGHT,
};
use crate::rng::StreamKey;
use crate::tensor::{Elem, Tape, Tensor, VarId};

const LANE_NOISE: u64 = 30;
const LANE_PICK: u64 = 31;

/// What a stage trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Sft,
}

fn default_batch_size() -> usize {
    8
}
fn default_l_ctx() -> usize {
    128
}
fn default_lr_peak() -> f64 {
    1e-3
}
fn default_warmup_frac() -> f64 {
    0.05
}
fn default_lr_floor_frac() -> f64 {
    0.1
}
fn default_lb_weight() -> f64 {
    LB_WEIGHT
}
fn default_z_weight() -> f64 {
    Z_WEIGHT
}
fn default_t_floor() -> f64 {
    1e-3
}
fn default_log_every() -> u64 {
    10
}
fn default_init() -> String {
    "prev".into()
}

/// Configuration of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    /// Stop after this many training tokens; zero makes the stage a no-op.
    pub token_budget: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_l_ctx")]
    pub l_ctx: usize,
    /// Override of the rotary base for this stage (length extension).
    #[serde(default)]
    pub rope_base: Option<f64>,
    #[serde(default = "default_lr_peak")]
    pub lr_peak: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_lr_floor_frac")]
    pub lr_floor_frac: f64,
    /// Corpus mixture weights by corpus name; empty means uniform.
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    #[serde(default = "default_lb_weight")]
    pub lb_weight: f64,
    #[serde(default = "default_z_weight")]
    pub z_weight: f64,
    /// Lower bound on sampled noise levels, bounding the 1/t loss weight.
    #[serde(default = "default_t_floor")]
    pub t_floor: f64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Also checkpoint every this many steps; zero means final only.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Where initial weights come from: "scratch", "prev", or a checkpoint
    /// path.
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("stage without a name".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("stage {}: batch_size is zero", self.name)));
        }
        if self.l_ctx < 8 {
            return Err(Error::Config(format!("stage {}: l_ctx below 8", self.name)));
        }
        if self.lr_peak <= 0.0 {
            return Err(Error::Config(format!("stage {}: lr_peak not positive", self.name)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.lr_floor_frac) {
            return Err(Error::Config(format!(
                "stage {}: warmup_frac / lr_floor_frac outside [0, 1]",
                self.name
            )));
        }
        if !(0.0..1.0).contains(&self.t_floor) || self.t_floor <= 0.0 {
            return Err(Error::Config(format!(
                "stage {}: t_floor must be in (0, 1)",
                self.name
            )));
        }
        if self.lb_weight < 0.0 || self.z_weight < 0.0 {
            return Err(Error::Config(format!(
                "stage {}: negative auxiliary loss weight",
                self.name
            )));
        }
        self.optimizer.validate()
    }
}

/// Data a stage trains on.
pub enum StageData {
    Pretrain { corpora: Vec<Corpus> },
    Sft { records: Vec<SftRecord> },
}

/// Per-step diagnostics, one JSON line each in the metrics log. All losses
/// are per token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage_step: u64,
    pub tokens_seen: u64,
    pub lr: f64,
    pub task: f64,
    pub lb: f64,
    pub z: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Largest per-expert selection frequency seen in the batch.
    pub max_f: f64,
    pub batch_tokens: usize,
}

/// Summary of a completed (or skipped) stage.
pub struct StageReport {
    pub steps: u64,
    pub tokens: u64,
    pub metrics: Vec<StepMetrics>,
}

enum BatchSource {
    Pretrain(PretrainBatcher),
    Sft(Vec<SftRecord>),
}

/// One stage's training loop. Owns the model and optimizer state so the
/// pipeline can thread them from stage to stage.
pub struct TrainLoop<E: Elem> {
    pub model: Model<E>,
    pub opt: OptimState<E>,
    pub stage: StageConfig,
    pub base_seed: u64,
    pub global_step: u64,
    pub tokens_seen: u64,
    pub stage_step: u64,
    pub stage_tokens: u64,
    schedule: LrSchedule,
    source: BatchSource,
}

fn resolve_weights(corpora: &[Corpus], weights: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Ok(vec![1.0; corpora.len()]);
    }
    for name in weights.keys() {
        if !corpora.iter().any(|c| &c.name == name) {
            return Err(Error::Config(format!(
                "weight refers to unknown corpus '{name}'"
            )));
        }
    }
    Ok(corpora
        .iter()
        .map(|c| weights.get(&c.name).copied().unwrap_or(0.0))
        .collect())
}

impl<E: Elem> TrainLoop<E> {
    pub fn new(
        mut model: Model<E>,
        opt: OptimState<E>,
        stage: StageConfig,
        data: StageData,
        base_seed: u64,
        global_step: u64,
        tokens_seen: u64,
    ) -> Result<Self> {
        stage.validate()?;
        if let Some(base) = stage.rope_base {
            model.cfg.rope_base = base;
        }
        if model.cfg.max_context < stage.l_ctx {
            model.cfg.max_context = stage.l_ctx;
        }
        model.cfg.validate()?;

        let source = match data {
            StageData::Pretrain { corpora } => {
                let w = resolve_weights(&corpora, &stage.weights)?;
                BatchSource::Pretrain(PretrainBatcher::new(
                    corpora,
                    w,
                    stage.l_ctx,
                    stage.batch_size,
                )?)
            }
            StageData::Sft { records } => {
                if records.is_empty() {
                    return Err(Error::Data("SFT stage without records".into()));
                }
                BatchSource::Sft(records)
            }
        };

        let tokens_per_step = (stage.batch_size * stage.l_ctx) as u64;
        let total_steps = stage.token_budget.div_ceil(tokens_per_step);
        let warmup_steps = ((total_steps as f64) * stage.warmup_frac).ceil() as u64;
        let schedule = LrSchedule {
            peak: stage.lr_peak,
            warmup_steps: warmup_steps.max(1).min(total_steps.max(1)),
            total_steps,
            floor_frac: stage.lr_floor_frac,
        };
        Ok(TrainLoop {
            model,
            opt,
            stage,
            base_seed,
            global_step,
            tokens_seen,
            stage_step: 0,
            stage_tokens: 0,
            schedule,
            source,
        })
    }

    /// Rebuild a loop from a checkpoint taken inside the same stage.
    pub fn resume(ckpt: Checkpoint<E>, stage: StageConfig, data: StageData) -> Result<Self> {
        if ckpt.stage != stage.name {
            return Err(Error::Checkpoint(format!(
                "checkpoint from stage '{}' cannot resume stage '{}'",
                ckpt.stage, stage.name
            )));
        }
        let model = Model::from_params(ckpt.model_cfg, ckpt.params)?;
        let opt = ckpt
            .opt
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks optimizer state".into()))?;
        let mut lp = TrainLoop::new(
            model,
            opt,
            stage,
            data,
            ckpt.base_seed,
            ckpt.global_step,
            ckpt.tokens_seen,
        )?;
        lp.stage_step = ckpt.stage_step;
        lp.stage_tokens = ckpt.stage_tokens;
        if let BatchSource::Pretrain(b) = &mut lp.source {
            let cursors: Vec<usize> = ckpt.data_cursors.iter().map(|&c| c as usize).collect();
            b.set_cursors(&cursors)?;
        }
        Ok(lp)
    }

    pub fn is_done(&self) -> bool {
        self.stage_tokens >= self.stage.token_budget
    }

    pub fn to_checkpoint(&self) -> Checkpoint<E> {
        let cursors = match &self.source {
            BatchSource::Pretrain(b) => b.cursors().iter().map(|&c| c as u64).collect(),
            BatchSource::Sft(_) => Vec::new(),
        };
        Checkpoint {
            model_cfg: self.model.cfg.clone(),
            params: self.model.params.clone(),
            opt: Some(OptimState {
                step: self.opt.step,
                m: self.opt.m.clone(),
                v: self.opt.v.clone(),
            }),
            stage: self.stage.name.clone(),
            base_seed: self.base_seed,
            global_step: self.global_step,
            tokens_seen: self.tokens_seen,
            stage_step: self.stage_step,
            stage_tokens: self.stage_tokens,
            data_cursors: cursors,
        }
    }

    /// One optimizer step: assemble a batch, corrupt it, run the batch on
    /// one tape, backprop the combined loss and update the parameters.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let key = StreamKey::new(self.base_seed, self.global_step);
        let mask_id = self.model.cfg.mask_id;
        let t_floor = self.stage.t_floor;

        // (targets, noisy ids, t, loss token count) per sequence.
        let batch: Vec<(Vec<u32>, Vec<u32>, f64, usize)> = match &mut self.source {
            BatchSource::Pretrain(batcher) => {
                let b = batcher.next_batch(key);
                b.seqs
                    .into_iter()
                    .enumerate()
                    .map(|(i, seq)| {
                        let sub = key.substream(i as u64);
                        let t = sample_noise_level(&mut sub.rng(LANE_NOISE)).max(t_floor);
                        let noisy = forward_mask(&seq, t, sub, mask_id)?;
                        let n = seq.len();
                        Ok((seq.ids, noisy.ids, t, n))
                    })
                    .collect::<Result<_>>()?
            }
            BatchSource::Sft(records) => {
                let mut pick = key.rng(LANE_PICK);
                let chosen: Vec<SftRecord> = (0..self.stage.batch_size)
                    .map(|_| records[pick.gen_range(0..records.len())].clone())
                    .collect();
                let b = crate::data::sft_batch(&chosen, self.stage.l_ctx, key)?;
                b.examples
                    .into_iter()
                    .enumerate()
                    .map(|(i, ex)| {
                        let sub = key.substream(i as u64);
                        let t = sample_noise_level(&mut sub.rng(LANE_NOISE)).max(t_floor);
                        let noisy_resp = forward_mask(&ex.response, t, sub, mask_id)?;
                        let mut targets = ex.prompt.ids.clone();
                        targets.extend(&ex.response.ids);
                        let mut noisy = ex.prompt.ids;
                        noisy.extend(noisy_resp.ids);
                        let n = ex.response.ids.len();
                        Ok((targets, noisy, t, n))
                    })
                    .collect::<Result<_>>()?
            }
        };

        let loss_tokens: usize = batch.iter().map(|(_, _, _, n)| n).sum();
        let batch_tokens: usize = batch.iter().map(|(targets, ..)| targets.len()).sum();

        let mut tape: Tape<E> = Tape::new();
        let leaves = self.model.params.push_leaves(&mut tape);
        let mut task_acc: Option<VarId> = None;
        let mut per_seq_routing = Vec::with_capacity(batch.len());
        let mut max_f = 0.0f64;
        for (targets, noisy, t, _) in &batch {
            let out = self
                .model
                .forward_with_leaves(&mut tape, noisy, leaves.clone())?;
            let seq_loss =
                diffusion_loss_graph(&mut tape, out.logits, targets, noisy, *t, mask_id)?;
            task_acc = Some(match task_acc {
                Some(a) => tape.add(a, seq_loss)?,
                None => seq_loss,
            });
            for r in &out.routing {
                for &f in &r.decision.f {
                    max_f = max_f.max(f);
                }
            }
            per_seq_routing.push(out.routing);
        }
        // Per-token task loss so the scale is comparable across stages.
        let task = tape.scale(task_acc.unwrap(), 1.0 / loss_tokens.max(1) as f64);
        let (lb, z) = batch_aux_losses_graph(&mut tape, &per_seq_routing)?;
        let total = total_loss_graph(
            &mut tape,
            task,
            lb,
            z,
            self.stage.lb_weight,
            self.stage.z_weight,
        )?;
        tape.check_finite(total, "training loss")?;

        let grads = tape.backward(total)?;
        let grad_vec: Vec<Tensor<E>> = leaves
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&leaf, p)| match grads.get(leaf) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.shape()),
            })
            .collect();

        let lr = self.schedule.lr_at(self.stage_step);
        let stats = apply_update(
            &mut self.model.params,
            &grad_vec,
            &mut self.opt,
            lr,
            &self.stage.optimizer,
        )?;

        self.global_step += 1;
        self.stage_step += 1;
        self.tokens_seen += batch_tokens as u64;
        self.stage_tokens += batch_tokens as u64;

        Ok(StepMetrics {
            step: self.global_step,
            stage_step: self.stage_step,
            tokens_seen: self.tokens_seen,
            lr,
            task: tape.value(task).item().to_f64(),
            lb: tape.value(lb).item().to_f64(),
            z: tape.value(z).item().to_f64(),
            total: tape.value(total).item().to_f64(),
            grad_norm: stats.grad_norm,
            max_f,
            batch_tokens,
        })
    }
}

/// Run a stage to its token budget, logging metrics as JSON lines and
/// writing periodic plus final checkpoints when `out_dir` is given.
pub fn run_stage<E: Elem>(
    lp: &mut TrainLoop<E>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<StageReport> {
    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?,
            )
        }
        None => None,
    };
    let mut metrics = Vec::new();
    let start_step = lp.stage_step;
    let start_tokens = lp.stage_tokens;
    while !lp.is_done() {
        let m = lp.step()?;
        if let Some(f) = &mut metrics_file {
            let line = serde_json::to_string(&m)
                .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
            writeln!(f, "{line}")?;
        }
        on_step(&m);
        let every = lp.stage.checkpoint_every;
        if every > 0 && lp.stage_step % every == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("{}-step{}.ckpt", lp.stage.name, lp.global_step));
                save_checkpoint(&lp.to_checkpoint(), &path)?;
            }
        }
        metrics.push(m);
    }
    if let Some(dir) = out_dir {
        let path = dir.join(format!("{}-final.ckpt", lp.stage.name));
        save_checkpoint(&lp.to_checkpoint(), &path)?;
    }
    Ok(StageReport {
        steps: lp.stage_step - start_step,
        tokens: lp.stage_tokens - start_tokens,
        metrics,
    })
}

/// Monte-Carlo estimate of the per-token upper bound on held-out NLL.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub per_token: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Estimate the variational bound on held-out data: for each sequence, draw
/// `n_mc` (noise level, masking) pairs, score the model's predictions on
/// the masked positions, and average the per-token losses.
pub fn evaluate_bound<E: Elem>(
    model: &Model<E>,
    seqs: &[TokenSeq],
    n_mc: usize,
    seed: u64,
    t_floor: f64,
) -> Result<BoundEstimate> {
    if seqs.is_empty() || n_mc == 0 {
        return Err(Error::invalid("bound evaluation needs sequences and draws"));
    }
    if !(0.0..1.0).contains(&t_floor) || t_floor <= 0.0 {
        return Err(Error::invalid(format!("t_floor {t_floor} outside (0, 1)")));
    }
    let mask_id = model.cfg.mask_id;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut n = 0usize;
    for (i, seq) in seqs.iter().enumerate() {
        for j in 0..n_mc {
            let key = StreamKey::new(seed, (i * n_mc + j) as u64);
            let t = sample_noise_level(&mut key.rng(LANE_NOISE)).max(t_floor);
            let noisy = forward_mask(seq, t, key, mask_id)?;
            let dists = model.predict(&noisy.ids)?;
            let loss = pretrain_loss(seq, &noisy, &dists, mask_id)? / seq.len() as f64;
            sum += loss;
            sumsq += loss * loss;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    Ok(BoundEstimate {
        per_token: mean,
        stderr: (var / n as f64).sqrt(),
        n_samples: n,
    })
}

/// Pack held-out text into fixed-length evaluation sequences.
pub fn heldout_sequences(corpus: &Corpus, l_ctx: usize, max_seqs: usize) -> Vec<TokenSeq> {
    corpus
        .tokens
        .chunks_exact(l_ctx)
        .take(max_seqs)
        .map(|w| TokenSeq::new(w.to_vec()))
        .collect()
}
