//! Multi-stage training pipeline: reads a [`RunConfig`], threads the model
//! and step/token counters through the configured stages in order, and
//! leaves checkpoints plus a metrics log in the output directory.

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{load_corpus_file, load_sft_records, Corpus, SftRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{
    load_checkpoint, run_stage, OptimState, StageConfig, StageData, StageKind, StageReport,
    StepMetrics, TrainLoop,
};

/// Results of a pipeline run.
pub struct PipelineOutcome {
    pub final_checkpoint: Option<PathBuf>,
    pub reports: Vec<(String, StageReport)>,
    pub model: Model<f32>,
    pub global_step: u64,
    pub tokens_seen: u64,
}

fn load_corpora(cfg: &RunConfig) -> Result<Vec<Corpus>> {
    cfg.data
        .corpora
        .iter()
        .map(|(name, path)| load_corpus_file(name, path))
        .collect()
}

fn load_sft(cfg: &RunConfig) -> Result<Vec<SftRecord>> {
    let path = cfg
        .data
        .sft
        .as_ref()
        .ok_or_else(|| Error::Config("an SFT stage is configured but data.sft is not set".into()))?;
    load_sft_records(path)
}

/// Run the configured stages whose kind is in `kinds`, in order.
///
/// Stage initialization follows the stage's `init` field: "scratch" builds
/// a fresh model from `[model]`, "prev" continues from the previous stage
/// in this run (or `init_checkpoint` for the first), and any other value is
/// read as a checkpoint path. Optimizer moments restart at each stage
/// boundary.
pub fn run_pipeline(
    cfg: &RunConfig,
    kinds: &[StageKind],
    out_dir: &Path,
    seed: u64,
    init_checkpoint: Option<&Path>,
    on_step: &mut dyn FnMut(&StageConfig, &StepMetrics),
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let stages: Vec<&StageConfig> = cfg
        .ordered_stages()?
        .into_iter()
        .filter(|s| kinds.contains(&s.kind))
        .collect();
    if stages.is_empty() {
        return Err(Error::Config("no stage matches the requested kinds".into()));
    }

    let corpora = if stages.iter().any(|s| s.kind == StageKind::Pretrain) {
        load_corpora(cfg)?
    } else {
        Vec::new()
    };
    let sft_records = if stages.iter().any(|s| s.kind == StageKind::Sft) {
        load_sft(cfg)?
    } else {
        Vec::new()
    };

    let mut current: Option<(Model<f32>, u64, u64)> = None;
    let mut reports = Vec::new();
    let mut final_checkpoint = None;

    for stage in stages {
        let (model, global_step, tokens_seen) = match stage.init.as_str() {
            "scratch" => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (Model::init(cfg.model.clone(), &mut rng)?, 0, 0)
            }
            "prev" => match current.take() {
                Some(state) => state,
                None => match init_checkpoint {
                    Some(path) => {
                        let ckpt = load_checkpoint::<f32>(path)?;
                        let model = Model::from_params(ckpt.model_cfg, ckpt.params)?;
                        (model, ckpt.global_step, ckpt.tokens_seen)
                    }
                    None => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        (Model::init(cfg.model.clone(), &mut rng)?, 0, 0)
                    }
                },
            },
            path => {
                let ckpt = load_checkpoint::<f32>(Path::new(path))?;
                let model = Model::from_params(ckpt.model_cfg, ckpt.params)?;
                (model, ckpt.global_step, ckpt.tokens_seen)
            }
        };

        let data = match stage.kind {
            StageKind::Pretrain => StageData::Pretrain {
                corpora: corpora.clone(),
            },
            StageKind::Sft => StageData::Sft {
                records: sft_records.clone(),
            },
        };
        let opt = OptimState::new(&model.params);
        let mut lp = TrainLoop::new(
            model,
            opt,
            stage.clone(),
            data,
            seed,
            global_step,
            tokens_seen,
        )?;
        let report = run_stage(&mut lp, Some(out_dir), &mut |m| on_step(stage, m))?;
        reports.push((stage.name.clone(), report));
        final_checkpoint = Some(out_dir.join(format!("{}-final.ckpt", stage.name)));
        current = Some((lp.model, lp.global_step, lp.tokens_seen));
    }

    let (model, global_step, tokens_seen) = current.expect("at least one stage ran");
    Ok(PipelineOutcome {
        final_checkpoint,
        reports,
        model,
        global_step,
        tokens_seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    fn write_config(dir: &Path) -> PathBuf {
        let corpus_path = dir.join("corpus.txt");
        std::fs::write(&corpus_path, synth::synth_text(4000, 3)).unwrap();
        let sft_path = dir.join("sft.jsonl");
        std::fs::write(
            &sft_path,
            synth::sft_records_to_jsonl(&synth::synth_sft_records(24, 4)),
        )
        .unwrap();
        let text = format!(
            r#"
[model]
n_layers = 1
d_model = 16
n_heads = 2
n_experts = 4
n_active = 2
d_expert = 8
rope_base = 10000.0
max_context = 64
vocab = 260
mask_id = 257
eos_id = 256

[data]
sft = "{}"

[data.corpora]
main = "{}"

[stages.1]
name = "pre"
kind = "pretrain"
token_budget = 128
batch_size = 2
l_ctx = 16
init = "scratch"

[stages.2]
name = "tune"
kind = "sft"
token_budget = 64
batch_size = 2
l_ctx = 48
"#,
            sft_path.display(),
            corpus_path.display()
        );
        let cfg_path = dir.join("run.toml");
        std::fs::write(&cfg_path, text).unwrap();
        cfg_path
    }

    #[test]
    fn two_stage_pipeline_runs_and_carries_counters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let cfg = RunConfig::load(&cfg_path, &[]).unwrap();
        let out = dir.path().join("out");
        let mut steps_seen = Vec::new();
        let outcome = run_pipeline(
            &cfg,
            &[StageKind::Pretrain, StageKind::Sft],
            &out,
            5,
            None,
            &mut |_, m| steps_seen.push(m.step),
        )
        .unwrap();

        assert_eq!(outcome.reports.len(), 2);
        assert!(outcome.reports[0].1.tokens >= 128);
        assert!(outcome.reports[1].1.tokens >= 64);
        // Step counter keeps increasing across the stage boundary.
        for w in steps_seen.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert_eq!(outcome.global_step, *steps_seen.last().unwrap());
        assert!(out.join("pre-final.ckpt").exists());
        assert!(out.join("tune-final.ckpt").exists());
        assert_eq!(
            outcome.final_checkpoint.unwrap(),
            out.join("tune-final.ckpt")
        );
    }

    #[test]
    fn kind_filter_selects_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let cfg = RunConfig::load(&cfg_path, &[]).unwrap();
        let out = dir.path().join("out");
        let outcome =
            run_pipeline(&cfg, &[StageKind::Pretrain], &out, 5, None, &mut |_, _| {}).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        assert_eq!(outcome.reports[0].0, "pre");

        let err = run_pipeline(&cfg, &[], &out, 5, None, &mut |_, _| {})
            .err()
            .expect("pipeline must fail");
        assert!(err.to_string().contains("no stage"), "{err}");
    }

    #[test]
    fn sft_only_run_initializes_from_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let cfg = RunConfig::load(&cfg_path, &[]).unwrap();
        let out = dir.path().join("out");
        run_pipeline(&cfg, &[StageKind::Pretrain], &out, 5, None, &mut |_, _| {}).unwrap();

        let pre_ckpt = out.join("pre-final.ckpt");
        let outcome = run_pipeline(
            &cfg,
            &[StageKind::Sft],
            &out,
            5,
            Some(&pre_ckpt),
            &mut |_, _| {},
        )
        .unwrap();
        // Counters continue from the pretraining checkpoint.
        let pre = load_checkpoint::<f32>(&pre_ckpt).unwrap();
        assert!(outcome.global_step > pre.global_step);
    }

    #[test]
    fn missing_corpus_path_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let missing = dir.path().join("nope.txt");
        let cfg = RunConfig::load(
            &cfg_path,
            &[format!("data.corpora.main=\"{}\"", missing.display())],
        )
        .unwrap();
        let err = run_pipeline(
            &cfg,
            &[StageKind::Pretrain],
            &dir.path().join("out"),
            5,
            None,
            &mut |_, _| {},
        )
        .err()
        .expect("pipeline must fail");
        assert!(err.to_string().contains("nope.txt"), "{err}");
    }
}
