//! `mdlm` — command-line front end for the masked diffusion language model:
//! staged training, supervised fine-tuning, sampling, bound evaluation,
//! expert-routing reports and gradient checking.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mdlm::config::{RunConfig, SamplerSettings};
use mdlm::data::{load_corpus_file, Vocab};
use mdlm::error::{Error, Result};
use mdlm::model::{Model, ModelConfig};
use mdlm::objectives::{aux_losses_graph, diffusion_loss_graph, total_loss_graph};
use mdlm::pipeline::run_pipeline;
use mdlm::sampler::{generate_semi_ar, truncate_at_eos};
use mdlm::tensor::{grad_check_sampled, Tape, Tensor, VarId};
use mdlm::trainer::{evaluate_bound, heldout_sequences, load_checkpoint, StageKind};

#[derive(Parser)]
#[command(name = "mdlm", version, about = "Masked diffusion language model")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, env = "MDLM_CONFIG", value_name = "PATH")]
    config: Option<PathBuf>,

    /// Config override, `key.path=value`; repeatable, applied in order.
    #[arg(
        short = 'o',
        long = "override",
        global = true,
        value_name = "KEY.PATH=VALUE"
    )]
    overrides: Vec<String>,

    /// Base seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured pretraining stages.
    Train(TrainArgs),
    /// Run the configured supervised fine-tuning stages.
    Sft(TrainArgs),
    /// Generate text from a checkpoint.
    Sample(SampleArgs),
    /// Estimate the per-token negative log-likelihood bound on held-out text.
    Eval(EvalArgs),
    /// Report per-layer expert routing statistics over a corpus sample.
    RouteStats(RouteStatsArgs),
    /// Check model gradients against finite differences in 64-bit precision.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory for checkpoints, metrics and the effective config.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Checkpoint to initialize the first stage from (used when that
    /// stage's `init` is "prev").
    #[arg(long, value_name = "CKPT")]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Model checkpoint to sample from.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Prompt text; empty for unconditional generation.
    #[arg(long, default_value = "")]
    prompt: String,
    /// Generation length in tokens.
    #[arg(long, value_name = "N")]
    len: Option<usize>,
    /// Block length for semi-autoregressive decoding.
    #[arg(long, value_name = "N")]
    block: Option<usize>,
    /// Denoising steps per block (default: one per block position).
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Argmax decoding instead of sampling.
    #[arg(long)]
    greedy: bool,
    #[arg(long, value_name = "T")]
    temperature: Option<f64>,
    /// Remasking strategy: "low-confidence" or "none".
    #[arg(long, value_name = "STRATEGY")]
    remask: Option<String>,
    /// Decode the whole sequence as one block.
    #[arg(long)]
    vanilla: bool,
    /// Directory to echo the effective sampler config into.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Held-out text file; defaults to `data.heldout` from the config.
    #[arg(long, value_name = "PATH")]
    heldout: Option<PathBuf>,
    /// Monte-Carlo draws per sequence.
    #[arg(long, default_value_t = 16, value_name = "N")]
    n_mc: usize,
    /// Evaluation sequence length (default: the model's max context,
    /// capped at 256).
    #[arg(long, value_name = "N")]
    l_ctx: Option<usize>,
    #[arg(long, default_value_t = 64, value_name = "N")]
    max_seqs: usize,
    #[arg(long, default_value_t = 1e-3)]
    t_floor: f64,
}

#[derive(Args)]
struct RouteStatsArgs {
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Text file to sample routing over; defaults to the config's first
    /// corpus.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Number of corpus tokens to route.
    #[arg(long, default_value_t = 512, value_name = "N")]
    max_tokens: usize,
    /// Directory for the plot-ready column file `route-stats.tsv`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Number of model seeds to check.
    #[arg(long, default_value_t = 3, value_name = "N")]
    seeds: u64,
    /// Random coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 2, value_name = "N")]
    coords: usize,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match &cli.cmd {
        Cmd::Train(args) => cmd_train(&cli, args, StageKind::Pretrain, seed),
        Cmd::Sft(args) => cmd_train(&cli, args, StageKind::Sft, seed),
        Cmd::Sample(args) => cmd_sample(&cli, args, seed),
        Cmd::Eval(args) => cmd_eval(&cli, args, seed),
        Cmd::RouteStats(args) => cmd_route_stats(&cli, args),
        Cmd::GradCheck(args) => cmd_grad_check(args, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("no config file (use --config or MDLM_CONFIG)".into()))?;
    RunConfig::load(path, &cli.overrides)
}

fn write_effective_config(dir: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("effective-config.toml"), text)?;
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs, kind: StageKind, seed: u64) -> Result<()> {
    let cfg = load_config(cli)?;
    write_effective_config(&args.out, &cfg.to_toml_string()?)?;
    let outcome = run_pipeline(
        &cfg,
        &[kind],
        &args.out,
        seed,
        args.init.as_deref(),
        &mut |stage, m| {
            if stage.log_every > 0 && m.stage_step % stage.log_every == 0 {
                println!(
                    "[{}] step {} tokens {} lr {:.3e} task {:.4} lb {:.4} z {:.4} total {:.4} |g| {:.3}",
                    stage.name, m.step, m.tokens_seen, m.lr, m.task, m.lb, m.z, m.total, m.grad_norm
                );
            }
        },
    )?;
    for (name, report) in &outcome.reports {
        println!(
            "stage {name}: {} steps, {} tokens",
            report.steps, report.tokens
        );
    }
    if let Some(path) = &outcome.final_checkpoint {
        println!("final checkpoint: {}", path.display());
    }
    Ok(())
}

/// Sampler settings from config defaults plus command-line flags.
fn resolve_sampler(cli: &Cli, args: &SampleArgs) -> Result<SamplerSettings> {
    let mut s = match &cli.config {
        Some(_) => load_config(cli)?.sampler,
        None => SamplerSettings::default(),
    };
    if let Some(len) = args.len {
        s.gen_len = len;
    }
    if let Some(block) = args.block {
        s.block_size = block;
    }
    if args.vanilla {
        s.block_size = s.gen_len;
    }
    if let Some(steps) = args.steps {
        s.steps_per_block = Some(steps);
    }
    if args.greedy {
        s.greedy = true;
    }
    if let Some(t) = args.temperature {
        s.temperature = t;
    }
    if let Some(r) = &args.remask {
        s.remask = r.clone();
    }
    Ok(s)
}

/// Wrapper so the sampler echo is a valid `[sampler]` config section.
#[derive(serde::Serialize)]
struct SamplerEcho<'a> {
    sampler: &'a SamplerSettings,
}

fn cmd_sample(cli: &Cli, args: &SampleArgs, seed: u64) -> Result<()> {
    let settings = resolve_sampler(cli, args)?;
    let plan = settings.plan(seed)?;
    if let Some(dir) = &args.out {
        let text = toml::to_string_pretty(&SamplerEcho { sampler: &settings })
            .map_err(|e| Error::Config(format!("config echo: {e}")))?;
        write_effective_config(dir, &text)?;
    }

    let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
    let model = Model::from_params(ckpt.model_cfg, ckpt.params)?;
    let prompt = Vocab::encode(&args.prompt);
    let out = generate_semi_ar(&prompt, &plan, &model, model.cfg.mask_id)?;
    let text = Vocab::decode(&truncate_at_eos(&out, model.cfg.eos_id));
    println!("{text}");
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs, seed: u64) -> Result<()> {
    if args.n_mc == 0 {
        return Err(Error::invalid("n_mc must be positive"));
    }
    let heldout = match &args.heldout {
        Some(p) => p.clone(),
        None => load_config(cli)?
            .data
            .heldout
            .ok_or_else(|| Error::Config("no held-out data (--heldout or data.heldout)".into()))?,
    };
    let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
    let model = Model::from_params(ckpt.model_cfg, ckpt.params)?;
    let corpus = load_corpus_file("heldout", &heldout)?;
    let l_ctx = args.l_ctx.unwrap_or(model.cfg.max_context.min(256));
    if l_ctx == 0 || l_ctx > model.cfg.max_context {
        return Err(Error::invalid(format!(
            "l_ctx {l_ctx} outside [1, {}]",
            model.cfg.max_context
        )));
    }
    let seqs = heldout_sequences(&corpus, l_ctx, args.max_seqs);
    if seqs.is_empty() {
        return Err(Error::Data(format!(
            "held-out corpus shorter than one {l_ctx}-token sequence"
        )));
    }
    let est = evaluate_bound(&model, &seqs, args.n_mc, seed, args.t_floor)?;
    println!(
        "bound: {:.4} nats/token (stderr {:.4}, {} sequences x {} draws)",
        est.per_token,
        est.stderr,
        seqs.len(),
        args.n_mc
    );
    Ok(())
}

fn cmd_route_stats(cli: &Cli, args: &RouteStatsArgs) -> Result<()> {
    let corpus = match &args.corpus {
        Some(p) => load_corpus_file("sample", p)?,
        None => {
            let cfg = load_config(cli)?;
            let (name, path) = cfg
                .data
                .corpora
                .iter()
                .next()
                .ok_or_else(|| Error::Config("no corpus (--corpus or data.corpora)".into()))?;
            load_corpus_file(name, path)?
        }
    };
    if args.max_tokens == 0 {
        return Err(Error::invalid("max_tokens must be positive"));
    }
    let ckpt = load_checkpoint::<f32>(&args.checkpoint)?;
    let model = Model::from_params(ckpt.model_cfg, ckpt.params)?;
    let cfg = &model.cfg;

    // Route the sample in max-context windows, accumulating per layer.
    let n = cfg.n_experts;
    let mut counts = vec![vec![0u64; n]; cfg.n_layers];
    let mut p_sums = vec![vec![0.0f64; n]; cfg.n_layers];
    let mut total_tokens = 0u64;
    let tokens: Vec<u32> = corpus.tokens.iter().copied().take(args.max_tokens).collect();
    if tokens.is_empty() {
        return Err(Error::Data("empty routing sample".into()));
    }
    for chunk in tokens.chunks(cfg.max_context) {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, chunk)?;
        for (l, layer) in out.routing.iter().enumerate() {
            for sel in &layer.decision.indices {
                for &e in sel {
                    counts[l][e] += 1;
                }
            }
            for row in &layer.decision.probs {
                for (e, &p) in row.iter().enumerate() {
                    p_sums[l][e] += p;
                }
            }
        }
        total_tokens += chunk.len() as u64;
    }

    let uniform = cfg.n_active as f64 / n as f64;
    let mut columns = String::from("layer\texpert\tf\tp\n");
    for l in 0..cfg.n_layers {
        println!("layer {l} ({} tokens, k/N = {uniform:.4}):", total_tokens);
        println!("  expert        f        P");
        let f: Vec<f64> = counts[l]
            .iter()
            .map(|&c| c as f64 / total_tokens as f64)
            .collect();
        let p: Vec<f64> = p_sums[l].iter().map(|&s| s / total_tokens as f64).collect();
        for e in 0..n {
            println!("  {e:>6} {:>8.4} {:>8.4}", f[e], p[e]);
            columns.push_str(&format!("{l}\t{e}\t{:.6}\t{:.6}\n", f[e], p[e]));
        }
        let max_f = f.iter().cloned().fold(0.0, f64::max);
        let mean_f: f64 = f.iter().sum::<f64>() / n as f64;
        println!(
            "  sums: sum f = {:.4}, sum P = {:.4}; max/mean f = {:.3}",
            f.iter().sum::<f64>(),
            p.iter().sum::<f64>(),
            max_f / mean_f
        );
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("route-stats.tsv"), columns)?;
    }
    Ok(())
}

fn grad_check_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        n_experts: 8,
        n_active: 2,
        d_expert: 16,
        rope_base: 10_000.0,
        max_context: 32,
        vocab: 12,
        mask_id: 10,
        eos_id: 11,
    }
}

fn cmd_grad_check(args: &GradCheckArgs, seed: u64) -> Result<()> {
    if args.seeds == 0 || args.coords == 0 {
        return Err(Error::invalid("seeds and coords must be positive"));
    }
    let cfg = grad_check_config();
    let targets = [1u32, 2, 3, 4, 5, 6, 7, 8];
    let noisy = [1u32, 10, 3, 10, 10, 6, 10, 8];
    let mut worst_overall = 0.0f64;
    for i in 0..args.seeds {
        let model_seed = seed.wrapping_add(i);
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
        let mut model: Model<f64> = Model::init(cfg.clone(), &mut rng)?;
        // Break the zero-output-head degeneracy and strengthen the router
        // so top-k selections are stable under probe perturbations.
        *model.params.get_mut("out_proj").unwrap() =
            Tensor::randn(&[cfg.d_model, cfg.vocab], 0.3, &mut rng);
        for l in 0..cfg.n_layers {
            *model.params.get_mut(&format!("l{l}.router")).unwrap() =
                Tensor::randn(&[cfg.d_model, cfg.n_experts], 0.8, &mut rng);
        }
        let f = |tape: &mut Tape<f64>, ids: &[VarId]| {
            let out = model.forward_with_leaves(tape, &noisy, ids.to_vec())?;
            let task =
                diffusion_loss_graph(tape, out.logits, &targets, &noisy, 0.6, cfg.mask_id)?;
            let (lb, z) = aux_losses_graph(tape, &out.routing)?;
            total_loss_graph(tape, task, lb, z, 0.01, 0.001)
        };
        let params: Vec<Tensor<f64>> = model.params.tensors().to_vec();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(model_seed ^ 0x9e3779b9);
        let worst = grad_check_sampled(&f, &params, 1e-5, args.coords, &mut probe_rng)?;
        println!("seed {model_seed}: worst relative error {worst:.3e}");
        worst_overall = worst_overall.max(worst);
    }
    if worst_overall < args.tolerance {
        println!("PASS: worst relative error {worst_overall:.3e} < {:.1e}", args.tolerance);
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed: worst relative error {worst_overall:.3e} >= {:.1e}",
            args.tolerance
        )))
    }
}
