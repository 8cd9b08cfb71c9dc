//! `blockdlm` — train, convert, decode, and analyze block-wise diffusion
//! language models from the command line.
//!
//! Every subcommand reads the same flat key-value config (defaults →
//! `--config FILE` → repeated `--set key=value`), so a run is fully
//! described by its config file plus the overrides on the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use blockdlm::attention::{
    bidirectional_layout, block_clean_layout, block_noisy_layout, causal_layout, decode_layout,
    CleanContext,
};
use blockdlm::decoder;
use blockdlm::harness::{
    analyze_profiles, block_sweep_csv, emit_report, eval_generation, eval_likelihood,
    gen_mc_instances, gen_table_csv, mask_sweep_csv, run_convert, run_pretrain_ar,
    sweep_block_sizes, sweep_masking, TrainOutcome, EVAL_SEED_OFFSET,
};
use blockdlm::model::load_checkpoint;
use blockdlm::{ExperimentConfig, MaskMode, TrainState, Vocabulary};

#[derive(Parser)]
#[command(name = "blockdlm", version, about = "Block-wise diffusion LM lab")]
struct Cli {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config resolution shared by every subcommand: defaults, then the file,
/// then `--set` overrides in order, then the convenience flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file (every key optional).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set steps=200`. Repeatable; the
    /// keys are exactly those accepted in the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set run_id=...`.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Shorthand for `--set seed=...`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set output_root=...` (else $BLOCKDLM_OUT, else ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an autoregressive model from scratch.
    PretrainAr,
    /// Continue an AR checkpoint with the denoising objective under the
    /// configured attention variant and masking schedule.
    Convert {
        /// AR checkpoint to start from.
        #[arg(long, value_name = "CKPT")]
        from: PathBuf,
    },
    /// Generate from a checkpoint and print the decoded text.
    Decode {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Prompt text (bytes are the token alphabet).
        #[arg(long)]
        prompt: String,
        /// Right-align the prompt to this width with spaces, matching how
        /// task prompts are packed for training. 0 uses the prompt as-is.
        #[arg(long, default_value_t = 0, value_name = "WIDTH")]
        pad_to: usize,
        /// Generation block width; defaults to the first `eval_block_sizes`.
        #[arg(long, value_name = "N")]
        block: Option<usize>,
        /// Confidence threshold: a value in [0,1], or `off` to commit
        /// exactly one token per forward. Defaults to `off`.
        #[arg(long, value_name = "TAU")]
        tau: Option<String>,
        /// Generation budget; defaults to the config's `max_new_tokens`.
        #[arg(long, value_name = "N")]
        max_new: Option<usize>,
        /// Write the decode trace (per-position commit record) as JSON.
        #[arg(long, value_name = "FILE")]
        trace_out: Option<PathBuf>,
    },
    /// Exact-match generation accuracy over the configured tasks, block
    /// sizes, and threshold grid. Prints the trade-off table as CSV.
    EvalGen {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Also write the table to this file.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Multiple-choice accuracy by Monte-Carlo denoising likelihood.
    EvalMc {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
    },
    /// Convert once per training block size, then score every
    /// (train block, eval block) pair. Prints the matrix as long-form CSV.
    SweepBlocks {
        /// AR checkpoint each conversion starts from.
        #[arg(long, value_name = "CKPT")]
        from: PathBuf,
        /// Comma-separated training block sizes.
        #[arg(long, value_delimiter = ',', value_name = "N,..")]
        train_sizes: Vec<usize>,
        /// Comma-separated evaluation block sizes.
        #[arg(long, value_delimiter = ',', value_name = "N,..")]
        eval_sizes: Vec<usize>,
        /// Threshold used for every cell (`off` or a value in [0,1]).
        #[arg(long, default_value = "off", value_name = "TAU")]
        tau: String,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Convert once per masking scheme, then sweep the threshold grid:
    /// accuracy versus parallelism per scheme, printed as CSV.
    SweepMasking {
        /// AR checkpoint each conversion starts from.
        #[arg(long, value_name = "CKPT")]
        from: PathBuf,
        /// Comma-separated schemes: `uniform`, `right_to_left`, or
        /// `posdep:<half_life>` (e.g. `posdep:0.1`).
        #[arg(long, value_delimiter = ',', value_name = "SCHEME,..")]
        variants: Vec<String>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Per-position loss profile, in-block fold, decode-step profile, and
    /// loss autocorrelation for a checkpoint.
    Analyze {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Write per_position.csv, in_block.csv, decode_steps.csv, and
        /// autocorrelation.csv into this directory.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Split a finished run's metrics.csv into per-metric tables plus a
    /// JSON summary under `<run>/report/`.
    Report {
        #[arg(long, value_name = "DIR")]
        run_dir: PathBuf,
    },
    /// Print an attention layout as an ASCII grid (# visible, . hidden).
    Layout {
        /// causal | bidirectional | block_noisy | block_clean | decode
        #[arg(long, default_value = "block_clean")]
        kind: String,
        /// Sequence length (for `decode`: tokens already in the cache).
        #[arg(long, default_value_t = 16)]
        rows: usize,
        /// Block width for the block-wise and decode layouts.
        #[arg(long, default_value_t = 4)]
        block: usize,
        /// Clean-context rule for block_clean: block_causal | token_causal.
        #[arg(long, default_value = "block_causal")]
        clean_context: String,
        /// Also write the grid as a PGM image.
        #[arg(long, value_name = "FILE")]
        pgm: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let cfg = resolve_config(&cli.cfg)?;
    match cli.cmd {
        Cmd::PretrainAr => {
            cfg.validate().map_err(anyhow::Error::from)?;
            let outcome = run_pretrain_ar(&cfg)?;
            print_outcome("pretrain-ar", &outcome);
        }
        Cmd::Convert { from } => {
            cfg.validate().map_err(anyhow::Error::from)?;
            let outcome = run_convert(&cfg, &from)?;
            print_outcome("convert", &outcome);
        }
        Cmd::Decode {
            checkpoint,
            prompt,
            pad_to,
            block,
            tau,
            max_new,
            trace_out,
        } => cmd_decode(&cfg, &checkpoint, &prompt, pad_to, block, tau, max_new, trace_out)?,
        Cmd::EvalGen { checkpoint, out } => cmd_eval_gen(&cfg, &checkpoint, out)?,
        Cmd::EvalMc { checkpoint } => cmd_eval_mc(&cfg, &checkpoint)?,
        Cmd::SweepBlocks {
            from,
            train_sizes,
            eval_sizes,
            tau,
            out,
        } => {
            cfg.validate().map_err(anyhow::Error::from)?;
            let tau = parse_tau_arg(&tau)?;
            let cells = sweep_block_sizes(&cfg, &from, &train_sizes, &eval_sizes, tau)?;
            emit(&block_sweep_csv(&cells), out.as_deref())?;
        }
        Cmd::SweepMasking { from, variants, out } => {
            cfg.validate().map_err(anyhow::Error::from)?;
            let variants = variants
                .iter()
                .map(|s| parse_variant(s))
                .collect::<Result<Vec<_>>>()?;
            let rows = sweep_masking(&cfg, &from, &variants, &cfg.tau_grid)?;
            emit(&mask_sweep_csv(&rows), out.as_deref())?;
        }
        Cmd::Analyze { checkpoint, out_dir } => cmd_analyze(&cfg, &checkpoint, out_dir)?,
        Cmd::Report { run_dir } => {
            for path in emit_report(&run_dir)? {
                out(path.display());
            }
        }
        Cmd::Layout {
            kind,
            rows,
            block,
            clean_context,
            pgm,
        } => cmd_layout(&kind, rows, block, &clean_context, pgm)?,
    }
    Ok(())
}

fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for pair in &args.sets {
        let (key, value) = pair
            .split_once('=')
            .with_context(|| format!("--set needs KEY=VALUE, got '{pair}'"))?;
        cfg.set_key(key.trim(), value.trim())?;
    }
    if let Some(run_id) = &args.run_id {
        cfg.run_id = run_id.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(root) = &args.output_root {
        cfg.output_root = Some(root.clone());
    }
    Ok(cfg)
}

/// Writes to stdout, exiting quietly if the reader went away (e.g. the
/// output was piped into `head`).
fn out(text: impl std::fmt::Display) {
    use std::io::Write;
    let mut stdout = std::io::stdout();
    if writeln!(stdout, "{text}").and_then(|()| stdout.flush()).is_err() {
        std::process::exit(0);
    }
}

fn print_outcome(what: &str, outcome: &TrainOutcome) {
    out(format_args!("{what}: {} steps, final loss {:.6}", outcome.steps_run, outcome.final_loss));
    out(format_args!("run dir:    {}", outcome.run_dir.display()));
    out(format_args!("checkpoint: {}", outcome.final_checkpoint.display()));
    for (step, path) in &outcome.checkpoints {
        out(format_args!("  step {:>6}: {}", step, path.display()));
    }
}

/// `off` → no threshold (one commit per forward); otherwise a value in [0,1].
fn parse_tau_arg(s: &str) -> Result<Option<f64>> {
    if s == "off" {
        return Ok(None);
    }
    let v: f64 = s.parse().with_context(|| format!("bad threshold '{s}'"))?;
    if !(0.0..=1.0).contains(&v) {
        bail!("threshold {v} outside [0, 1]");
    }
    Ok(Some(v))
}

/// `uniform`, `right_to_left`, or `posdep:<half_life>` (`posdep` alone
/// means the uniform limit λ = inf).
fn parse_variant(s: &str) -> Result<(MaskMode, f64)> {
    match s {
        "uniform" => Ok((MaskMode::Uniform, f64::INFINITY)),
        "right_to_left" => Ok((MaskMode::RightToLeft, f64::INFINITY)),
        "posdep" => Ok((MaskMode::PositionDependent, f64::INFINITY)),
        other => match other.strip_prefix("posdep:") {
            Some(hl) => {
                let hl: f64 = hl.parse().with_context(|| format!("bad half-life in '{other}'"))?;
                if !(hl > 0.0) {
                    bail!("half-life must be positive, got {hl}");
                }
                Ok((MaskMode::PositionDependent, hl))
            }
            None => bail!("unknown masking scheme '{other}' (uniform, right_to_left, posdep:<hl>)"),
        },
    }
}

/// Prints a table to stdout and optionally saves it.
fn emit(csv: &str, save: Option<&Path>) -> Result<()> {
    out(csv.trim_end_matches('\n'));
    if let Some(path) = save {
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    prompt: &str,
    pad_to: usize,
    block: Option<usize>,
    tau: Option<String>,
    max_new: Option<usize>,
    trace_out: Option<PathBuf>,
) -> Result<()> {
    let state: TrainState<f32> = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::new();
    let text = if pad_to > 0 {
        format!("{prompt:>pad_to$}")
    } else {
        prompt.to_string()
    };
    let tokens = vocab.tokenize(&text);

    let eval_block = block.unwrap_or_else(|| cfg.eval_block_sizes.first().copied().unwrap_or(8));
    let tau = match tau {
        Some(s) => parse_tau_arg(&s)?,
        None => None,
    };
    let mut decode_cfg = cfg.decode_config(eval_block, tau);
    if let Some(n) = max_new {
        decode_cfg.max_new_tokens = n;
    }

    let outcome = decoder::generate(&state.params, &tokens, decode_cfg)?;
    match vocab.detokenize_until_eos(&outcome.tokens) {
        Ok(text) => out(text),
        // A weak model can emit specials; fall back to raw ids.
        Err(_) => out(format_args!("{:?}", outcome.tokens)),
    }
    let t = &outcome.trace;
    eprintln!(
        "decoded {} tokens in {} forwards (+{} refresh): {:.3} tokens/forward",
        t.decoded_tokens, t.nfe, t.refresh_forwards, t.tpf
    );
    if let Some(path) = trace_out {
        let json = serde_json::to_string_pretty(t)?;
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_eval_gen(cfg: &ExperimentConfig, checkpoint: &Path, out: Option<PathBuf>) -> Result<()> {
    cfg.validate().map_err(anyhow::Error::from)?;
    let tasks = cfg.task.kinds().to_vec();
    if tasks.is_empty() {
        bail!("eval-gen needs synthetic tasks (set `task = modular_add+copy`)");
    }
    let state: TrainState<f32> = load_checkpoint(checkpoint)?;
    let mut rows = Vec::new();
    for &eval_block in &cfg.eval_block_sizes {
        rows.extend(eval_generation(&state.params, &tasks, cfg, eval_block, &cfg.tau_grid)?);
    }
    emit(&gen_table_csv(&rows), out.as_deref())
}

fn cmd_eval_mc(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    cfg.validate().map_err(anyhow::Error::from)?;
    let state: TrainState<f32> = load_checkpoint(checkpoint)?;
    let instances = gen_mc_instances(cfg.seed.wrapping_add(EVAL_SEED_OFFSET), cfg.eval_instances);
    let eval = eval_likelihood(
        &state.params,
        &instances,
        cfg.attention,
        &cfg.mask_schedule()?,
        cfg.seq_len,
        cfg.mc_samples,
        cfg.seed,
    )?;
    out(format_args!("mc_accuracy {} over {} instances ({} noise draws each)", eval.accuracy, eval.n, cfg.mc_samples));
    Ok(())
}

fn cmd_analyze(cfg: &ExperimentConfig, checkpoint: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    cfg.validate().map_err(anyhow::Error::from)?;
    let report = analyze_profiles(checkpoint, cfg)?;

    let fold = &report.loss.in_block;
    out(format_args!("block size {}, profiled from position {}", report.loss.block_size, report.skip));
    out("in-block loss profile:");
    for (offset, v) in fold.iter().enumerate() {
        out(format_args!("  +{offset}: {v:.4}"));
    }
    out("decode-step profile:");
    for (offset, v) in report.decode_steps.iter().enumerate() {
        out(format_args!("  +{offset}: {v:.2}"));
    }
    if let Some((lag, v)) = report
        .autocorr
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.total_cmp(b.1))
    {
        out(format_args!("loss autocorrelation peaks at lag {lag} ({v:.3})"));
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut per_position = String::from("position,count,mean_nll\n");
        for (i, (v, c)) in report.loss.per_position.iter().zip(&report.loss.counts).enumerate() {
            per_position.push_str(&format!("{i},{c},{v}\n"));
        }
        fs::write(dir.join("per_position.csv"), per_position)?;

        let mut in_block = String::from("offset,mean_nll\n");
        for (i, v) in fold.iter().enumerate() {
            in_block.push_str(&format!("{i},{v}\n"));
        }
        fs::write(dir.join("in_block.csv"), in_block)?;

        let mut steps = String::from("offset,mean_step\n");
        for (i, v) in report.decode_steps.iter().enumerate() {
            steps.push_str(&format!("{i},{v}\n"));
        }
        fs::write(dir.join("decode_steps.csv"), steps)?;

        let mut ac = String::from("lag,value\n");
        for (i, v) in report.autocorr.iter().enumerate() {
            ac.push_str(&format!("{i},{v}\n"));
        }
        fs::write(dir.join("autocorrelation.csv"), ac)?;
        eprintln!("wrote 4 tables to {}", dir.display());
    }
    Ok(())
}

fn cmd_layout(kind: &str, rows: usize, block: usize, clean_context: &str, pgm: Option<PathBuf>) -> Result<()> {
    let clean_ctx = match clean_context {
        "block_causal" => CleanContext::BlockCausal,
        "token_causal" => CleanContext::TokenCausal,
        other => bail!("unknown clean context '{other}' (block_causal or token_causal)"),
    };
    let layout = match kind {
        "causal" => causal_layout(rows)?,
        "bidirectional" => bidirectional_layout(rows)?,
        "block_noisy" => block_noisy_layout(rows, block)?,
        "block_clean" => block_clean_layout(rows, block, clean_ctx)?,
        "decode" => decode_layout(rows, block)?,
        other => bail!(
            "unknown layout '{other}' (causal, bidirectional, block_noisy, block_clean, decode)"
        ),
    };
    out(layout.render_ascii().trim_end_matches('\n'));
    if let Some(path) = pgm {
        let mut buf = Vec::new();
        layout.write_pgm(&mut buf)?;
        fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
