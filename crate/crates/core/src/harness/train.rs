//! Training-run recipes: AR pretraining and AR-to-dLM conversion.
//!
//! Both drive the same deterministic loop — batches come from the stream by
//! index, every step logs to `metrics.csv`, checkpoints land under
//! `checkpoints/` — and differ only in the objective and where the initial
//! parameters come from. Conversion loads an AR checkpoint, keeps every
//! weight (no re-initialization), and continues with the denoising loss
//! under the configured attention variant; optimizer moments and the
//! learning-rate schedule start fresh for the new run.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use super::config::{CheckpointSchedule, ExperimentConfig, TaskSpec};
use super::metrics::{MetricsWriter, RunDir};
use crate::corpus::{batch_stream, gen_text_corpus, BatchStream, StreamSource, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    load_checkpoint, save_checkpoint, weight_drift, ModelParams, Objective, TrainState,
};

/// Text corpora are a fixed dataset, not part of a run's randomness: every
/// generated corpus of a given size has identical content.
pub(crate) const TEXT_CORPUS_SEED: u64 = 11;

/// Trailing window used for the reported final loss and early stopping.
const LOSS_WINDOW: usize = 20;

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// `checkpoints/final.ckpt`, always written.
    pub final_checkpoint: PathBuf,
    /// Scheduled saves as (step, path), in step order.
    pub checkpoints: Vec<(usize, PathBuf)>,
    /// Mean train loss over the trailing window.
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Log-spaced checkpoint steps `{S/16, S/8, S/4, S/2, S}`, deduplicated and
/// clipped to valid steps.
pub fn geometric_schedule(total_steps: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = [16, 8, 4, 2, 1]
        .iter()
        .map(|d| total_steps / d)
        .filter(|&s| s > 0)
        .collect();
    steps.dedup();
    steps
}

/// Resolves the training stream for `cfg`, generating a text corpus into
/// the run directory when one is needed but not supplied.
pub fn resolve_stream(cfg: &ExperimentConfig, dir: &RunDir) -> Result<BatchStream> {
    let vocab = Vocabulary::new();
    let source = match &cfg.task {
        TaskSpec::Synthetic(kinds) => StreamSource::Synthetic {
            kinds: kinds.clone(),
        },
        TaskSpec::Text => {
            let path = match &cfg.text_path {
                Some(path) => path.clone(),
                None => {
                    let path = dir.file("corpus.txt");
                    std::fs::write(&path, gen_text_corpus(TEXT_CORPUS_SEED, cfg.text_bytes))?;
                    path
                }
            };
            StreamSource::File(path)
        }
    };
    batch_stream(
        &source,
        &vocab,
        cfg.seq_len,
        cfg.train_block_size,
        cfg.batch_size,
        cfg.seed,
    )
}

/// Pretrains from scratch with the next-token objective. Stops early once
/// the trailing mean loss reaches `target_loss`, if set.
pub fn run_pretrain_ar(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let state = TrainState::<f32>::new(&cfg.model_config(), cfg.optim_config(), cfg.seed)?;
    train_run(cfg, state, Objective::Ar, None)
}

/// Continues training from an AR checkpoint with the denoising objective
/// under the configured attention variant and masking schedule.
pub fn run_convert(cfg: &ExperimentConfig, ar_checkpoint: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loaded: TrainState<f32> = load_checkpoint(ar_checkpoint)?;
    let mut params = loaded.params;
    // The prediction-offset convention is a property of the conversion, not
    // of the AR initialization; everything else must match.
    params.config.token_shift = cfg.token_shift;
    if params.config != cfg.model_config() {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match the config's {:?}",
            params.config,
            cfg.model_config()
        )));
    }
    let reference = params.clone();
    let state = TrainState::from_params(params, cfg.optim_config(), cfg.seed)?;
    let objective = Objective::Dlm {
        kind: cfg.attention,
        schedule: cfg.mask_schedule()?,
        clean_ctx: cfg.clean_context,
    };
    train_run(cfg, state, objective, Some(reference))
}

fn train_run(
    cfg: &ExperimentConfig,
    mut state: TrainState<f32>,
    objective: Objective,
    drift_reference: Option<ModelParams<f32>>,
) -> Result<TrainOutcome> {
    let vocab = Vocabulary::new();
    let dir = RunDir::create(cfg)?;
    let ckpt_dir = dir.subdir("checkpoints")?;
    let mut writer = MetricsWriter::create(&dir.file("metrics.csv"), &cfg.run_id)?;
    let stream = resolve_stream(cfg, &dir)?;

    let save_steps = match cfg.checkpoint_schedule {
        CheckpointSchedule::Final => vec![cfg.steps],
        CheckpointSchedule::Geometric => geometric_schedule(cfg.steps),
    };

    let mut recent: VecDeque<f64> = VecDeque::with_capacity(LOSS_WINDOW);
    let mut checkpoints: Vec<(usize, PathBuf)> = Vec::new();
    let record_drift = |writer: &mut MetricsWriter,
                            step: usize,
                            params: &ModelParams<f32>|
     -> Result<()> {
        let Some(reference) = &drift_reference else {
            return Ok(());
        };
        let report = weight_drift(reference, params)?;
        writer.scalar(step, "drift/overall_mean", report.overall_mean)?;
        writer.scalar(step, "drift/attn_mean", report.attn_mean)?;
        writer.scalar(step, "drift/ffn_mean", report.ffn_mean)?;
        for (name, value) in &report.per_tensor {
            writer.scalar(step, &format!("drift/tensor/{name}"), *value)?;
        }
        Ok(())
    };

    for i in 0..cfg.steps {
        let batch = stream.batch_at(i as u64)?;
        let stats = crate::model::train_step(&mut state, &batch, &objective, &vocab)?;
        writer.scalar(state.step, "train_loss", stats.loss)?;
        writer.scalar(state.step, "grad_norm", stats.grad_norm)?;
        writer.scalar(state.step, "lr", stats.lr)?;
        if stats.skipped {
            writer.scalar(state.step, "skipped_step", 1.0)?;
        }

        if recent.len() == LOSS_WINDOW {
            recent.pop_front();
        }
        recent.push_back(stats.loss);

        if save_steps.contains(&state.step) {
            let path = ckpt_dir.join(format!("step_{:06}.ckpt", state.step));
            save_checkpoint(&state, &path)?;
            record_drift(&mut writer, state.step, &state.params)?;
            checkpoints.push((state.step, path));
        }

        if let Some(target) = cfg.target_loss {
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            if recent.len() == LOSS_WINDOW.min(cfg.steps) && mean <= target {
                log::info!(
                    "run {}: trailing loss {mean:.4} reached target {target} at step {}",
                    cfg.run_id,
                    state.step
                );
                break;
            }
        }
    }

    let final_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    let final_path = ckpt_dir.join("final.ckpt");
    save_checkpoint(&state, &final_path)?;
    record_drift(&mut writer, state.step, &state.params)?;
    writer.scalar(state.step, "final_loss", final_loss)?;
    writer.finish()?;

    Ok(TrainOutcome {
        run_dir: dir.path,
        final_checkpoint: final_path,
        checkpoints,
        final_loss,
        steps_run: state.step,
    })
}
