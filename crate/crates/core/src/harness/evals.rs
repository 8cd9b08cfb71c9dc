//! Evaluation drivers: exact-match generation accuracy over the synthetic
//! tasks (with parallelism accounting) and Monte-Carlo likelihood scoring of
//! multiple-choice instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use crate::attention::LayoutKind;
use crate::corpus::{
    check_completion, gen_synthetic_at, pack_task, TaskInstance, TaskKind, Vocabulary,
    PROMPT_WIDTH,
};
use crate::decoder::{generate, DecodeConfig, DecodeTrace};
use crate::error::{Error, Result};
use crate::masking::{corrupt, sample_noise_level, MaskSchedule};
use crate::model::{dlm_loss, ModelParams, Scalar};

/// Keeps evaluation instances off the training stream, which draws from the
/// same generator with the run seed itself.
/// Added to a run seed so evaluation instances never collide with the
/// training stream drawn from the same seed.
pub const EVAL_SEED_OFFSET: u64 = 0x45564131;

/// Aggregates for one (task, decode-setting) cell.
#[derive(Debug, Clone)]
pub struct TaskEval {
    pub accuracy: f64,
    pub mean_tpf: f64,
    pub mean_nfe: f64,
    pub mean_refresh: f64,
    pub n: usize,
    pub traces: Vec<DecodeTrace>,
}

/// Decodes `n_instances` fresh instances of `kind` and scores them with the
/// exact-rule checker. The prompt is the instance's padded prompt region;
/// everything after it is the model's to produce, eos included.
pub fn eval_task_generation<F: Scalar>(
    params: &ModelParams<F>,
    kind: TaskKind,
    n_instances: usize,
    seed: u64,
    decode_cfg: DecodeConfig,
) -> Result<TaskEval> {
    if n_instances == 0 {
        return Err(Error::Config("n_instances must be positive".into()));
    }
    let vocab = Vocabulary::new();
    let eval_seed = seed.wrapping_add(EVAL_SEED_OFFSET);
    let mut correct = 0usize;
    let (mut tpf_sum, mut nfe_sum, mut refresh_sum) = (0.0f64, 0.0f64, 0.0f64);
    let mut traces = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let inst = gen_synthetic_at(kind, eval_seed, i as u64);
        let prompt = vocab.tokenize(&format!("{:>width$}", inst.prompt, width = PROMPT_WIDTH));
        let out = generate(params, &prompt, decode_cfg)?;
        if let Ok(text) = vocab.detokenize(&out.tokens) {
            if check_completion(kind, &inst.prompt, &text) {
                correct += 1;
            }
        }
        tpf_sum += out.trace.tpf;
        nfe_sum += out.trace.nfe as f64;
        refresh_sum += out.trace.refresh_forwards as f64;
        traces.push(out.trace);
    }
    let n = n_instances as f64;
    Ok(TaskEval {
        accuracy: correct as f64 / n,
        mean_tpf: tpf_sum / n,
        mean_nfe: nfe_sum / n,
        mean_refresh: refresh_sum / n,
        n: n_instances,
        traces,
    })
}

/// One row of the generation trade-off table.
#[derive(Debug, Clone)]
pub struct GenEvalRow {
    pub task: TaskKind,
    pub eval_block_size: usize,
    pub tau: Option<f64>,
    pub accuracy: f64,
    pub mean_tpf: f64,
    pub mean_nfe: f64,
    pub mean_refresh: f64,
    pub n: usize,
}

/// Accuracy-versus-parallelism table: every (task, threshold) pair at one
/// evaluation block size.
pub fn eval_generation<F: Scalar>(
    params: &ModelParams<F>,
    tasks: &[TaskKind],
    cfg: &ExperimentConfig,
    eval_block_size: usize,
    tau_grid: &[Option<f64>],
) -> Result<Vec<GenEvalRow>> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(tasks.len() * tau_grid.len());
    for &task in tasks {
        for &tau in tau_grid {
            let eval = eval_task_generation(
                params,
                task,
                cfg.eval_instances,
                cfg.seed,
                cfg.decode_config(eval_block_size, tau),
            )?;
            rows.push(GenEvalRow {
                task,
                eval_block_size,
                tau,
                accuracy: eval.accuracy,
                mean_tpf: eval.mean_tpf,
                mean_nfe: eval.mean_nfe,
                mean_refresh: eval.mean_refresh,
                n: eval.n,
            });
        }
    }
    Ok(rows)
}

/// Generates multiple-choice instances (tasks that carry a 4-way option
/// set) deterministically from `(seed, running index)`.
pub fn gen_mc_instances(seed: u64, n: usize) -> Vec<TaskInstance> {
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let inst = gen_synthetic_at(TaskKind::ModularAdd, seed, i);
        if inst.choices.is_some() {
            out.push(inst);
        }
        i += 1;
    }
    out
}

/// Per-sample, per-choice denoising losses for one instance.
///
/// With `shared_noise`, every choice of a sample sees the same noise level
/// and — because options share a byte length — the same masked positions,
/// so choice comparisons pair up and their variance drops. Without it each
/// choice draws independently.
pub fn mc_choice_losses<F: Scalar>(
    params: &ModelParams<F>,
    inst: &TaskInstance,
    kind: LayoutKind,
    schedule: &MaskSchedule,
    seq_len: usize,
    n_samples: usize,
    seed: u64,
    shared_noise: bool,
) -> Result<Vec<Vec<f64>>> {
    let choices = inst
        .choices
        .as_ref()
        .ok_or_else(|| Error::Config("instance has no choice set".into()))?;
    let vocab = Vocabulary::new();
    let seqs: Vec<_> = choices
        .options
        .iter()
        .map(|opt| pack_task(inst, opt, &vocab, seq_len, schedule.block_size))
        .collect::<Result<Vec<_>>>()?;
    let mut losses = vec![vec![0.0f64; choices.options.len()]; n_samples];
    for (s, row) in losses.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((s as u64) << 8);
        let t = sample_noise_level(&mut rng);
        let snapshot = rng.clone();
        for (c, seq) in seqs.iter().enumerate() {
            let mut choice_rng = if shared_noise {
                snapshot.clone()
            } else {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(((s as u64) << 8) | (c as u64 + 1));
                r
            };
            let noise = corrupt(seq, &vocab, schedule, t, &mut choice_rng)?;
            row[c] = dlm_loss(params, &noise, kind)?;
        }
    }
    Ok(losses)
}

/// Multiple-choice evaluation result.
#[derive(Debug, Clone)]
pub struct McEval {
    pub accuracy: f64,
    pub n: usize,
}

/// Scores each instance's options by their Monte-Carlo mean denoising loss
/// over `n_samples` shared noise draws and picks the lowest-loss option.
pub fn eval_likelihood<F: Scalar>(
    params: &ModelParams<F>,
    instances: &[TaskInstance],
    kind: LayoutKind,
    schedule: &MaskSchedule,
    seq_len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEval> {
    if instances.is_empty() {
        return Err(Error::Config("no multiple-choice instances".into()));
    }
    let mut correct = 0usize;
    for (idx, inst) in instances.iter().enumerate() {
        let choices = inst
            .choices
            .as_ref()
            .ok_or_else(|| Error::Config("instance has no choice set".into()))?;
        let per_sample = mc_choice_losses(
            params,
            inst,
            kind,
            schedule,
            seq_len,
            n_samples,
            seed.wrapping_add((idx as u64) << 32),
            true,
        )?;
        let n_choices = choices.options.len();
        let mut means = vec![0.0f64; n_choices];
        for row in &per_sample {
            for (c, &l) in row.iter().enumerate() {
                means[c] += l;
            }
        }
        let mut best = 0usize;
        for c in 1..n_choices {
            if means[c] < means[best] {
                best = c;
            }
        }
        if best == choices.correct {
            correct += 1;
        }
    }
    Ok(McEval {
        accuracy: correct as f64 / instances.len() as f64,
        n: instances.len(),
    })
}
