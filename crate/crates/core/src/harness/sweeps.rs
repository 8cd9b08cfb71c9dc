//! Sweep drivers: train/evaluate grids over block sizes and masking
//! schemes. Each cell is an independent conversion run with its own run
//! directory (derived run id), so a scheduler could fan cells out; here they
//! run sequentially and deterministically.

use std::path::Path;

use super::config::ExperimentConfig;
use super::evals::eval_task_generation;
use super::train::run_convert;
use crate::error::{Error, Result};
use crate::masking::MaskMode;
use crate::model::{load_checkpoint, TrainState};

/// Accuracy of one (training block size, evaluation block size) pair,
/// averaged over the config's tasks.
#[derive(Debug, Clone)]
pub struct BlockSweepCell {
    pub train_block: usize,
    pub eval_block: usize,
    pub accuracy: f64,
    pub mean_tpf: f64,
}

/// Converts the AR checkpoint once per training block size, then scores
/// each result at every evaluation block size with the given threshold.
pub fn sweep_block_sizes(
    base: &ExperimentConfig,
    ar_checkpoint: &Path,
    train_sizes: &[usize],
    eval_sizes: &[usize],
    tau: Option<f64>,
) -> Result<Vec<BlockSweepCell>> {
    if train_sizes.is_empty() || eval_sizes.is_empty() {
        return Err(Error::Config("sweep axes must be nonempty".into()));
    }
    let tasks = base.task.kinds().to_vec();
    if tasks.is_empty() {
        return Err(Error::Config("block-size sweep needs synthetic tasks".into()));
    }
    let mut cells = Vec::with_capacity(train_sizes.len() * eval_sizes.len());
    for &tb in train_sizes {
        let mut cfg = base.clone();
        cfg.train_block_size = tb;
        cfg.run_id = format!("{}-tb{tb}", base.run_id);
        cfg.validate()?;
        let out = run_convert(&cfg, ar_checkpoint)?;
        let state: TrainState<f32> = load_checkpoint(&out.final_checkpoint)?;
        for &eb in eval_sizes {
            let mut acc_sum = 0.0;
            let mut tpf_sum = 0.0;
            for &kind in &tasks {
                let eval = eval_task_generation(
                    &state.params,
                    kind,
                    cfg.eval_instances,
                    cfg.seed,
                    cfg.decode_config(eb, tau),
                )?;
                acc_sum += eval.accuracy;
                tpf_sum += eval.mean_tpf;
            }
            cells.push(BlockSweepCell {
                train_block: tb,
                eval_block: eb,
                accuracy: acc_sum / tasks.len() as f64,
                mean_tpf: tpf_sum / tasks.len() as f64,
            });
        }
    }
    Ok(cells)
}

/// One masking scheme's accuracy/parallelism at one threshold.
#[derive(Debug, Clone)]
pub struct MaskSweepRow {
    pub label: String,
    pub mode: MaskMode,
    pub half_life: f64,
    pub tau: Option<f64>,
    pub accuracy: f64,
    pub mean_tpf: f64,
    pub mean_nfe: f64,
}

/// Labels a masking variant for run ids and tables.
pub fn mask_variant_label(mode: MaskMode, half_life: f64) -> String {
    match mode {
        MaskMode::PositionDependent if half_life.is_finite() => {
            format!("posdep_hl{}", format!("{half_life}").replace('.', "p"))
        }
        MaskMode::PositionDependent => "posdep_hlinf".into(),
        MaskMode::Uniform => "uniform".into(),
        MaskMode::RightToLeft => "right_to_left".into(),
    }
}

/// Converts the AR checkpoint once per masking variant, then sweeps the
/// threshold grid: accuracy versus parallelism per scheme.
pub fn sweep_masking(
    base: &ExperimentConfig,
    ar_checkpoint: &Path,
    variants: &[(MaskMode, f64)],
    tau_grid: &[Option<f64>],
) -> Result<Vec<MaskSweepRow>> {
    if variants.is_empty() || tau_grid.is_empty() {
        return Err(Error::Config("sweep axes must be nonempty".into()));
    }
    let tasks = base.task.kinds().to_vec();
    if tasks.is_empty() {
        return Err(Error::Config("masking sweep needs synthetic tasks".into()));
    }
    let mut rows = Vec::with_capacity(variants.len() * tau_grid.len());
    for &(mode, half_life) in variants {
        let label = mask_variant_label(mode, half_life);
        let mut cfg = base.clone();
        cfg.mask_mode = mode;
        cfg.half_life = half_life;
        cfg.run_id = format!("{}-{label}", base.run_id);
        cfg.validate()?;
        let out = run_convert(&cfg, ar_checkpoint)?;
        let state: TrainState<f32> = load_checkpoint(&out.final_checkpoint)?;
        for &tau in tau_grid {
            let mut acc_sum = 0.0;
            let (mut tpf_sum, mut nfe_sum) = (0.0, 0.0);
            for &kind in &tasks {
                let eval = eval_task_generation(
                    &state.params,
                    kind,
                    cfg.eval_instances,
                    cfg.seed,
                    cfg.decode_config(cfg.eval_block_sizes[0], tau),
                )?;
                acc_sum += eval.accuracy;
                tpf_sum += eval.mean_tpf;
                nfe_sum += eval.mean_nfe;
            }
            let n = tasks.len() as f64;
            rows.push(MaskSweepRow {
                label: label.clone(),
                mode,
                half_life,
                tau,
                accuracy: acc_sum / n,
                mean_tpf: tpf_sum / n,
                mean_nfe: nfe_sum / n,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::run_pretrain_ar;
    use tempfile::tempdir;

    fn tiny_cfg(root: &Path, run_id: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run_id = run_id.into();
        cfg.output_root = Some(root.to_path_buf());
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.n_layers = 1;
        cfg.d_ffn = 32;
        cfg.max_positions = 64;
        cfg.seq_len = 32;
        cfg.batch_size = 2;
        cfg.steps = 2;
        cfg.eval_instances = 2;
        cfg.max_new_tokens = 8;
        cfg
    }

    #[test]
    fn block_sweep_grid_is_complete() {
        let dir = tempdir().unwrap();
        let ar = run_pretrain_ar(&tiny_cfg(dir.path(), "ar")).unwrap();
        let base = tiny_cfg(dir.path(), "sweep");
        let cells =
            sweep_block_sizes(&base, &ar.final_checkpoint, &[4, 8], &[4, 8], Some(0.5)).unwrap();
        assert_eq!(cells.len(), 4);
        for &tb in &[4, 8] {
            for &eb in &[4, 8] {
                assert_eq!(
                    cells
                        .iter()
                        .filter(|c| c.train_block == tb && c.eval_block == eb)
                        .count(),
                    1
                );
            }
        }
    }

    #[test]
    fn masking_sweep_covers_every_variant_and_threshold() {
        let dir = tempdir().unwrap();
        let ar = run_pretrain_ar(&tiny_cfg(dir.path(), "ar2")).unwrap();
        let base = tiny_cfg(dir.path(), "masks");
        let variants = [
            (MaskMode::Uniform, f64::INFINITY),
            (MaskMode::PositionDependent, 0.1),
        ];
        let taus = [None, Some(0.0)];
        let rows = sweep_masking(&base, &ar.final_checkpoint, &variants, &taus).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.label == "uniform").count(), 2);
        assert_eq!(rows.iter().filter(|r| r.label == "posdep_hl0p1").count(), 2);
    }

    #[test]
    fn variant_labels_are_path_safe() {
        assert_eq!(
            mask_variant_label(MaskMode::PositionDependent, 0.25),
            "posdep_hl0p25"
        );
        assert_eq!(mask_variant_label(MaskMode::Uniform, f64::INFINITY), "uniform");
        assert_eq!(
            mask_variant_label(MaskMode::RightToLeft, f64::INFINITY),
            "right_to_left"
        );
    }
}
