//! A minimal trainable transformer with explicit attention layouts.
//!
//! The architecture is deliberately small and fully hand-differentiated:
//! token embedding, `n_layers` of pre-norm attention + FFN blocks with
//! rotary positions driven by the layout's `pos_index`, a final RMSNorm,
//! and an untied output head. All math is generic over [`Scalar`] so the
//! same code runs in `f32` for training and `f64` for gradient oracles.

mod checkpoint;
mod drift;
pub(crate) mod forward;
mod loss;
mod mat;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use drift::{weight_drift, DriftReport};
pub use forward::{
    forward, mean_pool_embed, sequence_loss, sequence_loss_grad, Logits, LossItem,
};
pub use loss::{ar_inputs, ar_loss, ar_loss_grad, dlm_inputs, dlm_loss, dlm_loss_grad};
pub use mat::{axpy, dot, Mat, Scalar};
pub use optim::{cosine_lr, train_step, Objective, OptimConfig, StepStats, TrainState};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    /// Upper bound on layout rows (concatenated layouts need 2x sequence
    /// length).
    pub max_positions: usize,
    /// Read predictions for position `i` from row `i - 1` (AR convention)
    /// instead of from row `i` itself.
    pub token_shift: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 259,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ffn: 512,
            max_positions: 512,
            token_shift: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ffn == 0
            || self.max_positions == 0
        {
            return Err(Error::Model("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Model(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Model(format!(
                "head dim {} must be even for rotary pairs",
                self.d_model / self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One transformer layer's weights. All linears are bias-free; `Wq`..`Wo`
/// are `d_model x d_model`, the FFN expands to `d_ffn` with SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Mat<F>, // 1 x d_model gain
    pub wq: Mat<F>,
    pub wk: Mat<F>,
    pub wv: Mat<F>,
    pub wo: Mat<F>,
    pub ffn_norm: Mat<F>, // 1 x d_model gain
    pub w_up: Mat<F>,     // d_ffn x d_model
    pub w_down: Mat<F>,   // d_model x d_ffn
}

/// Full parameter set. The same struct doubles as gradient and
/// optimizer-moment storage since those are shape-parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub embed: Mat<F>, // vocab x d_model
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Mat<F>, // 1 x d_model gain
    pub head: Mat<F>,       // vocab x d_model
}

impl<F: Scalar> ModelParams<F> {
    /// All-zero parameters with the same shapes (gradient/moment buffers).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = || LayerParams {
            attn_norm: Mat::zeros(1, d),
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            ffn_norm: Mat::zeros(1, d),
            w_up: Mat::zeros(config.d_ffn, d),
            w_down: Mat::zeros(d, config.d_ffn),
        };
        Ok(ModelParams {
            config: *config,
            embed: Mat::zeros(config.vocab, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_norm: Mat::zeros(1, d),
            head: Mat::zeros(config.vocab, d),
        })
    }

    /// Random initialization: scaled normal weights, unit norm gains, and
    /// residual output projections shrunk by depth.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config)?;
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        fill_normal(&mut p.embed, 0.02, rng);
        fill_normal(&mut p.head, 0.02, rng);
        p.final_norm.data.fill(F::one());
        for layer in &mut p.layers {
            layer.attn_norm.data.fill(F::one());
            layer.ffn_norm.data.fill(F::one());
            let io_std = xavier(config.d_model, config.d_model);
            fill_normal(&mut layer.wq, io_std, rng);
            fill_normal(&mut layer.wk, io_std, rng);
            fill_normal(&mut layer.wv, io_std, rng);
            fill_normal(&mut layer.wo, io_std * depth_scale, rng);
            fill_normal(&mut layer.w_up, xavier(config.d_model, config.d_ffn), rng);
            fill_normal(
                &mut layer.w_down,
                xavier(config.d_ffn, config.d_model) * depth_scale,
                rng,
            );
        }
        Ok(p)
    }

    /// Named tensors in a stable order (the checkpoint and drift order).
    pub fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut out: Vec<(String, &Mat<F>)> = vec![("embed".into(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn.norm"), &l.attn_norm));
            out.push((format!("layers.{i}.attn.wq"), &l.wq));
            out.push((format!("layers.{i}.attn.wk"), &l.wk));
            out.push((format!("layers.{i}.attn.wv"), &l.wv));
            out.push((format!("layers.{i}.attn.wo"), &l.wo));
            out.push((format!("layers.{i}.ffn.norm"), &l.ffn_norm));
            out.push((format!("layers.{i}.ffn.w_up"), &l.w_up));
            out.push((format!("layers.{i}.ffn.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable access in the same stable order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut out: Vec<(String, &mut Mat<F>)> = vec![("embed".into(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn.norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.attn.wq"), &mut l.wq));
            out.push((format!("layers.{i}.attn.wk"), &mut l.wk));
            out.push((format!("layers.{i}.attn.wv"), &mut l.wv));
            out.push((format!("layers.{i}.attn.wo"), &mut l.wo));
            out.push((format!("layers.{i}.ffn.norm"), &mut l.ffn_norm));
            out.push((format!("layers.{i}.ffn.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.ffn.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.all_finite())
    }

    /// Converts elementwise to another scalar type (used by f64 oracles to
    /// audit f32-trained weights).
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let cast_mat = |m: &Mat<F>| Mat {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        };
        ModelParams {
            config: self.config,
            embed: cast_mat(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: cast_mat(&l.attn_norm),
                    wq: cast_mat(&l.wq),
                    wk: cast_mat(&l.wk),
                    wv: cast_mat(&l.wv),
                    wo: cast_mat(&l.wo),
                    ffn_norm: cast_mat(&l.ffn_norm),
                    w_up: cast_mat(&l.w_up),
                    w_down: cast_mat(&l.w_down),
                })
                .collect(),
            final_norm: cast_mat(&self.final_norm),
            head: cast_mat(&self.head),
        }
    }
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_normal<F: Scalar>(m: &mut Mat<F>, std: f64, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, std).expect("valid std");
    for x in &mut m.data {
        *x = F::from_f64(dist.sample(rng));
    }
}
