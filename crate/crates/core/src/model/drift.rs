//! Relative weight change between two parameter snapshots, per tensor and
//! aggregated by sublayer group — a cheap probe of how far a conversion run
//! moved from its starting point.

use super::{ModelParams, Scalar};
use crate::error::{Error, Result};
use serde::Serialize;

/// `‖after − before‖_F / ‖before‖_F` per named tensor, with group means.
#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub per_tensor: Vec<(String, f64)>,
    /// Mean over attention-sublayer tensors (`.attn.` names).
    pub attn_mean: f64,
    /// Mean over feed-forward-sublayer tensors (`.ffn.` names).
    pub ffn_mean: f64,
    /// Mean over every tensor.
    pub overall_mean: f64,
}

pub fn weight_drift<F: Scalar>(
    before: &ModelParams<F>,
    after: &ModelParams<F>,
) -> Result<DriftReport> {
    if before.config != after.config {
        return Err(Error::Model(
            "weight drift requires identical architectures".into(),
        ));
    }
    let mut per_tensor = Vec::new();
    for ((name, b), (_, a)) in before.tensors().into_iter().zip(after.tensors()) {
        let mut diff = 0.0f64;
        for (x, y) in b.data.iter().zip(&a.data) {
            let d = y.as_f64() - x.as_f64();
            diff += d * d;
        }
        let base = b.frobenius();
        let rel = if base == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff.sqrt() / base
        };
        per_tensor.push((name, rel));
    }
    let mean_of = |filter: &dyn Fn(&str) -> bool| {
        let vals: Vec<f64> = per_tensor
            .iter()
            .filter(|(n, _)| filter(n))
            .map(|&(_, v)| v)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    Ok(DriftReport {
        attn_mean: mean_of(&|n| n.contains(".attn.")),
        ffn_mean: mean_of(&|n| n.contains(".ffn.")),
        overall_mean: mean_of(&|_| true),
        per_tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab: 17,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 16,
            max_positions: 32,
            token_shift: false,
        }
    }

    #[test]
    fn identical_params_have_zero_drift() {
        let p = ModelParams::<f32>::init(&config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let report = weight_drift(&p, &p).unwrap();
        assert!(report.per_tensor.iter().all(|&(_, v)| v == 0.0));
        assert_eq!(report.overall_mean, 0.0);
        assert_eq!(report.attn_mean, 0.0);
        assert_eq!(report.ffn_mean, 0.0);
    }

    #[test]
    fn doubling_gives_unit_relative_change() {
        let p = ModelParams::<f64>::init(&config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut doubled = p.clone();
        for (_, m) in doubled.tensors_mut() {
            for x in &mut m.data {
                *x *= 2.0;
            }
        }
        let report = weight_drift(&p, &doubled).unwrap();
        for (name, v) in &report.per_tensor {
            assert!((v - 1.0).abs() < 1e-12, "{name}: {v}");
        }
        assert!((report.overall_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn groups_cover_the_expected_tensors() {
        let p = ModelParams::<f32>::init(&config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let report = weight_drift(&p, &p).unwrap();
        let attn = report
            .per_tensor
            .iter()
            .filter(|(n, _)| n.contains(".attn."))
            .count();
        let ffn = report
            .per_tensor
            .iter()
            .filter(|(n, _)| n.contains(".ffn."))
            .count();
        assert_eq!(attn, 5 * config().n_layers);
        assert_eq!(ffn, 3 * config().n_layers);
        assert_eq!(report.per_tensor.len(), 8 * config().n_layers + 3);
    }

    #[test]
    fn rejects_architecture_mismatch() {
        let p = ModelParams::<f32>::init(&config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut other_cfg = config();
        other_cfg.d_ffn = 24;
        let q = ModelParams::<f32>::init(&other_cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(weight_drift(&p, &q).is_err());
    }
}
