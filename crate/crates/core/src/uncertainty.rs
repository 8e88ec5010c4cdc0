//! Instance-adaptive entropy coefficient from MC-dropout variance:
//!
//! `λ(x) = λ_min + softplus(min(mean_m Var_k[y_m^(k)(x)], v_max))`
//!
//! `y_m^(k)` is the largest class logit of the single-branch head applied to
//! `dropout(h_m) W_m` on the `k`-th stochastic pass.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::MultimodalBatch;
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::rng::{Rng, RngStreams, Stream};
use crate::tensor::{softplus, Tensor};

/// Where the entropy coefficient comes from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Per-sample coefficient from MC-dropout variance.
    Instance,
    /// Linear warm-up `λ_t = λ_max · min(1, t / T_λ)`.
    Scheduled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaConfig {
    pub lambda_min: f64,
    /// MC-dropout draws per sample.
    pub draws: usize,
    pub dropout_rate: f64,
    /// Variance cap; measured on validation data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    pub mode: LambdaMode,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            lambda_min: 0.01,
            draws: 20,
            dropout_rate: 0.1,
            v_max: None,
            mode: LambdaMode::Scheduled,
        }
    }
}

impl LambdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_min = {} must be > 0", self.lambda_min)));
        }
        if self.draws < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 MC draws, got {}", self.draws)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if let Some(v) = self.v_max {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("v_max = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn calibrated_vmax(&self) -> Result<f64> {
        self.v_max
            .ok_or_else(|| Error::InvalidArgument("v_max has not been calibrated".into()))
    }

    /// Upper end of the achievable range, `λ_min + softplus(v_max)`.
    pub fn lambda_max(&self) -> Result<f64> {
        Ok(self.lambda_min + softplus(self.calibrated_vmax()?))
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Unbiased variance over `cfg.draws` passes of each branch's max logit for
/// sample `i`, one entry per modality. Absent modalities have zero
/// features and hence zero variance.
pub fn mc_variance(model: &FusionModel, batch: &MultimodalBatch, i: usize, cfg: &LambdaConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    if cfg.draws < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 MC draws, got {}", cfg.draws)));
    }
    if i >= batch.len() {
        return Err(Error::InvalidArgument(format!("sample {i} of {}", batch.len())));
    }
    let rate = cfg.dropout_rate;
    let mut out = Vec::with_capacity(batch.modalities());
    for (m, f) in batch.features().iter().enumerate() {
        let h = f.row(i);
        let mut keep = vec![true; h.len()];
        let mut ys = Vec::with_capacity(cfg.draws);
        for _ in 0..cfg.draws {
            for k in keep.iter_mut() {
                *k = rng.random::<f64>() >= rate;
            }
            let logits = model.branch_logits(m, h, Some((&keep, rate)));
            ys.push(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        out.push(sample_variance(&ys));
    }
    Ok(out)
}

/// `λ_min + softplus(min(mean(var), v_max))`.
pub fn lambda_of(var: &[f64], cfg: &LambdaConfig) -> Result<f64> {
    if var.is_empty() {
        return Err(Error::InvalidArgument("empty variance vector".into()));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative variance {v}")));
    }
    let v_max = cfg.calibrated_vmax()?;
    let mean = var.iter().sum::<f64>() / var.len() as f64;
    Ok(cfg.lambda_min + softplus(mean.min(v_max)))
}

/// Mean per-modality MC variance of every sample. Sample `i` draws from its
/// own dropout substream of `seed`, so the result does not depend on
/// scheduling.
pub fn mean_variances(model: &FusionModel, batch: &MultimodalBatch, cfg: &LambdaConfig, seed: u64) -> Result<Vec<f64>> {
    let streams = RngStreams::new(seed);
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.substream(Stream::Dropout, i as u64);
            let v = mc_variance(model, batch, i, cfg, &mut rng)?;
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

/// Largest mean variance over the validation samples.
pub fn calibrate_vmax(model: &FusionModel, val: &MultimodalBatch, cfg: &LambdaConfig, seed: u64) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("cannot calibrate v_max on an empty batch".into()));
    }
    let v = mean_variances(model, val, cfg, seed)?;
    Ok(v.into_iter().fold(0.0, f64::max))
}

/// Per-sample coefficients for a batch.
pub fn instance_lambdas(model: &FusionModel, batch: &MultimodalBatch, cfg: &LambdaConfig, seed: u64) -> Result<Vec<f64>> {
    mean_variances(model, batch, cfg, seed)?
        .into_iter()
        .map(|v| lambda_of(&[v], cfg))
        .collect()
}

/// Variance source from a set of alternative classification heads
/// `(W, b)`: per modality, the variance across heads of the max logit of
/// `head_e(h_m W_m)`. Usable in place of [`mc_variance`].
pub fn ensemble_variance(model: &FusionModel, heads: &[(Tensor, Tensor)], batch: &MultimodalBatch, i: usize) -> Result<Vec<f64>> {
    if heads.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 heads, got {}", heads.len())));
    }
    let dz = model.config.fused_dim;
    let c = model.config.classes;
    for (w, b) in heads {
        if w.shape() != [dz, c] || b.shape() != [c] {
            return Err(Error::Shape(format!("head {:?}/{:?}, expected [{dz}, {c}]/[{c}]", w.shape(), b.shape())));
        }
    }
    let mut out = Vec::with_capacity(batch.modalities());
    for (m, f) in batch.features().iter().enumerate() {
        let h = Tensor::matrix(1, f.cols(), f.row(i).to_vec())?;
        let u = h.matmul(&model.proj[m])?;
        let ys: Vec<f64> = heads
            .iter()
            .map(|(w, b)| {
                let logits = u.matmul(w).expect("checked shapes");
                logits
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(l, bb)| l + bb)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        out.push(sample_variance(&ys));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, LabelMode, Labels, SyntheticSpec};
    use crate::fusion::{FeatureNorm, ModelConfig};
    use crate::lattice::Presence;
    use rand::SeedableRng;

    fn calibrated(v_max: f64) -> LambdaConfig {
        LambdaConfig {
            v_max: Some(v_max),
            ..LambdaConfig::default()
        }
    }

    /// Two one-dimensional modalities, unit projections and a head whose
    /// first logit is the dropped-out feature and second is −10, so the max
    /// logit of a unit input has variance `r / (1 − r)`.
    fn toy() -> (FusionModel, MultimodalBatch) {
        let cfg = ModelConfig::new(vec![1, 1], 2, 1, LabelMode::Single);
        let mut rng = Rng::seed_from_u64(0);
        let mut model = FusionModel::new(cfg, FeatureNorm::identity(2), &mut rng).unwrap();
        model.proj = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(); 2];
        model.head_w = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        model.head_b = Tensor::vector(vec![0.0, -10.0]).unwrap();
        let features = vec![Tensor::matrix(1, 1, vec![1.0]).unwrap(); 2];
        let batch = MultimodalBatch::new(features, Presence::all(1, 2), Labels::Single(vec![0]), 2).unwrap();
        (model, batch)
    }

    fn small() -> (FusionModel, MultimodalBatch) {
        let spec = SyntheticSpec {
            dims: vec![4, 4],
            classes: 3,
            snr: vec![1.0, 0.2],
            n_train: 30,
            n_val: 30,
            n_test: 30,
            seed: 2,
            ..SyntheticSpec::default()
        };
        let splits = generate(&spec).unwrap();
        let cfg = ModelConfig::new(vec![4, 4], 3, 5, LabelMode::Single);
        let mut rng = Rng::seed_from_u64(1);
        let model = FusionModel::new(cfg, FeatureNorm::fit(&splits.train), &mut rng).unwrap();
        (model, splits.val)
    }

    #[test]
    fn lambda_examples() {
        let cfg = calibrated(2.0);
        let l0 = lambda_of(&[0.0, 0.0], &cfg).unwrap();
        assert!((l0 - (0.01 + 2f64.ln())).abs() < 1e-15);
        assert!((l0 - 0.7031).abs() < 1e-4);
        let top = lambda_of(&[2.0, 2.0], &cfg).unwrap();
        let expect = 0.01 + (1.0 + 2f64.exp()).ln();
        assert!((top - expect).abs() < 1e-15);
        assert!((top - 0.01 - 2.1269).abs() < 1e-4);
        assert_eq!(lambda_of(&[20.0, 20.0], &cfg).unwrap(), top);
        assert!(lambda_of(&[-0.1], &cfg).is_err());
        assert!(lambda_of(&[0.1], &LambdaConfig::default()).is_err());
    }

    #[test]
    fn lambda_is_monotone_in_variance() {
        let cfg = calibrated(3.0);
        let mut prev = 0.0;
        for k in 0..100 {
            let l = lambda_of(&[k as f64 * 0.05], &cfg).unwrap();
            assert!(l >= prev);
            assert!(l > cfg.lambda_min && l <= cfg.lambda_max().unwrap());
            prev = l;
        }
    }

    #[test]
    fn mc_variance_matches_bernoulli_dropout_toy() {
        let (model, batch) = toy();
        for rate in [0.3, 0.5] {
            let cfg = LambdaConfig {
                draws: 10_000,
                dropout_rate: rate,
                ..LambdaConfig::default()
            };
            let mut rng = Rng::seed_from_u64(77);
            let v = mc_variance(&model, &batch, 0, &cfg, &mut rng).unwrap();
            let expect = rate / (1.0 - rate);
            for vm in v {
                assert!((vm - expect).abs() / expect < 0.05, "{vm} vs {expect}");
            }
        }
    }

    #[test]
    fn zero_dropout_gives_zero_variance() {
        let (model, batch) = small();
        let cfg = LambdaConfig {
            dropout_rate: 0.0,
            ..LambdaConfig::default()
        };
        let mut rng = Rng::seed_from_u64(3);
        for i in 0..batch.len() {
            assert!(mc_variance(&model, &batch, i, &cfg, &mut rng).unwrap().iter().all(|&v| v == 0.0));
        }
        let v_max = calibrate_vmax(&model, &batch, &cfg, 4).unwrap();
        assert_eq!(v_max, 0.0);
        let cal = LambdaConfig { v_max: Some(v_max), ..cfg };
        assert!((cal.lambda_max().unwrap() - (0.01 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn draws_differ_by_seed_and_need_two() {
        let (model, batch) = small();
        let cfg = LambdaConfig::default();
        let a = mc_variance(&model, &batch, 0, &cfg, &mut Rng::seed_from_u64(1)).unwrap();
        let b = mc_variance(&model, &batch, 0, &cfg, &mut Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|v| v.is_finite()));
        let one = LambdaConfig { draws: 1, ..cfg };
        assert!(mc_variance(&model, &batch, 0, &one, &mut Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn calibration_is_a_deterministic_max() {
        let (model, batch) = small();
        let cfg = LambdaConfig::default();
        let full = calibrate_vmax(&model, &batch, &cfg, 9).unwrap();
        assert_eq!(full, calibrate_vmax(&model, &batch, &cfg, 9).unwrap());
        let part = calibrate_vmax(&model, &batch.head(10), &cfg, 9).unwrap();
        assert!(part <= full);
        assert!(calibrate_vmax(&model, &batch.head(0), &cfg, 9).is_err());
        let cal = LambdaConfig { v_max: Some(full), ..cfg };
        for l in instance_lambdas(&model, &batch, &cal, 10).unwrap() {
            assert!(l > cal.lambda_min && l <= cal.lambda_max().unwrap());
        }
    }

    #[test]
    fn ensemble_of_identical_heads_has_zero_variance() {
        let (model, batch) = small();
        let heads = vec![(model.head_w.clone(), model.head_b.clone()); 5];
        let v = ensemble_variance(&model, &heads, &batch, 0).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let mut shifted = heads.clone();
        shifted[0].1 = shifted[0].1.map(|b| b + 1.0);
        let v = ensemble_variance(&model, &shifted, &batch, 0).unwrap();
        assert!(v.iter().all(|&x| x > 0.0));
        assert!(ensemble_variance(&model, &heads[..1], &batch, 0).is_err());
    }
}
