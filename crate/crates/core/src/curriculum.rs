//! Warm-up schedules for the masking rate and the entropy coefficient, and
//! the adaptive masking teacher.
//!
//! The teacher scores each candidate drop set `S` by the batch-mean gate
//! entropy after removing `S` and samples `S` with probability
//! `∝ exp(H(p(x∖S)) / η)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{apply_mask, MultimodalBatch};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::lattice::{Presence, SubsetMask};
use crate::rng::Rng;
use crate::tensor::{check_simplex, softmax};

/// How training masks are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Each (sample, modality) dropped independently with rate `π_t`.
    Bernoulli,
    /// A sample is masked with rate `π_t`; its drop set comes from the teacher.
    Acm,
}

/// Candidate drop sets scored by the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcmFamily {
    /// The `M` single-modality drops.
    SingleDrops,
    /// Every nonempty proper subset; `M ≤ 4` only.
    AllSubsets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    /// Epochs for the masking rate to reach `pi_max`.
    pub t_warm: usize,
    pub pi_max: f64,
    /// Epochs for the entropy coefficient to reach `lambda_max`.
    pub t_lambda: usize,
    pub lambda_max: f64,
    /// Teacher temperature.
    pub eta: f64,
    pub mode: MaskMode,
    pub family: AcmFamily,
    /// Samples in the fixed batch the teacher is scored on each epoch.
    pub probe_size: usize,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            t_warm: 10,
            pi_max: 0.40,
            t_lambda: 10,
            lambda_max: 0.08,
            eta: 1.0,
            mode: MaskMode::Acm,
            family: AcmFamily::SingleDrops,
            probe_size: 512,
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.pi_max) {
            return Err(Error::InvalidArgument(format!("pi_max = {} outside [0, 1)", self.pi_max)));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_max = {} must be >= 0", self.lambda_max)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta = {} must be > 0", self.eta)));
        }
        if self.probe_size == 0 {
            return Err(Error::InvalidArgument("probe_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `max · min(1, t / horizon)`; a zero horizon is saturated from the start.
fn ramp(t: usize, horizon: usize, max: f64) -> f64 {
    if horizon == 0 {
        return max;
    }
    max * (t as f64 / horizon as f64).min(1.0)
}

/// `π_t = π_max · min(1, t / T_warm)`.
pub fn schedule_pi(t: usize, s: &Schedules) -> f64 {
    ramp(t, s.t_warm, s.pi_max)
}

/// `λ_t = λ_max · min(1, t / T_λ)`.
pub fn schedule_lambda(t: usize, s: &Schedules) -> f64 {
    ramp(t, s.t_lambda, s.lambda_max)
}

/// Distribution over drop sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDistribution {
    pub support: Vec<SubsetMask>,
    pub probs: Vec<f64>,
    /// Batch-mean post-mask gate entropy of each support element.
    pub entropies: Vec<f64>,
    /// Model forward passes spent building the distribution.
    pub forward_passes: usize,
}

impl MaskDistribution {
    /// A distribution over the given drop sets with the given probabilities.
    pub fn new(support: Vec<SubsetMask>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} drop sets with {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        check_simplex(&probs)?;
        for s in &support {
            if s.is_empty() || s.is_full() {
                return Err(Error::InvalidArgument(format!("drop set {s} must be nonempty and proper")));
            }
        }
        let entropies = vec![0.0; support.len()];
        Ok(Self {
            support,
            probs,
            entropies,
            forward_passes: 0,
        })
    }

    /// Equal mass on every candidate in `family`.
    pub fn uniform(m: usize, family: AcmFamily) -> Result<Self> {
        let support = candidates(m, family)?;
        let k = support.len();
        Self::new(support, vec![1.0 / k as f64; k])
    }
}

/// Candidate drop sets of `family` over `m` modalities.
pub fn candidates(m: usize, family: AcmFamily) -> Result<Vec<SubsetMask>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("masking needs >= 2 modalities, got {m}")));
    }
    match family {
        AcmFamily::SingleDrops => (0..m).map(|i| SubsetMask::from_indices(&[i], m)).collect(),
        AcmFamily::AllSubsets => {
            if m > 4 {
                return Err(Error::InvalidArgument(format!(
                    "all_subsets enumeration supports M <= 4, got {m}"
                )));
            }
            Ok(SubsetMask::all_nonempty(m).into_iter().filter(|s| !s.is_full()).collect())
        }
    }
}

/// Mean gate entropy over the rows of `batch` that keep something after
/// dropping `drop`. `None` when no row survives.
pub fn post_mask_entropy(model: &FusionModel, batch: &MultimodalBatch, drop: SubsetMask) -> Result<Option<f64>> {
    let rows: Vec<usize> = (0..batch.len())
        .filter(|&i| batch.presence().row(i).iter().enumerate().any(|(j, &b)| b && !drop.contains(j)))
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let masked = if rows.len() == batch.len() {
        apply_mask(batch, drop, None)?
    } else {
        apply_mask(&batch.select(&rows), drop, None)?
    };
    let h = model.gate_entropies(&masked)?;
    Ok(Some(h.iter().sum::<f64>() / h.len() as f64))
}

/// Softmax of `H(S) / η` over the candidates of `family`, scored on `batch`.
/// Candidates that would empty every row are left out.
pub fn acm_distribution(model: &FusionModel, batch: &MultimodalBatch, eta: f64, family: AcmFamily) -> Result<MaskDistribution> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta = {eta} must be > 0")));
    }
    let mut support = Vec::new();
    let mut entropies = Vec::new();
    let mut forward_passes = 0;
    for s in candidates(batch.modalities(), family)? {
        if let Some(h) = post_mask_entropy(model, batch, s)? {
            forward_passes += 1;
            support.push(s);
            entropies.push(h);
        }
    }
    if support.is_empty() {
        return Err(Error::InvalidArgument("no drop set leaves any sample observed".into()));
    }
    let scaled: Vec<f64> = entropies.iter().map(|h| h / eta).collect();
    let probs = softmax(&scaled)?;
    Ok(MaskDistribution {
        support,
        probs,
        entropies,
        forward_passes,
    })
}

/// Per-sample drop sets: with probability `pi` a sample drops a set drawn
/// from `dist`, otherwise it drops nothing. Every sample consumes exactly two
/// uniforms, so the stream position does not depend on `pi` or `dist`.
pub fn sample_mask(dist: &MaskDistribution, pi: f64, n: usize, rng: &mut Rng) -> Result<Vec<SubsetMask>> {
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::InvalidArgument(format!("mask rate {pi} outside [0, 1]")));
    }
    check_simplex(&dist.probs)?;
    let m = dist.support[0].modalities();
    let last = dist.support.len() - 1;
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            if u >= pi {
                return SubsetMask::empty(m);
            }
            let mut acc = 0.0;
            for (k, p) in dist.probs.iter().enumerate() {
                acc += p;
                if v < acc {
                    return dist.support[k];
                }
            }
            dist.support[last]
        })
        .collect())
}

/// Presence flags with every sample's drop set removed.
pub fn drops_to_presence(drops: &[SubsetMask], m: usize) -> Result<Presence> {
    let mut bits = Vec::with_capacity(drops.len() * m);
    for d in drops {
        if d.modalities() != m {
            return Err(Error::Shape(format!("drop set over {} modalities, expected {m}", d.modalities())));
        }
        bits.extend((0..m).map(|j| !d.contains(j)));
    }
    Presence::from_bits(drops.len(), m, bits)
}
