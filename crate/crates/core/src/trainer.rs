//! Training loop, ablation switches, evaluation under random test-time
//! modality dropout, and post-hoc temperature scaling.
//!
//! Each epoch `t` sets the masking rate `π_t` and entropy coefficient, draws
//! one mask per training sample, then runs minibatch AdamW on
//! `task + λ·ent + γ·cec` with a separate learning rate for the gate.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::{acm_distribution, drops_to_presence, sample_mask, schedule_lambda, schedule_pi, MaskDistribution, MaskMode, Schedules};
use crate::datagen::{apply_mask, bernoulli_mask, LabelMode, Labels, MultimodalBatch, Splits};
use crate::error::{Error, Result};
use crate::fusion::{confidences, top1_hits, FeatureNorm, FusionModel, GateMode, ModelConfig, GATE_PARAM_TENSORS};
use crate::lattice::{subset_lattice, Presence, SubsetMask};
use crate::losses::{cec_loss, composite_loss, task_loss, Lambda, LambdaBounds, LossBreakdown, LossParts};
use crate::metrics::{class_probabilities, classwise_ece, ece, map_at_1, top1_accuracy, DEFAULT_BINS};
use crate::optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
use crate::rng::{RngStreams, Stream};
use crate::tape::Tape;
use crate::tensor::{softplus, Tensor};
use crate::uncertainty::{calibrate_vmax, instance_lambdas, LambdaConfig, LambdaMode};

/// Which component of the method is switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    Full,
    NoEntropy,
    NoCurmask,
    NoGate,
    /// Only the given modality (0-based) is ever observed.
    Only(usize),
}

impl Ablation {
    /// The standard comparison set for a benchmark with `m` modalities: the
    /// full method, each single-component removal, and the first modality
    /// alone.
    pub fn standard_set() -> Vec<Ablation> {
        vec![Ablation::Full, Ablation::NoEntropy, Ablation::NoCurmask, Ablation::NoGate, Ablation::Only(0)]
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::Full => write!(f, "full"),
            Ablation::NoEntropy => write!(f, "no_entropy"),
            Ablation::NoCurmask => write!(f, "no_curmask"),
            Ablation::NoGate => write!(f, "no_gate"),
            Ablation::Only(k) => write!(f, "only_{}", k + 1),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// `full`, `no_entropy`, `no_curmask`, `no_gate` or `only_<k>` with a
    /// 1-based modality index.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "no_entropy" => Ablation::NoEntropy,
            "no_curmask" => Ablation::NoCurmask,
            "no_gate" => Ablation::NoGate,
            other => match other.strip_prefix("only_").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k >= 1 => Ablation::Only(k - 1),
                _ => return Err(Error::UnknownAblation(s.to_string())),
            },
        })
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_gate: f64,
    pub schedules: Schedules,
    pub lambda: LambdaConfig,
    /// Weight of the subset-consistency term.
    pub gamma: f64,
    /// Weight of the mask term, which is identically zero.
    pub beta: f64,
    /// Subset pairs sampled per minibatch when the lattice is too large to
    /// use whole (more than four modalities).
    pub cec_pairs_per_batch: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub temp_scaling: bool,
    pub fused_dim: usize,
    pub adamw: AdamWConfig,
    /// Abort once the loss exceeds this multiple of its first recorded value.
    pub divergence_factor: f64,
    pub eval_rates: Vec<f64>,
    pub eval_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr_base: 1e-3,
            lr_gate: 1e-2,
            schedules: Schedules::default(),
            lambda: LambdaConfig::default(),
            gamma: 0.1,
            beta: 0.0,
            cec_pairs_per_batch: 8,
            ablation: Ablation::Full,
            seed: 0,
            temp_scaling: false,
            fused_dim: 32,
            adamw: AdamWConfig::default(),
            divergence_factor: 10.0,
            eval_rates: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            eval_seeds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lr_base > 0.0 && self.lr_gate >= self.lr_base && self.lr_gate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need lr_gate >= lr_base > 0, got lr_base = {}, lr_gate = {}",
                self.lr_base, self.lr_gate
            )));
        }
        if !(self.gamma >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidArgument("gamma and beta must be >= 0".into()));
        }
        if self.fused_dim == 0 || self.cec_pairs_per_batch == 0 || self.eval_seeds == 0 {
            return Err(Error::InvalidArgument(
                "fused_dim, cec_pairs_per_batch and eval_seeds must be >= 1".into(),
            ));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::InvalidArgument("divergence_factor must be > 1".into()));
        }
        if let Some(r) = self.eval_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!("evaluation rate {r} outside [0, 1)")));
        }
        self.schedules.validate()?;
        self.lambda.validate()
    }
}

/// Effective component switches after applying an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switches {
    pub entropy: bool,
    pub masking: bool,
    pub gate: GateMode,
    pub cec: bool,
    pub only: Option<usize>,
}

pub fn apply_ablation(cfg: &TrainConfig) -> Switches {
    let base = Switches {
        entropy: true,
        masking: true,
        gate: GateMode::Learned,
        cec: cfg.gamma > 0.0,
        only: None,
    };
    match cfg.ablation {
        Ablation::Full => base,
        Ablation::NoEntropy => Switches { entropy: false, ..base },
        Ablation::NoCurmask => Switches { masking: false, ..base },
        Ablation::NoGate => Switches {
            gate: GateMode::Uniform,
            ..base
        },
        Ablation::Only(k) => Switches {
            masking: false,
            cec: false,
            only: Some(k),
            ..base
        },
    }
}

/// Metrics of one evaluation pass, or the mean over several mask draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub map_at_1: f64,
    pub ece: f64,
    pub classwise_ece: f64,
}

impl EvalMetrics {
    fn mean(items: &[EvalMetrics]) -> EvalMetrics {
        let n = items.len() as f64;
        let mut out = EvalMetrics::default();
        for m in items {
            out.accuracy += m.accuracy / n;
            out.map_at_1 += m.map_at_1 / n;
            out.ece += m.ece / n;
            out.classwise_ece += m.classwise_ece / n;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub rate: f64,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pi: f64,
    /// Scheduled coefficient; per-sample values are summarised in `loss.lambda`.
    pub lambda: f64,
    pub loss: LossBreakdown,
    pub val: EvalMetrics,
    /// Teacher probabilities over single-modality drops, when active.
    pub mask_probs: Vec<f64>,
    /// Digest of the minibatch order.
    pub order_digest: String,
    pub masked_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<LossBreakdown>,
    pub model: FusionModel,
    pub temperature: f64,
    pub v_max: Option<f64>,
    pub eval: Vec<EvalRow>,
    pub config_hash: String,
    pub wall_clock_secs: f64,
}

/// Hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

fn digest_order(order: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in order {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Keep flags that observe only modality `k`.
fn only_presence(n: usize, m: usize, k: usize) -> Presence {
    let bits = (0..n).flat_map(|_| (0..m).map(move |j| j == k)).collect();
    Presence::from_bits(n, m, bits).expect("n x m flags")
}

/// Logits for a batch where some rows may have nothing observed; such rows
/// get the head bias alone, the prediction from an empty fused vector.
pub fn logits_with_fallback(model: &FusionModel, batch: &MultimodalBatch, keep: &Presence) -> Result<Tensor> {
    let n = batch.len();
    let m = batch.modalities();
    let alive: Vec<usize> = (0..n).filter(|&i| keep.observed_count(i) > 0).collect();
    let c = model.config.classes;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(model.head_b.data());
    }
    if alive.is_empty() {
        return Ok(out);
    }
    let sub = batch.select(&alive);
    let masked = apply_mask(&sub, SubsetMask::empty(m), Some(&keep.select_rows(&alive)))?;
    let logits = model.forward(&masked)?.logits;
    for (r, &i) in alive.iter().enumerate() {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(logits.row(r));
    }
    Ok(out)
}

/// Metrics of `logits / temperature` against `labels`.
pub fn metrics_from_logits(logits: &Tensor, labels: &Labels, temperature: f64) -> Result<EvalMetrics> {
    let mode = labels.mode();
    let conf = confidences(logits, mode, temperature);
    let hits = top1_hits(logits, labels);
    let probs = class_probabilities(logits, mode, temperature)?;
    Ok(EvalMetrics {
        accuracy: top1_accuracy(logits, labels)?,
        map_at_1: map_at_1(logits, labels)?,
        ece: ece(&conf, &hits, DEFAULT_BINS)?.ece,
        classwise_ece: classwise_ece(&probs, labels, DEFAULT_BINS)?,
    })
}

/// Metrics under i.i.d. test-time modality dropout: for each rate, the mean
/// over `seeds` Bernoulli masks (rows that would lose everything are
/// redrawn). Rate 0 is a single unmasked pass. `only` restricts every
/// sample to one modality on top of the random mask.
pub fn evaluate_under_dropout(
    model: &FusionModel,
    test: &MultimodalBatch,
    rates: &[f64],
    seeds: usize,
    temperature: f64,
    eval_seed: u64,
    only: Option<usize>,
) -> Result<Vec<EvalRow>> {
    let (n, m) = (test.len(), test.modalities());
    let streams = RngStreams::new(eval_seed);
    let mut rows = Vec::with_capacity(rates.len());
    for (ri, &rate) in rates.iter().enumerate() {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("evaluation rate {rate} outside [0, 1)")));
        }
        let draws = if rate == 0.0 { 1 } else { seeds };
        let mut per_seed = Vec::with_capacity(draws);
        for s in 0..draws {
            let mut keep = if rate == 0.0 {
                Presence::all(n, m)
            } else {
                let mut rng = streams.substream(Stream::Eval, ((ri as u64) << 16) | s as u64);
                bernoulli_mask(n, m, rate, &mut rng)?
            };
            if let Some(k) = only {
                for i in 0..n {
                    for j in 0..m {
                        if j != k {
                            keep.set(i, j, false);
                        }
                    }
                }
            }
            let logits = logits_with_fallback(model, test, &keep)?;
            per_seed.push(metrics_from_logits(&logits, test.labels(), temperature)?);
        }
        rows.push(EvalRow {
            rate,
            metrics: EvalMetrics::mean(&per_seed),
        });
    }
    Ok(rows)
}

fn mean_task_loss(logits: &Tensor, labels: &Labels, temperature: f64) -> f64 {
    let n = logits.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v / temperature).collect();
        match labels {
            Labels::Single(y) => {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                total += lse - row[y[i]];
            }
            Labels::Multi(t) => {
                let c = row.len() as f64;
                for (x, &y) in row.iter().zip(t.row(i)) {
                    total += (softplus(*x) - y * x) / c;
                }
            }
        }
    }
    total / n as f64
}

/// Temperature minimising the mean task loss of `logits / T`, by
/// golden-section search over `log T ∈ [ln 0.01, ln 100]`.
pub fn fit_temperature_logits(logits: &Tensor, labels: &Labels) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("temperature fit on an empty batch".into()));
    }
    let degenerate = (0..logits.rows()).all(|i| {
        let r = logits.row(i);
        r.iter().all(|&v| v == r[0])
    });
    if degenerate {
        return Err(Error::InvalidArgument(
            "temperature is unidentifiable: every row of logits is constant".into(),
        ));
    }
    let f = |log_t: f64| mean_task_loss(logits, labels, log_t.exp());
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.01f64.ln(), 100f64.ln());
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-9 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    Ok(((a + b) / 2.0).exp())
}

/// Post-hoc temperature for `model` fitted on unmasked validation data.
pub fn fit_temperature(model: &FusionModel, val: &MultimodalBatch) -> Result<f64> {
    let out = model.forward(val)?;
    fit_temperature_logits(&out.logits, val.labels())
}

/// Subset pairs used by the consistency term for `m` modalities.
fn cec_pairs(m: usize, per_batch: usize, rng: &mut crate::rng::Rng) -> Result<Vec<(SubsetMask, SubsetMask)>> {
    let all = subset_lattice(m)?;
    if m <= 4 {
        return Ok(all);
    }
    Ok(all.choose_multiple(rng, per_batch.min(all.len())).copied().collect())
}

/// Initial model for a run: feature normalisation fitted on `train`,
/// weights drawn from the run's init stream.
pub fn init_model(cfg: &TrainConfig, train: &MultimodalBatch) -> Result<FusionModel> {
    let streams = RngStreams::new(cfg.seed);
    let mc = ModelConfig::new(train.dims(), train.num_classes(), cfg.fused_dim, train.label_mode());
    let mut model = FusionModel::new(mc, FeatureNorm::fit(train), &mut streams.stream(Stream::Init))?;
    model.gate_mode = apply_ablation(cfg).gate;
    Ok(model)
}

/// Trains one configuration on `data` and evaluates it on the test split.
pub fn train(cfg: &TrainConfig, data: &Splits) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    let sw = apply_ablation(cfg);
    let train = &data.train;
    let (n, m) = (train.len(), train.modalities());
    if n == 0 || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::InvalidArgument("every split needs at least one sample".into()));
    }
    if let Some(k) = sw.only {
        if k >= m {
            return Err(Error::UnknownAblation(format!("{} for {m} modalities", cfg.ablation)));
        }
    }
    let streams = RngStreams::new(cfg.seed);
    let mut model = init_model(cfg, train)?;
    let mut opt = AdamWState::new(&model.params());
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let probe = train.head(cfg.schedules.probe_size.min(n));
    let val_probe = data.val.head(cfg.schedules.probe_size.min(data.val.len()));
    let instance = sw.entropy && cfg.lambda.mode == LambdaMode::Instance;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut reference: Option<f64> = None;
    let mut v_max = cfg.lambda.v_max;
    let mut global_step = 0usize;

    for t in 0..cfg.epochs {
        let pi = if sw.masking { schedule_pi(t, &cfg.schedules) } else { 0.0 };
        let lambda_t = if sw.entropy { schedule_lambda(t, &cfg.schedules) } else { 0.0 };

        let mut lambda_cfg = cfg.lambda.clone();
        if instance && cfg.lambda.v_max.is_none() {
            let seed = streams.substream(Stream::Dropout, t as u64).random::<u64>();
            v_max = Some(calibrate_vmax(&model, &val_probe, &cfg.lambda, seed)?);
        }
        lambda_cfg.v_max = v_max;

        // Masks for the whole epoch.
        let mut mask_rng = streams.substream(Stream::Masking, t as u64);
        let mut mask_probs = Vec::new();
        let mut keep = match cfg.schedules.mode {
            MaskMode::Bernoulli => bernoulli_mask(n, m, pi, &mut mask_rng)?,
            MaskMode::Acm => {
                let dist = if sw.masking && pi > 0.0 {
                    let d = acm_distribution(&model, &probe, cfg.schedules.eta, cfg.schedules.family)?;
                    mask_probs = d.probs.clone();
                    d
                } else {
                    MaskDistribution::uniform(m, cfg.schedules.family)?
                };
                drops_to_presence(&sample_mask(&dist, pi, n, &mut mask_rng)?, m)?
            }
        };
        if let Some(k) = sw.only {
            keep = only_presence(n, m, k);
        }
        let masked_fraction = (0..n).filter(|&i| keep.observed_count(i) < m).count() as f64 / n as f64;

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut streams.substream(Stream::Shuffle, t as u64));
        let order_digest = digest_order(&order);
        let mut pair_rng = streams.substream(Stream::Acm, t as u64);

        let mut epoch_steps = Vec::with_capacity(steps_per_epoch);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clean = train.select(idx);
            let batch = apply_mask(&clean, SubsetMask::empty(m), Some(&keep.select_rows(idx)))?;

            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let fwd = model.forward_on_tape(&mut tape, &vars, &batch)?;
            let task = task_loss(&mut tape, fwd.logits, batch.labels())?;

            let cec = if sw.cec {
                let pairs = cec_pairs(m, cfg.cec_pairs_per_batch, &mut pair_rng)?;
                let mut conf = std::collections::BTreeMap::new();
                for &(a, bb) in &pairs {
                    for s in [a, bb] {
                        if let std::collections::btree_map::Entry::Vacant(e) = conf.entry(s) {
                            let sub = model.subset_batch(&clean, s)?;
                            e.insert(model.forward_on_tape(&mut tape, &vars, &sub)?.confidence);
                        }
                    }
                }
                Some(cec_loss(&mut tape, &conf, &pairs)?)
            } else {
                None
            };

            let (lambda, bounds) = if instance {
                let cfg_l = &lambda_cfg;
                let seed = streams
                    .substream(Stream::Dropout, ((t as u64 + 1) << 24) | b as u64)
                    .random::<u64>();
                let ls = instance_lambdas(&model, &batch, cfg_l, seed)?;
                let bounds = LambdaBounds {
                    min: cfg_l.lambda_min,
                    max: cfg_l.lambda_max()?,
                };
                (Lambda::PerSample(ls), bounds)
            } else {
                let bounds = LambdaBounds {
                    min: 0.0,
                    max: cfg.schedules.lambda_max,
                };
                (Lambda::Uniform(lambda_t), bounds)
            };

            let parts = LossParts {
                task,
                neg_entropy: fwd.neg_entropy,
                cec,
            };
            let (total, breakdown) = composite_loss(&mut tape, parts, &lambda, cfg.gamma, cfg.beta, bounds)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: t,
                    step: b,
                    reason: "non-finite loss".into(),
                });
            }
            let r = *reference.get_or_insert(breakdown.total);
            if breakdown.total > cfg.divergence_factor * r.abs().max(1e-8) {
                return Err(Error::Divergence {
                    epoch: t,
                    step: b,
                    reason: format!(
                        "loss {} exceeds {} x initial {}",
                        breakdown.total, cfg.divergence_factor, r
                    ),
                });
            }
            let grads = tape.backward(total)?;
            let g: Vec<Tensor> = vars.vars.iter().map(|&v| grads.wrt(v)).collect();
            let lr_gate = cosine_lr(cfg.lr_gate, global_step, total_steps);
            let lr_base = cosine_lr(cfg.lr_base, global_step, total_steps);
            let lrs: Vec<f64> = (0..g.len())
                .map(|i| if i < GATE_PARAM_TENSORS { lr_gate } else { lr_base })
                .collect();
            adamw_step(&mut model.params_mut(), &g, &mut opt, &lrs, &cfg.adamw)?;
            global_step += 1;
            epoch_steps.push(breakdown);
        }

        let val_logits = model.forward(&data.val)?.logits;
        epochs.push(EpochRecord {
            epoch: t,
            pi,
            lambda: lambda_t,
            loss: LossBreakdown::mean(&epoch_steps),
            val: metrics_from_logits(&val_logits, data.val.labels(), 1.0)?,
            mask_probs,
            order_digest,
            masked_fraction,
        });
        steps.extend(epoch_steps);
    }

    let temperature = if cfg.temp_scaling { fit_temperature(&model, &data.val)? } else { 1.0 };
    let eval_seed = streams.stream(Stream::Eval).random::<u64>();
    let eval = evaluate_under_dropout(&model, &data.test, &cfg.eval_rates, cfg.eval_seeds, temperature, eval_seed, sw.only)?;
    Ok(RunResult {
        epochs,
        steps,
        model,
        temperature,
        v_max,
        eval,
        config_hash: config_hash(cfg)?,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Whether the run's label mode makes mAP@1 the headline metric.
pub fn headline_is_map(mode: LabelMode) -> bool {
    mode == LabelMode::Multi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use rand::SeedableRng;

    fn small_data(seed: u64) -> Splits {
        generate(&SyntheticSpec {
            classes: 4,
            dims: vec![6, 6],
            snr: vec![2.0, 0.3],
            n_train: 256,
            n_val: 128,
            n_test: 128,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn quick(ablation: Ablation, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 64,
            ablation,
            seed,
            fused_dim: 8,
            eval_rates: vec![0.0, 0.5],
            eval_seeds: 2,
            schedules: Schedules {
                t_warm: 2,
                t_lambda: 2,
                probe_size: 64,
                ..Schedules::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn ablation_tags_roundtrip() {
        for a in [Ablation::Full, Ablation::NoEntropy, Ablation::NoCurmask, Ablation::NoGate, Ablation::Only(1)] {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("only_1".parse::<Ablation>().unwrap(), Ablation::Only(0));
        assert!(matches!("no_such".parse::<Ablation>(), Err(Error::UnknownAblation(_))));
        assert!("only_0".parse::<Ablation>().is_err());
    }

    #[test]
    fn zero_epochs_leave_the_initial_model() {
        let data = small_data(1);
        let cfg = TrainConfig {
            gamma: 0.0,
            schedules: Schedules {
                pi_max: 0.0,
                lambda_max: 0.0,
                ..Schedules::default()
            },
            ..quick(Ablation::Full, 0, 3)
        };
        let run = train(&cfg, &data).unwrap();
        assert_eq!(run.model, init_model(&cfg, &data.train).unwrap());
        assert!(run.epochs.is_empty());
    }

    #[test]
    fn training_reduces_task_loss() {
        for seed in 0..5 {
            let data = generate(&SyntheticSpec {
                seed,
                ..SyntheticSpec::default()
            })
            .unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                seed,
                eval_rates: vec![0.0],
                ..TrainConfig::default()
            };
            let run = train(&cfg, &data).unwrap();
            assert!(run.epochs[1].loss.task < run.epochs[0].loss.task, "seed {seed}");
        }
    }

    #[test]
    fn runs_are_deterministic_and_totals_recompute() {
        let data = small_data(4);
        let cfg = quick(Ablation::Full, 3, 9);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.model, b.model);
        for s in &a.steps {
            assert!((s.total - s.recompute_total()).abs() < 1e-12);
        }
    }

    #[test]
    fn ablations_share_data_order() {
        let data = small_data(2);
        let full = train(&quick(Ablation::Full, 2, 5), &data).unwrap();
        let nocur = train(&quick(Ablation::NoCurmask, 2, 5), &data).unwrap();
        for (x, y) in full.epochs.iter().zip(&nocur.epochs) {
            assert_eq!(x.order_digest, y.order_digest);
        }
        assert!(nocur.epochs.iter().all(|e| e.pi == 0.0 && e.masked_fraction == 0.0));
    }

    #[test]
    fn no_entropy_contributes_nothing() {
        let data = small_data(2);
        let run = train(&quick(Ablation::NoEntropy, 3, 5), &data).unwrap();
        for s in &run.steps {
            assert_eq!(s.lambda, 0.0);
            assert_eq!(s.total, s.task + s.gamma * s.cec);
        }
    }

    #[test]
    fn no_gate_never_moves_gate_output() {
        let data = small_data(2);
        let run = train(&quick(Ablation::NoGate, 2, 5), &data).unwrap();
        let out = run.model.forward(&data.test).unwrap();
        assert!(out.p.data().iter().all(|&p| p == 0.5));
        // Gate gradients are zero, so only decoupled weight decay touches them.
        let init = init_model(&quick(Ablation::NoGate, 2, 5), &data.train).unwrap();
        assert_eq!(run.model.gate.w2, init.gate.w2);
        assert_eq!(run.model.gate.b2, init.gate.b2);
    }

    #[test]
    fn single_modality_ablation_sees_one_input() {
        let data = small_data(3);
        let run = train(&quick(Ablation::Only(0), 2, 1), &data).unwrap();
        assert!(run.epochs.iter().all(|e| e.masked_fraction == 1.0));
        assert!(run.steps.iter().all(|s| s.cec == 0.0 && s.ent == 0.0));
        assert!(train(&quick(Ablation::Only(2), 1, 1), &data).is_err());
    }

    #[test]
    fn instance_lambda_mode_trains() {
        let data = small_data(6);
        let mut cfg = quick(Ablation::Full, 2, 2);
        cfg.lambda.mode = LambdaMode::Instance;
        let run = train(&cfg, &data).unwrap();
        let lmin = cfg.lambda.lambda_min;
        let lmax = lmin + softplus(run.v_max.unwrap());
        for s in &run.steps {
            assert!(s.lambda >= lmin && s.lambda <= lmax + 1e-12);
            assert!((s.total - s.recompute_total()).abs() < 1e-12);
        }
    }

    #[test]
    fn rate_zero_matches_plain_metrics() {
        let data = small_data(7);
        let run = train(&quick(Ablation::Full, 1, 1), &data).unwrap();
        let logits = run.model.forward(&data.test).unwrap().logits;
        let plain = metrics_from_logits(&logits, data.test.labels(), 1.0).unwrap();
        let rows = evaluate_under_dropout(&run.model, &data.test, &[0.0], 3, 1.0, 0, None).unwrap();
        assert_eq!(rows[0].metrics, plain);
    }

    /// Labels drawn from `softmax(logits)` make `T = 1` the population optimum.
    #[test]
    fn temperature_of_calibrated_logits_is_near_one() {
        use rand::Rng as _;
        let mut rng = crate::rng::Rng::seed_from_u64(8);
        let n = 20_000;
        let c = 4;
        let logits = Tensor::matrix(n, c, (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let y: Vec<usize> = (0..n)
            .map(|i| {
                let p = crate::tensor::softmax(logits.row(i)).unwrap();
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        return k;
                    }
                }
                c - 1
            })
            .collect();
        let labels = Labels::Single(y);
        let t = fit_temperature_logits(&logits, &labels).unwrap();
        assert!((0.9..=1.1).contains(&t), "{t}");

        let doubled = logits.map(|v| 2.0 * v);
        let t2 = fit_temperature_logits(&doubled, &labels).unwrap();
        assert!((t2 / t - 2.0).abs() < 1e-3, "{t2} vs {t}");
        let restored = mean_task_loss(&doubled, &labels, t2);
        let original = mean_task_loss(&logits, &labels, t);
        assert!((restored - original).abs() < 1e-3);

        assert!(fit_temperature_logits(&Tensor::zeros(&[3, 4]), &Labels::Single(vec![0, 1, 2])).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr_gate: 1e-4,
            lr_base: 1e-3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            eval_rates: vec![1.0],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
