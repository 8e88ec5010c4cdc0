//! Synthetic multimodal classification data and modality masking.
//!
//! Each class owns a Gaussian prototype per modality. A sample of class `y`
//! observes `scale · prototype_m[y] + ε` in modality `m`, with
//! `ε ~ N(0, 1/snr_m · I)`. The features play the role of frozen encoder
//! outputs, so nothing downstream ever updates them.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Presence, SubsetMask, MAX_MODALITIES};
use crate::rng::{Rng, RngStreams, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// One class per sample, softmax head.
    Single,
    /// Several active classes per sample, independent sigmoid outputs.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Single(Vec<usize>),
    /// `n × C` matrix of 0/1 targets.
    Multi(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> LabelMode {
        match self {
            Labels::Single(_) => LabelMode::Single,
            Labels::Multi(_) => LabelMode::Multi,
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Labels::Single(v) => Labels::Single(idx.iter().map(|&i| v[i]).collect()),
            Labels::Multi(t) => Labels::Multi(t.select_rows(idx)),
        }
    }

    /// Whether predicted class `k` is correct for sample `i`.
    pub fn is_hit(&self, i: usize, k: usize) -> bool {
        match self {
            Labels::Single(v) => v[i] == k,
            Labels::Multi(t) => t.get(i, k) > 0.5,
        }
    }
}

/// Per-modality feature matrices, presence flags and labels for `n` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalBatch {
    features: Vec<Tensor>,
    presence: Presence,
    labels: Labels,
    num_classes: usize,
}

impl MultimodalBatch {
    pub fn new(features: Vec<Tensor>, presence: Presence, labels: Labels, num_classes: usize) -> Result<Self> {
        let batch = Self {
            features,
            presence,
            labels,
            num_classes,
        };
        batch.validate()?;
        Ok(batch)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.features.len() != self.presence.modalities() {
            return Err(Error::Shape(format!(
                "{} feature matrices for {} presence columns",
                self.features.len(),
                self.presence.modalities()
            )));
        }
        if self.presence.rows() != n {
            return Err(Error::Shape(format!(
                "presence has {} rows, labels {n}",
                self.presence.rows()
            )));
        }
        for (m, f) in self.features.iter().enumerate() {
            if f.shape().len() != 2 || f.rows() != n {
                return Err(Error::Shape(format!(
                    "modality {m} features {:?} for {n} samples",
                    f.shape()
                )));
            }
            for i in 0..n {
                if !self.presence.get(i, m) && f.row(i).iter().any(|&v| v != 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i} modality {m} is absent but not zero-filled"
                    )));
                }
            }
        }
        match &self.labels {
            Labels::Single(v) => {
                if let Some(&bad) = v.iter().find(|&&y| y >= self.num_classes) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        classes: self.num_classes,
                    });
                }
            }
            Labels::Multi(t) => {
                if t.cols() != self.num_classes || t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidArgument(
                        "multi-label targets must be an n x C matrix of 0/1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modalities(&self) -> usize {
        self.features.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.features.iter().map(Tensor::cols).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn presence(&self) -> &Presence {
        &self.presence
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn label_mode(&self) -> LabelMode {
        self.labels.mode()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.iter().map(|f| f.select_rows(idx)).collect(),
            presence: self.presence.select_rows(idx),
            labels: self.labels.select(idx),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Parameters of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "spec_default::classes")]
    pub classes: usize,
    #[serde(default = "spec_default::dims")]
    pub dims: Vec<usize>,
    /// Signal-to-noise ratio per modality; its length fixes M. Required in
    /// configuration files.
    pub snr: Vec<f64>,
    #[serde(default = "spec_default::n_train")]
    pub n_train: usize,
    #[serde(default = "spec_default::n_eval")]
    pub n_val: usize,
    #[serde(default = "spec_default::n_eval")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "spec_default::label_mode")]
    pub label_mode: LabelMode,
    #[serde(default = "spec_default::signal_scale")]
    pub signal_scale: f64,
    /// Upper bound on active labels per sample in multi-label mode.
    #[serde(default = "spec_default::max_labels")]
    pub max_labels: usize,
    /// Per-modality probability that a sample's features carry no class
    /// signal, only noise inflated by `corruption_noise`. Empty means none.
    #[serde(default)]
    pub corruption: Vec<f64>,
    #[serde(default = "spec_default::corruption_noise")]
    pub corruption_noise: f64,
}

mod spec_default {
    use super::LabelMode;

    pub fn classes() -> usize {
        10
    }
    pub fn dims() -> Vec<usize> {
        vec![32, 32]
    }
    pub fn n_train() -> usize {
        6000
    }
    pub fn n_eval() -> usize {
        1000
    }
    pub fn label_mode() -> LabelMode {
        LabelMode::Single
    }
    pub fn signal_scale() -> f64 {
        1.0
    }
    pub fn max_labels() -> usize {
        3
    }
    pub fn corruption_noise() -> f64 {
        3.0
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: spec_default::classes(),
            dims: spec_default::dims(),
            snr: vec![1.0, 0.05],
            n_train: spec_default::n_train(),
            n_val: spec_default::n_eval(),
            n_test: spec_default::n_eval(),
            seed: 0,
            label_mode: spec_default::label_mode(),
            signal_scale: spec_default::signal_scale(),
            max_labels: spec_default::max_labels(),
            corruption: Vec::new(),
            corruption_noise: spec_default::corruption_noise(),
        }
    }
}

impl SyntheticSpec {
    pub fn modalities(&self) -> usize {
        self.snr.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities();
        if !(2..=MAX_MODALITIES).contains(&m) {
            return Err(Error::InvalidArgument(format!(
                "need 2..={MAX_MODALITIES} modalities, got {m}"
            )));
        }
        if self.dims.len() != m {
            return Err(Error::InvalidArgument(format!(
                "{} dims for {m} modalities",
                self.dims.len()
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("feature dims must be >= 1".into()));
        }
        if self.snr.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("every snr must be finite and > 0".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            return Err(Error::InvalidArgument("signal_scale must be > 0".into()));
        }
        if self.label_mode == LabelMode::Multi && !(1..=self.classes).contains(&self.max_labels) {
            return Err(Error::InvalidArgument(format!(
                "max_labels must lie in 1..={}",
                self.classes
            )));
        }
        if !self.corruption.is_empty() && self.corruption.len() != m {
            return Err(Error::InvalidArgument(format!(
                "{} corruption rates for {m} modalities",
                self.corruption.len()
            )));
        }
        if self.corruption.iter().any(|q| !(0.0..1.0).contains(q)) {
            return Err(Error::InvalidArgument("corruption rates must lie in [0, 1)".into()));
        }
        if !(self.corruption_noise.is_finite() && self.corruption_noise > 0.0) {
            return Err(Error::InvalidArgument("corruption_noise must be > 0".into()));
        }
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n < self.classes {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {n} cannot cover {} classes",
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

/// Train, validation and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: MultimodalBatch,
    pub val: MultimodalBatch,
    pub test: MultimodalBatch,
}

pub fn generate(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    let streams = RngStreams::new(spec.seed);
    let mut proto_rng = streams.stream(Stream::Data);
    let prototypes: Vec<Vec<Vec<f64>>> = spec
        .dims
        .iter()
        .map(|&d| {
            (0..spec.classes)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut proto_rng)).collect())
                .collect()
        })
        .collect();

    let make = |split: u64, n: usize| {
        let mut rng = streams.substream(Stream::Data, split);
        sample_split(spec, &prototypes, n, &mut rng)
    };
    Ok(Splits {
        train: make(1, spec.n_train)?,
        val: make(2, spec.n_val)?,
        test: make(3, spec.n_test)?,
    })
}

fn sample_split(spec: &SyntheticSpec, prototypes: &[Vec<Vec<f64>>], n: usize, rng: &mut Rng) -> Result<MultimodalBatch> {
    let c = spec.classes;
    // active classes per sample; the first C samples pin every class so
    // each split covers all of them
    let active: Vec<Vec<usize>> = match spec.label_mode {
        LabelMode::Single => {
            let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
            labels.shuffle(rng);
            labels.into_iter().map(|y| vec![y]).collect()
        }
        LabelMode::Multi => {
            let mut rows: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let k = rng.random_range(1..=spec.max_labels);
                    let mut classes: Vec<usize> = (0..c).collect();
                    classes.shuffle(rng);
                    let mut picked: Vec<usize> = classes.into_iter().take(k).collect();
                    if i < c && !picked.contains(&i) {
                        picked[0] = i;
                    }
                    picked.sort_unstable();
                    picked
                })
                .collect();
            rows.shuffle(rng);
            rows
        }
    };

    let corrupted: Vec<Vec<bool>> = spec
        .corruption
        .iter()
        .map(|&q| (0..n).map(|_| rng.random::<f64>() < q).collect())
        .collect();

    let features = spec
        .dims
        .iter()
        .enumerate()
        .map(|(m, &d)| {
            let noise_sd = 1.0 / spec.snr[m].sqrt();
            let mut data = Vec::with_capacity(n * d);
            for (i, classes) in active.iter().enumerate() {
                let broken = corrupted.get(m).is_some_and(|c| c[i]);
                let norm = spec.signal_scale / (classes.len() as f64).sqrt();
                for j in 0..d {
                    let eps: f64 = StandardNormal.sample(rng);
                    if broken {
                        data.push(spec.corruption_noise * noise_sd * eps);
                    } else {
                        let signal: f64 = classes.iter().map(|&y| prototypes[m][y][j]).sum();
                        data.push(norm * signal + noise_sd * eps);
                    }
                }
            }
            Tensor::matrix(n, d, data)
        })
        .collect::<Result<Vec<_>>>()?;

    let labels = match spec.label_mode {
        LabelMode::Single => Labels::Single(active.iter().map(|a| a[0]).collect()),
        LabelMode::Multi => {
            let mut t = Tensor::zeros(&[n, c]);
            for (i, classes) in active.iter().enumerate() {
                for &y in classes {
                    t.set(i, y, 1.0);
                }
            }
            Labels::Multi(t)
        }
    };
    MultimodalBatch::new(features, Presence::all(n, spec.modalities()), labels, c)
}

/// Drops the modalities in `drop` for every sample and, when given, also
/// every modality whose flag in `keep` is false. Dropped features become the
/// zero vector and their presence flag is cleared.
pub fn apply_mask(batch: &MultimodalBatch, drop: SubsetMask, keep: Option<&Presence>) -> Result<MultimodalBatch> {
    let (n, m) = (batch.len(), batch.modalities());
    if drop.modalities() != m {
        return Err(Error::Shape(format!(
            "drop set over {} modalities for a {m}-modality batch",
            drop.modalities()
        )));
    }
    if let Some(k) = keep {
        if k.rows() != n || k.modalities() != m {
            return Err(Error::Shape(format!(
                "keep mask {}x{} for batch {n}x{m}",
                k.rows(),
                k.modalities()
            )));
        }
    }
    let mut presence = batch.presence.clone();
    for i in 0..n {
        for j in 0..m {
            let kept = !drop.contains(j) && keep.is_none_or(|k| k.get(i, j));
            if !kept {
                presence.set(i, j, false);
            }
        }
    }
    if let Some(i) = presence.first_empty_row() {
        return Err(Error::AllMasked(i));
    }
    let features = batch
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let mut f = f.clone();
            let d = f.cols();
            let data = f.data_mut();
            for i in 0..n {
                if !presence.get(i, j) {
                    data[i * d..(i + 1) * d].fill(0.0);
                }
            }
            f
        })
        .collect();
    Ok(MultimodalBatch {
        features,
        presence,
        labels: batch.labels.clone(),
        num_classes: batch.num_classes,
    })
}

/// Keeps each (sample, modality) independently with probability `1 − π`;
/// rows that would keep nothing are redrawn.
pub fn bernoulli_mask(n: usize, m: usize, drop_rate: f64, rng: &mut Rng) -> Result<Presence> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::InvalidArgument(format!(
            "drop rate {drop_rate} must lie in [0, 1)"
        )));
    }
    let mut bits = Vec::with_capacity(n * m);
    let mut row = vec![false; m];
    for _ in 0..n {
        loop {
            for r in row.iter_mut() {
                *r = rng.random::<f64>() >= drop_rate;
            }
            if row.iter().any(|&b| b) {
                break;
            }
        }
        bits.extend_from_slice(&row);
    }
    Presence::from_bits(n, m, bits)
}

const MAGIC: &[u8; 8] = b"AECFDAT1";

/// Writes one split in the little-endian binary layout documented in
/// `docs/FORMATS.md`.
pub fn write_batch<W: Write>(batch: &MultimodalBatch, mut w: W) -> Result<()> {
    let (n, m, c) = (batch.len(), batch.modalities(), batch.num_classes);
    w.write_all(MAGIC)?;
    for v in [m as u32, c as u32, matches!(batch.labels, Labels::Multi(_)) as u32, 0] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(n as u64).to_le_bytes())?;
    for d in batch.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut put = |v: f64| w.write_all(&v.to_le_bytes());
    for f in &batch.features {
        for &v in f.data() {
            put(v)?;
        }
    }
    for &b in batch.presence.bits() {
        put(if b { 1.0 } else { 0.0 })?;
    }
    match &batch.labels {
        Labels::Single(v) => {
            for &y in v {
                put(y as f64)?;
            }
        }
        Labels::Multi(t) => {
            for &v in t.data() {
                put(v)?;
            }
        }
    }
    Ok(())
}

pub fn read_batch<R: Read>(mut r: R) -> Result<MultimodalBatch> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an AECF dataset file".into()));
    }
    let mut u32s = [0u32; 4];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [m, c, mode, _] = u32s.map(|v| v as usize);
    if !(1..=MAX_MODALITIES).contains(&m) || mode > 1 {
        return Err(Error::Format(format!("bad header: M = {m}, label mode = {mode}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut dims = Vec::with_capacity(m);
    for _ in 0..m {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let mut take = |count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            out.push(f64::from_le_bytes(b8));
        }
        Ok(out)
    };
    let features = dims
        .iter()
        .map(|&d| Tensor::matrix(n, d, take(n * d)?))
        .collect::<Result<Vec<_>>>()?;
    let presence = Presence::from_bits(n, m, take(n * m)?.into_iter().map(|v| v != 0.0).collect())?;
    let labels = if mode == 0 {
        Labels::Single(take(n)?.into_iter().map(|v| v as usize).collect())
    } else {
        Labels::Multi(Tensor::matrix(n, c, take(n * c)?)?)
    };
    MultimodalBatch::new(features, presence, labels, c)
}
