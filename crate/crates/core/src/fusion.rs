//! The gated fusion layer.
//!
//! A two-layer gate reads the standardised concatenation of all modality
//! features plus their presence flags and emits logits over modalities.
//! Logits of absent modalities are masked to −∞ before the softmax, so the
//! gate distribution `p` renormalises over what was observed. The fused
//! representation is `z = Σ_m p_m · h_m W_m`, followed by a linear head.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datagen::{apply_mask, LabelMode, Labels, MultimodalBatch};
use crate::error::{Error, Result};
use crate::lattice::SubsetMask;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{entropy_unchecked, sigmoid, softmax_in_place, Tensor};

pub use crate::lattice::subset_lattice;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: Vec<usize>,
    pub classes: usize,
    pub fused_dim: usize,
    pub gate_hidden: usize,
    pub label_mode: LabelMode,
}

impl ModelConfig {
    /// Gate hidden width defaults to twice the total feature width.
    pub fn new(dims: Vec<usize>, classes: usize, fused_dim: usize, label_mode: LabelMode) -> Self {
        let gate_hidden = 2 * dims.iter().sum::<usize>();
        Self {
            dims,
            classes,
            fused_dim,
            gate_hidden,
            label_mode,
        }
    }

    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn gate_input(&self) -> usize {
        self.dims.iter().sum::<usize>() + self.modalities()
    }

    fn validate(&self) -> Result<()> {
        if self.modalities() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("need >= 2 modalities with dims >= 1".into()));
        }
        if self.classes < 1 || self.fused_dim == 0 || self.gate_hidden == 0 {
            return Err(Error::InvalidArgument("classes, fused_dim and gate_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the mixture weights are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Learned,
    /// Equal weight on every observed modality; the gate is bypassed.
    Uniform,
}

/// Two-layer gate MLP: `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Per-feature standardisation of the gate input, fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Mean and standard deviation over the rows where each modality is present.
    pub fn fit(batch: &MultimodalBatch) -> Self {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (m, f) in batch.features().iter().enumerate() {
            let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.presence().get(i, m)).collect();
            for j in 0..f.cols() {
                let n = rows.len().max(1) as f64;
                let mu = rows.iter().map(|&i| f.get(i, j)).sum::<f64>() / n;
                let var = rows.iter().map(|&i| (f.get(i, j) - mu).powi(2)).sum::<f64>() / n;
                mean.push(mu);
                std.push(if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
            }
        }
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub gate: GateState,
    /// `W_m`, one `d_m × d_z` projection per modality.
    pub proj: Vec<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub norm: FeatureNorm,
    pub gate_mode: GateMode,
}

/// Result of a forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `n × M` gate distribution.
    pub p: Tensor,
    pub gate_entropy: Vec<f64>,
    pub z: Tensor,
    pub logits: Tensor,
    pub confidence: Vec<f64>,
}

/// Tape handles for every trainable parameter, in [`FusionModel::params`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    fn gate(&self) -> [Var; 4] {
        [self.vars[0], self.vars[1], self.vars[2], self.vars[3]]
    }

    fn proj(&self, m: usize) -> Var {
        self.vars[4 + m]
    }

    fn head(&self) -> (Var, Var) {
        let k = self.vars.len();
        (self.vars[k - 2], self.vars[k - 1])
    }
}

/// Tape handles produced by [`FusionModel::forward_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct TapeForward {
    pub p: Var,
    /// `n × 1` column of `Σ p log p`.
    pub neg_entropy: Var,
    pub z: Var,
    pub logits: Var,
    /// `n × 1` column of confidences.
    pub confidence: Var,
}

fn uniform_fan_in(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Number of gate tensors at the front of [`FusionModel::params`].
pub const GATE_PARAM_TENSORS: usize = 4;

impl FusionModel {
    /// Fan-in uniform weights, zero biases, and a zero final gate layer so
    /// training starts from the equal-weight mixture.
    pub fn new(config: ModelConfig, norm: FeatureNorm, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (m, hid, dz, c) = (config.modalities(), config.gate_hidden, config.fused_dim, config.classes);
        if norm.mean.len() != config.dims.iter().sum::<usize>() || norm.std.len() != norm.mean.len() {
            return Err(Error::Shape("feature norm width does not match dims".into()));
        }
        let gate = GateState {
            w1: uniform_fan_in(config.gate_input(), hid, rng),
            b1: Tensor::zeros(&[hid]),
            w2: Tensor::zeros(&[hid, m]),
            b2: Tensor::zeros(&[m]),
        };
        let proj = config.dims.iter().map(|&d| uniform_fan_in(d, dz, rng)).collect();
        Ok(Self {
            head_w: uniform_fan_in(dz, c, rng),
            head_b: Tensor::zeros(&[c]),
            gate,
            proj,
            norm,
            gate_mode: GateMode::Learned,
            config,
        })
    }

    pub fn modalities(&self) -> usize {
        self.config.modalities()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.gate.w1, &self.gate.b1, &self.gate.w2, &self.gate.b2];
        out.extend(self.proj.iter());
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.gate.w1, &mut self.gate.b1, &mut self.gate.w2, &mut self.gate.b2];
        out.extend(self.proj.iter_mut());
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.params().into_iter().map(|p| tape.leaf(p.clone())).collect(),
        }
    }

    pub fn check_batch(&self, batch: &MultimodalBatch) -> Result<()> {
        if batch.dims() != self.config.dims {
            return Err(Error::Shape(format!(
                "batch dims {:?} vs model dims {:?}",
                batch.dims(),
                self.config.dims
            )));
        }
        if batch.num_classes() != self.config.classes || batch.label_mode() != self.config.label_mode {
            return Err(Error::Shape(format!(
                "batch has {} classes ({:?}), model {} ({:?})",
                batch.num_classes(),
                batch.label_mode(),
                self.config.classes,
                self.config.label_mode
            )));
        }
        if let Some(i) = batch.presence().first_empty_row() {
            return Err(Error::AllMasked(i));
        }
        Ok(())
    }

    /// Standardised features of observed modalities (zeros for absent ones)
    /// followed by the presence flags.
    pub fn gate_input(&self, batch: &MultimodalBatch) -> Tensor {
        let n = batch.len();
        let width = self.config.gate_input();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            let mut offset = 0;
            for (m, f) in batch.features().iter().enumerate() {
                let present = batch.presence().get(i, m);
                for (j, &v) in f.row(i).iter().enumerate() {
                    let k = offset + j;
                    data.push(if present { (v - self.norm.mean[k]) / self.norm.std[k] } else { 0.0 });
                }
                offset += f.cols();
            }
            data.extend(batch.presence().row(i).iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Tensor::from_parts(vec![n, width], data)
    }

    /// Records the forward pass on `tape` using the parameter handles `vars`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &ParamVars, batch: &MultimodalBatch) -> Result<TapeForward> {
        self.check_batch(batch)?;
        let n = batch.len();
        let m = self.modalities();
        let mask = batch.presence().bits();

        let p = match self.gate_mode {
            GateMode::Learned => {
                let [w1, b1, w2, b2] = vars.gate();
                let x = tape.leaf(self.gate_input(batch));
                let h = tape.matmul(x, w1)?;
                let h = tape.add_bias(h, b1)?;
                let h = tape.relu(h)?;
                let g = tape.matmul(h, w2)?;
                let g = tape.add_bias(g, b2)?;
                tape.masked_softmax_rows(g, mask)?
            }
            GateMode::Uniform => {
                let zeros = tape.leaf(Tensor::zeros(&[n, m]));
                tape.masked_softmax_rows(zeros, mask)?
            }
        };
        let neg_entropy = tape.neg_entropy_rows(p)?;

        let mut z: Option<Var> = None;
        for (j, f) in batch.features().iter().enumerate() {
            let h = tape.leaf(f.clone());
            let proj = tape.matmul(h, vars.proj(j))?;
            let pj = tape.column(p, j)?;
            let term = tape.mul_row_scalar(proj, pj)?;
            z = Some(match z {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let z = z.expect("at least two modalities");
        let (hw, hb) = vars.head();
        let logits = tape.matmul(z, hw)?;
        let logits = tape.add_bias(logits, hb)?;
        let probs = match self.config.label_mode {
            LabelMode::Single => tape.softmax_rows(logits)?,
            LabelMode::Multi => tape.sigmoid(logits)?,
        };
        let confidence = tape.max_rows(probs)?;
        Ok(TapeForward {
            p,
            neg_entropy,
            z,
            logits,
            confidence,
        })
    }

    /// Deterministic evaluation pass.
    pub fn forward(&self, batch: &MultimodalBatch) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let out = self.forward_on_tape(&mut tape, &vars, batch)?;
        let p = tape.value(out.p).clone();
        let gate_entropy = (0..p.rows()).map(|i| entropy_unchecked(p.row(i))).collect();
        Ok(ForwardOutput {
            gate_entropy,
            z: tape.value(out.z).clone(),
            logits: tape.value(out.logits).clone(),
            confidence: tape.value(out.confidence).data().to_vec(),
            p,
        })
    }

    /// Gate entropy of every row, without evaluating the experts or the head.
    pub fn gate_entropies(&self, batch: &MultimodalBatch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let presence = batch.presence();
        let logits = match self.gate_mode {
            GateMode::Learned => {
                let mut h = self.gate_input(batch).matmul(&self.gate.w1)?;
                let b1 = self.gate.b1.data();
                for row in h.data_mut().chunks_mut(b1.len()) {
                    for (v, b) in row.iter_mut().zip(b1) {
                        *v = (*v + b).max(0.0);
                    }
                }
                let mut g = h.matmul(&self.gate.w2)?;
                let b2 = self.gate.b2.data();
                for row in g.data_mut().chunks_mut(b2.len()) {
                    for (v, b) in row.iter_mut().zip(b2) {
                        *v += b;
                    }
                }
                Some(g)
            }
            GateMode::Uniform => None,
        };
        Ok((0..batch.len())
            .map(|i| {
                let mut row: Vec<f64> = (0..self.modalities())
                    .filter(|&j| presence.get(i, j))
                    .map(|j| logits.as_ref().map_or(0.0, |g| g.get(i, j)))
                    .collect();
                softmax_in_place(&mut row);
                entropy_unchecked(&row)
            })
            .collect())
    }

    /// Predictor restricted to the observed subset `a`: the complement of
    /// `a` is masked before the forward pass.
    pub fn predict_subset(&self, batch: &MultimodalBatch, a: SubsetMask) -> Result<ForwardOutput> {
        let masked = self.subset_batch(batch, a)?;
        self.forward(&masked)
    }

    pub fn subset_batch(&self, batch: &MultimodalBatch, a: SubsetMask) -> Result<MultimodalBatch> {
        if a.is_empty() {
            return Err(Error::InvalidArgument("predict_subset needs a nonempty subset".into()));
        }
        if a.modalities() != self.modalities() {
            return Err(Error::Shape(format!(
                "subset over {} modalities for a {}-modality model",
                a.modalities(),
                self.modalities()
            )));
        }
        apply_mask(batch, a.complement(), None)
    }

    /// Class logits of the single-branch head `head(dropout(h) W_m)`.
    /// `dropout` is a keep mask over the entries of `h` and the drop rate
    /// it was drawn with; kept entries are scaled by `1 / (1 − rate)`.
    pub fn branch_logits(&self, m: usize, h: &[f64], dropout: Option<(&[bool], f64)>) -> Vec<f64> {
        let w = &self.proj[m];
        let (d, dz) = (w.rows(), w.cols());
        let mut u = vec![0.0; dz];
        for j in 0..d {
            let v = match dropout {
                Some((k, _)) if !k[j] => continue,
                Some((_, rate)) => h[j] / (1.0 - rate),
                None => h[j],
            };
            for (acc, &wv) in u.iter_mut().zip(w.row(j)) {
                *acc += v * wv;
            }
        }
        let c = self.config.classes;
        let mut out = self.head_b.data().to_vec();
        for (k, &uk) in u.iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(self.head_w.row(k)) {
                *o += uk * wv;
            }
        }
        debug_assert_eq!(out.len(), c);
        out
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            model: self.clone(),
        };
        let text = serde_json::to_string_pretty(&ckpt).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "aecf-checkpoint-v1";

/// On-disk model: all parameter arrays plus the hash of the resolved config
/// that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub model: FusionModel,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {}", ckpt.format)));
        }
        for p in ckpt.model.params() {
            if !p.is_finite() {
                return Err(Error::NonFinite("checkpoint parameters".into()));
            }
        }
        Ok(ckpt)
    }
}

/// Confidence per row of `logits / temperature`: max softmax probability in
/// single-label mode, max sigmoid in multi-label mode.
pub fn confidences(logits: &Tensor, mode: LabelMode, temperature: f64) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let mut row: Vec<f64> = logits.row(i).iter().map(|v| v / temperature).collect();
            match mode {
                LabelMode::Single => {
                    softmax_in_place(&mut row);
                    row.iter().copied().fold(0.0, f64::max)
                }
                LabelMode::Multi => row.iter().map(|&v| sigmoid(v)).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Whether each sample's top-1 prediction is correct.
pub fn top1_hits(logits: &Tensor, labels: &Labels) -> Vec<bool> {
    (0..logits.rows())
        .map(|i| labels.is_hit(i, crate::tensor::argmax(logits.row(i))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use crate::lattice::Presence;
    use crate::tensor::softmax;
    use rand::SeedableRng;

    fn tiny_batch(n: usize, seed: u64) -> MultimodalBatch {
        let spec = SyntheticSpec {
            dims: vec![3, 3],
            classes: 2,
            n_train: n.max(2),
            n_val: 2,
            n_test: 2,
            seed,
            ..Default::default()
        };
        generate(&spec).unwrap().train
    }

    fn tiny_model(seed: u64, batch: &MultimodalBatch) -> FusionModel {
        let cfg = ModelConfig::new(vec![3, 3], 2, 4, LabelMode::Single);
        let mut rng = Rng::seed_from_u64(seed);
        let mut model = FusionModel::new(cfg, FeatureNorm::fit(batch), &mut rng).unwrap();
        // randomise the zero-initialised parts so every path is exercised
        let flat: Vec<f64> = model.to_flat().iter().map(|_| rng.random_range(-0.8..0.8)).collect();
        model.set_flat(&flat).unwrap();
        model
    }

    #[test]
    fn zero_gate_gives_equal_weights() {
        let batch = tiny_batch(8, 1);
        let cfg = ModelConfig::new(vec![3, 3], 2, 4, LabelMode::Single);
        let model = FusionModel::new(cfg, FeatureNorm::fit(&batch), &mut Rng::seed_from_u64(0)).unwrap();
        let out = model.forward(&batch).unwrap();
        for i in 0..batch.len() {
            assert_eq!(out.p.row(i), &[0.5, 0.5]);
            assert!((out.gate_entropy[i] - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_modality_gets_zero_weight() {
        let batch = tiny_batch(8, 2);
        let model = tiny_model(3, &batch);
        let drop2 = SubsetMask::from_indices(&[1], 2).unwrap();
        let out = model.forward(&apply_mask(&batch, drop2, None).unwrap()).unwrap();
        for i in 0..batch.len() {
            assert_eq!(out.p.row(i), &[1.0, 0.0]);
            assert_eq!(out.gate_entropy[i], 0.0);
        }
    }

    /// Straight-line recomputation of one sample with plain loops.
    fn oracle_logits(model: &FusionModel, batch: &MultimodalBatch, i: usize) -> Vec<f64> {
        let x = model.gate_input(batch);
        let g = &model.gate;
        let hid = g.b1.len();
        let mut h = vec![0.0; hid];
        for k in 0..hid {
            let mut s = g.b1.data()[k];
            for (j, &xj) in x.row(i).iter().enumerate() {
                s += xj * g.w1.get(j, k);
            }
            h[k] = s.max(0.0);
        }
        let mut gl = vec![0.0; 2];
        for (m, out) in gl.iter_mut().enumerate() {
            *out = g.b2.data()[m] + (0..hid).map(|k| h[k] * g.w2.get(k, m)).sum::<f64>();
        }
        let p = softmax(&gl).unwrap();
        let dz = model.config.fused_dim;
        let mut z = vec![0.0; dz];
        for m in 0..2 {
            let f = batch.features()[m].row(i);
            for (q, zq) in z.iter_mut().enumerate() {
                *zq += p[m] * (0..f.len()).map(|j| f[j] * model.proj[m].get(j, q)).sum::<f64>();
            }
        }
        (0..2)
            .map(|c| model.head_b.data()[c] + (0..dz).map(|q| z[q] * model.head_w.get(q, c)).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let batch = tiny_batch(6, 4);
        let model = tiny_model(5, &batch);
        let single = batch.head(1);
        let out = model.forward(&single).unwrap();
        let expect = oracle_logits(&model, &single, 0);
        for (a, b) in out.logits.row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let p = softmax(out.logits.row(0)).unwrap();
        assert_eq!(out.confidence[0], p[0].max(p[1]));
    }

    #[test]
    fn predict_subset_is_masked_forward() {
        let batch = tiny_batch(10, 6);
        let model = tiny_model(7, &batch);
        let full = SubsetMask::full(2);
        assert_eq!(model.predict_subset(&batch, full).unwrap(), model.forward(&batch).unwrap());
        let first = SubsetMask::from_indices(&[0], 2).unwrap();
        let drop2 = SubsetMask::from_indices(&[1], 2).unwrap();
        assert_eq!(
            model.predict_subset(&batch, first).unwrap(),
            model.forward(&apply_mask(&batch, drop2, None).unwrap()).unwrap()
        );
        assert!(model.predict_subset(&batch, SubsetMask::empty(2)).is_err());

        let confs: Vec<Vec<f64>> = SubsetMask::all_nonempty(2)
            .into_iter()
            .map(|a| model.predict_subset(&batch, a).unwrap().confidence)
            .collect();
        assert_eq!(confs.len(), 3);
        assert_ne!(confs[0], confs[1]);
        assert_ne!(confs[0], confs[2]);
        assert_ne!(confs[1], confs[2]);
    }

    #[test]
    fn saturated_gate_ignores_masking() {
        let batch = tiny_batch(10, 8);
        let mut model = tiny_model(9, &batch);
        model.gate.b2 = Tensor::vector(vec![0.0, -900.0]).unwrap();
        let full = model.forward(&batch).unwrap();
        assert!(full.p.data().chunks(2).all(|r| r[1] == 0.0));
        let drop2 = SubsetMask::from_indices(&[1], 2).unwrap();
        let masked = model.forward(&apply_mask(&batch, drop2, None).unwrap()).unwrap();
        for (a, b) in full.logits.data().iter().zip(masked.logits.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_gate_mode() {
        let batch = tiny_batch(10, 10);
        let mut model = tiny_model(11, &batch);
        model.gate_mode = GateMode::Uniform;
        let keep = Presence::from_bits(2, 2, vec![true, true, false, true]).unwrap();
        let b = apply_mask(&batch.head(2), SubsetMask::empty(2), Some(&keep)).unwrap();
        let out = model.forward(&b).unwrap();
        assert_eq!(out.p.row(0), &[0.5, 0.5]);
        assert_eq!(out.p.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn gate_entropies_match_forward() {
        let batch = tiny_batch(12, 13);
        let mut model = tiny_model(14, &batch);
        let drop2 = SubsetMask::from_indices(&[1], 2).unwrap();
        for b in [batch.clone(), apply_mask(&batch, drop2, None).unwrap()] {
            for mode in [GateMode::Learned, GateMode::Uniform] {
                model.gate_mode = mode;
                let fast = model.gate_entropies(&b).unwrap();
                let full = model.forward(&b).unwrap().gate_entropy;
                assert_eq!(fast.len(), full.len());
                for (a, e) in fast.iter().zip(&full) {
                    assert!((a - e).abs() < 1e-12, "{a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_batches() {
        let batch = tiny_batch(4, 12);
        let cfg = ModelConfig::new(vec![3, 4], 2, 4, LabelMode::Single);
        let model = FusionModel::new(cfg, FeatureNorm::identity(7), &mut Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(model.forward(&batch), Err(Error::Shape(_))));
    }

    #[test]
    fn flat_roundtrip_and_checkpoint() {
        let batch = tiny_batch(4, 13);
        let model = tiny_model(14, &batch);
        let mut copy = model.clone();
        copy.set_flat(&model.to_flat()).unwrap();
        assert_eq!(copy, model);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        model.save(&path, "abc").unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.config_hash, "abc");
    }

    #[test]
    fn branch_logits_without_dropout_match_projection() {
        let batch = tiny_batch(4, 15);
        let model = tiny_model(16, &batch);
        let h = batch.features()[0].row(0);
        let direct = Tensor::matrix(1, 3, h.to_vec())
            .unwrap()
            .matmul(&model.proj[0])
            .unwrap()
            .matmul(&model.head_w)
            .unwrap();
        let got = model.branch_logits(0, h, None);
        for (k, g) in got.iter().enumerate() {
            assert!((g - (direct.data()[k] + model.head_b.data()[k])).abs() < 1e-12);
        }
    }
}
