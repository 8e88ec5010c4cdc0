//! Terms of the training objective and their combination:
//!
//! `total = task + λ·ent + γ·cec + β·mask`
//!
//! where `ent = mean_i Σ_m p_im log p_im` (negative gate entropy) and `cec`
//! is the squared hinge on confidence inversions between nested subsets.
//! The mask term has no definition to implement; it is carried as zero so
//! `β` stays in the bookkeeping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::Labels;
use crate::error::{Error, Result};
use crate::lattice::SubsetMask;
use crate::tape::{Tape, Var};
use crate::tensor::{check_simplex, Tensor};

/// Scalar values of every loss term for one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub ent: f64,
    pub cec: f64,
    pub mask: f64,
    pub total: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// `task + λ·ent + γ·cec + β·mask` from the stored parts.
    pub fn recompute_total(&self) -> f64 {
        self.task + self.lambda * self.ent + self.gamma * self.cec + self.beta * self.mask
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.task += b.task / n;
            out.ent += b.ent / n;
            out.cec += b.cec / n;
            out.mask += b.mask / n;
            out.total += b.total / n;
            out.lambda += b.lambda / n;
            out.gamma += b.gamma / n;
            out.beta += b.beta / n;
        }
        out
    }
}

/// Entropy coefficient: one value for the batch, or one per sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Lambda {
    Uniform(f64),
    PerSample(Vec<f64>),
}

/// Admissible range of the entropy coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaBounds {
    pub min: f64,
    pub max: f64,
}

impl LambdaBounds {
    fn check(&self, v: f64) -> Result<()> {
        if !(v.is_finite() && v >= self.min && v <= self.max) {
            return Err(Error::InvalidArgument(format!(
                "entropy coefficient {v} outside [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// Mean cross-entropy (single-label) or mean binary cross-entropy over
/// classes (multi-label).
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &Labels) -> Result<Var> {
    match labels {
        Labels::Single(y) => tape.cross_entropy(logits, y),
        Labels::Multi(t) => tape.bce_with_logits(logits, t),
    }
}

fn check_rows(p: &Tensor) -> Result<()> {
    for i in 0..p.rows() {
        check_simplex(p.row(i))?;
    }
    Ok(())
}

/// Per-sample `Σ p log p` column for simplex rows of `p`.
pub fn neg_entropy_column(tape: &mut Tape, p: Var) -> Result<Var> {
    check_rows(tape.value(p))?;
    tape.neg_entropy_rows(p)
}

/// Batch mean of `Σ_m p_m log p_m`; most negative at the uniform row.
pub fn entropy_penalty(tape: &mut Tape, p: Var) -> Result<Var> {
    let col = neg_entropy_column(tape, p)?;
    tape.mean(col)
}

/// `mean over pairs and samples of ReLU(c^(A) − c^(B))²`.
///
/// `conf` maps each observed subset to an `n × 1` confidence column on the
/// tape.
pub fn cec_loss(tape: &mut Tape, conf: &BTreeMap<SubsetMask, Var>, pairs: &[(SubsetMask, SubsetMask)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("cec_loss needs at least one pair".into()));
    }
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for &(a, b) in pairs {
        if !a.is_strict_subset_of(b) {
            return Err(Error::InvalidArgument(format!("pair ({a}, {b}) is not a strict inclusion")));
        }
        let ca = *conf.get(&a).ok_or_else(|| Error::MissingSubset(a.to_string()))?;
        let cb = *conf.get(&b).ok_or_else(|| Error::MissingSubset(b.to_string()))?;
        let d = tape.sub(ca, cb)?;
        let r = tape.relu(d)?;
        let s = tape.square(r)?;
        count += tape.value(s).len();
        let s = tape.sum(s)?;
        acc = Some(match acc {
            Some(v) => tape.add(v, s)?,
            None => s,
        });
    }
    let total = acc.expect("nonempty pairs");
    tape.scale(total, 1.0 / count as f64)
}

/// Plain-value form of [`cec_loss`] over confidence vectors.
pub fn cec_loss_values(conf: &BTreeMap<SubsetMask, Vec<f64>>, pairs: &[(SubsetMask, SubsetMask)]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (&s, c) in conf {
        let t = Tensor::matrix(c.len(), 1, c.clone())?;
        vars.insert(s, tape.leaf(t));
    }
    let v = cec_loss(&mut tape, &vars, pairs)?;
    Ok(tape.value(v).item())
}

/// Tape handles of the individual loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub task: Var,
    /// `n × 1` column of `Σ p log p`.
    pub neg_entropy: Var,
    pub cec: Option<Var>,
}

/// Combines the terms into the total objective. Returns the handle of the
/// total and its breakdown. With per-sample coefficients the breakdown's
/// `lambda` is the effective coefficient `mean(λ_i e_i) / mean(e_i)`, so
/// `total = task + lambda·ent + …` still holds.
pub fn composite_loss(
    tape: &mut Tape,
    parts: LossParts,
    lambda: &Lambda,
    gamma: f64,
    beta: f64,
    bounds: LambdaBounds,
) -> Result<(Var, LossBreakdown)> {
    if !(gamma >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma = {gamma} and beta = {beta} must be >= 0"
        )));
    }
    let n = tape.value(parts.neg_entropy).len();
    let ent_var = tape.mean(parts.neg_entropy)?;
    let ent = tape.value(ent_var).item();
    let (weighted, lambda_eff) = match lambda {
        Lambda::Uniform(l) => {
            bounds.check(*l)?;
            (tape.scale(ent_var, *l)?, *l)
        }
        Lambda::PerSample(ls) => {
            if ls.len() != n {
                return Err(Error::Shape(format!("{} coefficients for {n} samples", ls.len())));
            }
            for &l in ls {
                bounds.check(l)?;
            }
            let w = tape.weighted_mean(parts.neg_entropy, ls)?;
            let wv = tape.value(w).item();
            let eff = if ent != 0.0 {
                wv / ent
            } else {
                ls.iter().sum::<f64>() / n as f64
            };
            (w, eff)
        }
    };
    let task = tape.value(parts.task).item();
    let mut total = tape.add(parts.task, weighted)?;
    let mut cec = 0.0;
    if let Some(c) = parts.cec {
        cec = tape.value(c).item();
        let scaled = tape.scale(c, gamma)?;
        total = tape.add(total, scaled)?;
    }
    let total_value = tape.value(total).item();
    Ok((
        total,
        LossBreakdown {
            task,
            ent,
            cec,
            mask: 0.0,
            total: total_value,
            lambda: lambda_eff,
            gamma,
            beta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn task_loss_examples() {
        let mut t = Tape::new();
        let mut rows = vec![0.0; 3 * 4];
        let labels = vec![2, 0, 3];
        for (i, &y) in labels.iter().enumerate() {
            rows[i * 4 + y] = 100.0;
        }
        let l = t.leaf(Tensor::matrix(3, 4, rows).unwrap());
        let v = task_loss(&mut t, l, &Labels::Single(labels)).unwrap();
        assert!(value(&t, v) < 1e-6);

        let u = t.leaf(Tensor::zeros(&[5, 10]));
        let v = task_loss(&mut t, u, &Labels::Single(vec![0, 1, 2, 3, 9])).unwrap();
        assert!((value(&t, v) - 10f64.ln()).abs() < 1e-12);

        let bad = task_loss(&mut t, u, &Labels::Single(vec![0, 1, 2, 3, 10]));
        assert!(matches!(bad, Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn task_loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = vec![1, 0, 2, 2];
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let r = &logits[i * 3..i * 3 + 3];
            let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
            expect += -(r[y].exp() / z).ln();
        }
        expect /= 4.0;
        let mut t = Tape::new();
        let l = t.leaf(Tensor::matrix(4, 3, logits.clone()).unwrap());
        let v = task_loss(&mut t, l, &Labels::Single(labels)).unwrap();
        assert!((value(&t, v) - expect).abs() < 1e-12);

        let targets = Tensor::matrix(4, 3, vec![1., 0., 0., 0., 1., 1., 0., 0., 1., 1., 1., 1.]).unwrap();
        let mut expect = 0.0;
        for (x, y) in logits.iter().zip(targets.data()) {
            let s = 1.0 / (1.0 + (-x).exp());
            expect += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        expect /= 12.0;
        let v = task_loss(&mut t, l, &Labels::Multi(targets)).unwrap();
        assert!((value(&t, v) - expect).abs() < 1e-12);
    }

    #[test]
    fn entropy_penalty_examples() {
        let mut t = Tape::new();
        let u = t.leaf(Tensor::filled(&[4, 2], 0.5));
        let v = entropy_penalty(&mut t, u).unwrap();
        assert!((value(&t, v) + 2f64.ln()).abs() < 1e-15);
        let one_hot = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = entropy_penalty(&mut t, one_hot).unwrap();
        assert_eq!(value(&t, v), 0.0);
        let off = t.leaf(Tensor::matrix(1, 2, vec![0.7, 0.7]).unwrap());
        assert!(matches!(entropy_penalty(&mut t, off), Err(Error::OffSimplex { .. })));
    }

    #[test]
    fn entropy_penalty_gradient_wrt_gate_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let err = grad_check(
                |t, x| {
                    let p = t.softmax_rows(x)?;
                    entropy_penalty(t, p)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn entropy_penalty_decreases_towards_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let m = rng.random_range(2..6);
            let mut row: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            let uniform = vec![1.0 / m as f64; m];
            let mut prev = f64::INFINITY;
            for step in 0..=10 {
                let a = step as f64 / 10.0;
                let mix: Vec<f64> = row.iter().zip(&uniform).map(|(r, u)| (1.0 - a) * r + a * u).collect();
                let neg_h = -crate::tensor::entropy(&mix).unwrap();
                assert!(neg_h < prev || (step == 0));
                prev = neg_h;
            }
        }
    }

    fn pair_set() -> (SubsetMask, SubsetMask, SubsetMask) {
        (
            SubsetMask::from_indices(&[0], 2).unwrap(),
            SubsetMask::from_indices(&[1], 2).unwrap(),
            SubsetMask::full(2),
        )
    }

    #[test]
    fn cec_examples() {
        let (a, _, full) = pair_set();
        let pairs = vec![(a, full)];
        let conf = BTreeMap::from([(a, vec![0.7]), (full, vec![0.9])]);
        assert_eq!(cec_loss_values(&conf, &pairs).unwrap(), 0.0);
        let conf = BTreeMap::from([(a, vec![0.9]), (full, vec![0.7])]);
        let v = cec_loss_values(&conf, &pairs).unwrap();
        assert!((v - 0.04).abs() < 1e-15, "{v}");
    }

    #[test]
    fn cec_matches_brute_force() {
        let (a, b, full) = pair_set();
        let pairs = vec![(a, full), (b, full)];
        let ca = vec![0.9, 0.2, 0.55, 0.8];
        let cb = vec![0.4, 0.6, 0.95, 0.1];
        let cf = vec![0.5, 0.5, 0.5, 0.85];
        let conf = BTreeMap::from([(a, ca.clone()), (b, cb.clone()), (full, cf.clone())]);
        let mut sum = 0.0;
        for i in 0..4 {
            for lower in [&ca, &cb] {
                let d: f64 = lower[i] - cf[i];
                if d > 0.0 {
                    sum += d * d;
                }
            }
        }
        let expect = sum / 8.0;
        assert!((cec_loss_values(&conf, &pairs).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cec_errors() {
        let (a, b, full) = pair_set();
        let conf = BTreeMap::from([(a, vec![0.5]), (full, vec![0.5])]);
        assert!(matches!(
            cec_loss_values(&conf, &[(b, full)]),
            Err(Error::MissingSubset(_))
        ));
        assert!(cec_loss_values(&conf, &[(full, a)]).is_err());
        assert!(cec_loss_values(&conf, &[(a, a)]).is_err());
    }

    #[test]
    fn cec_gradient_on_two_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            // columns: c_{1}, c_{2}, c_{1,2} for two samples
            let x = Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
            let err = grad_check(
                |t, x| {
                    let (a, b, full) = pair_set();
                    let conf = BTreeMap::from([(a, t.column(x, 0)?), (b, t.column(x, 1)?), (full, t.column(x, 2)?)]);
                    cec_loss(t, &conf, &[(a, full), (b, full)])
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    fn parts(t: &mut Tape) -> LossParts {
        let task = t.leaf(Tensor::scalar(1.3).unwrap());
        let p = t.leaf(Tensor::matrix(2, 2, vec![0.8, 0.2, 0.4, 0.6]).unwrap());
        let neg_entropy = neg_entropy_column(t, p).unwrap();
        let cec = Some(t.leaf(Tensor::scalar(0.02).unwrap()));
        LossParts { task, neg_entropy, cec }
    }

    #[test]
    fn composite_examples() {
        let bounds = LambdaBounds { min: 0.01, max: 1.0 };
        let mut t = Tape::new();
        let ps = parts(&mut t);
        let (_, b) = composite_loss(&mut t, ps, &Lambda::Uniform(0.01), 0.0, 0.0, bounds).unwrap();
        assert!((b.total - (b.task + 0.01 * b.ent)).abs() < 1e-12);
        assert!((b.total - b.recompute_total()).abs() < 1e-12);

        let zero = LambdaBounds { min: 0.0, max: 1.0 };
        let (_, b) = composite_loss(&mut t, ps, &Lambda::Uniform(0.0), 0.0, 0.0, zero).unwrap();
        assert_eq!(b.total, b.task);

        assert!(composite_loss(&mut t, ps, &Lambda::Uniform(0.001), 0.1, 0.0, bounds).is_err());
        assert!(composite_loss(&mut t, ps, &Lambda::Uniform(0.1), -0.1, 0.0, bounds).is_err());
    }

    #[test]
    fn composite_is_linear_and_monotone_in_lambda() {
        let bounds = LambdaBounds { min: 0.0, max: 10.0 };
        let mut t = Tape::new();
        let ps = parts(&mut t);
        let mut totals = Vec::new();
        for k in 0..=10 {
            let l = k as f64 * 0.5;
            let (_, b) = composite_loss(&mut t, ps, &Lambda::Uniform(l), 0.3, 0.7, bounds).unwrap();
            assert!(b.ent <= 0.0);
            totals.push(b.total);
        }
        for w in totals.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let step = totals[1] - totals[0];
        for w in totals.windows(2) {
            assert!(((w[1] - w[0]) - step).abs() < 1e-12);
        }
        let g0 = composite_loss(&mut t, ps, &Lambda::Uniform(1.0), 0.0, 0.0, bounds).unwrap().1.total;
        let g2 = composite_loss(&mut t, ps, &Lambda::Uniform(1.0), 2.0, 0.0, bounds).unwrap().1.total;
        let g4 = composite_loss(&mut t, ps, &Lambda::Uniform(1.0), 4.0, 0.0, bounds).unwrap().1.total;
        assert!(((g4 - g2) - (g2 - g0)).abs() < 1e-12);
    }

    #[test]
    fn per_sample_lambda_keeps_total_invariant() {
        let bounds = LambdaBounds { min: 0.01, max: 3.0 };
        let mut t = Tape::new();
        let ps = parts(&mut t);
        let (_, b) = composite_loss(&mut t, ps, &Lambda::PerSample(vec![0.7, 1.9]), 0.1, 0.0, bounds).unwrap();
        assert!((b.total - b.recompute_total()).abs() < 1e-12);
        assert!(b.lambda > 0.7 && b.lambda < 1.9);
        assert!(composite_loss(&mut t, ps, &Lambda::PerSample(vec![0.7]), 0.1, 0.0, bounds).is_err());
    }
}
