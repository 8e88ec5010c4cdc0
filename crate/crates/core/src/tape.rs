//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends one node whose inputs have strictly smaller
//! indices, so the node vector is already in topological order. `backward`
//! consumes the tape and walks it once in reverse.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, sigmoid, softmax_in_place, softplus, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    Sigmoid(Var),
    /// Row softmax; masked entries come out as exact zeros and receive no
    /// gradient because the Jacobian is scaled by `p`.
    SoftmaxRows(Var),
    MaxRows(Var, Vec<usize>),
    Column(Var, usize),
    MulRowScalar(Var, Var),
    NegEntropyRows(Var),
    CrossEntropy(Var, Vec<usize>),
    BinaryCrossEntropy(Var, Tensor),
    Sum(Var),
    Mean(Var),
    WeightedMean(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("forward {name}")));
        }
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], data, Op::MatMul(a, b), "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(shape, data, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `x[n×k] + bias[k]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, k) = self.dims(x);
        if self.value(bias).len() != k {
            return Err(Error::Shape(format!(
                "bias of length {} for {n}x{k} input",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        self.push(vec![n, k], data, Op::AddBias(x, bias), "add_bias")
    }

    fn unary(&mut self, x: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(shape, data, op, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), "square", |v| v * v)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Softplus(x), "softplus", softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.dims(x);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(k) {
            softmax_in_place(row);
        }
        self.push(vec![n, k], data, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Row softmax restricted to entries where `mask` is true; the rest are
    /// forced to exactly zero (logit set to −∞ before normalising).
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, k) = self.dims(x);
        if mask.len() != n * k {
            return Err(Error::Shape(format!(
                "mask of length {} for {n}x{k} logits",
                mask.len()
            )));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let keep = &mask[i * k..(i + 1) * k];
            let logits = &src[i * k..(i + 1) * k];
            let max = logits
                .iter()
                .zip(keep)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMasked(i));
            }
            let out = &mut data[i * k..(i + 1) * k];
            let mut z = 0.0;
            for j in 0..k {
                if keep[j] {
                    out[j] = (logits[j] - max).exp();
                    z += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        self.push(vec![n, k], data, Op::SoftmaxRows(x), "masked_softmax_rows")
    }

    /// Row-wise maximum as an `n×1` column; ties pick the lowest index.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.dims(x);
        let src = self.value(x).data();
        let mut idx = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for row in src.chunks(k) {
            let j = crate::tensor::argmax(row);
            idx.push(j);
            data.push(row[j]);
        }
        self.push(vec![n, 1], data, Op::MaxRows(x, idx), "max_rows")
    }

    pub fn column(&mut self, x: Var, c: usize) -> Result<Var> {
        let (n, k) = self.dims(x);
        if c >= k {
            return Err(Error::Shape(format!("column {c} of {n}x{k}")));
        }
        let data = self.value(x).data().chunks(k).map(|r| r[c]).collect();
        self.push(vec![n, 1], data, Op::Column(x, c), "column")
    }

    /// Scales row `i` of `x` by `s[i]`.
    pub fn mul_row_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, k) = self.dims(x);
        if self.value(s).len() != n {
            return Err(Error::Shape(format!(
                "row scale of length {} for {n} rows",
                self.value(s).len()
            )));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(k)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
            .collect();
        self.push(vec![n, k], data, Op::MulRowScalar(x, s), "mul_row_scalar")
    }

    /// `Σ_j p_ij ln p_ij` per row (that is `−H(p_i)`), as an `n×1` column.
    pub fn neg_entropy_rows(&mut self, p: Var) -> Result<Var> {
        let (n, k) = self.dims(p);
        let data = self
            .value(p)
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| v * v.ln())
                    .sum::<f64>()
            })
            .collect();
        self.push(vec![n, 1], data, Op::NegEntropyRows(p), "neg_entropy_rows")
    }

    /// Mean softmax cross-entropy of `logits[n×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(logits);
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (row, &y) in src.chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        self.push(
            vec![1, 1],
            vec![total / n as f64],
            Op::CrossEntropy(logits, labels.to_vec()),
            "cross_entropy",
        )
    }

    /// Mean binary cross-entropy with logits over all `n×C` entries.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.value(logits).shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce logits {:?} vs targets {:?}",
                self.value(logits).shape(),
                targets.shape()
            )));
        }
        let src = self.value(logits).data();
        let total: f64 = src
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum();
        let v = total / src.len() as f64;
        self.push(
            vec![1, 1],
            vec![v],
            Op::BinaryCrossEntropy(logits, targets.clone()),
            "bce",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(vec![1, 1], vec![s], Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(vec![1, 1], vec![s], Op::Mean(x), "mean")
    }

    /// `Σ_i w_i x_i / len(x)` with constant weights.
    pub fn weighted_mean(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if w.len() != t.len() {
            return Err(Error::Shape(format!("{} weights for {} values", w.len(), t.len())));
        }
        let s = t.data().iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / t.len() as f64;
        self.push(vec![1, 1], vec![s], Op::WeightedMean(x, w.to_vec()), "weighted_mean")
    }

    /// Consumes the tape and propagates `d root / d node` to every node the
    /// root depends on. `root` must hold a single value.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(root).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut visits = vec![0u32; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visits[i] += 1;
            let node = &nodes[i];
            let val = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let ga = matmul_a_bt(&g, bv.data(), m, n, k);
                    let gb = matmul_at_b(av.data(), &g, m, k, n);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::AddBias(x, b) => {
                    let k = nodes[b.0].value.len();
                    let mut gb = vec![0.0; k];
                    for row in g.chunks(k) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *x, &g);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Scale(x, c) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Square(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Softplus(x) => {
                    let xv = nodes[x.0].value.data();
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let gx: Vec<f64> = g.iter().zip(val).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SoftmaxRows(x) => {
                    let k = node.value.cols();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, pr), out) in g.chunks(k).zip(val.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            out[j] = pr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::MaxRows(x, idx) => {
                    let k = nodes[x.0].value.cols();
                    let mut gx = vec![0.0; nodes[x.0].value.len()];
                    for (i, (&j, gv)) in idx.iter().zip(&g).enumerate() {
                        gx[i * k + j] = *gv;
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Column(x, c) => {
                    let k = nodes[x.0].value.cols();
                    let mut gx = vec![0.0; nodes[x.0].value.len()];
                    for (i, gv) in g.iter().enumerate() {
                        gx[i * k + c] = *gv;
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::MulRowScalar(x, s) => {
                    let xv = &nodes[x.0].value;
                    let sv = nodes[s.0].value.data();
                    let k = xv.cols();
                    let mut gx = vec![0.0; g.len()];
                    let mut gs = vec![0.0; sv.len()];
                    for i in 0..sv.len() {
                        let gr = &g[i * k..(i + 1) * k];
                        let xr = xv.row(i);
                        for j in 0..k {
                            gx[i * k + j] = gr[j] * sv[i];
                            gs[i] += gr[j] * xr[j];
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *s, &gs);
                }
                Op::NegEntropyRows(p) => {
                    let pv = &nodes[p.0].value;
                    let k = pv.cols();
                    // d(p ln p)/dp = ln p + 1; zero entries sit on the
                    // boundary and get no gradient.
                    let gp: Vec<f64> = pv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(idx, &v)| if v > 0.0 { g[idx / k] * (v.ln() + 1.0) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *p, &gp);
                }
                Op::CrossEntropy(x, labels) => {
                    let xv = &nodes[x.0].value;
                    let (n, c) = (xv.rows(), xv.cols());
                    let scale = g[0] / n as f64;
                    let mut gx = xv.data().to_vec();
                    for (row, &y) in gx.chunks_mut(c).zip(labels) {
                        softmax_in_place(row);
                        row[y] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::BinaryCrossEntropy(x, targets) => {
                    let xv = nodes[x.0].value.data();
                    let scale = g[0] / xv.len() as f64;
                    let gx: Vec<f64> = xv
                        .iter()
                        .zip(targets.data())
                        .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let gx = vec![g[0]; nodes[x.0].value.len()];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Mean(x) => {
                    let len = nodes[x.0].value.len();
                    let gx = vec![g[0] / len as f64; len];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::WeightedMean(x, w) => {
                    let len = w.len() as f64;
                    let gx: Vec<f64> = w.iter().map(|wi| g[0] * wi / len).collect();
                    accumulate(&mut grads, *x, &gx);
                }
            }
            grads[i] = Some(g);
        }

        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward gradients".into()));
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            visits,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visits: Vec<u32>,
}

impl Gradients {
    /// Gradient with respect to `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// How many times each node was processed during the reverse sweep.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

/// Central-difference gradient of a scalar function built on a fresh tape.
pub fn numerical_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::NonFinite("finite difference".into()));
        }
        out.push(d);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Maximum coordinate-wise relative error between the tape gradient and
/// central differences: `|a − n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv);
    let numeric = numerical_gradient(&f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
        .fold(0.0, f64::max))
}
