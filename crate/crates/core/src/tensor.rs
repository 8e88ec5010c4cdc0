//! Dense row-major tensors of `f64` and the scalar math shared by the
//! fusion layer (softmax, entropy, softplus).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Dense tensor with at most two dimensions in practice.
///
/// All entries are finite; constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor value {bad}")));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1, 1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Internal constructor for values already known to be finite and sized.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count, treating a 1-D tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_parts(vec![idx.len(), c], data)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_parts(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {m}x{k} by {k2}x{n}: inner dimensions differ"
            )));
        }
        Ok(Self::from_parts(
            vec![m, n],
            matmul_raw(&self.data, &other.data, m, k, n),
        ))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// `a[m×k] · b[k×n]`, row-major, i-k-j loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ[k×m]ᵀ · b`: a is stored as m×k, result is k×n where b is m×n.
pub(crate) fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · bᵀ` where b is stored as k×n; result m×k.
pub(crate) fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            out[i * k + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

/// Checks that `p` lies on the simplex within [`SIMPLEX_TOL`].
pub fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if p.is_empty() || !sum.is_finite() || (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL {
        return Err(Error::OffSimplex { sum, min });
    }
    Ok(())
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_simplex(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `ln(1 + eˣ)` without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&a).unwrap(), a);
        let z = Tensor::identity(2).matmul(&Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(&Tensor::zeros(&[3, 1])), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 4.0, -1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let at_b = matmul_at_b(a.data(), b.data(), 2, 3, 2);
        assert_eq!(at_b, a.transpose().matmul(&b).unwrap().into_data());
        let c = Tensor::from_rows(&[vec![1.0, 0.0, 2.0], vec![-1.0, 1.0, 1.0]]).unwrap();
        let a_ct = matmul_a_bt(a.data(), c.data(), 2, 3, 2);
        assert_eq!(a_ct, a.matmul(&c.transpose()).unwrap().into_data());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(big[0], 1.0);
        assert!(big[1] >= 0.0 && big[1] < 1e-300);
        // e^k / (e + e^2 + e^3)
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, &pk) in p.iter().enumerate() {
            assert!((pk - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
        assert!((p[0] - 0.09003).abs() < 1e-5);
        assert!((p[1] - 0.24473).abs() < 1e-5);
        assert!((p[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        let direct = -(0.7 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        let h = entropy(&[0.7, 0.2, 0.1]).unwrap();
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.801819).abs() < 1e-6);
        assert!(matches!(entropy(&[0.7, 0.7]), Err(Error::OffSimplex { .. })));
    }

    #[test]
    fn softplus_examples() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
        let tiny = softplus(-100.0);
        assert!(tiny > 0.0);
        assert!((tiny - (-100f64).exp()).abs() / tiny < 1e-12);
        assert!((tiny - 3.72e-44).abs() < 0.01e-44);
        // continuity at the branch points
        assert!((softplus(30.0 + 1e-12) - softplus(30.0)).abs() < 1e-10);
        assert!((softplus(-30.0 - 1e-12) - softplus(-30.0)).abs() < 1e-20);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
