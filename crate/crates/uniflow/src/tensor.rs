//! Dense row-major tensors.
//!
//! Invariants: `shape.iter().product() == data.len()` always, and every value
//! written through the public constructors or graph ops is finite. Storage is
//! behind an `Arc` so cloning a tensor into the tape is cheap; mutation goes
//! through copy-on-write.

use std::sync::Arc;

use rand::Rng;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },
    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },
    #[error("invalid argument to {context}: {detail}")]
    InvalidArgument { context: String, detail: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Clone, Debug)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![S::zero(); n]) }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; n]) }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]) }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "Tensor::from_vec".into(),
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { context: "Tensor::from_vec".into() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::new(data) })
    }

    /// No finiteness validation; for op outputs whose finiteness the graph
    /// checks itself. Length must still match.
    pub(crate) fn from_vec_unchecked(shape: &[usize], data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    /// Gaussian init with the given standard deviation, Box-Muller over the
    /// caller's stream so draws are identical across scalar types.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::from_f64_c(std * standard_normal(rng)));
        }
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        let v: &mut Vec<S> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// Row `i` of a rank-2 tensor as a slice.
    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> S {
        let c = self.cols();
        self.data[i * c + j]
    }

    /// Same storage, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericsError::ShapeMismatch {
                context: "Tensor::reshape".into(),
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data: Vec<S> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { context: context.into() })
        }
    }

    /// Max |a - b| over elements; shapes must match exactly.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), |m, d| if d > m { d } else { m })
    }

    pub fn squared_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Elementwise conversion between scalar types, via f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data.iter().map(|&v| T::from_f64_c(v.to_f64_c())).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller, one draw per call. u1 is kept away from zero.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// C[m,n] = A[m,k] . B[k,n], accumulated in the ikj order so the inner loop
/// runs down contiguous rows of B and C.
pub fn matmul_nn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(NumericsError::ShapeMismatch {
            context: "matmul_nn".into(),
            detail: format!("[{m},{k}] x [{kb},{n}]"),
        });
    }
    let mut c = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &ad[i * k..(i + 1) * k];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &bd[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + a_ik * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: Arc::new(c) })
}

/// C[m,n] = A[m,k] . B[n,k]^T, i.e. all pairwise row dot products.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(NumericsError::ShapeMismatch {
            context: "matmul_nt".into(),
            detail: format!("[{m},{k}] x [{n},{kb}]^T"),
        });
    }
    let mut c = vec![S::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let a_row = &ad[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &bd[j * k..(j + 1) * k];
            *cv = dot(a_row, b_row);
        }
    }
    Ok(Tensor { shape: vec![m, n], data: Arc::new(c) })
}

/// C[k,n] = A[m,k]^T . B[m,n]; the gradient-side companion of the other two.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = (a.rows(), a.cols());
    let (mb, n) = (b.rows(), b.cols());
    if m != mb {
        return Err(NumericsError::ShapeMismatch {
            context: "matmul_tn".into(),
            detail: format!("[{m},{k}]^T x [{mb},{n}]"),
        });
    }
    let mut c = vec![S::zero(); k * n];
    let ad = a.data();
    let bd = b.data();
    for mm in 0..m {
        let a_row = &ad[mm * k..(mm + 1) * k];
        let b_row = &bd[mm * n..(mm + 1) * n];
        for (i, &a_mi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + a_mi * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![k, n], data: Arc::new(c) })
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Four lanes keep the compiler vectorizing without changing the result
    // order across calls.
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = acc[0] + a[i] * b[i];
        acc[1] = acc[1] + a[i + 1] * b[i + 1];
        acc[2] = acc[2] + a[i + 2] * b[i + 2];
        acc[3] = acc[3] + a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.at2(i, kk) * b.at2(kk, j);
                }
                c.data_mut()[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn from_vec_enforces_shape_product() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2], vec![f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn reshape_shares_data_and_checks_count() {
        let t = Tensor::<f32>::from_vec(&[2, 6], (0..12).map(|i| i as f32).collect()).unwrap();
        let r = t.reshape(&[3, 4]).unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        assert_eq!(r.at2(2, 3), 11.0);
        assert!(t.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn matmul_variants_agree_with_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 2), (7, 4, 9), (8, 8, 8)] {
            let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
            let want = naive_matmul(&a, &b);

            let nn = matmul_nn(&a, &b).unwrap();
            assert!(nn.max_abs_diff(&want) < 1e-12);

            // nt: feed B^T explicitly.
            let mut bt = Tensor::<f64>::zeros(&[n, k]);
            for i in 0..k {
                for j in 0..n {
                    bt.data_mut()[j * k + i] = b.at2(i, j);
                }
            }
            let nt = matmul_nt(&a, &bt).unwrap();
            assert!(nt.max_abs_diff(&want) < 1e-12);

            // tn: feed A^T explicitly.
            let mut at = Tensor::<f64>::zeros(&[k, m]);
            for i in 0..m {
                for j in 0..k {
                    at.data_mut()[j * m + i] = a.at2(i, j);
                }
            }
            let tn = matmul_tn(&at, &b).unwrap();
            assert!(tn.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matmul_nn(&a, &b).is_err());
    }

    #[test]
    fn randn_matches_across_scalar_types() {
        let a = Tensor::<f32>::randn(&[16], 0.02, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Tensor::<f64>::randn(&[16], 0.02, &mut ChaCha8Rng::seed_from_u64(3));
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((*x as f64 - *y).abs() < 1e-7);
        }
    }
}
