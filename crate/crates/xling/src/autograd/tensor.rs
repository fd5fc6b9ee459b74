//! Dense row-major matrices over `f32`/`f64`.
//!
//! `Tensor` is the storage type for every trainable parameter and every
//! intermediate value on the tape. Matrix products dispatch to
//! `matrixmultiply`'s blocked kernels; everything else is plain slice code.

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training, `f64` for verification.
pub trait Real: Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static {
    /// c := alpha * a @ b + beta * c with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover the strided `m x k`, `k x n` and `m x n` regions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Convert an `f64` constant into the working precision.
pub(crate) fn real<F: Real>(x: f64) -> F {
    F::from(x).expect("f64 constant representable in working precision")
}

/// A dense `rows x cols` matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Real> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_elem(rows: usize, cols: usize, v: F) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("{} elements for a {}x{} tensor", data.len(), rows, cols),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Row-major i.i.d. samples from the uniform distribution on
    /// `[-range, range]`. Samples are drawn in `f64` so that the stream of
    /// consumed random numbers does not depend on `F`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, range: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| real(rng.gen_range(-range..=range)))
            .collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Sum of squares accumulated in `f64`.
    pub fn sq_sum(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap();
                v * v
            })
            .sum()
    }

    pub fn scale_in_place(&mut self, s: F) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    /// self += other * s
    pub fn add_scaled(&mut self, other: &Tensor<F>, s: F) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b * s;
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.to_f64().unwrap()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.to_f64().unwrap() as f32).collect(),
        }
    }
}

/// out := a @ b + beta * out
pub(crate) fn matmul_into<F: Real>(a: &Tensor<F>, b: &Tensor<F>, out: &mut Tensor<F>, beta: F) {
    assert_eq!(a.cols, b.rows, "matmul_into inner dims");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols), "matmul_into out dims");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out := a @ b^T + beta * out, where b is stored as an n x k matrix.
pub(crate) fn matmul_tb_into<F: Real>(a: &Tensor<F>, b: &Tensor<F>, out: &mut Tensor<F>, beta: F) {
    assert_eq!(a.cols, b.cols, "matmul_tb_into inner dims");
    assert_eq!((out.rows, out.cols), (a.rows, b.rows), "matmul_tb_into out dims");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out := a^T @ b + beta * out, where a is stored as an m x k matrix.
pub(crate) fn matmul_ta_into<F: Real>(a: &Tensor<F>, b: &Tensor<F>, out: &mut Tensor<F>, beta: F) {
    assert_eq!(a.rows, b.rows, "matmul_ta_into inner dims");
    assert_eq!((out.rows, out.cols), (a.cols, b.cols), "matmul_ta_into out dims");
    let (m, k, n) = (a.cols, a.rows, b.cols);
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            1,
            a.cols as isize,
            b.data.as_ptr(),
            n as isize,
            1,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax with max subtraction. Used by the cross-entropy
/// primitive and exposed for direct verification.
pub fn softmax_rows<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = 0.0f64;
        for &x in row {
            denom += (x - max).to_f64().unwrap().exp();
        }
        let orow = out.row_mut(r);
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = real((x - max).to_f64().unwrap().exp() / denom);
        }
    }
    out
}
