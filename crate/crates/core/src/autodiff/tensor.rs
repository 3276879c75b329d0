use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("tensor {rows}×{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn zip(&self, o: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), o.shape());
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub(crate) fn add_assign(&mut self, o: &Tensor) {
        debug_assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }
}

/// `C = A·Bᵀ` with `A: n×k`, `B: m×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "inner dimensions differ");
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut c = Tensor::zeros(n, m);
    gemm(n, k, m, &a.data, (k as isize, 1), &b.data, (1, k as isize), &mut c.data);
    c
}

/// `C = A·B` with `A: n×k`, `B: k×m`.
pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut c = Tensor::zeros(n, m);
    gemm(n, k, m, &a.data, (k as isize, 1), &b.data, (m as isize, 1), &mut c.data);
    c
}

/// `C = Aᵀ·B` with `A: n×k`, `B: n×m`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "outer dimensions differ");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut c = Tensor::zeros(k, m);
    gemm(k, n, m, &a.data, (1, k as isize), &b.data, (m as isize, 1), &mut c.data);
    c
}

/// Raw-slice `C(n×m) = A(n×k)·B(k×m)` for arbitrary strides; `c` is row-major and overwritten.
pub(crate) fn gemm(n: usize, k: usize, m: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
    if n == 0 || m == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: dimensions and strides describe in-bounds views of `a`, `b` and `c`,
    // which are checked by the callers' shape asserts.
    unsafe {
        matrixmultiply::dgemm(n, k, m, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 0.0, c.as_mut_ptr(), m as isize, 1);
    }
}
