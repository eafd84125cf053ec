//! Row-major dense `f64` matrices with deterministic (row-parallel) products.

use rand::Rng;

use crate::par;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 })
            .collect();
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * b`.
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul shapes");
        let mut out = Mat::zeros(self.rows, b.cols);
        let n = b.cols;
        if n == 0 {
            return out;
        }
        par::for_each_chunk_mut(&mut out.data, n * 16, |ci, chunk| {
            for (ri, orow) in chunk.chunks_mut(n).enumerate() {
                let arow = self.row(ci * 16 + ri);
                for (k, &a) in arow.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                        *o += a * bv;
                    }
                }
            }
        });
        out
    }

    /// `selfᵀ * b`.
    pub fn matmul_tn(&self, b: &Mat) -> Mat {
        assert_eq!(self.rows, b.rows, "matmul_tn shapes");
        self.transpose().matmul(b)
    }

    /// `self * bᵀ`.
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols, "matmul_nt shapes");
        let mut out = Mat::zeros(self.rows, b.rows);
        let n = b.rows;
        if n == 0 {
            return out;
        }
        par::for_each_chunk_mut(&mut out.data, n * 16, |ci, chunk| {
            for (ri, orow) in chunk.chunks_mut(n).enumerate() {
                let arow = self.row(ci * 16 + ri);
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                }
            }
        });
        out
    }

    /// Adds the `1 x cols` row `bias` to every row.
    pub fn add_row(&mut self, bias: &Mat) {
        assert_eq!(bias.len(), self.cols, "bias width");
        for r in self.data.chunks_mut(self.cols.max(1)) {
            for (v, b) in r.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
    }

    /// `1 x cols` column sums, accumulated in row order.
    pub fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for r in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.data.iter_mut().zip(r) {
                *o += v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, o: &Mat) {
        assert_eq!(self.shape(), o.shape(), "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
