use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex scalar used throughout the crate.
pub type C64 = Complex64;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

/// Dense complex matrix in row-major order.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting NaN/Inf.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        if !data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Convenience constructor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<C64>]) -> Self {
        let nr = rows.len();
        let nc = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == nc), "ragged rows");
        Self { rows: nr, cols: nc, data: rows.iter().flatten().copied().collect() }
    }

    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        let nr = rows.len();
        let nc = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == nc), "ragged rows");
        Self {
            rows: nr,
            cols: nc,
            data: rows.iter().flat_map(|r| r.iter().map(|&x| C64::new(x, 0.0))).collect(),
        }
    }

    pub fn from_diag(diag: &[C64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = C64::new(*d, 0.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c].conj();
            }
        }
        out
    }

    pub fn conj(&self) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z.conj()).collect() }
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul: inner dimensions differ");
        let (n, k, p) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![ZERO; n * p];
        for i in 0..n {
            let row = &mut out[i * p..(i + 1) * p];
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == ZERO {
                    continue;
                }
                let b = &rhs.data[l * p..(l + 1) * p];
                for (o, bj) in row.iter_mut().zip(b) {
                    *o += a * bj;
                }
            }
        }
        Self { rows: n, cols: p, data: out }
    }

    /// `self^* · rhs` without forming the adjoint.
    pub fn adjoint_mul(&self, rhs: &Self) -> Self {
        assert_eq!(self.rows, rhs.rows, "adjoint_mul: row counts differ");
        let (k, n, p) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![ZERO; n * p];
        for l in 0..k {
            let b = &rhs.data[l * p..(l + 1) * p];
            for i in 0..n {
                let a = self.data[l * n + i].conj();
                let row = &mut out[i * p..(i + 1) * p];
                for (o, bj) in row.iter_mut().zip(b) {
                    *o += a * bj;
                }
            }
        }
        Self { rows: n, cols: p, data: out }
    }

    /// `self · rhs^*` without forming the adjoint.
    pub fn mul_adjoint(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.cols, "mul_adjoint: column counts differ");
        let (n, k, p) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![ZERO; n * p];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..p {
                let b = &rhs.data[j * k..(j + 1) * k];
                out[i * p + j] = a.iter().zip(b).fold(ZERO, |acc, (x, y)| acc + x * y.conj());
            }
        }
        Self { rows: n, cols: p, data: out }
    }

    pub fn scale(&self, c: C64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * c).collect() }
    }

    pub fn scale_real(&self, c: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| z * c).collect() }
    }

    pub fn trace(&self) -> C64 {
        assert!(self.is_square(), "trace of non-square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn one_norm(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.data[r * self.cols + c].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Self {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "block out of range");
        let mut out = Self::zeros(nr, nc);
        for r in 0..nr {
            let src = &self.data[(r0 + r) * self.cols + c0..(r0 + r) * self.cols + c0 + nc];
            out.data[r * nc..(r + 1) * nc].copy_from_slice(src);
        }
        out
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Self) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols, "block out of range");
        for r in 0..src.rows {
            let dst = &mut self.data[(r0 + r) * self.cols + c0..(r0 + r) * self.cols + c0 + src.cols];
            dst.copy_from_slice(&src.data[r * src.cols..(r + 1) * src.cols]);
        }
    }

    /// `(A + A^*)/2`, exactly Hermitian bit for bit.
    pub fn hermitian_part(&self) -> Self {
        assert!(self.is_square());
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v = (self.data[r * n + c] + self.data[c * n + r].conj()) * 0.5;
                out.data[r * n + c] = v;
                out.data[c * n + r] = v.conj();
            }
            out.data[r * n + r].im = 0.0;
        }
        out
    }

    /// `(A − A^*)/2`, exactly skew-Hermitian bit for bit.
    pub fn skew_part(&self) -> Self {
        assert!(self.is_square());
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v = (self.data[r * n + c] - self.data[c * n + r].conj()) * 0.5;
                out.data[r * n + c] = v;
                out.data[c * n + r] = -v.conj();
            }
            out.data[r * n + r].re = 0.0;
        }
        out
    }

    /// Largest deviation from Hermitian symmetry, `max |A_rc − conj(A_cr)|`.
    pub fn hermitian_defect(&self) -> f64 {
        let n = self.rows;
        let mut d: f64 = 0.0;
        for r in 0..n {
            for c in r..n {
                d = d.max((self.data[r * n + c] - self.data[c * n + r].conj()).norm());
            }
        }
        d
    }

    /// Largest deviation from skew-Hermitian symmetry.
    pub fn skew_defect(&self) -> f64 {
        let n = self.rows;
        let mut d: f64 = 0.0;
        for r in 0..n {
            for c in r..n {
                d = d.max((self.data[r * n + c] + self.data[c * n + r].conj()).norm());
            }
        }
        d
    }

    /// `‖A^*A − I‖_F`.
    pub fn unitarity_residual(&self) -> f64 {
        let g = self.adjoint_mul(self);
        let n = g.rows;
        let mut s = 0.0;
        for r in 0..n {
            for c in 0..n {
                let target = if r == c { ONE } else { ZERO };
                s += (g.data[r * n + c] - target).norm_sqr();
            }
        }
        s.sqrt()
    }

    /// Inverse by Gauss–Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch { expected: self.rows, got: self.cols });
        }
        let n = self.rows;
        if n == 1 {
            let a = self.data[0];
            if a.norm() < 1e-300 {
                return Err(Error::SingularMatrix(a.norm()));
            }
            return Ok(Self { rows: 1, cols: 1, data: vec![a.inv()] });
        }
        let mut a = self.data.clone();
        let mut inv = Self::identity(n).data;
        for col in 0..n {
            let (piv, pmax) = (col..n)
                .map(|r| (r, a[r * n + col].norm()))
                .fold((col, -1.0), |best, x| if x.1 > best.1 { x } else { best });
            if pmax < 1e-300 {
                return Err(Error::SingularMatrix(pmax));
            }
            if piv != col {
                for c in 0..n {
                    a.swap(piv * n + c, col * n + c);
                    inv.swap(piv * n + c, col * n + c);
                }
            }
            let d = a[col * n + col].inv();
            for c in 0..n {
                a[col * n + c] *= d;
                inv[col * n + c] *= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col];
                if f == ZERO {
                    continue;
                }
                for c in 0..n {
                    let ac = a[col * n + c];
                    let ic = inv[col * n + c];
                    a[r * n + c] -= f * ac;
                    inv[r * n + c] -= f * ic;
                }
            }
        }
        Ok(Self { rows: n, cols: n, data: inv })
    }

    /// Determinant via partial-pivot LU (may overflow for badly scaled input; see `det_arg`).
    pub fn det(&self) -> C64 {
        assert!(self.is_square());
        match self.rows {
            0 => ONE,
            1 => self.data[0],
            2 => self.data[0] * self.data[3] - self.data[1] * self.data[2],
            _ => match super::det_arg(self) {
                Ok(d) => C64::from_polar(d.log_modulus.exp(), d.arg),
                Err(_) => ZERO,
            },
        }
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self.data[r * self.cols + c];
                write!(f, "{:+.6e}{:+.6e}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs)
    }
}

impl Mul<C64> for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: C64) -> ComplexMatrix {
        self.scale(rhs)
    }
}

impl Mul<f64> for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: f64) -> ComplexMatrix {
        self.scale_real(rhs)
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add: shapes differ");
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub: shapes differ");
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn neg(self) -> ComplexMatrix {
        ComplexMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| -z).collect() }
    }
}

impl AddAssign<&ComplexMatrix> for ComplexMatrix {
    fn add_assign(&mut self, rhs: &ComplexMatrix) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add_assign: shapes differ");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl SubAssign<&ComplexMatrix> for ComplexMatrix {
    fn sub_assign(&mut self, rhs: &ComplexMatrix) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub_assign: shapes differ");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}
