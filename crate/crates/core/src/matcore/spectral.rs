use super::{ComplexMatrix, HermitianMatrix, C64, ZERO};

const MAX_SWEEPS: usize = 100;

/// Spectral decomposition `H = V diag(values) V^*`, values ascending.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

impl HermitianEigen {
    /// `V diag(f) V^*` for a replacement spectrum `f`.
    pub fn reconstruct(&self, spectrum: &[f64]) -> HermitianMatrix {
        let n = self.values.len();
        let v = &self.vectors;
        let mut out = ComplexMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = ZERO;
                for (l, &f) in spectrum.iter().enumerate() {
                    s += v[(i, l)] * v[(j, l)].conj() * f;
                }
                out[(i, j)] = s;
                out[(j, i)] = s.conj();
            }
            out[(i, i)].im = 0.0;
        }
        HermitianMatrix(out)
    }
}

/// Cyclic complex Jacobi eigensolver.
///
/// Sweeps until the off-diagonal Frobenius norm drops below
/// `1e-13 (1 + ‖H‖_F)`.
pub fn eigh(h: &HermitianMatrix) -> HermitianEigen {
    let n = h.dim();
    let mut a = h.as_matrix().clone();
    let mut v = ComplexMatrix::identity(n);
    let tol = 1e-13 * (1.0 + a.frobenius_norm());

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += 2.0 * a[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
    let values = order.iter().map(|&i| a[(i, i)].re).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    HermitianEigen { values, vectors }
}

// Annihilates a[p,q] with J = [[c, s], [-s e^{-iφ}, c e^{-iφ}]], a ← J^* a J, v ← v J.
fn rotate(a: &mut ComplexMatrix, v: &mut ComplexMatrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    let r = apq.norm();
    if r == 0.0 {
        return;
    }
    let app = a[(p, p)].re;
    let aqq = a[(q, q)].re;
    let tau = (aqq - app) / (2.0 * r);
    let t = if tau >= 0.0 { 1.0 / (tau + (1.0 + tau * tau).sqrt()) } else { -1.0 / (-tau + (1.0 + tau * tau).sqrt()) };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let ph = (apq / r).conj();
    let j_pp = C64::new(c, 0.0);
    let j_pq = C64::new(s, 0.0);
    let j_qp = ph * (-s);
    let j_qq = ph * c;

    let n = a.rows();
    for row in 0..n {
        let x = a[(row, p)];
        let y = a[(row, q)];
        a[(row, p)] = x * j_pp + y * j_qp;
        a[(row, q)] = x * j_pq + y * j_qq;
        let x = v[(row, p)];
        let y = v[(row, q)];
        v[(row, p)] = x * j_pp + y * j_qp;
        v[(row, q)] = x * j_pq + y * j_qq;
    }
    for col in 0..n {
        let x = a[(p, col)];
        let y = a[(q, col)];
        a[(p, col)] = j_pp.conj() * x + j_qp.conj() * y;
        a[(q, col)] = j_pq.conj() * x + j_qq.conj() * y;
    }
    a[(p, q)] = ZERO;
    a[(q, p)] = ZERO;
    a[(p, p)].im = 0.0;
    a[(q, q)].im = 0.0;
}
