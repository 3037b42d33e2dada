//! Complex matrix primitives with exact contracts.
//!
//! Everything downstream (the Lie-group integrator, the chart maps, the simplex
//! repair) is built from the handful of operations here: Hermitian functional
//! calculus through a cyclic Jacobi eigensolver, a log-determinant with phase,
//! polar re-unitarization and spectral clipping. Dimensions in this crate stay
//! small (n ≤ 32), so plain dense storage and Jacobi sweeps are adequate.

mod dense;
mod expm;
mod spectral;

use std::f64::consts::PI;
use std::ops::Deref;

pub use dense::{ComplexMatrix, C64};
pub(crate) use dense::{I, ZERO};
pub use expm::expm;
pub use spectral::{eigh, HermitianEigen};

use crate::error::{Error, Result};

/// Smallest eigenvalue admitted by inverse powers.
pub const EIG_FLOOR: f64 = 1e-12;

/// Hermitian matrix, `‖H − H^*‖_max ≤ 1e-12 (1 + ‖H‖_max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix(ComplexMatrix);

/// Unitary matrix, `‖U^*U − I‖_F ≤ 1e-10`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryMatrix(ComplexMatrix);

/// Element of the Lie algebra 𝔲(n), `‖A + A^*‖_max ≤ 1e-12 (1 + ‖A‖_max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewHermitianMatrix(ComplexMatrix);

impl HermitianMatrix {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.rows(), got: m.cols() });
        }
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        let defect = m.hermitian_defect();
        if defect > 1e-12 * (1.0 + m.max_abs()) {
            return Err(Error::NotHermitian(defect));
        }
        Ok(Self(m))
    }

    /// Symmetrizes `(M + M^*)/2`; the result is Hermitian bit for bit.
    pub fn symmetrize(m: &ComplexMatrix) -> Self {
        Self(m.hermitian_part())
    }

    pub fn identity(n: usize) -> Self {
        Self(ComplexMatrix::identity(n))
    }

    pub fn from_real_diag(diag: &[f64]) -> Self {
        Self(ComplexMatrix::from_real_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }

    /// Real trace.
    pub fn trace_re(&self) -> f64 {
        self.0.trace().re
    }
}

impl UnitaryMatrix {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.rows(), got: m.cols() });
        }
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        let res = m.unitarity_residual();
        if res > 1e-10 {
            return Err(Error::NotUnitary(res));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix the caller knows to be unitary to working accuracy.
    pub(crate) fn new_unchecked(m: ComplexMatrix) -> Self {
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(ComplexMatrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }
}

impl SkewHermitianMatrix {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch { expected: m.rows(), got: m.cols() });
        }
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        let defect = m.skew_defect();
        if defect > 1e-12 * (1.0 + m.max_abs()) {
            return Err(Error::NotSkewHermitian(defect));
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: ComplexMatrix) -> Self {
        Self(m)
    }

    pub fn zeros(n: usize) -> Self {
        Self(ComplexMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }
}

macro_rules! deref_matrix {
    ($($t:ty),*) => {$(
        impl Deref for $t {
            type Target = ComplexMatrix;
            fn deref(&self) -> &ComplexMatrix {
                &self.0
            }
        }
    )*};
}
deref_matrix!(HermitianMatrix, UnitaryMatrix, SkewHermitianMatrix);

/// `H^p = V diag(λ^p) V^*`.
///
/// Negative exponents require every eigenvalue to be at least [`EIG_FLOOR`].
/// Positive exponents clamp roundoff-negative eigenvalues to zero.
pub fn herm_power(h: &HermitianMatrix, p: f64) -> Result<HermitianMatrix> {
    herm_power_with_floor(h, p, EIG_FLOOR)
}

pub fn herm_power_with_floor(h: &HermitianMatrix, p: f64, eig_floor: f64) -> Result<HermitianMatrix> {
    let eig = eigh(h);
    let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
    if p < 0.0 && min < eig_floor {
        return Err(Error::SingularMatrix(min));
    }
    let mapped: Vec<f64> = eig
        .values
        .iter()
        .map(|&l| if p == 0.5 { l.max(0.0).sqrt() } else if p == -1.0 { 1.0 / l } else { l.max(0.0).powf(p) })
        .collect();
    Ok(eig.reconstruct(&mapped))
}

/// Log-modulus and principal argument of a determinant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetArg {
    pub log_modulus: f64,
    /// In (−π, π].
    pub arg: f64,
}

/// Maps an angle into (−π, π]; −π itself maps to +π.
pub fn principal_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// `det M = exp(log_modulus + i·arg)`, accumulated pivot by pivot so that
/// neither the modulus nor the phase overflows.
pub fn det_arg(m: &ComplexMatrix) -> Result<DetArg> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch { expected: m.rows(), got: m.cols() });
    }
    let n = m.rows();
    let mut a = m.data().to_vec();
    let mut log_mod = 0.0;
    let mut arg = 0.0;
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
            }
            arg += PI;
        }
        let p = a[col * n + col];
        log_mod += pmax.ln();
        arg += p.arg();
        let pinv = p.inv();
        for r in col + 1..n {
            let f = a[r * n + col] * pinv;
            if f == ZERO {
                continue;
            }
            for c in col + 1..n {
                let v = a[col * n + c];
                a[r * n + c] -= f * v;
            }
        }
    }
    Ok(DetArg { log_modulus: log_mod, arg: principal_angle(arg) })
}

/// Unitary polar factor `M (M^*M)^{-1/2}`, the closest unitary in Frobenius norm.
pub fn unitary_project(m: &ComplexMatrix) -> Result<UnitaryMatrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch { expected: m.rows(), got: m.cols() });
    }
    let mut u = polar_pass(m)?;
    // Ill-conditioned input loses accuracy in M^*M; a second pass starts from a near-unitary.
    for _ in 0..2 {
        if u.unitarity_residual() <= 1e-15 * (m.rows() as f64) {
            break;
        }
        u = polar_pass(&u)?;
    }
    Ok(UnitaryMatrix(u))
}

fn polar_pass(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    let gram = HermitianMatrix::symmetrize(&m.adjoint_mul(m));
    let inv_sqrt = herm_power(&gram, -0.5)?;
    Ok(m.matmul(inv_sqrt.as_matrix()))
}

/// Clamps the spectrum into `[lo, hi]`, keeping eigenvectors.
/// Returns the input unchanged when it is already inside.
pub fn eig_clip(h: &HermitianMatrix, lo: f64, hi: f64) -> HermitianMatrix {
    assert!(lo <= hi, "eig_clip: lo > hi");
    if h.dim() == 1 {
        let v = h[(0, 0)].re;
        return HermitianMatrix::from_real_diag(&[v.clamp(lo, hi)]);
    }
    let eig = eigh(h);
    if eig.values.iter().all(|&l| (lo..=hi).contains(&l)) {
        return h.clone();
    }
    let clipped: Vec<f64> = eig.values.iter().map(|&l| l.clamp(lo, hi)).collect();
    eig.reconstruct(&clipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liebm::RngStream;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(n: usize, rng: &mut RngStream) -> ComplexMatrix {
        ComplexMatrix::from_fn(n, n, |_, _| c(rng.normal(), rng.normal()))
    }

    fn random_psd(n: usize, rng: &mut RngStream) -> HermitianMatrix {
        let g = random_matrix(n, rng);
        let h = g.adjoint_mul(&g);
        HermitianMatrix::symmetrize(&(&h + &ComplexMatrix::identity(n).scale_real(0.1)))
    }

    // Cofactor expansion, independent of the pivoted factorization.
    fn cofactor_det(m: &ComplexMatrix) -> C64 {
        let n = m.rows();
        if n == 1 {
            return m[(0, 0)];
        }
        let mut total = ZERO;
        for c0 in 0..n {
            let minor = ComplexMatrix::from_fn(n - 1, n - 1, |r, col| {
                let cc = if col < c0 { col } else { col + 1 };
                m[(r + 1, cc)]
            });
            let sign = if c0 % 2 == 0 { 1.0 } else { -1.0 };
            total += m[(0, c0)] * cofactor_det(&minor) * sign;
        }
        total
    }

    #[test]
    fn herm_power_identity_and_diagonal() {
        let id = HermitianMatrix::identity(2);
        let r = herm_power(&id, 0.5).unwrap();
        assert!((r.as_matrix() - id.as_matrix()).max_abs() < 1e-15);
        let d = HermitianMatrix::from_real_diag(&[4.0, 9.0]);
        let r = herm_power(&d, 0.5).unwrap();
        assert!((r.as_matrix() - &ComplexMatrix::from_real_diag(&[2.0, 3.0])).max_abs() < 1e-14);
    }

    #[test]
    fn inverse_sqrt_multiplies_back_to_identity() {
        let mut rng = RngStream::new(7, 0);
        for n in 1..=5 {
            let h = random_psd(n, &mut rng);
            let r = herm_power(&h, -0.5).unwrap();
            // solve-based oracle: R H R = I  <=>  H R = R^{-1}
            let rhr = r.as_matrix() * &(h.as_matrix() * r.as_matrix());
            assert!((&rhr - &ComplexMatrix::identity(n)).frobenius_norm() < 1e-9);
            let r_inv = r.as_matrix().inverse().unwrap();
            let hr = h.as_matrix() * r.as_matrix();
            assert!((&hr - &r_inv).frobenius_norm() < 1e-9 * (1.0 + hr.frobenius_norm()));
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let mut rng = RngStream::new(8, 0);
        for n in 1..=6 {
            let h = random_psd(n, &mut rng);
            let s = herm_power(&h, 0.5).unwrap();
            let sq = s.as_matrix() * s.as_matrix();
            assert!((&sq - h.as_matrix()).frobenius_norm() <= 1e-10 * (1.0 + h.frobenius_norm()));
        }
    }

    #[test]
    fn negative_power_of_singular_is_rejected() {
        let h = HermitianMatrix::from_real_diag(&[1.0, 1e-14]);
        assert!(matches!(herm_power(&h, -0.5), Err(Error::SingularMatrix(_))));
        assert!(matches!(herm_power(&h, -1.0), Err(Error::SingularMatrix(_))));
        assert!(herm_power(&h, 0.5).is_ok());
    }

    #[test]
    fn non_hermitian_input_is_rejected() {
        let m = ComplexMatrix::from_rows(&[vec![c(1.0, 0.0), c(0.0, 1.0)], vec![c(0.0, 1.0), c(1.0, 0.0)]]);
        assert!(matches!(HermitianMatrix::new(m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn det_arg_examples() {
        let rot = ComplexMatrix::from_real_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        let d = det_arg(&rot).unwrap();
        assert!(d.log_modulus.abs() < 1e-15 && d.arg.abs() < 1e-15);
        let ii = ComplexMatrix::identity(2).scale(I);
        let d = det_arg(&ii).unwrap();
        assert!(d.log_modulus.abs() < 1e-15);
        assert!((d.arg - PI).abs() < 1e-15);
    }

    #[test]
    fn det_arg_matches_cofactor_expansion() {
        let mut rng = RngStream::new(9, 0);
        for _ in 0..50 {
            let m = random_matrix(3, &mut rng);
            let d = det_arg(&m).unwrap();
            let z = C64::from_polar(d.log_modulus.exp(), d.arg);
            let oracle = cofactor_det(&m);
            assert!((z - oracle).norm() <= 1e-10 * oracle.norm());
        }
    }

    #[test]
    fn det_arg_is_multiplicative() {
        let mut rng = RngStream::new(10, 0);
        for _ in 0..50 {
            let a = random_matrix(3, &mut rng);
            let b = random_matrix(3, &mut rng);
            let (da, db, dab) = (det_arg(&a).unwrap(), det_arg(&b).unwrap(), det_arg(&(&a * &b)).unwrap());
            assert!((da.log_modulus + db.log_modulus - dab.log_modulus).abs() < 1e-9);
            assert!(principal_angle(da.arg + db.arg - dab.arg).abs() < 1e-9);
        }
    }

    #[test]
    fn det_arg_singular() {
        let m = ComplexMatrix::zeros(2, 2);
        assert!(matches!(det_arg(&m), Err(Error::SingularMatrix(_))));
    }

    #[test]
    fn principal_angle_branch() {
        assert_eq!(principal_angle(-PI), PI);
        assert_eq!(principal_angle(PI), PI);
        assert!((principal_angle(3.0 * PI) - PI).abs() < 1e-15);
        assert!((principal_angle(0.5 - 4.0 * PI) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn unitary_project_examples() {
        let id = ComplexMatrix::identity(3);
        let p = unitary_project(&id).unwrap();
        assert!((p.as_matrix() - &id).max_abs() < 1e-15);

        let mut rng = RngStream::new(11, 0);
        let u = unitary_project(&random_matrix(4, &mut rng)).unwrap();
        let p = unitary_project(&u.scale_real(2.0)).unwrap();
        assert!((p.as_matrix() - u.as_matrix()).frobenius_norm() < 1e-12);
        let again = unitary_project(u.as_matrix()).unwrap();
        assert!((again.as_matrix() - u.as_matrix()).frobenius_norm() <= 1e-12);

        let e = random_matrix(4, &mut rng);
        let e = e.scale_real(1e-6 / e.frobenius_norm());
        let p = unitary_project(&(u.as_matrix() + &e)).unwrap();
        assert!(p.unitarity_residual() < 1e-14);
    }

    #[test]
    fn eig_clip_examples() {
        let h = HermitianMatrix::from_real_diag(&[-1e-14, 0.5]);
        let out = eig_clip(&h, 0.0, 1.0);
        assert!((out.as_matrix() - &ComplexMatrix::from_real_diag(&[0.0, 0.5])).max_abs() < 1e-15);
        let h = HermitianMatrix::from_real_diag(&[0.2, 0.7]);
        assert_eq!(eig_clip(&h, 0.0, 1.0), h);
        let h = HermitianMatrix::from_real_diag(&[1.3, 0.4]);
        let out = eig_clip(&h, 0.0, 1.0);
        assert!((out.as_matrix() - &ComplexMatrix::from_real_diag(&[1.0, 0.4])).max_abs() < 1e-15);
    }

    #[test]
    fn eig_clip_keeps_eigenvectors() {
        let mut rng = RngStream::new(12, 0);
        let u = unitary_project(&random_matrix(3, &mut rng)).unwrap();
        let d = ComplexMatrix::from_real_diag(&[-0.5, 0.3, 1.7]);
        let h = HermitianMatrix::symmetrize(&(u.as_matrix() * &d.mul_adjoint(u.as_matrix())));
        let out = eig_clip(&h, 0.0, 1.0);
        let d2 = ComplexMatrix::from_real_diag(&[0.0, 0.3, 1.0]);
        let expected = u.as_matrix() * &d2.mul_adjoint(u.as_matrix());
        assert!((out.as_matrix() - &expected).max_abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn sqrt_of_psd_squares_back(seed in any::<u64>(), n in 1usize..6) {
                let mut rng = RngStream::new(seed, 3);
                let h = random_psd(n, &mut rng);
                let s = herm_power(&h, 0.5).unwrap();
                let sq = s.as_matrix() * s.as_matrix();
                prop_assert!((&sq - h.as_matrix()).frobenius_norm() <= 1e-10 * (1.0 + h.frobenius_norm()));
            }

            #[test]
            fn projection_is_unitary(seed in any::<u64>(), n in 1usize..6) {
                let mut rng = RngStream::new(seed, 4);
                let m = random_matrix(n, &mut rng);
                if let Ok(u) = unitary_project(&m) {
                    prop_assert!(UnitaryMatrix::new(u.into_matrix()).is_ok());
                }
            }
        }
    }
}
