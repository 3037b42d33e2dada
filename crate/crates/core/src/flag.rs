//! Affine chart on the flag manifold `𝐔(n)/𝐔(m)^{k+1}`, radial maps and the
//! Laplace–Beltrami generator.
//!
//! A unitary `U` is split into an `(k+1) × (k+1)` grid of `m × m` blocks. For
//! column block `j`, `W_j` stacks the first `k` blocks and `Z_j` is the bottom
//! block; the chart coordinate is `w_j = W_j Z_j^{-1}`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{ComplexMatrix, HermitianMatrix, UnitaryMatrix, C64, ZERO};

/// `|det Z_j|` below this leaves the chart.
pub const CHART_GUARD: f64 = 1e-8;
/// Tolerance on `‖w_j^* w_ℓ + I‖_F`.
pub const CHART_TOL: f64 = 1e-8;

/// Block size `m` and flag length `k`; `n = (k+1) m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagDims {
    m: usize,
    k: usize,
}

impl FlagDims {
    pub fn new(m: usize, k: usize) -> Result<Self> {
        if m < 1 || k < 1 {
            return Err(Error::InvalidDimension(format!("need m >= 1 and k >= 1, got m={m}, k={k}")));
        }
        Ok(Self { m, k })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        (self.k + 1) * self.m
    }

    /// Number of column blocks, `k + 1`.
    pub fn blocks(&self) -> usize {
        self.k + 1
    }

    /// Rows of each chart block, `n − m`.
    pub fn chart_rows(&self) -> usize {
        self.k * self.m
    }

    fn check_unitary(&self, u: &UnitaryMatrix) -> Result<()> {
        if u.dim() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: u.dim() });
        }
        Ok(())
    }
}

/// Chart coordinates `(w_1, …, w_{k+1})`, each `(n−m) × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlagPoint {
    dims: FlagDims,
    w: Vec<ComplexMatrix>,
}

impl FlagPoint {
    /// Validates block shapes and the chart constraint `w_j^* w_ℓ = −I`.
    pub fn new(dims: FlagDims, w: Vec<ComplexMatrix>) -> Result<Self> {
        let p = Self::from_blocks(dims, w)?;
        let res = p.chart_residual();
        if res > CHART_TOL {
            return Err(Error::OutsideChart(res));
        }
        Ok(p)
    }

    /// Shape-checked but not constraint-checked; used for perturbed points.
    pub fn from_blocks(dims: FlagDims, w: Vec<ComplexMatrix>) -> Result<Self> {
        if w.len() != dims.blocks() {
            return Err(Error::DimensionMismatch { expected: dims.blocks(), got: w.len() });
        }
        for b in &w {
            if b.rows() != dims.chart_rows() || b.cols() != dims.m() {
                return Err(Error::InvalidDimension(format!(
                    "chart block must be {}x{}, got {}x{}",
                    dims.chart_rows(),
                    dims.m(),
                    b.rows(),
                    b.cols()
                )));
            }
            if !b.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        Ok(Self { dims, w })
    }

    pub fn dims(&self) -> FlagDims {
        self.dims
    }

    pub fn blocks(&self) -> &[ComplexMatrix] {
        &self.w
    }

    pub fn block(&self, j: usize) -> &ComplexMatrix {
        &self.w[j]
    }

    /// `max_{j≠ℓ} ‖w_j^* w_ℓ + I‖_F`.
    pub fn chart_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let id = ComplexMatrix::identity(self.dims.m());
        for j in 0..self.w.len() {
            for l in 0..self.w.len() {
                if j != l {
                    let g = &self.w[j].adjoint_mul(&self.w[l]) + &id;
                    worst = worst.max(g.frobenius_norm());
                }
            }
        }
        worst
    }

    /// Blockwise `(a + b)/2`.
    pub fn midpoint(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::ChartMismatch);
        }
        let w = self.w.iter().zip(&other.w).map(|(a, b)| (a + b).scale_real(0.5)).collect();
        Ok(Self { dims: self.dims, w })
    }

    /// Largest blockwise Frobenius distance.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::ChartMismatch);
        }
        Ok(self.w.iter().zip(&other.w).map(|(a, b)| (a - b).frobenius_norm()).fold(0.0, f64::max))
    }
}

/// `(Λ_1, …, Λ_{k+1})`, PSD `m × m` blocks summing to the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint {
    dims: FlagDims,
    lambda: Vec<HermitianMatrix>,
}

impl SimplexPoint {
    /// Checks PSD within −1e-10, eigenvalues ≤ 1 + 1e-10 and `‖ΣΛ − I‖_F ≤ 1e-8`.
    pub fn new(dims: FlagDims, lambda: Vec<HermitianMatrix>) -> Result<Self> {
        let p = Self::from_blocks(dims, lambda)?;
        let dev = p.sum_deviation();
        if dev > 1e-8 {
            return Err(Error::IrreparableState(dev));
        }
        for l in &p.lambda {
            let e = crate::matcore::eigh(l);
            let lo = e.values[0];
            let hi = e.values[e.values.len() - 1];
            if lo < -1e-10 {
                return Err(Error::BoundaryContact(lo));
            }
            if hi > 1.0 + 1e-10 {
                return Err(Error::BoundaryContact(1.0 - hi));
            }
        }
        Ok(p)
    }

    pub(crate) fn from_blocks(dims: FlagDims, lambda: Vec<HermitianMatrix>) -> Result<Self> {
        if lambda.len() != dims.blocks() {
            return Err(Error::DimensionMismatch { expected: dims.blocks(), got: lambda.len() });
        }
        if let Some(b) = lambda.iter().find(|b| b.dim() != dims.m()) {
            return Err(Error::DimensionMismatch { expected: dims.m(), got: b.dim() });
        }
        Ok(Self { dims, lambda })
    }

    /// The barycenter `Λ_j = I/(k+1)`.
    pub fn barycenter(dims: FlagDims) -> Self {
        let v = 1.0 / dims.blocks() as f64;
        let lambda = (0..dims.blocks()).map(|_| HermitianMatrix::from_real_diag(&vec![v; dims.m()])).collect();
        Self { dims, lambda }
    }

    pub fn dims(&self) -> FlagDims {
        self.dims
    }

    pub fn blocks(&self) -> &[HermitianMatrix] {
        &self.lambda
    }

    pub fn block(&self, j: usize) -> &HermitianMatrix {
        &self.lambda[j]
    }

    pub fn into_blocks(self) -> Vec<HermitianMatrix> {
        self.lambda
    }

    /// `‖Σ_j Λ_j − I‖_F`.
    pub fn sum_deviation(&self) -> f64 {
        let mut s = ComplexMatrix::identity(self.dims.m()).scale_real(-1.0);
        for l in &self.lambda {
            s += l.as_matrix();
        }
        s.frobenius_norm()
    }

    /// Smallest eigenvalue over all blocks.
    pub fn min_eigenvalue(&self) -> f64 {
        self.lambda
            .iter()
            .map(|l| if l.dim() == 1 { l[(0, 0)].re } else { crate::matcore::eigh(l).values[0] })
            .fold(f64::INFINITY, f64::min)
    }
}

/// A unitary whose radial part is the barycenter: block `(i, j)` is `ω^{ij} I_m / √(k+1)`.
pub fn barycenter_unitary(dims: FlagDims) -> UnitaryMatrix {
    let (m, b) = (dims.m(), dims.blocks());
    let scale = 1.0 / (b as f64).sqrt();
    let u = ComplexMatrix::from_fn(dims.n(), dims.n(), |r, c| {
        if r % m != c % m {
            return ZERO;
        }
        let (i, j) = (r / m, c / m);
        C64::from_polar(scale, 2.0 * PI * ((i * j) % b) as f64 / b as f64)
    });
    UnitaryMatrix::new(u).expect("block Fourier matrix is unitary")
}

/// Bottom-row blocks `Z_j = U_{(k+1)j}`.
pub fn bottom_blocks(u: &UnitaryMatrix, dims: FlagDims) -> Vec<ComplexMatrix> {
    let (m, k) = (dims.m(), dims.k());
    (0..dims.blocks()).map(|j| u.block(k * m, j * m, m, m)).collect()
}

/// `w_j = W_j Z_j^{-1}`.
pub fn project_affine(u: &UnitaryMatrix, dims: FlagDims) -> Result<FlagPoint> {
    dims.check_unitary(u)?;
    let (m, k) = (dims.m(), dims.k());
    let mut w = Vec::with_capacity(dims.blocks());
    for j in 0..dims.blocks() {
        let z = u.block(k * m, j * m, m, m);
        let d = z.det().norm();
        if !(d >= CHART_GUARD) {
            return Err(Error::OutsideChart(d));
        }
        let upper = u.block(0, j * m, k * m, m);
        w.push(upper.matmul(&z.inverse()?));
    }
    Ok(FlagPoint { dims, w })
}

/// `Λ_j = Z_j Z_j^*`.
pub fn radial_from_unitary(u: &UnitaryMatrix, dims: FlagDims) -> SimplexPoint {
    assert_eq!(u.dim(), dims.n(), "radial_from_unitary: dimension mismatch");
    let lambda = bottom_blocks(u, dims).iter().map(|z| HermitianMatrix::symmetrize(&z.mul_adjoint(z))).collect();
    SimplexPoint { dims, lambda }
}

/// `Λ_j = (I + w_j^* w_j)^{-1}`.
pub fn radial_from_chart(w: &FlagPoint) -> Result<SimplexPoint> {
    let lambda = w.w.iter().map(radial_block).collect::<Result<Vec<_>>>()?;
    Ok(SimplexPoint { dims: w.dims, lambda })
}

pub(crate) fn radial_block(w: &ComplexMatrix) -> Result<HermitianMatrix> {
    let mut g = w.adjoint_mul(w);
    for i in 0..g.rows() {
        g[(i, i)] += 1.0;
    }
    Ok(HermitianMatrix::symmetrize(&g.inverse()?))
}

/// Per-unit-time covariations of the flag Brownian motion in chart coordinates.
///
/// Entry `(j, p, q)` of the chart has flat index `p·m + q` within column `j`.
/// The conjugate tables (`dw̄ dw̄`, `dw̄ dw`) are the complex conjugates of these.
/// Mixed covariations across different columns vanish, as do holomorphic ones
/// within a column.
#[derive(Clone, Debug)]
pub struct FlagQvPrediction {
    dims: FlagDims,
    /// `E[dw_{j,pq} dw̄_{j,rs}]/dt = 2 (I + w_j w_j^*)_{pr} (I + w_j^* w_j)_{sq}`.
    mixed: Vec<ComplexMatrix>,
    /// `E[dw_{j,pq} dw_{ℓ,rs}]/dt = −2 (w_ℓ − w_j)_{ps} (w_j − w_ℓ)_{rq}`, stored at `j (k+1) + ℓ`.
    holomorphic: Vec<ComplexMatrix>,
}

impl FlagQvPrediction {
    pub fn dims(&self) -> FlagDims {
        self.dims
    }

    /// Complex coordinates per column, `(n−m) m`.
    pub fn coords_per_block(&self) -> usize {
        self.dims.chart_rows() * self.dims.m()
    }

    /// Table `E[dw_{j,·} dw̄_{j,·}]/dt`.
    pub fn mixed(&self, j: usize) -> &ComplexMatrix {
        &self.mixed[j]
    }

    /// Table `E[dw_{j,·} dw_{ℓ,·}]/dt`; zero when `j = ℓ`.
    pub fn holomorphic(&self, j: usize, l: usize) -> &ComplexMatrix {
        &self.holomorphic[j * self.dims.blocks() + l]
    }

    /// Coefficient of `∂²/∂w_{j,pq}∂w̄_{j,rs}` in `Δ_F`.
    pub fn laplacian_mixed(&self, j: usize) -> ComplexMatrix {
        self.mixed[j].scale_real(2.0)
    }

    /// Coefficient of `∂²/∂w_{j,pq}∂w_{ℓ,rs}` in `Δ_F`.
    pub fn laplacian_holomorphic(&self, j: usize, l: usize) -> ComplexMatrix {
        self.holomorphic(j, l).clone()
    }
}

pub fn flag_qv_predict(w: &FlagPoint) -> FlagQvPrediction {
    let dims = w.dims;
    let (d, m, b) = (dims.chart_rows(), dims.m(), dims.blocks());
    let nc = d * m;
    let mut mixed = Vec::with_capacity(b);
    for wj in &w.w {
        let mut left = wj.mul_adjoint(wj);
        for i in 0..d {
            left[(i, i)] += 1.0;
        }
        let mut right = wj.adjoint_mul(wj);
        for i in 0..m {
            right[(i, i)] += 1.0;
        }
        mixed.push(ComplexMatrix::from_fn(nc, nc, |a, c| {
            let (p, q) = (a / m, a % m);
            let (r, s) = (c / m, c % m);
            left[(p, r)] * right[(s, q)] * 2.0
        }));
    }
    let mut holomorphic = Vec::with_capacity(b * b);
    for j in 0..b {
        for l in 0..b {
            if j == l {
                holomorphic.push(ComplexMatrix::zeros(nc, nc));
                continue;
            }
            let dlj = &w.w[l] - &w.w[j];
            holomorphic.push(ComplexMatrix::from_fn(nc, nc, |a, c| {
                let (p, q) = (a / m, a % m);
                let (r, s) = (c / m, c % m);
                dlj[(p, s)] * dlj[(r, q)] * 2.0
            }));
        }
    }
    FlagQvPrediction { dims, mixed, holomorphic }
}

/// `½Δ_F f` at `w` by central finite differences with step `h`.
///
/// Second real partials in `(Re w_{j,pq}, Im w_{j,pq})` are combined into
/// Wirtinger derivatives and contracted against [`flag_qv_predict`].
pub fn flag_generator_apply(f: &dyn Fn(&FlagPoint) -> f64, w: &FlagPoint, h: f64) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::DegenerateStep(h));
    }
    let qv = flag_qv_predict(w);
    let dims = w.dims;
    let (m, b) = (dims.m(), dims.blocks());
    let nc = qv.coords_per_block();
    let total = b * nc;
    let nr = 2 * total;

    // real coordinate r: complex slot r/2, real part if r even.
    let shift = |pt: &mut FlagPoint, r: usize, delta: f64| {
        let slot = r / 2;
        let (j, e) = (slot / nc, slot % nc);
        let z = &mut pt.w[j][(e / m, e % m)];
        if r.is_multiple_of(2) {
            z.re += delta;
        } else {
            z.im += delta;
        }
    };
    let eval = |moves: &[(usize, f64)]| {
        let mut pt = w.clone();
        for &(r, delta) in moves {
            shift(&mut pt, r, delta);
        }
        f(&pt)
    };

    let f0 = f(w);
    let mut hess = vec![0.0; nr * nr];
    for r in 0..nr {
        hess[r * nr + r] = (eval(&[(r, h)]) - 2.0 * f0 + eval(&[(r, -h)])) / (h * h);
        for s in r + 1..nr {
            let v = (eval(&[(r, h), (s, h)]) - eval(&[(r, h), (s, -h)]) - eval(&[(r, -h), (s, h)])
                + eval(&[(r, -h), (s, -h)]))
                / (4.0 * h * h);
            hess[r * nr + s] = v;
            hess[s * nr + r] = v;
        }
    }
    let hx = |a: usize, c: usize| hess[(2 * a) * nr + 2 * c];
    let hy = |a: usize, c: usize| hess[(2 * a + 1) * nr + 2 * c + 1];
    let hxy = |a: usize, c: usize| hess[(2 * a) * nr + 2 * c + 1];
    let hyx = |a: usize, c: usize| hess[(2 * a + 1) * nr + 2 * c];
    // ∂_a∂̄_c f and ∂_a∂_c f
    let d_mixed = |a: usize, c: usize| C64::new(hx(a, c) + hy(a, c), hxy(a, c) - hyx(a, c)) * 0.25;
    let d_holo = |a: usize, c: usize| C64::new(hx(a, c) - hy(a, c), -(hxy(a, c) + hyx(a, c))) * 0.25;

    let mut acc = ZERO;
    for j in 0..b {
        let mix = qv.mixed(j);
        for a in 0..nc {
            for c in 0..nc {
                acc += mix[(a, c)] * d_mixed(j * nc + a, j * nc + c);
            }
        }
        for l in 0..b {
            if l == j {
                continue;
            }
            let hol = qv.holomorphic(j, l);
            for a in 0..nc {
                for c in 0..nc {
                    acc += C64::new((hol[(a, c)] * d_holo(j * nc + a, l * nc + c)).re, 0.0);
                }
            }
        }
    }
    Ok(acc.re)
}
