//! Jacobi processes on the simplex of Hermitian matrices.
//!
//! The state is `(Λ_1, …, Λ_{k+1})` with PSD `m × m` blocks summing to `I_m`.
//! The integrated SDE is
//!
//! ```text
//! dΛ_j = Σ_{ℓ≠j} (Λ_j^{1/2} dγ_{ℓj}^* Λ_ℓ^{1/2} + Λ_ℓ^{1/2} dγ_{ℓj} Λ_j^{1/2})
//!        + 2((κ_j + m/2) I − (|κ| + n/2) Λ_j) dt
//! ```
//!
//! whose generator is twice the operator `𝒢^m_κ` of the usual definition
//! ([`DEFINITION_SCALE`]). For `κ = (m/2, …, m/2)` it is the radial part of
//! Brownian motion on the flag manifold.

use crate::error::{Error, Result};
use crate::flag::{FlagDims, SimplexPoint};
use crate::liebm::RngStream;
use crate::matcore::{eig_clip, herm_power, ComplexMatrix, HermitianMatrix, C64, EIG_FLOOR};

/// `𝒢^m_κ = DEFINITION_SCALE × (generator of the integrated SDE)`.
pub const DEFINITION_SCALE: f64 = 0.5;

/// Smallest eigenvalue a state must keep to be stepped.
pub const INTERIOR_FLOOR: f64 = 10.0 * EIG_FLOOR;

/// Maximum halvings of a rejected step before the path is flagged.
pub const MAX_SHRINK: usize = 8;

/// Index `κ = (κ_1, …, κ_{k+1})` with `κ_j > m/2 − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobiIndex {
    kappa: Vec<f64>,
    m: usize,
}

impl JacobiIndex {
    pub fn new(kappa: Vec<f64>, m: usize) -> Result<Self> {
        if m < 1 || kappa.len() < 2 {
            return Err(Error::InvalidDimension(format!("need m >= 1 and at least two blocks, got m={m}, {}", kappa.len())));
        }
        let lower = m as f64 / 2.0 - 1.0;
        if let Some(&bad) = kappa.iter().find(|&&x| !(x > lower) || !x.is_finite()) {
            return Err(Error::ConfigInvalid(format!("kappa entry {bad} must exceed m/2 - 1 = {lower}")));
        }
        Ok(Self { kappa, m })
    }

    /// `κ = (m/2, …, m/2)`, the flag radial index.
    pub fn flag_radial(dims: FlagDims) -> Self {
        Self { kappa: vec![dims.m() as f64 / 2.0; dims.blocks()], m: dims.m() }
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// `|κ|`.
    pub fn total(&self) -> f64 {
        self.kappa.iter().sum()
    }

    pub fn dims(&self) -> FlagDims {
        FlagDims::new(self.m, self.kappa.len() - 1).expect("validated at construction")
    }

    /// Drift of block `j`: `2((κ_j + m/2) I − (|κ| + n/2) Λ_j)`.
    pub fn drift(&self, j: usize, lambda: &ComplexMatrix) -> ComplexMatrix {
        let m = self.m as f64;
        let n = m * self.kappa.len() as f64;
        let mut d = lambda.scale_real(-2.0 * (self.total() + n / 2.0));
        for i in 0..self.m {
            d[(i, i)] += 2.0 * (self.kappa[j] + m / 2.0);
        }
        d
    }
}

/// A simplex point at a given time.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobiState {
    pub point: SimplexPoint,
    pub time: f64,
}

fn check_index(point: &SimplexPoint, idx: &JacobiIndex) -> Result<()> {
    if point.dims() != idx.dims() {
        return Err(Error::DimensionMismatch { expected: idx.dims().n(), got: point.dims().n() });
    }
    Ok(())
}

/// Raw Euler–Maruyama update of all blocks, before repair.
fn euler_blocks(point: &SimplexPoint, idx: &JacobiIndex, dt: f64, rng: &mut RngStream) -> Result<Vec<ComplexMatrix>> {
    let dims = point.dims();
    let (m, b) = (dims.m(), dims.blocks());
    let roots = point.blocks().iter().map(|l| herm_power(l, 0.5).map(HermitianMatrix::into_matrix)).collect::<Result<Vec<_>>>()?;
    let mut raw: Vec<ComplexMatrix> =
        point.blocks().iter().enumerate().map(|(j, l)| l.as_matrix() + &idx.drift(j, l.as_matrix()).scale_real(dt)).collect();
    let s = dt.sqrt();
    for l in 0..b {
        for j in l + 1..b {
            // γ_{ℓj}; the partner γ_{jℓ} = −γ_{ℓj}^*.
            let g = ComplexMatrix::from_fn(m, m, |_, _| C64::new(rng.normal() * s, rng.normal() * s));
            // Λ_ℓ^{1/2} γ_{ℓj} Λ_j^{1/2}; block j gets it plus its adjoint, block ℓ gets minus both.
            let t = roots[l].matmul(&g).matmul(&roots[j]);
            let sym = &t + &t.adjoint();
            raw[j] += &sym;
            raw[l] -= &sym;
        }
    }
    Ok(raw)
}

/// One Euler–Maruyama step followed by [`repair_simplex`].
pub fn step_jacobi(state: &JacobiState, idx: &JacobiIndex, dt: f64, rng: &mut RngStream) -> Result<JacobiState> {
    check_index(&state.point, idx)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidStep(dt));
    }
    let lo = state.point.min_eigenvalue();
    if lo < INTERIOR_FLOOR {
        return Err(Error::BoundaryContact(lo));
    }
    let raw = euler_blocks(&state.point, idx, dt, rng)?;
    Ok(JacobiState { point: repair_simplex(state.point.dims(), raw)?, time: state.time + dt })
}

/// Symmetrize, clip to `[0, 1]`, rebalance the sum, clip again.
pub fn repair_simplex(dims: FlagDims, raw: Vec<ComplexMatrix>) -> Result<SimplexPoint> {
    if raw.len() != dims.blocks() {
        return Err(Error::DimensionMismatch { expected: dims.blocks(), got: raw.len() });
    }
    let m = dims.m();
    let mut excess = ComplexMatrix::identity(m).scale_real(-1.0);
    for r in &raw {
        if r.rows() != m || r.cols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: r.rows() });
        }
        if !r.is_finite() {
            return Err(Error::NonFinite);
        }
        excess += r;
    }
    let dev = excess.frobenius_norm();
    if dev > 0.1 {
        return Err(Error::IrreparableState(dev));
    }
    let clipped: Vec<HermitianMatrix> = raw.iter().map(|r| eig_clip(&HermitianMatrix::symmetrize(r), 0.0, 1.0)).collect();
    let mut excess = ComplexMatrix::identity(m).scale_real(-1.0);
    for c in &clipped {
        excess += c.as_matrix();
    }
    let share = HermitianMatrix::symmetrize(&excess.scale_real(1.0 / dims.blocks() as f64));
    let out = clipped
        .iter()
        .map(|c| eig_clip(&HermitianMatrix::symmetrize(&(c.as_matrix() - share.as_matrix())), 0.0, 1.0))
        .collect();
    SimplexPoint::from_blocks(dims, out)
}

/// Advances by `dt`, halving rejected steps (two fresh half steps each) up to
/// [`MAX_SHRINK`] times. A step is rejected when its result would not be a
/// valid starting point for the next one.
pub fn advance_jacobi(state: &JacobiState, idx: &JacobiIndex, dt: f64, rng: &mut RngStream) -> Result<JacobiState> {
    advance_inner(state, idx, dt, 0, rng)
}

fn advance_inner(state: &JacobiState, idx: &JacobiIndex, dt: f64, depth: usize, rng: &mut RngStream) -> Result<JacobiState> {
    let next = step_jacobi(state, idx, dt, rng)?;
    let lo = next.point.min_eigenvalue();
    if lo >= INTERIOR_FLOOR {
        return Ok(next);
    }
    if depth >= MAX_SHRINK {
        return Err(Error::BoundaryContact(lo));
    }
    let mid = advance_inner(state, idx, dt / 2.0, depth + 1, rng)?;
    advance_inner(&mid, idx, dt / 2.0, depth + 1, rng)
}

/// Runs a path over `[0, t]` on a grid of step `dt`, calling `record` after each grid step.
pub fn simulate_jacobi_path(
    start: &SimplexPoint,
    idx: &JacobiIndex,
    t: f64,
    dt: f64,
    rng: &mut RngStream,
    record: &mut dyn FnMut(usize, &JacobiState),
) -> Result<JacobiState> {
    let steps = crate::liebm::step_count(t, dt)?;
    let mut state = JacobiState { point: start.clone(), time: 0.0 };
    for index in 1..=steps {
        let t_prev = (index - 1) as f64 * dt;
        let h = if index == steps { t - t_prev } else { dt };
        state = advance_jacobi(&state, idx, h, rng)?;
        state.time = if index == steps { t } else { index as f64 * dt };
        record(index, &state);
    }
    Ok(state)
}

/// Real coordinates of the first `k` blocks (the last is `I − Σ`).
///
/// Per block: diagonal entries, then for each `α < β` the pair
/// `(Re Λ_αβ, Im Λ_αβ)`, i.e. `((Λ_αβ + Λ_βα)/2, (Λ_αβ − Λ_βα)/(2i))`.
pub(crate) struct SimplexCoords {
    m: usize,
    k: usize,
}

impl SimplexCoords {
    pub(crate) fn new(dims: FlagDims) -> Self {
        Self { m: dims.m(), k: dims.k() }
    }

    pub(crate) fn len(&self) -> usize {
        self.k * self.m * self.m
    }

    /// Complex weights `a(α, β)` with coordinate `= Σ a(α,β) Λ_{j,αβ}`, and the block `j`.
    pub(crate) fn weights(&self, c: usize) -> (usize, Vec<(usize, usize, C64)>) {
        let per = self.m * self.m;
        let (j, r) = (c / per, c % per);
        if r < self.m {
            return (j, vec![(r, r, C64::new(1.0, 0.0))]);
        }
        let (a, b, imag) = self.off_diag(r - self.m);
        if imag {
            (j, vec![(a, b, C64::new(0.0, -0.5)), (b, a, C64::new(0.0, 0.5))])
        } else {
            (j, vec![(a, b, C64::new(0.5, 0.0)), (b, a, C64::new(0.5, 0.0))])
        }
    }

    fn off_diag(&self, mut r: usize) -> (usize, usize, bool) {
        let imag = r % 2 == 1;
        r /= 2;
        for a in 0..self.m {
            for b in a + 1..self.m {
                if r == 0 {
                    return (a, b, imag);
                }
                r -= 1;
            }
        }
        unreachable!("coordinate index out of range")
    }

    pub(crate) fn read(&self, p: &SimplexPoint) -> Vec<f64> {
        (0..self.len())
            .map(|c| {
                let (j, ws) = self.weights(c);
                ws.iter().map(|&(a, b, w)| w * p.block(j)[(a, b)]).sum::<C64>().re
            })
            .collect()
    }

    pub(crate) fn build(&self, dims: FlagDims, x: &[f64]) -> SimplexPoint {
        let m = self.m;
        let per = m * m;
        let mut blocks = Vec::with_capacity(self.k + 1);
        let mut last = ComplexMatrix::identity(m);
        for j in 0..self.k {
            let mut b = ComplexMatrix::zeros(m, m);
            for a in 0..m {
                b[(a, a)] = C64::new(x[j * per + a], 0.0);
            }
            let mut r = m;
            for a in 0..m {
                for c in a + 1..m {
                    let z = C64::new(x[j * per + r], x[j * per + r + 1]);
                    b[(a, c)] = z;
                    b[(c, a)] = z.conj();
                    r += 2;
                }
            }
            last -= &b;
            blocks.push(HermitianMatrix::symmetrize(&b));
        }
        blocks.push(HermitianMatrix::symmetrize(&last));
        SimplexPoint::from_blocks(dims, blocks).expect("shapes fixed by dims")
    }
}

/// `E[dΛ_{j,αβ} dΛ_{ℓ,γδ}]/dt` for the integrated SDE.
pub fn jacobi_covariance(p: &SimplexPoint, j: usize, ab: (usize, usize), l: usize, gd: (usize, usize)) -> C64 {
    let (a, b) = ab;
    let (g, d) = gd;
    let lj = p.block(j);
    let id = |x: usize, y: usize| if x == y { 1.0 } else { 0.0 };
    if j == l {
        let ij = |x: usize, y: usize| C64::new(id(x, y), 0.0) - lj[(x, y)];
        (ij(a, d) * lj[(g, b)] + lj[(a, d)] * ij(g, b)) * 2.0
    } else {
        let ll = p.block(l);
        -(lj[(g, b)] * ll[(a, d)] + lj[(a, d)] * ll[(g, b)]) * 2.0
    }
}

/// Drift and covariance of the real coordinates at `p`.
pub(crate) fn coordinate_coefficients(p: &SimplexPoint, idx: &JacobiIndex) -> (Vec<f64>, Vec<f64>) {
    let coords = SimplexCoords::new(p.dims());
    let d = coords.len();
    let weights: Vec<_> = (0..d).map(|c| coords.weights(c)).collect();
    let drifts: Vec<ComplexMatrix> = (0..p.dims().blocks()).map(|j| idx.drift(j, p.block(j).as_matrix())).collect();
    let drift = weights.iter().map(|(j, ws)| ws.iter().map(|&(a, b, w)| w * drifts[*j][(a, b)]).sum::<C64>().re).collect();
    let mut cov = vec![0.0; d * d];
    for (r, (j, wr)) in weights.iter().enumerate() {
        for (s, (l, ws)) in weights.iter().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for &(a, b, x) in wr {
                for &(g, e, y) in ws {
                    acc += x * y * jacobi_covariance(p, *j, (a, b), *l, (g, e));
                }
            }
            cov[r * d + s] = acc.re;
        }
    }
    (drift, cov)
}

/// Generator of the integrated SDE applied to `f` by central finite
/// differences in the real coordinates of the first `k` blocks, with two
/// Richardson extrapolations (steps `h`, `h/2` and `h/4`).
pub fn jacobi_generator_apply(f: &dyn Fn(&SimplexPoint) -> f64, lambda: &SimplexPoint, idx: &JacobiIndex, h: f64) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::DegenerateStep(h));
    }
    check_index(lambda, idx)?;
    let lo = lambda.min_eigenvalue();
    if lo < INTERIOR_FLOOR {
        return Err(Error::BoundaryContact(lo));
    }
    let d = [h, h / 2.0, h / 4.0].map(|s| generator_fd(f, lambda, idx, s));
    let coarse = (4.0 * d[1] - d[0]) / 3.0;
    let fine = (4.0 * d[2] - d[1]) / 3.0;
    Ok((16.0 * fine - coarse) / 15.0)
}

fn generator_fd(f: &dyn Fn(&SimplexPoint) -> f64, lambda: &SimplexPoint, idx: &JacobiIndex, h: f64) -> f64 {
    let dims = lambda.dims();
    let coords = SimplexCoords::new(dims);
    let x0 = coords.read(lambda);
    let d = x0.len();
    let eval = |moves: &[(usize, f64)]| {
        let mut x = x0.clone();
        for &(r, delta) in moves {
            x[r] += delta;
        }
        f(&coords.build(dims, &x))
    };
    let (drift, cov) = coordinate_coefficients(lambda, idx);
    let f0 = f(lambda);
    let mut out = 0.0;
    for r in 0..d {
        let fp = eval(&[(r, h)]);
        let fm = eval(&[(r, -h)]);
        out += drift[r] * (fp - fm) / (2.0 * h);
        out += 0.5 * cov[r * d + r] * (fp - 2.0 * f0 + fm) / (h * h);
        for s in r + 1..d {
            let c = cov[r * d + s];
            if c == 0.0 {
                continue;
            }
            let mixed = (eval(&[(r, h), (s, h)]) - eval(&[(r, h), (s, -h)]) - eval(&[(r, -h), (s, h)]) + eval(&[(r, -h), (s, -h)]))
                / (4.0 * h * h);
            out += c * mixed;
        }
    }
    out
}

/// Monte Carlo estimate of `(E[f(Λ_dt)] − f(Λ_0))/dt` with its standard error.
pub fn jacobi_mc_generator_oracle(
    f: &dyn Fn(&SimplexPoint) -> f64,
    lambda: &SimplexPoint,
    idx: &JacobiIndex,
    dt: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let start = JacobiState { point: lambda.clone(), time: 0.0 };
    let f0 = f(lambda);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let next = step_jacobi(&start, idx, dt, rng)?;
        let v = (f(&next.point) - f0) / dt;
        sum += v;
        sum2 += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

/// Stationary `Beta(a, b)` law of `λ_j` when `m = 1`:
/// `a = κ_j + 1/2`, `b = |κ| + (k+1)/2 − κ_j − 1/2`.
pub fn stationary_beta_params(idx: &JacobiIndex, j: usize) -> Result<(f64, f64)> {
    if idx.m != 1 {
        return Err(Error::Unsupported("closed-form stationary law needs m = 1".into()));
    }
    if j >= idx.kappa.len() {
        return Err(Error::DimensionMismatch { expected: idx.kappa.len(), got: j });
    }
    let a = idx.kappa[j] + 0.5;
    let b = idx.total() + idx.kappa.len() as f64 / 2.0 - idx.kappa[j] - 0.5;
    Ok((a, b))
}

/// `f · [−m(n−m)|u| + Σ_j (u_j²/2)(Tr Λ_j^{-1} − m) − (m/2) Σ_{j≠ℓ} |u_j u_ℓ|]`
/// for `f = Π_j det(Λ_j)^{|u_j|/2}`.
pub fn eigenfunction_bracket(lambda: &SimplexPoint, u: &[f64]) -> Result<f64> {
    let dims = lambda.dims();
    if u.len() != dims.blocks() {
        return Err(Error::LengthMismatch(u.len(), dims.blocks()));
    }
    let (m, n) = (dims.m() as f64, dims.n() as f64);
    let abs_sum: f64 = u.iter().map(|x| x.abs()).sum();
    let mut bracket = -m * (n - m) * abs_sum;
    for (j, &uj) in u.iter().enumerate() {
        let inv = herm_power(lambda.block(j), -1.0)?;
        bracket += uj * uj / 2.0 * (inv.trace_re() - m);
    }
    let mut cross = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        for (l, &ul) in u.iter().enumerate() {
            if j != l {
                cross += (uj * ul).abs();
            }
        }
    }
    bracket -= m / 2.0 * cross;
    Ok(bracket)
}

/// `Π_j det(Λ_j)^{|u_j|/2}`.
pub fn det_power_product(lambda: &SimplexPoint, u: &[f64]) -> f64 {
    lambda.blocks().iter().zip(u).map(|(l, &uj)| l.det().re.max(0.0).powf(uj.abs() / 2.0)).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_point(vals: &[f64]) -> SimplexPoint {
        let dims = FlagDims::new(1, vals.len() - 1).unwrap();
        SimplexPoint::new(dims, vals.iter().map(|&v| HermitianMatrix::from_real_diag(&[v])).collect()).unwrap()
    }

    fn random_interior(dims: FlagDims, rng: &mut RngStream) -> SimplexPoint {
        // Λ_j = S^{-1/2} G_j^* G_j S^{-1/2} with S = Σ G_j^* G_j, kept away from the boundary.
        loop {
            let m = dims.m();
            let gs: Vec<ComplexMatrix> = (0..dims.blocks())
                .map(|_| {
                    let g = ComplexMatrix::from_fn(m + 2, m, |_, _| C64::new(rng.normal(), rng.normal()));
                    g.adjoint_mul(&g)
                })
                .collect();
            let mut s = ComplexMatrix::zeros(m, m);
            for g in &gs {
                s += g;
            }
            let r = herm_power(&HermitianMatrix::symmetrize(&s), -0.5).unwrap();
            let blocks: Vec<HermitianMatrix> =
                gs.iter().map(|g| HermitianMatrix::symmetrize(&r.matmul(g).matmul(&r))).collect();
            let p = SimplexPoint::new(dims, blocks).unwrap();
            if p.min_eigenvalue() > 0.03 {
                return p;
            }
        }
    }

    #[test]
    fn index_validation() {
        assert!(JacobiIndex::new(vec![0.5, 0.5], 1).is_ok());
        assert!(JacobiIndex::new(vec![-0.5, 0.5], 1).is_err());
        assert!(JacobiIndex::new(vec![0.1, 0.5], 2).is_ok());
        assert!(JacobiIndex::new(vec![0.0, 0.5], 2).is_err());
    }

    #[test]
    fn barycenter_is_drift_neutral_for_flag_index() {
        for (m, k) in [(1, 1), (2, 1), (2, 2)] {
            let dims = FlagDims::new(m, k).unwrap();
            let idx = JacobiIndex::flag_radial(dims);
            let p = SimplexPoint::barycenter(dims);
            for j in 0..dims.blocks() {
                assert!(idx.drift(j, p.block(j).as_matrix()).max_abs() < 1e-14);
            }
        }
    }

    #[test]
    fn step_preserves_simplex() {
        let dims = FlagDims::new(2, 2).unwrap();
        let idx = JacobiIndex::flag_radial(dims);
        let mut rng = RngStream::new(1, 0);
        let mut s = JacobiState { point: SimplexPoint::barycenter(dims), time: 0.0 };
        for _ in 0..2000 {
            s = advance_jacobi(&s, &idx, 1e-3, &mut rng).unwrap();
            assert!(SimplexPoint::new(dims, s.point.blocks().to_vec()).is_ok());
        }
        assert!((s.time - 2.0).abs() < 1e-9);
    }

    #[test]
    fn boundary_start_is_rejected() {
        let idx = JacobiIndex::new(vec![0.5, 0.5], 1).unwrap();
        let p = scalar_point(&[0.0, 1.0]);
        let r = step_jacobi(&JacobiState { point: p, time: 0.0 }, &idx, 1e-3, &mut RngStream::new(0, 0));
        assert!(matches!(r, Err(Error::BoundaryContact(_))));
    }

    #[test]
    fn repair_examples() {
        let dims = FlagDims::new(1, 1).unwrap();
        let exact = vec![ComplexMatrix::from_real_diag(&[0.3]), ComplexMatrix::from_real_diag(&[0.7])];
        let out = repair_simplex(dims, exact.clone()).unwrap();
        assert!((out.block(0)[(0, 0)].re - 0.3).abs() < 1e-14);

        let neg = vec![ComplexMatrix::from_real_diag(&[-1e-12]), ComplexMatrix::from_real_diag(&[1.0])];
        let out = repair_simplex(dims, neg).unwrap();
        assert!(out.sum_deviation() < 1e-10);
        assert!(out.min_eigenvalue() >= 0.0);

        let gross = vec![ComplexMatrix::from_real_diag(&[0.5]), ComplexMatrix::from_real_diag(&[0.7])];
        assert!(matches!(repair_simplex(dims, gross), Err(Error::IrreparableState(_))));
    }

    #[test]
    fn repair_of_adversarial_input_moves_little() {
        let dims = FlagDims::new(2, 1).unwrap();
        let mut rng = RngStream::new(3, 0);
        let p = random_interior(dims, &mut rng);
        let bump = ComplexMatrix::from_real_diag(&[0.05 / 2f64.sqrt(), 0.05 / 2f64.sqrt()]);
        let raw: Vec<ComplexMatrix> = vec![p.block(0).as_matrix() + &bump, p.block(1).as_matrix().clone()];
        let out = repair_simplex(dims, raw.clone()).unwrap();
        assert!(SimplexPoint::new(dims, out.blocks().to_vec()).is_ok());
        for (o, r) in out.blocks().iter().zip(&raw) {
            assert!((o.as_matrix() - r).frobenius_norm() <= 0.05 * 2f64.sqrt());
        }
    }

    #[test]
    fn coordinates_roundtrip() {
        let dims = FlagDims::new(2, 2).unwrap();
        let p = random_interior(dims, &mut RngStream::new(4, 0));
        let c = SimplexCoords::new(dims);
        let back = c.build(dims, &c.read(&p));
        for j in 0..3 {
            assert!((back.block(j).as_matrix() - p.block(j).as_matrix()).max_abs() < 1e-14);
        }
    }

    // Noise map of the Euler step: raw = Λ + drift dt + B ξ with ξ the real noise vector of the γ blocks.
    fn noise_map(p: &SimplexPoint) -> Vec<Vec<f64>> {
        let dims = p.dims();
        let (m, b) = (dims.m(), dims.blocks());
        let coords = SimplexCoords::new(dims);
        let roots: Vec<ComplexMatrix> = p.blocks().iter().map(|l| herm_power(l, 0.5).unwrap().into_matrix()).collect();
        let mut cols = vec![];
        for l in 0..b {
            for j in l + 1..b {
                for e in 0..m * m {
                    for unit in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)] {
                        let mut g = ComplexMatrix::zeros(m, m);
                        g[(e / m, e % m)] = unit;
                        let t = roots[l].matmul(&g).matmul(&roots[j]);
                        let sym = &t + &t.adjoint();
                        let mut blocks: Vec<ComplexMatrix> = vec![ComplexMatrix::zeros(m, m); b];
                        blocks[j] = sym.clone();
                        blocks[l] = sym.scale_real(-1.0);
                        let sp = SimplexPoint::from_blocks(dims, blocks.iter().map(HermitianMatrix::symmetrize).collect()).unwrap();
                        cols.push(coords.read(&sp));
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn covariance_matches_sde_noise_map() {
        for (m, k) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let dims = FlagDims::new(m, k).unwrap();
            let p = random_interior(dims, &mut RngStream::new(5, (m * 10 + k) as u64));
            let idx = JacobiIndex::flag_radial(dims);
            let (_, cov) = coordinate_coefficients(&p, &idx);
            let cols = noise_map(&p);
            let d = SimplexCoords::new(dims).len();
            for r in 0..d {
                for s in 0..d {
                    // each real noise coordinate has variance 1 per unit time
                    let bb: f64 = cols.iter().map(|c| c[r] * c[s]).sum();
                    assert!((bb - cov[r * d + s]).abs() < 1e-12, "m={m} k={k} ({r},{s}): {bb} vs {}", cov[r * d + s]);
                }
            }
        }
    }

    #[test]
    fn generator_kills_constants() {
        let dims = FlagDims::new(2, 1).unwrap();
        let idx = JacobiIndex::flag_radial(dims);
        let p = SimplexPoint::barycenter(dims);
        assert!(jacobi_generator_apply(&|_| 1.0, &p, &idx, 1e-3).unwrap().abs() < 1e-12);
        assert!(matches!(jacobi_generator_apply(&|_| 1.0, &p, &idx, 1.0), Err(Error::DegenerateStep(_))));
    }

    #[test]
    fn scalar_bracket_examples() {
        let p = scalar_point(&[0.5, 0.5]);
        let idx = JacobiIndex::new(vec![0.5, 0.5], 1).unwrap();
        assert!(eigenfunction_bracket(&p, &[2.0, 0.0]).unwrap().abs() < 1e-14);
        let f = |q: &SimplexPoint| det_power_product(q, &[2.0, 0.0]);
        assert!(jacobi_generator_apply(&f, &p, &idx, 2e-3).unwrap().abs() < 1e-7);
        let g = |q: &SimplexPoint| det_power_product(q, &[1.0, 0.0]);
        // bracket −1·1·1 + (1/2)(2 − 1) = −1/2, times f = 2^{-1/2}
        let v = jacobi_generator_apply(&g, &p, &idx, 2e-3).unwrap();
        assert!((v + 0.5 * 0.5f64.sqrt()).abs() < 1e-7, "{v}");
    }

    #[test]
    fn eigenfunction_identity_at_random_points() {
        let mut rng = RngStream::new(6, 0);
        for (m, k) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let dims = FlagDims::new(m, k).unwrap();
            let idx = JacobiIndex::flag_radial(dims);
            for _ in 0..5 {
                let p = random_interior(dims, &mut rng);
                let u: Vec<f64> = (0..dims.blocks()).map(|_| 2.0 * rng.normal()).collect();
                let f = |q: &SimplexPoint| det_power_product(q, &u);
                let lhs = jacobi_generator_apply(&f, &p, &idx, 2e-3).unwrap();
                let rhs = f(&p) * eigenfunction_bracket(&p, &u).unwrap();
                assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(f(&p)), "m={m} k={k}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn beta_params() {
        let p = |k: Vec<f64>| stationary_beta_params(&JacobiIndex::new(k, 1).unwrap(), 0).unwrap();
        assert_eq!(p(vec![0.5, 0.5]), (1.0, 1.0));
        assert_eq!(p(vec![0.5, 0.5, 0.5]), (1.0, 2.0));
        assert_eq!(p(vec![1.5, 0.5]), (2.0, 1.0));
        let idx = JacobiIndex::new(vec![1.0, 1.0], 2).unwrap();
        assert!(matches!(stationary_beta_params(&idx, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn mc_oracle_on_linear_function() {
        let dims = FlagDims::new(2, 1).unwrap();
        let idx = JacobiIndex::flag_radial(dims);
        let p = random_interior(dims, &mut RngStream::new(7, 0));
        let f = |q: &SimplexPoint| q.block(0).trace_re();
        let (mean, se) = jacobi_mc_generator_oracle(&f, &p, &idx, 1e-4, 20_000, &mut RngStream::new(7, 1)).unwrap();
        let n = dims.n() as f64;
        let target = 2.0 * (4.0 - n * p.block(0).trace_re());
        assert!((mean - target).abs() <= 3.0 * se + 1e-9, "{mean} ± {se} vs {target}");
        let exact = jacobi_generator_apply(&f, &p, &idx, 2e-3).unwrap();
        assert!((exact - target).abs() < 1e-8);
    }

    #[test]
    fn mc_oracle_matches_finite_differences() {
        let p = scalar_point(&[0.5, 0.5]);
        let idx = JacobiIndex::new(vec![0.5, 0.5], 1).unwrap();
        let f = |q: &SimplexPoint| det_power_product(q, &[1.0, 0.0]);
        let (mean, se) = jacobi_mc_generator_oracle(&f, &p, &idx, 1e-4, 40_000, &mut RngStream::new(8, 0)).unwrap();
        let exact = -0.5 * 0.5f64.sqrt();
        assert!((mean - exact).abs() <= 3.0 * se + 1e-2, "{mean} ± {se} vs {exact}");
    }
}
