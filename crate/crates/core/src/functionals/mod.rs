//! Path functionals: stochastic areas, determinant windings, the exponential
//! martingale, connection-form increments and the horizontal lift.
//!
//! Stratonovich integrals use the midpoint rule throughout.

use std::cell::RefCell;
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::flag::{self, radial_from_chart, radial_from_unitary, FlagDims, FlagPoint, SimplexPoint, CHART_GUARD};
use crate::liebm::{PathObserver, RngStream, StepView};
mod bridge;

pub use bridge::{log_bessel_ratio, sample_winding_number};

use crate::matcore::{det_arg, eigh, herm_power, HermitianMatrix, principal_angle, unitary_project, ComplexMatrix, UnitaryMatrix, C64, EIG_FLOOR, I};

/// Refinement trigger on `|Δ log|det Z_j||` per step.
/// With refinement on, steps are bisected until `|det Z_j|² ≥ RESOLVED_KAPPA · rate · dt`
/// at both ends, so that `det Z_j` moves by a fraction of its modulus per step.
pub const RESOLVED_KAPPA: f64 = 400.0;
pub const LOG_MODULUS_GUARD: f64 = 0.25;

/// Accumulated functionals of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalState {
    /// Stochastic areas.
    pub a: Vec<f64>,
    /// Unwrapped windings `arg det Z_j(t) − arg det Z_j(0)`.
    pub theta: Vec<f64>,
    /// Principal arguments at the last accepted step.
    pub last_arg: Vec<f64>,
    /// `log D`; kept in log form so long horizons cannot overflow.
    pub log_d: f64,
    /// Frequency vector of the martingale.
    pub u: Vec<f64>,
}

impl FunctionalState {
    pub fn new(u: Vec<f64>, initial_args: Vec<f64>) -> Result<Self> {
        if u.len() != initial_args.len() {
            return Err(Error::LengthMismatch(u.len(), initial_args.len()));
        }
        let b = u.len();
        Ok(Self { a: vec![0.0; b], theta: vec![0.0; b], last_arg: initial_args, log_d: 0.0, u })
    }

    /// Starts from the bottom blocks of `u0`.
    pub fn from_unitary(u0: &UnitaryMatrix, dims: FlagDims, u: Vec<f64>) -> Result<Self> {
        let args = stiefel_blocks(u0, dims).iter().map(|z| det_arg(z).map(|d| d.arg)).collect::<Result<Vec<_>>>()?;
        Self::new(u, args)
    }

    /// Martingale value `D`.
    pub fn d(&self) -> f64 {
        self.log_d.exp()
    }
}

/// `Δ𝔞_j = (i/2) Tr(Λ_mid,j (Δw_j^* w̄_j − w̄_j^* Δw_j))`, `w̄ = (w_prev + w_next)/2`.
pub fn area_increment(w_prev: &FlagPoint, w_next: &FlagPoint, lambda_mid: &SimplexPoint) -> Result<Vec<f64>> {
    if w_prev.dims() != w_next.dims() || w_prev.dims() != lambda_mid.dims() {
        return Err(Error::ChartMismatch);
    }
    let mid = w_prev.midpoint(w_next)?;
    let mut out = Vec::with_capacity(mid.blocks().len());
    for j in 0..mid.blocks().len() {
        let dw = w_next.block(j) - w_prev.block(j);
        let y = dw.adjoint_mul(mid.block(j));
        let skew = &y - &y.adjoint();
        let z = lambda_mid.block(j).matmul(&skew).trace() * I * 0.5;
        debug_assert!(z.im.abs() < 1e-12 * (1.0 + z.re.abs()), "area increment not real: {z}");
        out.push(z.re);
    }
    Ok(out)
}

/// [`area_increment`] with `Λ_mid` evaluated at the chart midpoint.
pub fn area_increment_midpoint(w_prev: &FlagPoint, w_next: &FlagPoint) -> Result<Vec<f64>> {
    let lam = radial_from_chart(&w_prev.midpoint(w_next)?)?;
    area_increment(w_prev, w_next, &lam)
}

/// Bottom row blocks `Z_j`, a point of the Stiefel manifold.
pub fn stiefel_blocks(u: &UnitaryMatrix, dims: FlagDims) -> Vec<ComplexMatrix> {
    flag::bottom_blocks(u, dims)
}

/// Principal arguments of `det Z_j` and their unwrapped increments against `last`.
pub fn phase_increments(z: &[ComplexMatrix], last: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    phase_increments_guarded(z, last, true)
}

fn phase_increments_guarded(z: &[ComplexMatrix], last: &[f64], guard: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != last.len() {
        return Err(Error::LengthMismatch(z.len(), last.len()));
    }
    let mut args = Vec::with_capacity(z.len());
    let mut deltas = Vec::with_capacity(z.len());
    for (zj, &prev) in z.iter().zip(last) {
        let d = det_arg(zj).map_err(|_| Error::SingularBlock(0.0))?;
        let modulus = d.log_modulus.exp();
        if modulus < CHART_GUARD {
            return Err(Error::SingularBlock(modulus));
        }
        let delta = principal_angle(d.arg - prev);
        if guard && delta.abs() >= FRAC_PI_2 {
            return Err(Error::StepTooLarge(delta));
        }
        args.push(d.arg);
        deltas.push(delta);
    }
    Ok((args, deltas))
}

/// Unwraps `arg det Z_j` against the last accepted value and accumulates into `θ`.
pub fn winding_update(state: &FunctionalState, z: &[ComplexMatrix]) -> Result<FunctionalState> {
    let (args, deltas) = phase_increments(z, &state.last_arg)?;
    let mut next = state.clone();
    for (t, d) in next.theta.iter_mut().zip(&deltas) {
        *t += d;
    }
    next.last_arg = args;
    Ok(next)
}

/// `Δη_j = Im Tr(M̄_j^* ΔM_j)` with `M̄ = unitary_project((M_prev + M_next)/2)`,
/// `M_j` the `j`-th column block.
pub fn connection_form_increment(m_prev: &UnitaryMatrix, m_next: &UnitaryMatrix, dims: FlagDims) -> Result<Vec<f64>> {
    let mid = unitary_project(&(m_prev.as_matrix() + m_next.as_matrix()).scale_real(0.5))?;
    let dm = m_next.as_matrix() - m_prev.as_matrix();
    Ok(connection_terms(mid.as_matrix(), &dm, dims))
}

/// `Δη_j` along `U ↦ U e^X`: the projected midpoint is `U e^{X/2}`, so
/// `M̄^* ΔM = 2 sinh(X/2) = X + X³/24 + X⁵/1920 + …`.
pub(crate) fn right_connection_increment(x: &ComplexMatrix, dims: FlagDims) -> Vec<f64> {
    let (n, m) = (dims.n(), dims.m());
    let x2 = x.matmul(x);
    let x4 = x2.matmul(&x2);
    (0..dims.blocks())
        .map(|j| {
            let mut s = 0.0;
            for r in j * m..(j + 1) * m {
                let mut c3 = C64::new(0.0, 0.0);
                let mut c5 = C64::new(0.0, 0.0);
                for c in 0..n {
                    c3 += x2[(r, c)] * x[(c, r)];
                    c5 += x4[(r, c)] * x[(c, r)];
                }
                s += x[(r, r)].im + c3.im / 24.0 + c5.im / 1920.0;
            }
            s
        })
        .collect()
}

fn connection_terms(mid: &ComplexMatrix, dm: &ComplexMatrix, dims: FlagDims) -> Vec<f64> {
    let (n, m) = (dims.n(), dims.m());
    (0..dims.blocks())
        .map(|j| {
            let mut s = C64::new(0.0, 0.0);
            for r in 0..n {
                for c in j * m..(j + 1) * m {
                    s += mid[(r, c)].conj() * dm[(r, c)];
                }
            }
            s.im
        })
        .collect()
}

/// `log det Λ_j` for every block, failing below `eig_floor^m`.
fn log_dets(lambda: &SimplexPoint) -> Result<Vec<f64>> {
    let m = lambda.dims().m() as i32;
    lambda
        .blocks()
        .iter()
        .map(|l| {
            let d = l.det().re;
            if d < EIG_FLOOR.powi(m) {
                Err(Error::SingularBlock(d))
            } else {
                Ok(d.ln())
            }
        })
        .collect()
}

/// `‖adj Z‖_F²` from `Λ = Z Z^*`: the elementary symmetric polynomial of degree
/// `m − 1` in the eigenvalues. It is the per-coordinate rate of `det Z` near `det Z = 0`.
fn adjugate_rate(l: &ComplexMatrix) -> Result<f64> {
    match l.rows() {
        1 => Ok(1.0),
        2 => Ok(l.trace().re),
        m => {
            let eig = eigh(&HermitianMatrix::symmetrize(l));
            Ok((0..m).map(|i| eig.values.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, v)| v.max(0.0)).product::<f64>()).sum())
        }
    }
}

/// Rate of `det Z_j` as a time-changed planar Brownian motion:
/// `c = e_{m−1}(Λ_j) − m det Λ_j = det Λ_j (Tr Λ_j^{-1} − m)`, read off `Z` directly for `m ≤ 2`.
fn block_rate(z: &ComplexMatrix) -> Result<f64> {
    let c = match z.rows() {
        1 => 1.0 - z[(0, 0)].norm_sqr(),
        2 => z.data().iter().map(|c| c.norm_sqr()).sum::<f64>() - 2.0 * z.det().norm_sqr(),
        _ => return planar_rate(&z.mul_adjoint(z)),
    };
    Ok(c.max(0.0))
}

/// [`block_rate`] from `Λ_j`.
fn planar_rate(l: &ComplexMatrix) -> Result<f64> {
    Ok((adjugate_rate(l)? - l.rows() as f64 * l.det().re).max(0.0))
}

fn trace_inverse(l: &ComplexMatrix) -> Result<f64> {
    if l.rows() == 1 {
        let v = l[(0, 0)].re;
        if v < EIG_FLOOR {
            return Err(Error::SingularBlock(v));
        }
        return Ok(1.0 / v);
    }
    Ok(l.inverse()?.trace().re)
}

/// Multiplies `D` by
/// `exp(m(n−m)|u|dt + (m/2)Σ_{j≠ℓ}|u_j u_ℓ|dt) Π_j (det Λ_next,j/det Λ_prev,j)^{|u_j|/2} E_j`,
/// where `E_j = I_{|u_j|}(κ_j)/I_0(κ_j)` is the bridge expectation of `exp(−(u_j²/2)∫(Tr Λ_j^{-1} − m)ds)`
/// over the step, `κ_j = (det Λ_prev,j det Λ_next,j)^{1/2}/(c_j dt)` and `c_j` the mean planar rate.
pub fn exp_martingale_update(state: &FunctionalState, lambda_prev: &SimplexPoint, lambda_next: &SimplexPoint, dt: f64) -> Result<FunctionalState> {
    let mut next = state.clone();
    next.log_d += log_martingale_factor(&state.u, lambda_prev, lambda_next, dt)?;
    Ok(next)
}

pub(crate) fn log_martingale_factor(u: &[f64], lambda_prev: &SimplexPoint, lambda_next: &SimplexPoint, dt: f64) -> Result<f64> {
    let dims = lambda_prev.dims();
    if lambda_next.dims() != dims {
        return Err(Error::ChartMismatch);
    }
    if u.len() != dims.blocks() {
        return Err(Error::LengthMismatch(u.len(), dims.blocks()));
    }
    if u.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let (m, n) = (dims.m() as f64, dims.n() as f64);
    let abs_sum: f64 = u.iter().map(|x| x.abs()).sum();
    let cross: f64 = abs_sum * abs_sum - u.iter().map(|x| x * x).sum::<f64>();
    let mut log = (m * (n - m) * abs_sum + m / 2.0 * cross) * dt;
    let lp = log_dets(lambda_prev)?;
    let ln = log_dets(lambda_next)?;
    for (j, &uj) in u.iter().enumerate() {
        if uj == 0.0 {
            continue;
        }
        log += uj.abs() / 2.0 * (ln[j] - lp[j]);
        let rate = 0.5 * (planar_rate(lambda_prev.block(j).as_matrix())? + planar_rate(lambda_next.block(j).as_matrix())?);
        if rate > 0.0 {
            let kappa = (0.5 * (lp[j] + ln[j])).exp() / (rate * dt);
            log += log_bessel_ratio(uj.abs(), kappa);
        }
    }
    Ok(log)
}

/// State of the horizontal lift `X_j = Y_j e^{−i𝔞_j/m} Θ_j`, `Y_j = [w_j; I] Λ_j^{1/2}`.
#[derive(Clone, Debug)]
pub struct HorizontalLiftState {
    dims: FlagDims,
    theta: Vec<ComplexMatrix>,
    area: Vec<f64>,
    x: UnitaryMatrix,
    steps: usize,
    phase_defect: f64,
}

impl HorizontalLiftState {
    /// Starts with `Θ_j = I` and zero area.
    pub fn new(w: &FlagPoint, lambda: &SimplexPoint) -> Result<Self> {
        let dims = w.dims();
        let y = lift_frames(w, lambda)?;
        let theta = vec![ComplexMatrix::identity(dims.m()); dims.blocks()];
        let area = vec![0.0; dims.blocks()];
        let x = assemble(dims, &y, &area, &theta);
        Ok(Self { dims, theta, area, x, steps: 0, phase_defect: 0.0 })
    }

    pub fn x(&self) -> &UnitaryMatrix {
        &self.x
    }

    pub fn theta(&self) -> &[ComplexMatrix] {
        &self.theta
    }

    pub fn area(&self) -> &[f64] {
        &self.area
    }

    /// Largest per-step `|arg det|` removed from `Θ`; small when the areas match the transport.
    pub fn phase_defect(&self) -> f64 {
        self.phase_defect
    }

    /// `max_j |det Θ_j − 1|`.
    pub fn det_defect(&self) -> f64 {
        self.theta.iter().map(|t| (t.det() - C64::new(1.0, 0.0)).norm()).fold(0.0, f64::max)
    }
}

fn lift_frames(w: &FlagPoint, lambda: &SimplexPoint) -> Result<Vec<ComplexMatrix>> {
    let dims = w.dims();
    let (n, m, d) = (dims.n(), dims.m(), dims.chart_rows());
    (0..dims.blocks())
        .map(|j| {
            let root = herm_power(lambda.block(j), 0.5)?;
            let mut stacked = ComplexMatrix::zeros(n, m);
            stacked.set_block(0, 0, w.block(j));
            for i in 0..m {
                stacked[(d + i, i)] = C64::new(1.0, 0.0);
            }
            Ok(stacked.matmul(root.as_matrix()))
        })
        .collect()
}

fn assemble(dims: FlagDims, y: &[ComplexMatrix], area: &[f64], theta: &[ComplexMatrix]) -> UnitaryMatrix {
    let (n, m) = (dims.n(), dims.m());
    let mut x = ComplexMatrix::zeros(n, n);
    for j in 0..dims.blocks() {
        let phase = C64::from_polar(1.0, -area[j] / m as f64);
        x.set_block(0, j * m, &y[j].matmul(&theta[j]).scale(phase));
    }
    UnitaryMatrix::new_unchecked(x)
}

/// Advances the lift along a chart step with area increments `Δa`.
///
/// The `SU(m)` part is transported by the closest fiber point: `Θ_j` is the
/// unit-determinant part of `e^{i𝔞_j/m} polar(Y_next,j^* X_prev,j)`. The discarded
/// determinant phase is tracked by [`HorizontalLiftState::phase_defect`].
pub fn horizontal_lift_step(
    lift: &HorizontalLiftState,
    w_prev: &FlagPoint,
    w_next: &FlagPoint,
    lambda_prev: &SimplexPoint,
    lambda_next: &SimplexPoint,
    da: &[f64],
) -> Result<HorizontalLiftState> {
    let dims = lift.dims;
    if w_prev.dims() != dims || w_next.dims() != dims || lambda_prev.dims() != dims || lambda_next.dims() != dims {
        return Err(Error::ChartMismatch);
    }
    if da.len() != dims.blocks() {
        return Err(Error::LengthMismatch(da.len(), dims.blocks()));
    }
    let m = dims.m();
    let y_next = lift_frames(w_next, lambda_next)?;
    let area: Vec<f64> = lift.area.iter().zip(da).map(|(a, d)| a + d).collect();
    let mut theta = Vec::with_capacity(dims.blocks());
    let mut phase_defect = lift.phase_defect;
    for j in 0..dims.blocks() {
        let x_prev = lift.x.block(0, j * m, dims.n(), m);
        let overlap = y_next[j].adjoint_mul(&x_prev);
        let transported = unitary_project(&overlap).map_err(|_| Error::StepTooLarge(f64::INFINITY))?;
        let raw = transported.scale(C64::from_polar(1.0, area[j] / m as f64));
        let (t, phase) = unit_determinant(raw)?;
        phase_defect = phase_defect.max(phase.abs());
        theta.push(t);
    }
    let x = assemble(dims, &y_next, &area, &theta);
    Ok(HorizontalLiftState { dims, theta, area, x, steps: lift.steps + 1, phase_defect })
}

fn unit_determinant(t: ComplexMatrix) -> Result<(ComplexMatrix, f64)> {
    let m = t.rows() as f64;
    let d = det_arg(&t)?;
    let root = C64::from_polar((-d.log_modulus / m).exp(), -d.arg / m);
    Ok((t.scale(root), d.arg))
}

/// Realized covariations of the areas and the matching pathwise clock.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaQv {
    /// `Σ Δ𝔞_j Δ𝔞_ℓ`, row-major `(k+1) × (k+1)`.
    pub realized: Vec<f64>,
    /// `∫ (Tr Λ_j^{-1} − m) ds`.
    pub clock: Vec<f64>,
    /// Steps left out of both sums because refinement could not resolve them.
    pub unresolved: usize,
}

/// Values recorded at a grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub a: Vec<f64>,
    pub theta: Vec<f64>,
    pub d: f64,
    /// `Tr Λ_j`.
    pub tr: Vec<f64>,
    /// `Tr Λ_j²`.
    pub tr_sq: Vec<f64>,
}

/// Which optional functionals a [`FunctionalObserver`] carries.
#[derive(Clone, Debug, Default)]
pub struct ObserverOptions {
    /// Martingale frequencies; `None` skips `D`.
    pub u: Option<Vec<f64>>,
    pub area_qv: bool,
    pub lift: bool,
    /// Record every `thin`-th grid step (0 records none); the last step is always recorded.
    pub thin: usize,
    pub total_steps: usize,
    /// Further grid steps to record.
    pub extra_steps: Vec<usize>,
    /// Track `max | |det Z_j|² − det Λ_j |` with `Λ_j` from the chart.
    pub modulus_check: bool,
    /// `(seed, stream)` of the auxiliary stream for bridge winding numbers.
    pub bridge_seed: (u64, u64),
    /// Ask the integrator to bisect steps whose phase or log-modulus change is large.
    pub refine: bool,
}

struct Pending {
    w: Option<FlagPoint>,
    lambda: Option<SimplexPoint>,
    rates: Vec<f64>,
    args: Vec<f64>,
    dphase: Vec<f64>,
    log_mod: Vec<f64>,
    modulus_residual: f64,
    da: Vec<f64>,
    clock: Vec<f64>,
    log_d: f64,
    eta: Vec<f64>,
    lift: Option<(HorizontalLiftState, f64)>,
    windings: u64,
}

/// Tracks areas, windings and the optional functionals along a unitary path.
///
/// Windings unwrap `arg det Z_j` step by step; when a step is coarse relative
/// to `|det Z_j|` the integer winding of the unobserved bridge is drawn from its
/// exact law. Areas follow from `𝔞 = ∫η − θ`.
pub struct FunctionalObserver {
    dims: FlagDims,
    opts: ObserverOptions,
    w: Option<FlagPoint>,
    lambda: Option<SimplexPoint>,
    state: FunctionalState,
    log_mod: Vec<f64>,
    rates: Vec<f64>,
    qv: Option<AreaQv>,
    eta: Vec<f64>,
    lift: Option<HorizontalLiftState>,
    lift_residual: f64,
    modulus_residual: f64,
    snapshots: Vec<Snapshot>,
    bridge_rng: RefCell<RngStream>,
    bridge_windings: u64,
    pending: RefCell<Option<Pending>>,
}

impl FunctionalObserver {
    pub fn new(u0: &UnitaryMatrix, dims: FlagDims, opts: ObserverOptions) -> Result<Self> {
        let z = stiefel_blocks(u0, dims);
        let dets = z.iter().map(det_arg).collect::<Result<Vec<_>>>()?;
        for d in &dets {
            if d.log_modulus.exp() < CHART_GUARD {
                return Err(Error::OutsideChart(d.log_modulus.exp()));
            }
        }
        let needs_w = opts.lift || opts.modulus_check;
        let needs_lambda = opts.u.is_some() || opts.area_qv || opts.lift;
        let w = if needs_w { Some(flag::project_affine(u0, dims)?) } else { None };
        let lambda = needs_lambda.then(|| radial_from_unitary(u0, dims));
        let u = opts.u.clone().unwrap_or_else(|| vec![0.0; dims.blocks()]);
        let state = FunctionalState::new(u, dets.iter().map(|d| d.arg).collect())?;
        let b = dims.blocks();
        let qv = opts.area_qv.then(|| AreaQv { realized: vec![0.0; b * b], clock: vec![0.0; b], unresolved: 0 });
        let lift = match (&w, &lambda, opts.lift) {
            (Some(w), Some(l), true) => Some(HorizontalLiftState::new(w, l)?),
            _ => None,
        };
        let bridge_rng = RefCell::new(RngStream::new(opts.bridge_seed.0, opts.bridge_seed.1));
        Ok(Self {
            dims,
            opts,
            w,
            lambda,
            state,
            log_mod: dets.iter().map(|d| d.log_modulus).collect(),
            rates: z.iter().map(block_rate).collect::<Result<_>>()?,
            qv,
            eta: vec![0.0; b],
            lift,
            lift_residual: 0.0,
            modulus_residual: 0.0,
            snapshots: vec![],
            bridge_rng,
            bridge_windings: 0,
            pending: RefCell::new(None),
        })
    }

    pub fn state(&self) -> &FunctionalState {
        &self.state
    }

    pub fn area_qv(&self) -> Option<&AreaQv> {
        self.qv.as_ref()
    }

    /// Accumulated connection form `∫η` along the path.
    pub fn connection(&self) -> &[f64] {
        &self.eta
    }

    pub fn lift(&self) -> Option<&HorizontalLiftState> {
        self.lift.as_ref()
    }

    /// Largest `‖p(X) − w‖` seen along the lift.
    pub fn lift_projection_residual(&self) -> f64 {
        self.lift_residual
    }

    /// Largest `| |det Z_j|² − det Λ_j |` seen, with `Λ_j` from the chart.
    pub fn modulus_residual(&self) -> f64 {
        self.modulus_residual
    }

    /// Number of substeps whose winding number was resolved by the bridge law.
    pub fn bridge_windings(&self) -> u64 {
        self.bridge_windings
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn into_snapshots(self) -> Vec<Snapshot> {
        self.snapshots
    }

    fn evaluate(&self, view: &StepView) -> Result<Pending> {
        let dims = self.dims;
        let z = stiefel_blocks(view.u_next, dims);
        let mut args = Vec::with_capacity(z.len());
        let mut dphase = Vec::with_capacity(z.len());
        let mut log_mod = Vec::with_capacity(z.len());
        for (j, zj) in z.iter().enumerate() {
            let d = det_arg(zj)?;
            let modulus = d.log_modulus.exp();
            if modulus < CHART_GUARD {
                return Err(Error::OutsideChart(modulus));
            }
            let delta = principal_angle(d.arg - self.state.last_arg[j]);
            if self.opts.refine && !view.at_floor {
                if delta.abs() >= FRAC_PI_2 {
                    return Err(Error::StepTooLarge(delta));
                }
                if (d.log_modulus - self.log_mod[j]).abs() > LOG_MODULUS_GUARD {
                    return Err(Error::StepTooLarge(d.log_modulus - self.log_mod[j]));
                }
            }
            args.push(d.arg);
            dphase.push(delta);
            log_mod.push(d.log_modulus);
        }
        let lambda = self.lambda.as_ref().map(|_| radial_from_unitary(view.u_next, dims));
        let mid = |j: usize| -> Option<ComplexMatrix> {
            match (&self.lambda, &lambda) {
                (Some(a), Some(b)) => Some((a.block(j).as_matrix() + b.block(j).as_matrix()).scale_real(0.5)),
                _ => None,
            }
        };

        let rates = z.iter().map(block_rate).collect::<Result<Vec<_>>>()?;
        let mut windings = 0;
        for j in 0..z.len() {
            let rate = 0.5 * (self.rates[j] + rates[j]);
            let kappa = (self.log_mod[j] + log_mod[j]).exp() / (rate * view.dt);
            if self.opts.refine && !view.at_floor && kappa < RESOLVED_KAPPA {
                return Err(Error::StepTooLarge(dphase[j]));
            }
            let mut rng = self.bridge_rng.borrow_mut();
            let (u1, u2) = (rng.uniform(), rng.uniform());
            let n = sample_winding_number(kappa, dphase[j], u1, u2);
            if n != 0 {
                dphase[j] += 2.0 * std::f64::consts::PI * n as f64;
                windings += 1;
            }
        }
        let eta = right_connection_increment(view.da, dims);
        let da: Vec<f64> = eta.iter().zip(&dphase).map(|(e, t)| e - t).collect();

        let m = dims.m() as f64;
        let clock = if self.qv.is_some() {
            (0..dims.blocks())
                .map(|j| trace_inverse(&mid(j).expect("radial tracked")).map(|t| (t - m) * view.dt))
                .collect::<Result<_>>()?
        } else {
            vec![]
        };
        let log_d = match (&self.opts.u, &self.lambda, &lambda) {
            (Some(_), Some(prev), Some(next)) => log_martingale_factor(&self.state.u, prev, next, view.dt)?,
            _ => 0.0,
        };
        let w = match &self.w {
            Some(_) => Some(flag::project_affine(view.u_next, dims)?),
            None => None,
        };
        let mut modulus_residual: f64 = 0.0;
        if self.opts.modulus_check {
            let w = w.as_ref().expect("chart tracked");
            for (j, lm) in log_mod.iter().enumerate() {
                let chart_det = flag::radial_block(w.block(j))?.det().re;
                modulus_residual = modulus_residual.max(((2.0 * lm).exp() - chart_det).abs());
            }
        }
        let lift = match (&self.lift, &self.w, &w, &self.lambda, &lambda) {
            (Some(lift), Some(w_prev), Some(w_next), Some(l_prev), Some(l_next)) => {
                let next = horizontal_lift_step(lift, w_prev, w_next, l_prev, l_next, &da)?;
                let residual = flag::project_affine(next.x(), dims)?.distance(w_next)?;
                Some((next, residual))
            }
            _ => None,
        };
        Ok(Pending { w, lambda, rates, args, dphase, log_mod, modulus_residual, da, clock, log_d, eta, lift, windings })
    }
}

impl PathObserver for FunctionalObserver {
    fn check(&self, view: &StepView) -> Result<()> {
        let p = self.evaluate(view)?;
        *self.pending.borrow_mut() = Some(p);
        Ok(())
    }

    fn commit(&mut self, view: &StepView) -> Result<()> {
        let pending = self.pending.borrow_mut().take();
        let p = match pending {
            Some(p) => p,
            None => self.evaluate(view)?,
        };
        let resolved = !(self.opts.refine && view.at_floor);
        if let Some(qv) = self.qv.as_mut().filter(|_| !resolved) {
            qv.unresolved += 1;
        } else if let Some(qv) = self.qv.as_mut() {
            let b = p.da.len();
            for j in 0..b {
                for l in 0..b {
                    qv.realized[j * b + l] += p.da[j] * p.da[l];
                }
                qv.clock[j] += p.clock[j];
            }
        }
        self.state.log_d += p.log_d;
        for (e, i) in self.eta.iter_mut().zip(&p.eta) {
            *e += i;
        }
        if let Some((next, residual)) = p.lift {
            self.lift_residual = self.lift_residual.max(residual);
            self.lift = Some(next);
        }
        for (a, d) in self.state.a.iter_mut().zip(&p.da) {
            *a += d;
        }
        for (t, d) in self.state.theta.iter_mut().zip(&p.dphase) {
            *t += d;
        }
        self.bridge_windings += p.windings;
        self.state.last_arg = p.args;
        self.log_mod = p.log_mod;
        self.modulus_residual = self.modulus_residual.max(p.modulus_residual);
        self.w = p.w;
        self.lambda = p.lambda;
        self.rates = p.rates;
        Ok(())
    }

    fn end_step(&mut self, index: usize, time: f64, u: &UnitaryMatrix) -> Result<()> {
        let thin_hit = self.opts.thin > 0 && index.is_multiple_of(self.opts.thin);
        if thin_hit || index == self.opts.total_steps || self.opts.extra_steps.contains(&index) {
            let lambda = radial_from_unitary(u, self.dims);
            let tr = lambda.blocks().iter().map(|l| l.trace_re()).collect();
            let tr_sq = lambda.blocks().iter().map(|l| l.matmul(l).trace().re).collect();
            let s = self.state.clone();
            self.snapshots.push(Snapshot { step: index, time, a: s.a, theta: s.theta, d: s.log_d.exp(), tr, tr_sq });
        }
        Ok(())
    }
}
