//! Brownian motion on 𝔲(n) and the group-exponential integrator for `dU = U ∘ dA`.
//!
//! Increments are normalized so that off-diagonal entries have complex
//! variance `2dt` and diagonal entries imaginary variance `2dt`; with this
//! convention the block products satisfy `E[ΔA_ij ΔA_jr] = −2m δ_ir I_m dt`
//! for every block size `m` dividing `n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matcore::{expm, unitary_project, ComplexMatrix, SkewHermitianMatrix, UnitaryMatrix, C64};

/// Default number of steps between polar re-projections.
pub const PROJ_INTERVAL: usize = 64;

/// Default maximum bisection depth when an observer rejects a step.
pub const MAX_REFINE_DEPTH: usize = 20;

/// Counter-based random stream keyed by `(master_seed, stream_index)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_index);
        Self { master_seed, stream_index, rng }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Standard Gaussian draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

/// A sampled Lie-algebra increment over a step of length `dt`.
#[derive(Clone, Debug)]
pub struct LieIncrement {
    pub dt: f64,
    pub da: SkewHermitianMatrix,
}

impl LieIncrement {
    pub fn dim(&self) -> usize {
        self.da.dim()
    }

    pub fn zero(n: usize, dt: f64) -> Self {
        Self { dt, da: SkewHermitianMatrix::zeros(n) }
    }
}

/// Draws `ΔA` with off-diagonal entries `(x + iy)√dt` and diagonal `iz√(2dt)`.
pub fn sample_skew_increment(n: usize, dt: f64, rng: &mut RngStream) -> Result<LieIncrement> {
    if n < 2 {
        return Err(Error::InvalidDimension(format!("Lie increment needs n >= 2, got {n}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidStep(dt));
    }
    Ok(LieIncrement { dt, da: SkewHermitianMatrix::new_unchecked(skew_gaussian(n, dt, rng)) })
}

pub(crate) fn skew_gaussian(n: usize, dt: f64, rng: &mut RngStream) -> ComplexMatrix {
    let s = dt.sqrt();
    let sd = (2.0 * dt).sqrt();
    let mut a = ComplexMatrix::zeros(n, n);
    for p in 0..n {
        a[(p, p)] = C64::new(0.0, rng.normal() * sd);
        for q in p + 1..n {
            let z = C64::new(rng.normal() * s, rng.normal() * s);
            a[(p, q)] = z;
            a[(q, p)] = -z.conj();
        }
    }
    a
}

/// One group-exponential step `U expm(ΔA)`, without re-projection.
pub fn step_unitary(u: &UnitaryMatrix, inc: &LieIncrement) -> Result<UnitaryMatrix> {
    if u.dim() != inc.dim() {
        return Err(Error::DimensionMismatch { expected: u.dim(), got: inc.dim() });
    }
    Ok(UnitaryMatrix::new_unchecked(u.matmul(&expm(&inc.da))))
}

/// Integrator state that re-projects onto 𝐔(n) every `proj_interval` steps.
#[derive(Clone, Debug)]
pub struct UnitaryStepper {
    proj_interval: usize,
    since_proj: usize,
}

impl Default for UnitaryStepper {
    fn default() -> Self {
        Self::new(PROJ_INTERVAL)
    }
}

impl UnitaryStepper {
    pub fn new(proj_interval: usize) -> Self {
        assert!(proj_interval >= 1);
        Self { proj_interval, since_proj: 0 }
    }

    pub fn step(&mut self, u: &UnitaryMatrix, inc: &LieIncrement) -> Result<UnitaryMatrix> {
        let next = step_unitary(u, inc)?;
        self.since_proj += 1;
        if self.since_proj >= self.proj_interval {
            self.since_proj = 0;
            return unitary_project(&next);
        }
        Ok(next)
    }
}

/// Data handed to observers for one accepted (sub)step.
pub struct StepView<'a> {
    /// Index of the nominal step, starting at 1.
    pub index: usize,
    /// Time at the start of the (sub)step.
    pub t_prev: f64,
    pub dt: f64,
    pub u_prev: &'a UnitaryMatrix,
    pub u_next: &'a UnitaryMatrix,
    pub da: &'a ComplexMatrix,
    /// True once the refinement depth is exhausted; observers should then
    /// accept the step rather than signal `StepTooLarge`.
    pub at_floor: bool,
}

impl StepView<'_> {
    pub fn t_next(&self) -> f64 {
        self.t_prev + self.dt
    }
}

/// Per-path callback.
///
/// Every candidate (sub)step is first offered to `check` on all observers; a
/// `StepTooLarge` from any of them makes the driver bisect the step with a
/// Brownian bridge. Only then is `commit` called. `end_step` fires once per
/// nominal step after all of its substeps are committed.
pub trait PathObserver {
    fn check(&self, _step: &StepView) -> Result<()> {
        Ok(())
    }
    fn commit(&mut self, step: &StepView) -> Result<()>;
    fn end_step(&mut self, _index: usize, _time: f64, _u: &UnitaryMatrix) -> Result<()> {
        Ok(())
    }
}

/// Number of nominal steps for horizon `t` and step `dt`; the last one may be shorter.
pub fn step_count(t: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidStep(dt));
    }
    if !(t > 0.0 && t.is_finite()) || dt > t * (1.0 + 1e-12) {
        return Err(Error::InvalidStep(t));
    }
    Ok(((t / dt) - 1e-9).ceil().max(1.0) as usize)
}

/// Simulates unitary Brownian motion from `u0` over `[0, t]`.
pub fn simulate_unitary_path(
    u0: &UnitaryMatrix,
    t: f64,
    dt: f64,
    rng: &mut RngStream,
    observers: &mut [&mut dyn PathObserver],
) -> Result<UnitaryMatrix> {
    simulate_unitary_path_with_depth(u0, t, dt, MAX_REFINE_DEPTH, rng, observers)
}

/// [`simulate_unitary_path`] with an explicit bisection depth.
pub fn simulate_unitary_path_with_depth(
    u0: &UnitaryMatrix,
    t: f64,
    dt: f64,
    max_depth: usize,
    rng: &mut RngStream,
    observers: &mut [&mut dyn PathObserver],
) -> Result<UnitaryMatrix> {
    let steps = step_count(t, dt)?;
    let n = u0.dim();
    let mut stepper = UnitaryStepper::default();
    let mut u = u0.clone();
    for index in 1..=steps {
        let t_prev = (index - 1) as f64 * dt;
        let h = if index == steps { t - t_prev } else { dt };
        let inc = sample_skew_increment(n, h, rng)?;
        u = advance(&mut stepper, &u, inc.da.as_matrix(), index, t_prev, h, max_depth, rng, observers)?;
        let time = if index == steps { t } else { index as f64 * dt };
        for obs in observers.iter_mut() {
            obs.end_step(index, time, &u)?;
        }
    }
    Ok(u)
}

#[allow(clippy::too_many_arguments)]
fn advance(
    stepper: &mut UnitaryStepper,
    u: &UnitaryMatrix,
    da: &ComplexMatrix,
    index: usize,
    t_prev: f64,
    h: f64,
    depth_left: usize,
    rng: &mut RngStream,
    observers: &mut [&mut dyn PathObserver],
) -> Result<UnitaryMatrix> {
    let candidate = UnitaryMatrix::new_unchecked(u.matmul(&expm(da)));
    let view = StepView { index, t_prev, dt: h, u_prev: u, u_next: &candidate, da, at_floor: depth_left == 0 };
    let verdict = observers.iter().try_for_each(|o| o.check(&view));
    match verdict {
        Ok(()) => {
            for obs in observers.iter_mut() {
                obs.commit(&view)?;
            }
            stepper.since_proj += 1;
            if stepper.since_proj >= stepper.proj_interval {
                stepper.since_proj = 0;
                return unitary_project(&candidate);
            }
            Ok(candidate)
        }
        Err(Error::StepTooLarge(_)) if depth_left > 0 => {
            let bridge = skew_gaussian(da.rows(), h / 4.0, rng);
            let half = da.scale_real(0.5);
            let first = &half + &bridge;
            let second = &half - &bridge;
            let mid = advance(stepper, u, &first, index, t_prev, h / 2.0, depth_left - 1, rng, observers)?;
            advance(stepper, &mid, &second, index, t_prev + h / 2.0, h / 2.0, depth_left - 1, rng, observers)
        }
        Err(e) => Err(e),
    }
}
