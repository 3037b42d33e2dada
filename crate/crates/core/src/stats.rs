//! Estimators and tests that turn simulated samples into verdicts.

use crate::matcore::C64;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};
use std::f64::consts::PI;

const MAX_NEWTON: usize = 200;
const MIN_FIT_SAMPLES: usize = 100;
const KOLMOGOROV_TERMS: usize = 100;
/// Level at which [`TestReport::verdict`] is decided.
pub const SIGNIFICANCE: f64 = 0.01;

/// Maximum-likelihood Cauchy location and scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauchyFit {
    pub location: f64,
    pub scale: f64,
    pub se_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_approx: f64,
    pub n_samples: usize,
    /// `p_approx > SIGNIFICANCE`.
    pub verdict: bool,
}

/// Empirical characteristic function with standard errors of both parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ecf {
    pub value: C64,
    pub se_re: f64,
    pub se_im: f64,
}

impl Ecf {
    /// Standard error of the complex value as a whole.
    pub fn se(&self) -> f64 {
        self.se_re.hypot(self.se_im)
    }
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Quantile by linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

struct CauchyLik {
    value: f64,
    grad: [f64; 2],
    hess: [[f64; 2]; 2],
}

fn cauchy_lik(xs: &[f64], x0: f64, g: f64) -> CauchyLik {
    let n = xs.len() as f64;
    let g2 = g * g;
    let mut value = n * g.ln();
    let (mut d0, mut dg) = (0.0, n / g);
    let (mut h00, mut h0g, mut hgg) = (0.0, 0.0, -n / g2);
    for &x in xs {
        let r = x - x0;
        let q = g2 + r * r;
        let q2 = q * q;
        value -= q.ln();
        d0 += 2.0 * r / q;
        dg -= 2.0 * g / q;
        h00 += 2.0 * (r * r - g2) / q2;
        h0g -= 4.0 * r * g / q2;
        hgg -= 2.0 * (r * r - g2) / q2;
    }
    CauchyLik { value, grad: [d0, dg], hess: [[h00, h0g], [h0g, hgg]] }
}

/// Fits the Cauchy density `γ/(π((x − x₀)² + γ²))` by damped Newton iteration
/// from the median and half the interquartile range.
pub fn cauchy_fit(samples: &[f64]) -> Result<CauchyFit> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::LengthMismatch(samples.len(), MIN_FIT_SAMPLES));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (mut x0, mut g) = (quantile(&sorted, 0.5), 0.5 * (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)));
    let (init_x0, init_g) = (x0, g);
    let stalled = |iterations| Error::NoConvergence { iterations, location: init_x0, scale: init_g };
    if !(g > 0.0) {
        return Err(stalled(0));
    }
    let mut lik = cauchy_lik(samples, x0, g);
    for _ in 0..MAX_NEWTON {
        let [[a, b], [_, d]] = lik.hess;
        let det = a * d - b * b;
        let [g0, gg] = lik.grad;
        // Newton direction when the Hessian is negative definite, gradient otherwise.
        let newton = a < 0.0 && det > 0.0;
        let mut step = if newton {
            [-(d * g0 - b * gg) / det, -(a * gg - b * g0) / det]
        } else {
            [g0 * g * g / samples.len() as f64, gg * g * g / samples.len() as f64]
        };
        let mut accepted = None;
        // Close to the optimum the likelihood is flat to rounding; take pure Newton steps.
        if newton && step[0].abs().max(step[1].abs()) < 1e-4 * g {
            let (nx, ng) = (x0 + step[0], g + step[1]);
            accepted = Some((nx, ng, cauchy_lik(samples, nx, ng)));
        }
        for _ in 0..60 {
            if accepted.is_some() {
                break;
            }
            let (nx, ng) = (x0 + step[0], g + step[1]);
            if ng > 0.0 {
                let next = cauchy_lik(samples, nx, ng);
                if next.value >= lik.value {
                    accepted = Some((nx, ng, next));
                    break;
                }
            }
            step = [step[0] * 0.5, step[1] * 0.5];
        }
        let Some((nx, ng, next)) = accepted else {
            break;
        };
        let moved = (nx - x0).abs().max((ng - g).abs());
        (x0, g, lik) = (nx, ng, next);
        if moved <= 1e-13 * g.max(x0.abs()).max(f64::MIN_POSITIVE) {
            return finish(x0, g, &lik);
        }
    }
    // Accept a stalled line search only at a stationary point.
    let tol = 1e-8 * samples.len() as f64 / g;
    if lik.grad[0].abs() < tol && lik.grad[1].abs() < tol {
        return finish(x0, g, &lik);
    }
    Err(stalled(MAX_NEWTON))
}

fn finish(location: f64, scale: f64, lik: &CauchyLik) -> Result<CauchyFit> {
    let [[a, b], [_, d]] = lik.hess;
    let det = a * d - b * b;
    if !(a < 0.0 && det > 0.0) {
        return Err(Error::NoConvergence { iterations: MAX_NEWTON, location, scale });
    }
    // Observed information is −H; its inverse's (γ, γ) entry is −a/det.
    Ok(CauchyFit { location, scale, se_scale: (-a / det).sqrt() })
}

pub fn cauchy_cdf(location: f64, scale: f64) -> impl Fn(f64) -> f64 {
    move |x| 0.5 + ((x - location) / scale).atan() / PI
}

/// Regularized incomplete beta function `I_x(a, b)` as a distribution function on ℝ.
pub fn beta_cdf(a: f64, b: f64) -> Result<impl Fn(f64) -> f64> {
    let dist = Beta::new(a, b).map_err(|e| Error::InvalidDimension(e.to_string()))?;
    Ok(move |x: f64| dist.cdf(x.clamp(0.0, 1.0)))
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // P(K ≤ λ) = (√(2π)/λ) Σ_k exp(−(2k − 1)²π²/(8λ²)), convergent for small λ.
        let mut acc = 0.0;
        for k in 1..=KOLMOGOROV_TERMS {
            let odd = (2 * k - 1) as f64;
            acc += (-odd * odd * PI * PI / (8.0 * lambda * lambda)).exp();
        }
        return (1.0 - (2.0 * PI).sqrt() / lambda * acc).clamp(0.0, 1.0);
    }
    let mut acc = 0.0;
    for k in 1..=KOLMOGOROV_TERMS {
        let k = k as f64;
        let sign = if k as usize % 2 == 1 { 1.0 } else { -1.0 };
        acc += sign * (-2.0 * k * k * lambda * lambda).exp();
    }
    (2.0 * acc).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test with the asymptotic p-value.
pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> TestReport {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let p = kolmogorov_survival(n.sqrt() * d);
    TestReport { statistic: d, p_approx: p, n_samples: sorted.len(), verdict: p > SIGNIFICANCE }
}

/// Sample mean of `exp(i u·x)` over the rows of `samples`.
pub fn ecf<S: AsRef<[f64]>>(samples: &[S], u: &[f64]) -> Result<Ecf> {
    if samples.is_empty() {
        return Err(Error::LengthMismatch(0, 1));
    }
    let n = samples.len() as f64;
    let (mut sc, mut ss, mut qc, mut qs) = (0.0, 0.0, 0.0, 0.0);
    for row in samples {
        let row = row.as_ref();
        if row.len() != u.len() {
            return Err(Error::LengthMismatch(row.len(), u.len()));
        }
        let phase: f64 = row.iter().zip(u).map(|(x, v)| x * v).sum();
        let (s, c) = phase.sin_cos();
        sc += c;
        ss += s;
        qc += c * c;
        qs += s * s;
    }
    let (mc, ms) = (sc / n, ss / n);
    let se = |q: f64, m: f64| ((q / n - m * m).max(0.0) / n).sqrt();
    Ok(Ecf { value: C64::new(mc, ms), se_re: se(qc, mc), se_im: se(qs, ms) })
}

/// `Σ a_i b_i` over paired increments.
pub fn realized_covariation(incr_a: &[f64], incr_b: &[f64]) -> Result<f64> {
    if incr_a.len() != incr_b.len() {
        return Err(Error::LengthMismatch(incr_a.len(), incr_b.len()));
    }
    Ok(incr_a.iter().zip(incr_b).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liebm::RngStream;
    use proptest::prelude::*;

    fn cauchy_grid(n: usize, x0: f64, g: f64) -> Vec<f64> {
        (0..n).map(|i| x0 + g * (PI * ((i as f64 + 0.5) / n as f64 - 0.5)).tan()).collect()
    }

    #[test]
    fn fit_recovers_quantile_grid() {
        let fit = cauchy_fit(&cauchy_grid(10_000, 0.0, 1.0)).unwrap();
        assert!(fit.location.abs() < 0.02 && (fit.scale - 1.0).abs() < 0.02, "{fit:?}");
        // Observed information of n Cauchy samples is n/(2γ²) for the scale.
        assert!((fit.se_scale - (2.0f64 / 10_000.0).sqrt()).abs() < 2e-3);
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        assert!(matches!(cauchy_fit(&vec![3.0; 200]), Err(Error::NoConvergence { .. })));
        assert!(cauchy_fit(&[1.0; 10]).is_err());
    }

    #[test]
    fn fit_on_random_draws_covers_truth() {
        let mut rng = RngStream::new(5, 0);
        let xs: Vec<f64> = (0..4000).map(|_| 2.0 + 3.0 * (PI * (rng.uniform() - 0.5)).tan()).collect();
        let fit = cauchy_fit(&xs).unwrap();
        assert!((fit.scale - 3.0).abs() < 4.0 * fit.se_scale, "{fit:?}");
        assert!((fit.location - 2.0).abs() < 0.3);
    }

    #[test]
    fn ks_examples() {
        let n = 1000;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_test(&grid, |x| x.clamp(0.0, 1.0)).statistic <= 1.0 / n as f64);

        let mut rng = RngStream::new(2, 0);
        let normal: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
        assert!(ks_test(&normal, cauchy_cdf(0.0, 1.0)).p_approx < 1e-6);

        let report = ks_test(&cauchy_grid(10_000, 0.0, 1.0), cauchy_cdf(0.0, 1.0));
        assert!(report.p_approx > 0.5 && report.verdict);
    }

    #[test]
    fn kolmogorov_series_values() {
        // Tabulated: P(K > 1.36) ≈ 0.0494, P(K > 1.63) ≈ 0.0098.
        assert!((kolmogorov_survival(1.36) - 0.0494).abs() < 5e-4);
        assert!((kolmogorov_survival(1.63) - 0.0098).abs() < 2e-4);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
        // Both series agree where they overlap; P(K > 0.828) ≈ 0.5.
        assert!((kolmogorov_survival(0.8276) - 0.5).abs() < 1e-3);
        let below = kolmogorov_survival(1.0 - 1e-9);
        let mut alt = 0.0;
        for k in 1..=100 {
            alt += if k % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * (k * k) as f64).exp();
        }
        assert!((below - 2.0 * alt).abs() < 1e-8);
    }

    #[test]
    fn beta_cdf_closed_forms() {
        let f = beta_cdf(1.0, 2.0).unwrap();
        for x in [0.1, 0.5, 0.9] {
            assert!((f(x) - (1.0 - (1.0 - x) * (1.0 - x))).abs() < 1e-12);
        }
        assert_eq!(f(-1.0), 0.0);
        assert_eq!(f(2.0), 1.0);
    }

    #[test]
    fn ecf_examples() {
        let rows = vec![vec![0.3, -1.0], vec![-0.3, 1.0], vec![2.0, 0.5], vec![-2.0, -0.5]];
        assert_eq!(ecf(&rows, &[0.0, 0.0]).unwrap().value, C64::new(1.0, 0.0));
        let e = ecf(&rows, &[0.7, 0.2]).unwrap();
        assert!(e.value.im.abs() <= 3.0 * e.se_im + 1e-15);
        let mut rng = RngStream::new(3, 0);
        let xs: Vec<[f64; 1]> = (0..20_000).map(|_| [(PI * (rng.uniform() - 0.5)).tan()]).collect();
        let e = ecf(&xs, &[1.0]).unwrap();
        assert!((e.value.re - (-1.0f64).exp()).abs() < 4.0 * e.se_re);
    }

    #[test]
    fn covariation_examples() {
        assert!(matches!(realized_covariation(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2))));
        let dt = 1e-4;
        let smooth = vec![0.5 * dt; 10_000];
        assert!((realized_covariation(&smooth, &smooth).unwrap() - 0.25 * dt).abs() < 1e-15);
        let mut rng = RngStream::new(4, 0);
        let a: Vec<f64> = (0..10_000).map(|_| rng.normal() * dt.sqrt()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.normal() * dt.sqrt()).collect();
        // Σ a_i b_i has standard deviation dt·√n.
        assert!(realized_covariation(&a, &b).unwrap().abs() < 3.0 * dt * 100.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn fit_is_equivariant(seed in 0u64..1000, c in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let mut rng = RngStream::new(seed, 1);
            let xs: Vec<f64> = (0..300).map(|_| (PI * (rng.uniform() - 0.5)).tan()).collect();
            let base = cauchy_fit(&xs).unwrap();
            let moved: Vec<f64> = xs.iter().map(|x| c * x + shift).collect();
            let fit = cauchy_fit(&moved).unwrap();
            prop_assert!((fit.scale - c * base.scale).abs() < 1e-9 * c.max(1.0));
            prop_assert!((fit.location - (c * base.location + shift)).abs() < 1e-9 * c.max(1.0));
        }

        #[test]
        fn ks_invariant_under_monotone_maps(seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 2);
            let xs: Vec<f64> = (0..200).map(|_| rng.uniform()).collect();
            let plain = ks_test(&xs, |x| x.clamp(0.0, 1.0));
            let mapped: Vec<f64> = xs.iter().map(|x| x.powi(3)).collect();
            let other = ks_test(&mapped, |y| y.clamp(0.0, 1.0).cbrt());
            prop_assert!((plain.statistic - other.statistic).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&plain.p_approx));
        }

        #[test]
        fn ecf_is_conjugate_symmetric(seed in 0u64..1000, u0 in -3.0f64..3.0, u1 in -3.0f64..3.0) {
            let mut rng = RngStream::new(seed, 3);
            let rows: Vec<[f64; 2]> = (0..100).map(|_| [rng.normal(), rng.normal() * 4.0]).collect();
            let plus = ecf(&rows, &[u0, u1]).unwrap().value;
            let minus = ecf(&rows, &[-u0, -u1]).unwrap().value;
            prop_assert_eq!(minus, plus.conj());
        }
    }
}
