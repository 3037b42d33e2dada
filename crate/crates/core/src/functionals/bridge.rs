//! Winding number of a planar Brownian bridge between two observed points.
//!
//! For a standard planar Brownian motion run for time `h` from `z_a` to `z_b`,
//! the continuous angle is `Δ + 2πN` with `Δ` the principal angle of `z_b/z_a`.
//! With `κ = |z_a||z_b|/h`, `P(N = n) = 2π e^{−κ cos Δ} g_κ(Δ + 2πn)`, where
//!
//! `g_κ(φ) = e^{κ cos φ}/(2π) 1{|φ|<π} − (1/2π²) ∫_0^∞ e^{−κ cosh s} f_φ(s) ds`,
//! `f_φ(s) = (π+φ)/(s²+(π+φ)²) + (π−φ)/(s²+(π−φ)²)`.

use std::f64::consts::PI;

const GRID: usize = 400;
const TERMS: i64 = 12;
/// Above this `κ(1 + cos Δ)` the probability of a nonzero winding is below 1e−15.
const NEGLIGIBLE: f64 = 36.0;

struct Kernel {
    ds: f64,
    h: Vec<f64>,
    scale: f64,
}

impl Kernel {
    fn new(kappa: f64, delta: f64) -> Self {
        let s_max = (1.0 + 60.0 / kappa).acosh();
        let ds = s_max / GRID as f64;
        let h = (0..=GRID).map(|i| (-kappa * ((i as f64 * ds).cosh() - 1.0)).exp()).collect();
        Self { ds, h, scale: (-kappa * (1.0 + delta.cos())).exp() }
    }

    fn simpson(&self, f: impl Fn(usize, f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..=GRID {
            let w = if i == 0 || i == GRID {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f(i, i as f64 * self.ds);
        }
        acc * self.ds / 3.0
    }

    /// `∫_0^∞ e^{−κ(cosh s − 1)} a/(s² + a²) ds`.
    fn lorentz(&self, a: f64) -> f64 {
        if a == 0.0 {
            return 0.0;
        }
        let s_max = self.ds * GRID as f64;
        (s_max / a).atan() + self.simpson(|i, s| (self.h[i] - 1.0) * a / (s * s + a * a))
    }

    fn mass(&self, delta: f64, n: i64) -> f64 {
        let phi = delta + 2.0 * PI * n as f64;
        (-(self.lorentz(PI + phi) + self.lorentz(PI - phi)) * self.scale / PI).max(0.0)
    }

    fn zero_mass(&self, delta: f64) -> f64 {
        1.0 - (self.lorentz(PI + delta) + self.lorentz(PI - delta)) * self.scale / PI
    }

    /// `c` in the asymptote `P(N = n) ≈ c/φ_n²`.
    fn tail_coefficient(&self) -> f64 {
        2.0 * self.scale * self.simpson(|i, _| self.h[i])
    }
}

/// Draws the integer winding `N` from two uniforms in `[0, 1)`.
pub fn sample_winding_number(kappa: f64, delta: f64, u1: f64, u2: f64) -> i64 {
    if kappa.is_nan() || kappa <= 0.0 {
        return 0;
    }
    let exponent = kappa * (1.0 + delta.cos());
    // `P(N = 0) ≥ 1 − e^{−κ(1 + cos Δ)}`, so most draws settle without the kernel.
    if exponent > NEGLIGIBLE || u1 < -(-exponent).exp_m1() {
        return 0;
    }
    let k = Kernel::new(kappa, delta);
    let p0 = k.zero_mass(delta);
    if u1 < p0 {
        return 0;
    }
    let c = k.tail_coefficient();
    // Σ_{|n|>M} c/(2πn)² over both signs.
    let tail = 2.0 * c / (4.0 * PI * PI) / (TERMS as f64 + 0.5);
    let mut acc = p0;
    for n in 1..=TERMS {
        for signed in [n, -n] {
            acc += k.mass(delta, signed);
            if u1 < acc {
                return signed;
            }
        }
    }
    if u1 < acc + tail {
        let magnitude = ((TERMS as f64 + 0.5) / (1.0 - u2)).round().max(TERMS as f64 + 1.0) as i64;
        let sign = if (u1 - acc) < tail / 2.0 { 1 } else { -1 };
        return sign * magnitude;
    }
    0
}

/// Above this argument `ln(I_ν/I_0)` comes from the Hankel expansion instead of `besselik`.
const HANKEL_FROM: f64 = 600.0;

/// `ln(I_ν(x)/I_0(x))` for `ν ≥ 0`, `x > 0`.
///
/// For the bridge of a planar Brownian motion from `z_a` to `z_b` over time `h`,
/// `E[exp(−(ν²/2)∫ ds/|z_s|²)] = I_ν(κ)/I_0(κ)` with `κ = |z_a||z_b|/h`.
pub fn log_bessel_ratio(nu: f64, x: f64) -> f64 {
    if nu == 0.0 {
        return 0.0;
    }
    if x < HANKEL_FROM {
        let (i_nu, ..) = puruspe::besselik(nu, x);
        let (i_0, ..) = puruspe::besselik(0.0, x);
        return (i_nu / i_0).ln();
    }
    hankel_log(4.0 * nu * nu, x) - hankel_log(0.0, x)
}

/// `ln Σ_k (−1)^k a_k(μ)/x^k` with `a_k(μ) = Π_{j≤k} (μ − (2j−1)²)/(k! 8^k)`.
fn hankel_log(mu: f64, x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..40 {
        let j = (2 * k - 1) as f64;
        term *= -(mu - j * j) / (k as f64 * 8.0 * x);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum.ln()
}

#[cfg(test)]
fn probability(kappa: f64, delta: f64, n: i64) -> f64 {
    let k = Kernel::new(kappa, delta);
    if n != 0 {
        return k.mass(delta, n);
    }
    k.zero_mass(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liebm::RngStream;

    #[test]
    fn bessel_ratio_matches_reference_values() {
        // ln(I_ν(x)/I_0(x)) evaluated with mpmath at 30 digits.
        let cases = [
            (0.2, 0.5, -0.201_954_635_911_604_24),
            (1.0, 2.0, -0.359_859_067_936_796_54),
            (0.5, 50.0, -0.002_525_537_790_550_355_3),
            (0.3, 599.0, -7.518_802_967_850_525e-5),
            (0.3, 601.0, -7.493_761_119_825_57e-5),
            (2.5, 5000.0, -6.250_625_005_173_94e-4),
        ];
        for (nu, x, want) in cases {
            let got = log_bessel_ratio(nu, x);
            assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "ν={nu} x={x}: {got} vs {want}");
        }
        assert_eq!(log_bessel_ratio(0.0, 3.0), 0.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        for kappa in [0.05, 0.5, 2.0, 10.0] {
            for delta in [-3.0, -1.0, 0.0, 0.4, 2.9] {
                let mut total = probability(kappa, delta, 0);
                for n in 1..4000 {
                    total += probability(kappa, delta, n) + probability(kappa, delta, -n);
                }
                assert!((total - 1.0).abs() < 1e-3, "κ={kappa} Δ={delta}: {total}");
            }
        }
    }

    #[test]
    fn large_kappa_never_winds() {
        assert_eq!(sample_winding_number(100.0, 0.3, 1e-12, 0.5), 0);
        assert!(probability(20.0, 0.0, 1) < 1e-15);
    }

    /// `E[cos(ν θ_t)] = ∫ (r/t) e^{−(1+r²)/2t} I_ν(r/t) dr` for planar BM from 1;
    /// `I_{1/2}` and `I_{3/2}` are elementary.
    fn bessel_half_integer_mean(nu2: u32, t: f64) -> f64 {
        let n = 200_000;
        let r_max = 1.0 + 12.0 * t.sqrt();
        let dr = r_max / n as f64;
        let mut acc = 0.0;
        for i in 1..=n {
            let r = (i as f64 - 0.5) * dr;
            let x = r / t;
            let e = (-2.0 * x).exp();
            // e^{−x} I_ν(x)
            let scaled = (2.0 / (PI * x)).sqrt()
                * match nu2 {
                    1 => 0.5 * (1.0 - e),
                    3 => 0.5 * ((1.0 + e) - (1.0 - e) / x),
                    _ => unreachable!(),
                };
            acc += (x - (1.0 + r * r) / (2.0 * t) + x.ln()).exp() * scaled * dr;
        }
        acc
    }

    #[test]
    fn unconditional_winding_matches_bessel_oracle() {
        let t: f64 = 1.5;
        let mut rng = RngStream::new(11, 0);
        let samples = 200_000;
        let (mut s1, mut s3, mut q1, mut q3) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..samples {
            let zx = 1.0 + t.sqrt() * rng.normal();
            let zy = t.sqrt() * rng.normal();
            let r = zx.hypot(zy);
            let delta = zy.atan2(zx);
            let n = sample_winding_number(r / t, delta, rng.uniform(), rng.uniform());
            let theta = delta + 2.0 * PI * n as f64;
            let c1 = (theta / 2.0).cos();
            let c3 = (1.5 * theta).cos();
            s1 += c1;
            s3 += c3;
            q1 += c1 * c1;
            q3 += c3 * c3;
        }
        let nf = samples as f64;
        for (s, q, nu2) in [(s1, q1, 1), (s3, q3, 3)] {
            let mean = s / nf;
            let se = ((q / nf - mean * mean) / nf).sqrt();
            let target = bessel_half_integer_mean(nu2, t);
            assert!((mean - target).abs() < 4.0 * se, "ν={nu2}/2: {mean} vs {target} (se {se})");
        }
    }
}
