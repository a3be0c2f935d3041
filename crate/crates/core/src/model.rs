//! Model parameters, spacetime events, the Gaussian localization kernel, and
//! the adiabatic cutoff functions.
//!
//! The noncommutativity of the underlying spacetime enters the field theory
//! only through the best-localized states, whose matrix elements produce the
//! Euclidean Gaussian
//!
//! ```text
//! G_lambda(x) = exp(-<x>^2 / (2 lambda^2)) / (sqrt(2 pi) lambda)^4,
//! <x>^2 = t^2 + |x_vec|^2,
//! ```
//!
//! a smooth infrared-regular kernel that every propagator in this crate is
//! convolved with. `lambda` is the localization length; `lambda -> 0` recovers
//! the classical theory.
//!
//! Interactions are switched on adiabatically: a temporal cutoff `chi` rises
//! smoothly from 0 on `(-2 eps, -eps)`, sits at 1 on the plateau `[-eps, T]`,
//! and falls back to 0 on `(T, T + eps)`; a spatial cutoff `h` is 1 inside the
//! ball of radius `R` and falls to 0 across a shell of thickness `delta`.

use serde::{Deserialize, Serialize};

use crate::error::QstError;

/// Mass and localization length of the model. Units are fixed by the mass,
/// i.e. times and lengths are measured in 1/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mass: f64,
    pub lambda: f64,
}

impl ModelParams {
    pub fn new(mass: f64, lambda: f64) -> Result<Self, QstError> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(QstError::Domain(format!("mass must be positive, got {mass}")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(QstError::Domain(format!(
                "localization length must be positive, got {lambda}"
            )));
        }
        Ok(Self { mass, lambda })
    }

    /// Same mass, localization length scaled by `factor` (e.g. the kernel of
    /// the squared convolution lives at `sqrt(2) lambda`, source terms at
    /// `2 lambda`).
    pub fn with_lambda_scaled(&self, factor: f64) -> Self {
        Self { mass: self.mass, lambda: self.lambda * factor }
    }
}

/// A spacetime point with a complex time component `t - i u`, `u >= 0`.
/// Real events have `u = 0`; imaginary-time translates (KMS analyticity,
/// thermal expansions) carry `u > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(default)]
    pub u: f64,
    pub x: [f64; 3],
}

impl Event {
    pub fn new(t: f64, x: [f64; 3]) -> Self {
        Self { t, u: 0.0, x }
    }

    pub fn origin() -> Self {
        Self { t: 0.0, u: 0.0, x: [0.0; 3] }
    }

    pub fn with_imag(t: f64, u: f64, x: [f64; 3]) -> Self {
        Self { t, u, x }
    }

    pub fn spatial_norm(&self) -> f64 {
        (self.x[0] * self.x[0] + self.x[1] * self.x[1] + self.x[2] * self.x[2]).sqrt()
    }

    /// Euclidean square `t^2 + |x|^2` of a real event.
    pub fn euclidean_sq(&self) -> f64 {
        self.t * self.t + self.x[0] * self.x[0] + self.x[1] * self.x[1] + self.x[2] * self.x[2]
    }

    /// Difference of the real parts, with the relative imaginary offset
    /// `u = self.u - other.u` carried along.
    pub fn relative_to(&self, other: &Event) -> Event {
        Event {
            t: self.t - other.t,
            u: self.u - other.u,
            x: [
                self.x[0] - other.x[0],
                self.x[1] - other.x[1],
                self.x[2] - other.x[2],
            ],
        }
    }

    /// Bitwise key for exact comparisons and hashing (no NaN admitted).
    pub(crate) fn bits(&self) -> [u64; 5] {
        [
            canon_bits(self.t),
            canon_bits(self.u),
            canon_bits(self.x[0]),
            canon_bits(self.x[1]),
            canon_bits(self.x[2]),
        ]
    }
}

/// Bit pattern for canonical-form keys; folds `-0.0` onto `0.0` so that sign
/// flips of exact zeros (adjoints, reflections) land in the same class.
pub(crate) fn canon_bits(x: f64) -> u64 {
    (if x == 0.0 { 0.0 } else { x }).to_bits()
}

/// Euclidean square `p0^2 + |p_vec|^2` of a 4-vector.
pub fn euclidean_sq_4(k: &[f64; 4]) -> f64 {
    k[0] * k[0] + k[1] * k[1] + k[2] * k[2] + k[3] * k[3]
}

/// The Gaussian localization kernel `G_lambda` at a real event.
pub fn gaussian_kernel(params: &ModelParams, x: &Event) -> f64 {
    let l2 = params.lambda * params.lambda;
    let norm = (2.0 * std::f64::consts::PI).powi(2) * l2 * l2;
    (-x.euclidean_sq() / (2.0 * l2)).exp() / norm
}

/// Both sides of the Gaussian mean-square identity
/// `sum_j <y_j - ybar>^2 + n <x - ybar>^2 = sum_j <y_j - x>^2`
/// used to merge products of localization kernels. Returns `(lhs, rhs)`.
pub fn mean_square_identity(points: &[Event], x: &Event) -> (f64, f64) {
    let n = points.len() as f64;
    assert!(!points.is_empty(), "mean-square identity needs at least one point");
    let mut mean = Event::origin();
    for p in points {
        mean.t += p.t;
        for a in 0..3 {
            mean.x[a] += p.x[a];
        }
    }
    mean.t /= n;
    for a in 0..3 {
        mean.x[a] /= n;
    }
    let lhs: f64 = points.iter().map(|p| p.relative_to(&mean).euclidean_sq()).sum::<f64>()
        + n * x.relative_to(&mean).euclidean_sq();
    let rhs: f64 = points.iter().map(|p| p.relative_to(x).euclidean_sq()).sum();
    (lhs, rhs)
}

/// Numeric check of the normalization
/// `(n^2 / (sqrt(2 pi) lambda)^4) * integral exp(-n <x>^2 / (2 lambda^2)) d^4x = 1`
/// by 4-D tensor-product Gauss quadrature. Returns the computed value.
pub fn gaussian_normalization_check(params: &ModelParams, n: u32, nodes_per_axis: usize) -> f64 {
    assert!(n >= 1);
    let nf = n as f64;
    let l = params.lambda;
    let rule = crate::quad::gauss_rule(nodes_per_axis);
    // integrand ~ exp(-n s^2 / (2 l^2)) per axis; 12 sigmas of half-width
    let half = 12.0 * l / nf.sqrt();
    let (xs, ws) = rule.mapped(-half, half);
    let axis: f64 = xs
        .iter()
        .zip(&ws)
        .map(|(x, w)| (-nf * x * x / (2.0 * l * l)).exp() * w)
        .sum();
    let integral = axis.powi(4);
    let norm = nf * nf / ((2.0 * std::f64::consts::PI).powi(2) * l.powi(4));
    norm * integral
}

/// Smearing of a plane wave `c e^{i k x}` by the localization map: the
/// amplitude picks up the Gaussian damping `exp(-lambda^2 <k>^2 / 2)` with the
/// Euclidean square of the 4-momentum.
pub fn smear_plane_wave(
    params: &ModelParams,
    amplitude: num_complex::Complex64,
    k: &[f64; 4],
) -> num_complex::Complex64 {
    let l2 = params.lambda * params.lambda;
    amplitude * (-0.5 * l2 * euclidean_sq_4(k)).exp()
}

/// Adiabatic cutoff geometry: temporal switching scale `eps`, plateau length
/// `t_plateau`, spatial radius `radius`, spatial falloff width `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub eps: f64,
    pub t_plateau: f64,
    pub radius: f64,
    pub delta: f64,
}

impl CutoffSpec {
    pub fn new(eps: f64, t_plateau: f64, radius: f64, delta: f64) -> Result<Self, QstError> {
        for (name, v) in [("eps", eps), ("radius", radius), ("delta", delta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(QstError::Domain(format!("cutoff {name} must be positive, got {v}")));
            }
        }
        if !(t_plateau >= 0.0) || !t_plateau.is_finite() {
            return Err(QstError::Domain(format!(
                "cutoff plateau must be nonnegative, got {t_plateau}"
            )));
        }
        Ok(Self { eps, t_plateau, radius, delta })
    }

    /// Same geometry with a different spatial radius (radial scans).
    pub fn with_radius(&self, radius: f64) -> Self {
        Self { radius, ..*self }
    }

    /// Temporal support of `chi`: the open interval `(-2 eps, T + eps)`.
    pub fn chi_support(&self) -> (f64, f64) {
        (-2.0 * self.eps, self.t_plateau + self.eps)
    }

    /// Temporal support of the switch-on derivative `chi_dot theta(-t)`:
    /// `(-2 eps, -eps)`.
    pub fn chi_dot_minus_support(&self) -> (f64, f64) {
        (-2.0 * self.eps, -self.eps)
    }

    /// Spatial support radius of `h`: `R + delta`.
    pub fn h_support_radius(&self) -> f64 {
        self.radius + self.delta
    }

    /// Temporal cutoff `chi(t)`: 0 before `-2 eps`, 1 on `[-eps, T]`,
    /// 0 after `T + eps`, smooth throughout.
    pub fn chi(&self, t: f64) -> f64 {
        bump_step((t + 2.0 * self.eps) / self.eps)
            * bump_step((self.t_plateau + self.eps - t) / self.eps)
    }

    /// `d chi / dt` restricted to the switch-on region, `chi_dot(t) theta(-t)`;
    /// supported in `(-2 eps, -eps)` and integrating to 1.
    pub fn chi_dot_minus(&self, t: f64) -> f64 {
        if t >= 0.0 {
            return 0.0;
        }
        // For t < 0 <= T the falling factor is identically 1.
        bump_step_derivative((t + 2.0 * self.eps) / self.eps) / self.eps
    }

    /// Switch-on tail difference `[chi(s) - chi(s - t)] theta(-s)`; this is
    /// the past part `V_t^-` of the interaction left exposed by translating
    /// the cutoff forward by `t`.
    pub fn v_minus_weight(&self, s: f64, t: f64) -> f64 {
        if s >= 0.0 {
            return 0.0;
        }
        self.chi(s) - self.chi(s - t)
    }

    /// Spatial cutoff `h(|x_vec|)`: 1 inside radius `R`, 0 outside `R + delta`.
    pub fn h(&self, r: f64) -> f64 {
        bump_step((self.radius + self.delta - r) / self.delta)
    }
}

/// Smooth step `B(s)`: 0 for `s <= 0`, 1 for `s >= 1`, built from
/// `f(s) = exp(-1/s)` as `f(s) / (f(s) + f(1-s))`.
pub fn bump_step(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        let f = (-1.0 / s).exp();
        let g = (-1.0 / (1.0 - s)).exp();
        f / (f + g)
    }
}

/// Closed-form derivative of `bump_step`.
pub fn bump_step_derivative(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let f = (-1.0 / s).exp();
    let g = (-1.0 / (1.0 - s)).exp();
    let fp = f / (s * s);
    let gp = -g / ((1.0 - s) * (1.0 - s));
    // d/ds [f / (f + g)] = (f' g - f g') / (f + g)^2
    (fp * g - f * gp) / ((f + g) * (f + g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;

    #[test]
    fn kernel_value_at_origin_unit_lambda() {
        let p = ModelParams::new(1.0, 1.0).unwrap();
        let got = gaussian_kernel(&p, &Event::origin());
        assert_abs_diff_eq!(got, 1.0 / (2.0 * std::f64::consts::PI).powi(2), epsilon = 1e-15);
    }

    #[test]
    fn kernel_normalization_within_1e8() {
        let p = ModelParams::new(1.0, 0.7).unwrap();
        for n in [1u32, 2] {
            let got = gaussian_normalization_check(&p, n, 48);
            assert_abs_diff_eq!(got, 1.0, epsilon = 1e-8);
        }
    }

    /// Semigroup law: the 4-D numeric convolution (G_1 * G_1)(x) equals
    /// G_{sqrt 2}(x). Tensor-product Gauss quadrature oracle.
    #[test]
    fn kernel_convolution_is_semigroup() {
        let p1 = ModelParams::new(1.0, 1.0).unwrap();
        let p2 = p1.with_lambda_scaled(std::f64::consts::SQRT_2);
        let x = Event::new(0.3, [0.4, 0.0, 0.0]);
        let rule = crate::quad::gauss_rule(40);
        let (ys, ws) = rule.mapped(-9.0, 9.0);
        // exp(-(y^2 + (x-y)^2)/2) factorizes over the 4 axes; evaluate each
        // axis integral and multiply.
        let axis = |c: f64| -> f64 {
            ys.iter()
                .zip(&ws)
                .map(|(y, w)| (-0.5 * (y * y + (c - y) * (c - y))).exp() * w)
                .sum()
        };
        let norm = 1.0 / (2.0 * std::f64::consts::PI).powi(4);
        let conv = norm * axis(x.t) * axis(x.x[0]) * axis(x.x[1]) * axis(x.x[2]);
        let want = gaussian_kernel(&p2, &x);
        assert_abs_diff_eq!(conv, want, epsilon = 1e-8);
    }

    #[test]
    fn smearing_damps_unit_momentum() {
        let p = ModelParams::new(1.0, 1.0).unwrap();
        let c = Complex64::new(1.0, 0.0);
        let got = smear_plane_wave(&p, c, &[1.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(got.re, (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(got.im, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn chi_plateau_and_half_height() {
        let c = CutoffSpec::new(0.5, 2.0, 4.0, 1.0).unwrap();
        assert_abs_diff_eq!(c.chi(0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.chi(-0.5), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.chi(2.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.chi(-1.5 * 0.5), 0.5, epsilon = 1e-12);
        assert_eq!(c.chi(-1.0), 0.0);
        assert_eq!(c.chi(2.5), 0.0);
    }

    #[test]
    fn h_is_one_inside_and_zero_outside() {
        let c = CutoffSpec::new(0.5, 2.0, 4.0, 1.0).unwrap();
        assert_eq!(c.h(0.0), 1.0);
        assert_eq!(c.h(4.0), 1.0);
        assert_eq!(c.h(5.0), 0.0);
        assert!(c.h(4.5) > 0.0 && c.h(4.5) < 1.0);
    }

    #[test]
    fn chi_dot_minus_integrates_to_one() {
        let c = CutoffSpec::new(0.8, 3.0, 4.0, 1.0).unwrap();
        let rule = crate::quad::gauss_rule(96);
        let (lo, hi) = c.chi_dot_minus_support();
        let integral = rule.integrate_real(lo, hi, |t| c.chi_dot_minus(t));
        assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-10);
        assert_eq!(c.chi_dot_minus(-0.5 * 0.8), 0.0);
        assert_eq!(c.chi_dot_minus(0.1), 0.0);
    }

    #[test]
    fn chi_dot_matches_finite_difference() {
        let c = CutoffSpec::new(0.5, 2.0, 4.0, 1.0).unwrap();
        let h = 1e-6;
        for t in [-0.95, -0.8, -0.6, -0.55] {
            let fd = (c.chi(t + h) - c.chi(t - h)) / (2.0 * h);
            assert_abs_diff_eq!(c.chi_dot_minus(t), fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn bump_step_derivative_matches_finite_difference() {
        let h = 1e-6;
        for s in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let fd = (bump_step(s + h) - bump_step(s - h)) / (2.0 * h);
            assert_abs_diff_eq!(bump_step_derivative(s), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn cutoffs_have_bounded_low_order_differences() {
        // smoothness smoke test: central differences up to second order stay
        // bounded as the stencil shrinks
        let c = CutoffSpec::new(0.5, 2.0, 4.0, 1.0).unwrap();
        for h in [1e-2, 1e-3, 1e-4] {
            for t in [-0.9, -0.75, -0.51, 2.2, 2.4] {
                let d2 = (c.chi(t + h) - 2.0 * c.chi(t) + c.chi(t - h)) / (h * h);
                assert!(d2.abs() < 1e3, "second difference blew up: {d2} at {t}, {h}");
            }
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(ModelParams::new(0.0, 1.0).is_err());
        assert!(ModelParams::new(1.0, -1.0).is_err());
        assert!(CutoffSpec::new(0.0, 1.0, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn mean_square_identity_holds(
            pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..6),
            x in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
        ) {
            let points: Vec<Event> = pts
                .iter()
                .map(|&(t, a, b, c)| Event::new(t, [a, b, c]))
                .collect();
            let center = Event::new(x.0, [x.1, x.2, x.3]);
            let (lhs, rhs) = mean_square_identity(&points, &center);
            let scale = 1.0 + lhs.abs().max(rhs.abs());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn smearing_never_amplifies(
            kt in -10.0f64..10.0, kx in -10.0f64..10.0,
            ky in -10.0f64..10.0, kz in -10.0f64..10.0,
            lambda in 0.05f64..3.0,
        ) {
            let p = ModelParams::new(1.0, lambda).unwrap();
            let c = Complex64::new(0.7, -0.3);
            let out = smear_plane_wave(&p, c, &[kt, kx, ky, kz]);
            prop_assert!(out.norm() <= c.norm() * (1.0 + 1e-15));
        }

        #[test]
        fn chi_bounded_and_supported(t in -10.0f64..10.0) {
            let c = CutoffSpec::new(0.5, 2.0, 4.0, 1.0).unwrap();
            let v = c.chi(t);
            prop_assert!((0.0..=1.0).contains(&v));
            let (lo, hi) = c.chi_support();
            if t <= lo || t >= hi {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
