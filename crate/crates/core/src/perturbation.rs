//! S-matrix, Bogoliubov map, and interaction cocycles as truncated formal
//! power series.
//!
//! For an interaction functional `V`,
//!
//! ```text
//! S(V)      = sum_k (-i)^k / k!  V^{T k}          (time-ordered powers)
//! S(V)^-1   = sum_k   i^k  / k!  Tbar_k,
//! Tbar_k    = -sum_{j=1..k} (-1)^j C(k,j) Tbar_{k-j} * V^{T j},
//! R_V(A)    = S(V)^-1 * (S(V) .T A)               (Bogoliubov map)
//! ```
//!
//! with `*` the deformed product and `.T` the time-ordered product. The
//! recursion for `Tbar` is the order-by-order solution of
//! `S(V)^-1 * S(V) = 1`; it holds as an exact cancellation of canonical
//! terms, which the tests assert structurally. The adjoint relation
//! `S(V)^* = S(V)^-1` for self-adjoint `V` is a kernel identity
//! (`conj D_F = D_+(t) + D_+(-t) - D_F`) and holds numerically, not term by
//! term.
//!
//! Series are truncated at [`MAX_ORDER`]; the factorial growth of Wick
//! graphs makes higher orders both slow and numerically fragile, so they are
//! rejected rather than attempted.

use num_complex::Complex64;

use crate::error::QstError;
use crate::functionals::{Functional, TimeProfile, Weight};
use crate::model::CutoffSpec;
use crate::series::FormalSeries;

/// Largest admissible series truncation.
pub const MAX_ORDER: usize = 4;

fn check_order(k_max: usize) -> Result<(), QstError> {
    if k_max > MAX_ORDER {
        return Err(QstError::Domain(format!(
            "series order {k_max} exceeds the supported maximum {MAX_ORDER}"
        )));
    }
    Ok(())
}

/// An adiabatically switched monomial interaction
/// `g int chi(t) h(|x|) phi^n dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub coupling: f64,
    pub power: u32,
    pub cutoff: CutoffSpec,
}

impl Interaction {
    pub fn new(coupling: f64, power: u32, cutoff: CutoffSpec) -> Result<Self, QstError> {
        if !coupling.is_finite() {
            return Err(QstError::Domain(format!("coupling must be finite, got {coupling}")));
        }
        if !(1..=6).contains(&power) {
            return Err(QstError::Domain(format!(
                "interaction power must lie in 1..=6, got {power}"
            )));
        }
        Ok(Self { coupling, power, cutoff })
    }

    /// The interaction functional `V`.
    pub fn functional(&self) -> Functional {
        Functional::smeared_power(Weight { cutoff: self.cutoff, time: TimeProfile::Chi }, self.power)
            .scale(Complex64::new(self.coupling, 0.0))
    }

    /// `V-dot`: the interaction weighted by the switch-on rate
    /// `chi'(t) theta(-t) h(|x|)`; generates the interacting dynamics.
    pub fn switch_on_rate(&self) -> Functional {
        Functional::smeared_power(
            Weight { cutoff: self.cutoff, time: TimeProfile::ChiDotMinus },
            self.power,
        )
        .scale(Complex64::new(self.coupling, 0.0))
    }

    /// `V_t^-`: the past tail exposed by delaying the switch-on by `t`,
    /// weighted by `[chi(s) - chi(s - t)] theta(-s) h(|x|)`.
    pub fn past_tail(&self, t: f64) -> Functional {
        if t == 0.0 {
            return Functional::zero();
        }
        Functional::smeared_power(
            Weight { cutoff: self.cutoff, time: TimeProfile::VMinus { t } },
            self.power,
        )
        .scale(Complex64::new(self.coupling, 0.0))
    }
}

/// Time-ordered powers `V^{T k}` for `k = 0..=k_max`.
fn tord_powers(v: &Functional, k_max: usize) -> Vec<Functional> {
    let mut powers = Vec::with_capacity(k_max + 1);
    powers.push(Functional::one());
    for k in 1..=k_max {
        powers.push(powers[k - 1].time_ordered(v));
    }
    powers
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut b: u128 = 1;
    for i in 0..k {
        b = b * (n - i) as u128 / (i + 1) as u128;
    }
    b as f64
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// `S(V)` truncated at `k_max`.
pub fn s_matrix(v: &Functional, k_max: usize) -> Result<FormalSeries, QstError> {
    check_order(k_max)?;
    let powers = tord_powers(v, k_max);
    let mut s = FormalSeries::zero(k_max);
    let minus_i = Complex64::new(0.0, -1.0);
    for (k, p) in powers.into_iter().enumerate() {
        s.set_order(k, p.scale(minus_i.powu(k as u32) / factorial(k)));
    }
    Ok(s)
}

/// `S(V)^-1` via the antichronological recursion.
pub fn s_inverse(v: &Functional, k_max: usize) -> Result<FormalSeries, QstError> {
    check_order(k_max)?;
    let powers = tord_powers(v, k_max);
    let mut tbar: Vec<Functional> = vec![Functional::one()];
    for k in 1..=k_max {
        let mut acc = Functional::zero();
        for j in 1..=k {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let contrib = tbar[k - j].star(&powers[j]).scale(Complex64::new(
                -sign * binomial(k, j),
                0.0,
            ));
            acc = acc.add(&contrib);
        }
        tbar.push(acc);
    }
    let mut s = FormalSeries::zero(k_max);
    let i = Complex64::new(0.0, 1.0);
    for (k, t) in tbar.into_iter().enumerate() {
        s.set_order(k, t.scale(i.powu(k as u32) / factorial(k)));
    }
    Ok(s)
}

/// Relative S-matrix `S(V)^-1 * S(V + A)`, graded by the total number of
/// insertions of `V + A`.
pub fn relative_s(v: &Functional, a: &Functional, k_max: usize) -> Result<FormalSeries, QstError> {
    let sum = v.add(a);
    Ok(s_inverse(v, k_max)?.star(&s_matrix(&sum, k_max)?))
}

/// Bogoliubov map `R_V(A) = S(V)^-1 * (S(V) .T A)`, graded by powers of `V`;
/// order 0 is `A` itself.
pub fn bogoliubov(v: &Functional, a: &Functional, k_max: usize) -> Result<FormalSeries, QstError> {
    check_order(k_max)?;
    let s = s_matrix(v, k_max)?;
    let sa = s.time_ordered(&FormalSeries::single(0, a.clone(), k_max));
    Ok(s_inverse(v, k_max)?.star(&sa))
}

/// Inverse Bogoliubov map `S(-V) .T (S(V) * B)`; undoes [`bogoliubov`] order
/// by order.
pub fn bogoliubov_inverse(
    v: &Functional,
    b: &Functional,
    k_max: usize,
) -> Result<FormalSeries, QstError> {
    check_order(k_max)?;
    let neg = v.scale(Complex64::new(-1.0, 0.0));
    let sb = s_matrix(v, k_max)?.star(&FormalSeries::single(0, b.clone(), k_max));
    Ok(s_matrix(&neg, k_max)?.time_ordered(&sb))
}

/// Interaction cocycle `U(t) = S(V)^-1 * S(V - V_t^-)`: the unitary that
/// compensates delaying the adiabatic switch-on by `t`. `U(0) = 1`, and at
/// first order `U(t) = 1 + i V_t^-`.
pub fn cocycle(interaction: &Interaction, t: f64, k_max: usize) -> Result<FormalSeries, QstError> {
    check_order(k_max)?;
    let v = interaction.functional();
    let shifted = v.sub(&interaction.past_tail(t));
    Ok(s_inverse(&v, k_max)?.star(&s_matrix(&shifted, k_max)?))
}

/// Cocycle generator `K = R_V(V-dot)`; order `k` of the returned series
/// carries `k + 1` powers of the coupling (one from `V-dot` itself).
pub fn generator(interaction: &Interaction, k_max: usize) -> Result<FormalSeries, QstError> {
    bogoliubov(&interaction.functional(), &interaction.switch_on_rate(), k_max)
}

/// JSON digest of a series: per order, every contraction graph with its
/// coefficient, vertex sites, edge kinds, and multiplicities.
pub fn graph_dump(series: &FormalSeries) -> serde_json::Value {
    use crate::functionals::{EdgeKernel, VertexSite};
    let orders: Vec<serde_json::Value> = series
        .orders()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let terms: Vec<serde_json::Value> = f
                .terms()
                .iter()
                .map(|t| {
                    let vertices: Vec<serde_json::Value> = t
                        .vertices
                        .iter()
                        .map(|v| match &v.site {
                            VertexSite::Fixed(e) => serde_json::json!({
                                "site": "fixed",
                                "t": e.t,
                                "u": e.u,
                                "x": e.x,
                                "power": v.power,
                            }),
                            VertexSite::Free { weight, shift_t, shift_u } => serde_json::json!({
                                "site": "free",
                                "profile": match weight.time {
                                    TimeProfile::Chi => "chi".to_string(),
                                    TimeProfile::ChiDotMinus => "chi-dot-minus".to_string(),
                                    TimeProfile::VMinus { t } => format!("v-minus({t})"),
                                },
                                "shift_t": shift_t,
                                "shift_u": shift_u,
                                "power": v.power,
                            }),
                        })
                        .collect();
                    let edges: Vec<serde_json::Value> = t
                        .edges
                        .iter()
                        .map(|e| {
                            serde_json::json!({
                                "a": e.a,
                                "b": e.b,
                                "kind": match e.kernel {
                                    EdgeKernel::Star => "star",
                                    EdgeKernel::Tord => "tord",
                                    EdgeKernel::TordBar => "tord-bar",
                                },
                                "mult": e.mult,
                            })
                        })
                        .collect();
                    serde_json::json!({
                        "coeff": { "re": t.coeff.re, "im": t.coeff.im },
                        "vertices": vertices,
                        "edges": edges,
                        "anchored": t.components_anchored(),
                    })
                })
                .collect();
            serde_json::json!({ "order": k, "terms": terms })
        })
        .collect();
    serde_json::json!({ "truncation": series.truncation(), "orders": orders })
}
