//! Gaussian-damped two-point kernels of the deformed theory.
//!
//! Every kernel is an isotropic mode integral
//!
//! ```text
//! D(t - iu, r) = (1 / 2 pi^2) * int_0^inf dp p^2 e^{-lambda^2 (2 p^2 + m^2)}
//!                * A(omega; t, u) * sinc(p r),     omega = sqrt(p^2 + m^2),
//! ```
//!
//! with a kind-specific amplitude `A`:
//!
//! * `WightmanPlus`: `e^{-i (t - iu) omega} / (2 omega)`; entire in the
//!   time argument, damped in the lower half-plane (`u >= 0`).
//! * `PauliJordan`: `sin(omega (t - iu)) / omega`; the convention here is
//!   fixed by this formula, under which the Wightman antisymmetry reads
//!   `D_+(t) - D_+(-t) = -i D_pj(t)` and the t-derivative at the origin is
//!   the positive multiple `2 sqrt(2 pi) lambda G_{2 lambda}(0,x) e^{-lambda^2 m^2}`
//!   of the localization kernel.
//! * `Feynman`: the theta-composition `D_+(|t|, r)`, even and
//!   continuous at `t = 0`; real time only.
//! * `Advanced`: `theta(-t) D_pj(t, r)`, identically equal to
//!   `-i (D_F - D_+)`; support in the past.
//! * `Retarded`: `-theta(t) D_pj(t, r)`; `Retarded - Advanced` is the
//!   field commutator and `Advanced * Retarded = 0` pointwise.
//! * `Dirac`: `(i/2)(Advanced + Retarded)`.
//! * `Thermal(beta)`: Bose-weighted amplitude
//!   `[e^{-i(t-iu) omega} b_+ + e^{+i(t-iu) omega} b_-] / (2 omega)` with
//!   `b_+ = 1/(1 - e^{-beta omega})`, `b_- = e^{-beta omega} b_+`; periodic in
//!   imaginary time: `D_beta(t - i beta, r) = D_beta(-t, r)`.
//! * `ThermalMinusVacuum(beta)`: the difference `D_beta - D_+` with the
//!   vacuum amplitude subtracted analytically inside the integrand, so the
//!   `O(e^{-beta m})` gap is resolved without cancellation.
//!
//! Momentum cutoff and node counts come from [`QuadratureSpec`]; node counts
//! scale automatically with the oscillation budget `p_max (|t| + r)`.
//! Evaluations snap coordinates to a fixed quantization grid and are memoized
//! behind a reader/writer lock, so cached and uncached runs agree bit for bit.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::QstError;
use crate::model::{gaussian_kernel, Event, ModelParams};
use crate::quad::gauss_rule;

/// Which two-point kernel to evaluate. Thermal kinds carry their inverse
/// temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PropagatorKind {
    WightmanPlus,
    PauliJordan,
    Feynman,
    Advanced,
    Retarded,
    Dirac,
    Thermal { beta: f64 },
    ThermalMinusVacuum { beta: f64 },
}

impl PropagatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PropagatorKind::WightmanPlus => "wightman+",
            PropagatorKind::PauliJordan => "pauli-jordan",
            PropagatorKind::Feynman => "feynman",
            PropagatorKind::Advanced => "advanced",
            PropagatorKind::Retarded => "retarded",
            PropagatorKind::Dirac => "dirac",
            PropagatorKind::Thermal { .. } => "thermal",
            PropagatorKind::ThermalMinusVacuum { .. } => "thermal-minus-vacuum",
        }
    }

    pub fn beta(&self) -> Option<f64> {
        match self {
            PropagatorKind::Thermal { beta } | PropagatorKind::ThermalMinusVacuum { beta } => {
                Some(*beta)
            }
            _ => None,
        }
    }

    /// Build from a kind name plus optional beta; thermal kinds require it,
    /// the others reject it.
    pub fn parse(name: &str, beta: Option<f64>) -> Result<Self, QstError> {
        let plain = |kind: PropagatorKind| match beta {
            Some(_) => Err(QstError::Domain(format!(
                "kind {name} does not take an inverse temperature"
            ))),
            None => Ok(kind),
        };
        let thermal = |mk: fn(f64) -> PropagatorKind| match beta {
            Some(b) if b > 0.0 && b.is_finite() => Ok(mk(b)),
            Some(b) => Err(QstError::Domain(format!("inverse temperature must be positive, got {b}"))),
            None => Err(QstError::Domain(format!("kind {name} requires --beta"))),
        };
        match name {
            "wightman+" | "wightman" => plain(PropagatorKind::WightmanPlus),
            "pauli-jordan" | "commutator" => plain(PropagatorKind::PauliJordan),
            "feynman" => plain(PropagatorKind::Feynman),
            "advanced" => plain(PropagatorKind::Advanced),
            "retarded" => plain(PropagatorKind::Retarded),
            "dirac" => plain(PropagatorKind::Dirac),
            "thermal" => thermal(|beta| PropagatorKind::Thermal { beta }),
            "thermal-minus-vacuum" => {
                thermal(|beta| PropagatorKind::ThermalMinusVacuum { beta })
            }
            other => Err(QstError::Parse(format!("unknown propagator kind '{other}'"))),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            PropagatorKind::WightmanPlus => 0,
            PropagatorKind::PauliJordan => 1,
            PropagatorKind::Feynman => 2,
            PropagatorKind::Advanced => 3,
            PropagatorKind::Retarded => 4,
            PropagatorKind::Dirac => 5,
            PropagatorKind::Thermal { .. } => 6,
            PropagatorKind::ThermalMinusVacuum { .. } => 7,
        }
    }
}

/// Momentum-space rule: base node count and the Gaussian tail cut
/// `p_max = sqrt(p_max_sigmas / (2 lambda^2))`, i.e. the damping at the cut
/// is `e^{-p_max_sigmas}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes: usize,
    pub p_max_sigmas: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { nodes: 256, p_max_sigmas: 40.0 }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<(), QstError> {
        if self.nodes < 16 {
            return Err(QstError::Domain(format!(
                "quadrature needs at least 16 nodes, got {}",
                self.nodes
            )));
        }
        if !(self.p_max_sigmas >= 20.0) {
            return Err(QstError::Domain(format!(
                "momentum cut must keep at least 20 sigmas of damping, got {}",
                self.p_max_sigmas
            )));
        }
        Ok(())
    }

    pub fn p_max(&self, lambda: f64) -> f64 {
        (self.p_max_sigmas / (2.0 * lambda * lambda)).sqrt()
    }
}

/// Coordinates are snapped to this grid before evaluation and caching, which
/// makes memoized and memo-free runs bitwise identical.
pub const COORD_QUANTUM: f64 = 1e-9;

fn snap(x: f64) -> f64 {
    (x / COORD_QUANTUM).round() * COORD_QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct MemoKey {
    tag: u8,
    beta_bits: u64,
    it: i64,
    iu: i64,
    ir: i64,
}

/// Precomputed per-node data for one Gauss rule: momentum nodes, frequencies,
/// and weights with the Gaussian damping and radial measure folded in.
struct NodeTable {
    p: Vec<f64>,
    omega: Vec<f64>,
    weight: Vec<f64>,
}

/// Memoizing evaluator for the damped kernels at fixed model parameters and
/// quadrature rule. Concurrent readers share the memo map behind an RwLock;
/// writes are last-write-wins with identical values.
pub struct PropagatorCache {
    params: ModelParams,
    spec: QuadratureSpec,
    memo: Option<RwLock<HashMap<MemoKey, Complex64>>>,
    tables: RwLock<HashMap<usize, Arc<NodeTable>>>,
}

impl PropagatorCache {
    pub fn new(params: ModelParams, spec: QuadratureSpec) -> Result<Self, QstError> {
        spec.validate()?;
        Ok(Self {
            params,
            spec,
            memo: Some(RwLock::new(HashMap::new())),
            tables: RwLock::new(HashMap::new()),
        })
    }

    /// Evaluator with memoization disabled (coordinates are still snapped).
    pub fn without_memo(params: ModelParams, spec: QuadratureSpec) -> Result<Self, QstError> {
        spec.validate()?;
        Ok(Self { params, spec, memo: None, tables: RwLock::new(HashMap::new()) })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn spec(&self) -> &QuadratureSpec {
        &self.spec
    }

    pub fn memo_len(&self) -> usize {
        self.memo.as_ref().map_or(0, |m| m.read().expect("memo lock").len())
    }

    pub fn clear_memo(&self) {
        if let Some(m) = &self.memo {
            m.write().expect("memo lock").clear();
        }
    }

    /// Evaluate `kind` at complex time `t - iu` (with `u >= 0`) and spatial
    /// radius `r >= 0`.
    pub fn eval(&self, kind: PropagatorKind, t: f64, u: f64, r: f64) -> Result<Complex64, QstError> {
        for (name, v) in [("t", t), ("u", u), ("r", r)] {
            if !v.is_finite() {
                return Err(QstError::Domain(format!("non-finite coordinate {name} = {v}")));
            }
        }
        if r < 0.0 {
            return Err(QstError::Domain(format!("radius must be nonnegative, got {r}")));
        }
        if u < 0.0 {
            return Err(QstError::Domain(format!(
                "imaginary time offset must be nonnegative (lower half-plane), got {u}"
            )));
        }
        match kind {
            PropagatorKind::Thermal { beta } | PropagatorKind::ThermalMinusVacuum { beta } => {
                if !(beta > 0.0) || !beta.is_finite() {
                    return Err(QstError::Domain(format!(
                        "inverse temperature must be positive, got {beta}"
                    )));
                }
                if u > beta {
                    return Err(QstError::Domain(format!(
                        "imaginary time offset {u} outside the KMS strip [0, {beta}]"
                    )));
                }
            }
            PropagatorKind::Feynman
            | PropagatorKind::Advanced
            | PropagatorKind::Retarded
            | PropagatorKind::Dirac => {
                if u != 0.0 {
                    return Err(QstError::Domain(format!(
                        "{} is defined for real time only (u = 0), got u = {u}",
                        kind.name()
                    )));
                }
            }
            _ => {}
        }

        let (t, u, r) = (snap(t), snap(u), snap(r));
        let key = MemoKey {
            tag: kind.tag(),
            beta_bits: kind.beta().unwrap_or(0.0).to_bits(),
            it: (t / COORD_QUANTUM).round() as i64,
            iu: (u / COORD_QUANTUM).round() as i64,
            ir: (r / COORD_QUANTUM).round() as i64,
        };
        if let Some(memo) = &self.memo {
            if let Some(v) = memo.read().expect("memo lock").get(&key) {
                return Ok(*v);
            }
        }
        let value = self.compute(kind, t, u, r)?;
        let value = QstError::check_finite(value, &format!("{} at t={t}, u={u}, r={r}", kind.name()))?;
        if let Some(memo) = &self.memo {
            memo.write().expect("memo lock").insert(key, value);
        }
        Ok(value)
    }

    fn compute(&self, kind: PropagatorKind, t: f64, u: f64, r: f64) -> Result<Complex64, QstError> {
        match kind {
            PropagatorKind::Feynman => self.compute(PropagatorKind::WightmanPlus, t.abs(), 0.0, r),
            PropagatorKind::Advanced => {
                if t > 0.0 {
                    Ok(Complex64::new(0.0, 0.0))
                } else {
                    self.compute(PropagatorKind::PauliJordan, t, 0.0, r)
                }
            }
            PropagatorKind::Retarded => {
                if t < 0.0 {
                    Ok(Complex64::new(0.0, 0.0))
                } else {
                    Ok(-self.compute(PropagatorKind::PauliJordan, t, 0.0, r)?)
                }
            }
            PropagatorKind::Dirac => {
                let adv = self.compute(PropagatorKind::Advanced, t, u, r)?;
                let ret = self.compute(PropagatorKind::Retarded, t, u, r)?;
                Ok(Complex64::new(0.0, 0.5) * (adv + ret))
            }
            _ => Ok(self.mode_integral(kind, t, u, r)),
        }
    }

    fn node_table(&self, n: usize) -> Arc<NodeTable> {
        if let Some(tbl) = self.tables.read().expect("table lock").get(&n) {
            return tbl.clone();
        }
        let lambda = self.params.lambda;
        let m = self.params.mass;
        let p_max = self.spec.p_max(lambda);
        let rule = gauss_rule(n);
        let (p, w) = rule.mapped(0.0, p_max);
        let inv_two_pi2 = 1.0 / (2.0 * std::f64::consts::PI * std::f64::consts::PI);
        let mut omega = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        for (pi, wi) in p.iter().zip(&w) {
            omega.push((pi * pi + m * m).sqrt());
            let damping = (-lambda * lambda * (2.0 * pi * pi + m * m)).exp();
            weight.push(wi * pi * pi * damping * inv_two_pi2);
        }
        let tbl = Arc::new(NodeTable { p, omega, weight });
        self.tables.write().expect("table lock").insert(n, tbl.clone());
        tbl
    }

    /// Node count scaled to the oscillation budget of the evaluation point.
    fn effective_nodes(&self, t: f64, r: f64) -> usize {
        let p_max = self.spec.p_max(self.params.lambda);
        let scaled = (0.75 * p_max * (t.abs() + r)).ceil() as usize + 64;
        self.spec.nodes.max(scaled).min(8192)
    }

    fn mode_integral(&self, kind: PropagatorKind, t: f64, u: f64, r: f64) -> Complex64 {
        let table = self.node_table(self.effective_nodes(t, r));
        let mut acc = Complex64::new(0.0, 0.0);
        match kind {
            PropagatorKind::WightmanPlus => {
                for i in 0..table.p.len() {
                    let om = table.omega[i];
                    let damp = (-u * om).exp();
                    let (s, c) = (om * t).sin_cos();
                    let amp = Complex64::new(c * damp, -s * damp) / (2.0 * om);
                    acc += table.weight[i] * sinc(table.p[i] * r) * amp;
                }
            }
            PropagatorKind::PauliJordan => {
                for i in 0..table.p.len() {
                    let om = table.omega[i];
                    // sin(omega (t - iu)) = sin(omega t) cosh(omega u)
                    //                       - i cos(omega t) sinh(omega u)
                    let (s, c) = (om * t).sin_cos();
                    let amp = Complex64::new(s * (om * u).cosh(), -c * (om * u).sinh()) / om;
                    acc += table.weight[i] * sinc(table.p[i] * r) * amp;
                }
            }
            PropagatorKind::Thermal { beta } => {
                for i in 0..table.p.len() {
                    let om = table.omega[i];
                    let bp = 1.0 / (1.0 - (-beta * om).exp());
                    let (s, c) = (om * t).sin_cos();
                    let fwd = Complex64::new(c, -s) * (-u * om).exp();
                    let bwd = Complex64::new(c, s) * (-(beta - u) * om).exp();
                    let amp = bp * (fwd + bwd) / (2.0 * om);
                    acc += table.weight[i] * sinc(table.p[i] * r) * amp;
                }
            }
            PropagatorKind::ThermalMinusVacuum { beta } => {
                for i in 0..table.p.len() {
                    let om = table.omega[i];
                    let bp = 1.0 / (1.0 - (-beta * om).exp());
                    let (s, c) = (om * t).sin_cos();
                    let bwd = Complex64::new(c, s) * (-(beta - u) * om).exp();
                    let fwd = Complex64::new(c, -s) * (-(beta + u) * om).exp();
                    let amp = bp * (bwd + fwd) / (2.0 * om);
                    acc += table.weight[i] * sinc(table.p[i] * r) * amp;
                }
            }
            _ => unreachable!("composed kinds are handled in compute()"),
        }
        acc
    }

    /// Uniform bound `|D_+(t, 0, r)| <= D_+(0, 0, 0)`: the mode integral with
    /// all phases at 1.
    pub fn wightman_bound(&self) -> f64 {
        let table = self.node_table(self.spec.nodes);
        (0..table.p.len()).map(|i| table.weight[i] / (2.0 * table.omega[i])).sum()
    }
}

fn sinc(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        let z2 = z * z;
        1.0 - z2 / 6.0 * (1.0 - z2 / 20.0)
    } else {
        z.sin() / z
    }
}

/// Momentum-space Feynman kernel of the deformed theory:
/// `(-i / (2 pi)^4) e^{-lambda^2 (2 |p_vec|^2 + m^2)} / (p^2 + m^2 - i eps)`
/// with the mostly-plus Minkowski square `p^2 = -p0^2 + |p_vec|^2`.
pub fn feynman_momentum(params: &ModelParams, p: &[f64; 4], eps: f64) -> Result<Complex64, QstError> {
    if !(eps > 0.0) {
        return Err(QstError::Domain(format!("pole shift eps must be positive, got {eps}")));
    }
    let (p0, sp) = (p[0], p[1] * p[1] + p[2] * p[2] + p[3] * p[3]);
    let m2 = params.mass * params.mass;
    let l2 = params.lambda * params.lambda;
    let damping = (-l2 * (2.0 * sp + m2)).exp();
    let denom = Complex64::new(-p0 * p0 + sp + m2, -eps);
    let two_pi_4 = (2.0 * std::f64::consts::PI).powi(4);
    Ok(Complex64::new(0.0, -1.0 / two_pi_4) * damping / denom)
}

/// The alternative damping that multiplies the full Euclidean square of the
/// 4-momentum onto the undamped Feynman kernel:
/// `i e^{-lambda^2 <p>^2} / (p^2 + m^2 - i eps)`.
pub fn filk_momentum(params: &ModelParams, p: &[f64; 4], eps: f64) -> Result<Complex64, QstError> {
    if !(eps > 0.0) {
        return Err(QstError::Domain(format!("pole shift eps must be positive, got {eps}")));
    }
    let (p0, sp) = (p[0], p[1] * p[1] + p[2] * p[2] + p[3] * p[3]);
    let m2 = params.mass * params.mass;
    let l2 = params.lambda * params.lambda;
    let damping = (-l2 * (p0 * p0 + sp)).exp();
    let denom = Complex64::new(-p0 * p0 + sp + m2, -eps);
    Ok(Complex64::new(0.0, 1.0) * damping / denom)
}

/// Spacelike two-point function of the classical (undeformed) theory,
/// `m K_1(m r) / (4 pi^2 r)`, with the Bessel function computed from its
/// integral representation `K_1(z) = int_0^inf e^{-z cosh s} cosh s ds`.
pub fn classical_wightman(mass: f64, r: f64) -> Result<f64, QstError> {
    if !(mass > 0.0) || !(r > 0.0) {
        return Err(QstError::Domain(format!(
            "classical kernel needs positive mass and radius, got m={mass}, r={r}"
        )));
    }
    let z = mass * r;
    Ok(mass / (4.0 * std::f64::consts::PI.powi(2) * r) * bessel_k1(z))
}

/// `K_1` by Gauss quadrature of the cosh integral representation.
pub fn bessel_k1(z: f64) -> f64 {
    // e^{-z cosh s} cosh s is negligible once z cosh s > 750
    let smax = (2.0 * 750.0 / z).ln().max(1.0);
    let rule = gauss_rule(320);
    rule.integrate_real(0.0, smax, |s| {
        let ch = s.cosh();
        (-z * ch).exp() * ch
    })
}

/// Richardson extrapolation of `eval(WightmanPlus, t, u=0, r)` to `lambda -> 0`
/// in powers of `lambda^2`, for comparison against [`classical_wightman`].
pub fn classical_limit_extrapolated(
    mass: f64,
    t: f64,
    r: f64,
    lambdas: &[f64],
    spec: QuadratureSpec,
) -> Result<Complex64, QstError> {
    if lambdas.len() < 2 {
        return Err(QstError::Domain("extrapolation needs at least two lambdas".into()));
    }
    let mut h: Vec<f64> = Vec::new();
    let mut v: Vec<Complex64> = Vec::new();
    for &l in lambdas {
        let params = ModelParams::new(mass, l)?;
        let cache = PropagatorCache::without_memo(params, spec)?;
        h.push(l * l);
        v.push(cache.eval(PropagatorKind::WightmanPlus, t, 0.0, r)?);
    }
    // Neville tableau in h = lambda^2 evaluated at h = 0
    let n = v.len();
    let mut tableau = v;
    for level in 1..n {
        for i in 0..(n - level) {
            let num = tableau[i + 1] * h[i] - tableau[i] * h[i + level];
            tableau[i] = num / (h[i] - h[i + level]);
        }
    }
    Ok(tableau[0])
}

/// What a decay fit varies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayProbe {
    /// Vary `r` at fixed real time; fit `ln |D|` against `r`.
    Spatial { kind: PropagatorKind, t: f64 },
    /// Vary `t` at fixed radius; fit `ln |D|` against `ln t`.
    Temporal { kind: PropagatorKind, r: f64 },
    /// Vary `beta` of the thermal-vacuum gap at fixed `(t, r)`; fit
    /// `ln |D_beta - D_+|` against `beta`.
    ThermalGap { t: f64, r: f64 },
}

/// Least-squares decay parameters: `rate` is the fitted slope (per length,
/// per log-time, or per inverse temperature depending on the probe).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub intercept: f64,
    pub residual_rms: f64,
}

/// Log-linear decay fit over a validated window.
pub fn decay_fit(
    cache: &PropagatorCache,
    probe: DecayProbe,
    window: (f64, f64),
    samples: usize,
) -> Result<DecayFit, QstError> {
    if samples < 4 {
        return Err(QstError::Domain("decay fit needs at least 4 samples".into()));
    }
    let (lo, hi) = window;
    if !(lo > 0.0) || !(hi > lo) {
        return Err(QstError::Domain(format!("bad decay window [{lo}, {hi}]")));
    }
    let m = cache.params().mass;
    let lam = cache.params().lambda;
    let slack = 1.0 + 1e-9;
    let validated: (f64, f64) = match probe {
        DecayProbe::Spatial { .. } => (5.0 * lam, 15.0 * lam),
        DecayProbe::Temporal { .. } => (10.0 / m, 100.0 / m),
        DecayProbe::ThermalGap { .. } => (2.0 / m, 8.0 / m),
    };
    if lo < validated.0 / slack || hi > validated.1 * slack {
        return Err(QstError::Domain(format!(
            "window [{lo}, {hi}] outside the validated range [{}, {}]",
            validated.0, validated.1
        )));
    }
    let mut xs = Vec::with_capacity(samples);
    let mut ys = Vec::with_capacity(samples);
    for i in 0..samples {
        let frac = i as f64 / (samples - 1) as f64;
        let (x_axis, value) = match probe {
            DecayProbe::Spatial { kind, t } => {
                let r = lo + (hi - lo) * frac;
                (r, cache.eval(kind, t, 0.0, r)?)
            }
            DecayProbe::Temporal { kind, r } => {
                // log-spaced samples for a log-log fit
                let t = lo * (hi / lo).powf(frac);
                (t.ln(), cache.eval(kind, t, 0.0, r)?)
            }
            DecayProbe::ThermalGap { t, r } => {
                let beta = lo + (hi - lo) * frac;
                (beta, cache.eval(PropagatorKind::ThermalMinusVacuum { beta }, t, 0.0, r)?)
            }
        };
        let a = value.norm();
        if a < 1e-300 {
            return Err(QstError::Numeric(format!(
                "kernel magnitude underflowed ({a:e}) inside the fit window"
            )));
        }
        xs.push(x_axis);
        ys.push(a.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let rate = sxy / sxx;
    let intercept = my - rate * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + rate * x);
            e * e
        })
        .sum();
    Ok(DecayFit { rate, intercept, residual_rms: (ss / n).sqrt() })
}

/// One row of a kernel table.
#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub kind: &'static str,
    pub m: f64,
    pub lambda: f64,
    pub beta: Option<f64>,
    pub t: f64,
    pub u: f64,
    pub r: f64,
    pub re: f64,
    pub im: f64,
}

/// Evaluate a kernel over the tensor grid `t x u x r` in deterministic
/// lexicographic order (t outermost, r innermost).
pub fn tabulate(
    cache: &PropagatorCache,
    kind: PropagatorKind,
    ts: &[f64],
    us: &[f64],
    rs: &[f64],
) -> Result<Vec<TableRow>, QstError> {
    let mut rows = Vec::with_capacity(ts.len() * us.len() * rs.len());
    for &t in ts {
        for &u in us {
            for &r in rs {
                let v = cache.eval(kind, t, u, r)?;
                rows.push(TableRow {
                    kind: kind.name(),
                    m: cache.params().mass,
                    lambda: cache.params().lambda,
                    beta: kind.beta(),
                    t,
                    u,
                    r,
                    re: v.re,
                    im: v.im,
                });
            }
        }
    }
    Ok(rows)
}

/// The source term the Feynman kernel produces in place of a point source:
/// `2 sqrt(2 pi) lambda G_{2 lambda}(0, x) e^{-lambda^2 m^2}` evaluated at
/// spatial radius `r` (the time slice t = 0).
pub fn feynman_source_profile(params: &ModelParams, r: f64) -> f64 {
    let wide = params.with_lambda_scaled(2.0);
    let lam = params.lambda;
    let m = params.mass;
    2.0 * (2.0 * std::f64::consts::PI).sqrt()
        * lam
        * gaussian_kernel(&wide, &Event::new(0.0, [r, 0.0, 0.0]))
        * (-lam * lam * m * m).exp()
}
