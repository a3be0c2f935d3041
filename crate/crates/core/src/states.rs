//! Numerical evaluation layer: expectation values of functionals and series
//! coefficients in vacuum, thermal, and dressed states; Monte Carlo and
//! tensor-grid integration of the open (integrated-vertex) terms; adiabatic
//! and inverse-temperature scans; the truncated interacting KMS expansion;
//! and interaction-picture time evolution with a clustering diagnostic.
//!
//! Conventions fixed here:
//! - Vacuum: surviving field powers evaluate to zero, fully contracted terms
//!   to their coefficient times the kernel and weight factors.
//! - Thermal at inverse temperature beta: kernels stay at their vacuum
//!   values and the surviving (vacuum-normal-ordered) powers are Wick paired
//!   with the difference kernel d = thermal - vacuum; a pair within one
//!   vertex contributes the mass shift m_beta = d(0). This reproduces the
//!   quasi-free thermal state exactly: regrouping the thermal two-point
//!   kernel as vacuum + d turns the full thermal Wick sum into vacuum
//!   contractions times d-pairings of the remainder.
//! - Monte Carlo sampling is uniform over each free vertex's own support
//!   (time window times centered ball), with fixed-size deterministic
//!   substreams so estimates are bit-identical for any thread count.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::QstError;
use crate::functionals::{FieldConfig, Functional, IntegrandExpression, Term, VertexSite};
use crate::model::Event;
use crate::perturbation::{bogoliubov, generator, Interaction};
use crate::propagators::{PropagatorCache, PropagatorKind};
use crate::quad::gauss_rule;
use crate::series::FormalSeries;

/// Algebraic state in which expectation values are taken.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateSpec {
    /// Quasi-free ground state; the functional evaluated at the zero
    /// configuration.
    Vacuum,
    /// Quasi-free equilibrium state at inverse temperature `beta`.
    Thermal { beta: f64 },
    /// Vector state `A -> w(B* star A star B) / w(B* star B)` built from a
    /// fully pinned dressing functional `B` on top of the vacuum.
    Dressed { dressing: Functional },
}

impl StateSpec {
    pub fn thermal(beta: f64) -> Self {
        StateSpec::Thermal { beta }
    }

    pub fn validate(&self) -> Result<(), QstError> {
        match self {
            StateSpec::Vacuum => Ok(()),
            StateSpec::Thermal { beta } => {
                if !(*beta > 0.0) || !beta.is_finite() {
                    return Err(QstError::Domain(format!(
                        "inverse temperature must be positive, got {beta}"
                    )));
                }
                Ok(())
            }
            StateSpec::Dressed { dressing } => {
                if dressing.is_zero() {
                    return Err(QstError::Domain("dressing functional is zero".into()));
                }
                for term in dressing.terms() {
                    if term.free_vertex_count() > 0 {
                        return Err(QstError::Domain(
                            "dressing functional must be fully pinned (no integrated vertices)"
                                .into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Integration backend for the open terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum IntegrationMethod {
    /// Uniform sampling over each free vertex's support, deterministic
    /// per-chunk substreams derived from `seed`.
    MonteCarlo { samples: u64, seed: u64 },
    /// Gauss product grids; exact to quadrature order, `std_err = 0`.
    /// Supports at most two free vertices, with every pinned vertex at the
    /// spatial origin so the radial reduction applies.
    TensorGrid { time_nodes: usize, radial_nodes: usize },
}

/// Integration request: backend plus optional domain overrides. Overrides
/// may only enlarge a vertex's sampling region (the weight vanishes outside
/// its own support, so enlarging is unbiased); this enables common random
/// numbers across scan points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationSpec {
    pub method: IntegrationMethod,
    #[serde(default)]
    pub domain_radius: Option<f64>,
    #[serde(default)]
    pub domain_time: Option<(f64, f64)>,
}

impl IntegrationSpec {
    pub fn monte_carlo(samples: u64, seed: u64) -> Self {
        Self {
            method: IntegrationMethod::MonteCarlo { samples, seed },
            domain_radius: None,
            domain_time: None,
        }
    }

    pub fn tensor(time_nodes: usize, radial_nodes: usize) -> Self {
        Self {
            method: IntegrationMethod::TensorGrid { time_nodes, radial_nodes },
            domain_radius: None,
            domain_time: None,
        }
    }

    /// Same spec with an independent RNG stream; a no-op for tensor grids.
    /// Composite evaluations (series orders, quadrature nodes) salt their
    /// sub-estimates so errors add in quadrature.
    pub fn reseeded(&self, salt: u64) -> Self {
        let mut out = *self;
        if let IntegrationMethod::MonteCarlo { samples, seed } = self.method {
            out.method = IntegrationMethod::MonteCarlo {
                samples,
                seed: splitmix64(seed ^ splitmix64(salt.wrapping_add(0x51ED_270B))),
            };
        }
        out
    }
}

/// Value with its Monte Carlo standard error (zero for closed forms and
/// tensor grids) and the number of integrand evaluations behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegralEstimate {
    pub value: Complex64,
    pub std_err: f64,
    pub samples: u64,
}

impl IntegralEstimate {
    fn exact(value: Complex64) -> Self {
        Self { value, std_err: 0.0, samples: 0 }
    }

    fn accumulate(&mut self, other: &IntegralEstimate) {
        self.value += other.value;
        self.std_err = (self.std_err * self.std_err + other.std_err * other.std_err).sqrt();
        self.samples += other.samples;
    }
}

/// One scan abscissa: estimate plus a Cauchy flag (relative change from the
/// previous point within tolerance). The flag never claims a limit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanPoint {
    pub parameter: f64,
    pub value: Complex64,
    pub std_err: f64,
    pub samples: u64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanResult {
    pub points: Vec<ScanPoint>,
    pub tolerance: f64,
    /// Last increment within tolerance (requires at least two points).
    pub converged: bool,
}

// ---------------------------------------------------------------------------
// Deterministic Monte Carlo engine

const CHUNK: u64 = 4096;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared pool sized by `QSTFIELD_THREADS` (default: all cores).
fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("QSTFIELD_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
        {
            builder = builder.num_threads(n);
        }
        builder.build().expect("failed to build worker pool")
    })
}

/// Uniform sampling region of one free vertex: a time window (or a fixed
/// t = 0 slice for purely spatial integrals) times a centered ball.
#[derive(Debug, Clone, Copy)]
struct BallDomain {
    time: Option<(f64, f64)>,
    radius: f64,
}

impl BallDomain {
    fn volume(&self) -> f64 {
        let ball = 4.0 / 3.0 * PI * self.radius.powi(3);
        match self.time {
            Some((a, b)) => (b - a) * ball,
            None => ball,
        }
    }

    /// Exactly four draws when a time window is present, three otherwise;
    /// the fixed draw count keeps substreams aligned.
    fn sample<R: Rng>(&self, rng: &mut R) -> Event {
        let t = match self.time {
            Some((a, b)) => rng.gen_range(a..b),
            None => 0.0,
        };
        let r = self.radius * rng.gen::<f64>().cbrt();
        let cos_theta = 2.0 * rng.gen::<f64>() - 1.0;
        let phi = 2.0 * PI * rng.gen::<f64>();
        let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
        Event::new(t, [r * sin_theta * phi.cos(), r * sin_theta * phi.sin(), r * cos_theta])
    }
}

fn mc_run<F>(
    domains: &[BallDomain],
    samples: u64,
    seed: u64,
    f: F,
) -> Result<IntegralEstimate, QstError>
where
    F: Fn(&[Event]) -> Result<Complex64, QstError> + Sync,
{
    mc_run_in(thread_pool(), domains, samples, seed, f)
}

/// The engine proper, on an explicit pool. Chunks own disjoint RNG
/// substreams keyed by chunk index, partial sums are collected in chunk
/// order and folded sequentially, so the estimate is a pure function of
/// `(domains, samples, seed)`.
fn mc_run_in<F>(
    pool: &rayon::ThreadPool,
    domains: &[BallDomain],
    samples: u64,
    seed: u64,
    f: F,
) -> Result<IntegralEstimate, QstError>
where
    F: Fn(&[Event]) -> Result<Complex64, QstError> + Sync,
{
    if samples < 2 {
        return Err(QstError::Domain(format!(
            "Monte Carlo needs at least 2 samples for an error estimate, got {samples}"
        )));
    }
    let volume: f64 = domains.iter().map(BallDomain::volume).product();
    let n_chunks = samples.div_ceil(CHUNK);
    let partials: Result<Vec<(Complex64, f64)>, QstError> = pool.install(|| {
        (0..n_chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(chunk.wrapping_add(1))));
                let lo = chunk * CHUNK;
                let hi = ((chunk + 1) * CHUNK).min(samples);
                let mut sum = Complex64::new(0.0, 0.0);
                let mut sum_sq = 0.0;
                let mut points = vec![Event::origin(); domains.len()];
                for _ in lo..hi {
                    for (slot, d) in points.iter_mut().zip(domains) {
                        *slot = d.sample(&mut rng);
                    }
                    let v = f(&points)?;
                    sum += v;
                    sum_sq += v.norm_sqr();
                }
                Ok((sum, sum_sq))
            })
            .collect()
    });
    let mut sum = Complex64::new(0.0, 0.0);
    let mut sum_sq = 0.0;
    for (s, q) in partials? {
        sum += s;
        sum_sq += q;
    }
    let n = samples as f64;
    let mean = sum / n;
    let variance = ((sum_sq - n * mean.norm_sqr()) / (n - 1.0)).max(0.0);
    let value = mean * volume;
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(QstError::Numeric("Monte Carlo estimate is not finite".into()));
    }
    Ok(IntegralEstimate { value, std_err: volume * (variance / n).sqrt(), samples })
}

/// Plain Monte Carlo integral of a real function over a centered ball;
/// diagnostic entry point for integrability bounds (no cutoff weights).
pub fn mc_ball_integral<F>(
    radius: f64,
    samples: u64,
    seed: u64,
    f: F,
) -> Result<IntegralEstimate, QstError>
where
    F: Fn(&[f64; 3]) -> f64 + Sync,
{
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(QstError::Domain(format!("ball radius must be positive, got {radius}")));
    }
    let domain = BallDomain { time: None, radius };
    mc_run(&[domain], samples, seed, |pts| Ok(Complex64::new(f(&pts[0].x), 0.0)))
}

// ---------------------------------------------------------------------------
// Term evaluation in a state

/// How surviving field powers are consumed.
#[derive(Debug, Clone, Copy)]
enum EvalMode {
    /// Surviving powers kill the term.
    Vacuum,
    /// Surviving powers Wick-pair against d = thermal - vacuum; `m_beta` is
    /// the precomputed same-vertex value d(0).
    Thermal { beta: f64, m_beta: Complex64 },
    /// Surviving powers evaluate on a classical field configuration.
    Config(FieldConfig),
}

impl EvalMode {
    fn for_state(state: &StateSpec, cache: &PropagatorCache) -> Result<EvalMode, QstError> {
        match state {
            StateSpec::Vacuum => Ok(EvalMode::Vacuum),
            StateSpec::Thermal { beta } => {
                let m_beta =
                    cache.eval(PropagatorKind::ThermalMinusVacuum { beta: *beta }, 0.0, 0.0, 0.0)?;
                Ok(EvalMode::Thermal { beta: *beta, m_beta })
            }
            StateSpec::Dressed { .. } => unreachable!("dressed states reduce to vacuum first"),
        }
    }
}

/// Most pairings a term may require; 12 legs is 10395 pairings.
const MAX_PAIRING_LEGS: usize = 12;

/// A term ready for repeated evaluation: leg owners and, in thermal mode,
/// the precomputed list of perfect pairings (as vertex index pairs).
struct PreparedTerm<'a> {
    term: &'a Term,
    pairings: Vec<Vec<(usize, usize)>>,
}

/// `None` means the term is identically zero in this mode (surviving powers
/// in vacuum, or an odd leg count thermally).
fn prepare_term<'a>(
    term: &'a Term,
    mode: &EvalMode,
) -> Result<Option<PreparedTerm<'a>>, QstError> {
    let no_pairs = PreparedTerm { term, pairings: Vec::new() };
    match mode {
        EvalMode::Vacuum | EvalMode::Config(FieldConfig::Zero) => {
            if term.total_power() > 0 {
                Ok(None)
            } else {
                Ok(Some(no_pairs))
            }
        }
        EvalMode::Config(_) => Ok(Some(no_pairs)),
        EvalMode::Thermal { .. } => {
            let legs: Vec<usize> = term
                .vertices
                .iter()
                .enumerate()
                .flat_map(|(i, v)| std::iter::repeat(i).take(v.power as usize))
                .collect();
            if legs.len() % 2 == 1 {
                return Ok(None);
            }
            if legs.len() > MAX_PAIRING_LEGS {
                return Err(QstError::Domain(format!(
                    "thermal pairing of {} legs exceeds the supported budget of {MAX_PAIRING_LEGS}",
                    legs.len()
                )));
            }
            let mut pairings = Vec::new();
            let mut current = Vec::new();
            enumerate_pairings(&legs, &mut current, &mut pairings);
            Ok(Some(PreparedTerm { term, pairings }))
        }
    }
}

/// All perfect matchings of `remaining` (vertex owners of the legs), first
/// element paired with each later one in turn.
fn enumerate_pairings(
    remaining: &[usize],
    current: &mut Vec<(usize, usize)>,
    out: &mut Vec<Vec<(usize, usize)>>,
) {
    if remaining.is_empty() {
        out.push(current.clone());
        return;
    }
    let first = remaining[0];
    for idx in 1..remaining.len() {
        let rest: Vec<usize> = remaining[1..]
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx - 1)
            .map(|(_, &v)| v)
            .collect();
        current.push((first, remaining[idx]));
        enumerate_pairings(&rest, current, out);
        current.pop();
    }
}

/// Value of one prepared term at concrete free-vertex positions.
fn term_value(
    pt: &PreparedTerm<'_>,
    points: &[Event],
    cache: &PropagatorCache,
    mode: &EvalMode,
) -> Result<Complex64, QstError> {
    let weight = pt.term.weight_factor(points);
    if weight == 0.0 {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let events = pt.term.events(points);
    let mut value = pt.term.coeff * weight * pt.term.kernel_factor(cache, &events)?;
    match mode {
        EvalMode::Vacuum | EvalMode::Config(FieldConfig::Zero) => {}
        EvalMode::Config(cfg) => {
            for (vertex, event) in pt.term.vertices.iter().zip(&events) {
                if vertex.power > 0 {
                    value *= cfg.value(cache, event).powu(vertex.power);
                }
            }
        }
        EvalMode::Thermal { beta, m_beta } => {
            value *= pairing_sum(pt, &events, cache, *beta, *m_beta)?;
        }
    }
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(QstError::Numeric("integrand value is not finite".into()));
    }
    Ok(value)
}

/// Sum over perfect pairings of the surviving legs; cross-vertex pairs take
/// the difference kernel d (even under the joint flip of t and u, so the
/// relative event can be canonicalized to u >= 0), same-vertex pairs the
/// mass shift m_beta.
fn pairing_sum(
    pt: &PreparedTerm<'_>,
    events: &[Event],
    cache: &PropagatorCache,
    beta: f64,
    m_beta: Complex64,
) -> Result<Complex64, QstError> {
    if pt.pairings.is_empty() {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let n = events.len();
    let mut memo: Vec<Option<Complex64>> = vec![None; n * n];
    let mut total = Complex64::new(0.0, 0.0);
    for pairing in &pt.pairings {
        let mut prod = Complex64::new(1.0, 0.0);
        for &(i, j) in pairing {
            let d = if i == j {
                m_beta
            } else {
                let key = i.min(j) * n + i.max(j);
                match memo[key] {
                    Some(v) => v,
                    None => {
                        let rel = events[i].relative_to(&events[j]);
                        let (t, u) = if rel.u < 0.0 { (-rel.t, -rel.u) } else { (rel.t, rel.u) };
                        let v = cache.eval(
                            PropagatorKind::ThermalMinusVacuum { beta },
                            t,
                            u,
                            rel.spatial_norm(),
                        )?;
                        memo[key] = Some(v);
                        v
                    }
                }
            };
            prod *= d;
        }
        total += prod;
    }
    Ok(total)
}

fn has_fixed_vertex(term: &Term) -> bool {
    term.vertices.iter().any(|v| matches!(v.site, VertexSite::Fixed(_)))
}

/// Fully contracted terms that multiply a pinned observable must be graph
/// connected to it: a disconnected cluster of integrated vertices is a
/// vacuum diagram that interacting observables never produce, and almost
/// always signals a normalization mistake upstream.
fn check_anchoring(term: &Term) -> Result<(), QstError> {
    if term.total_power() == 0 && has_fixed_vertex(term) && !term.components_anchored() {
        return Err(QstError::Domain(
            "integrand has a cluster of integrated vertices disconnected from every pinned \
             vertex; such vacuum factors do not occur in interacting observables"
                .into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Domain resolution and grouping

fn free_domains(term: &Term, ispec: &IntegrationSpec) -> Result<Vec<BallDomain>, QstError> {
    term.vertices
        .iter()
        .filter_map(|v| match &v.site {
            VertexSite::Free { weight, .. } => Some(weight),
            VertexSite::Fixed(_) => None,
        })
        .map(|weight| {
            let (mut a, mut b) = weight.time_support();
            if let Some((ta, tb)) = ispec.domain_time {
                if ta > a || tb < b {
                    return Err(QstError::Domain(format!(
                        "time override [{ta}, {tb}] does not cover the vertex support [{a}, {b}]"
                    )));
                }
                a = ta;
                b = tb;
            }
            let mut r = weight.support_radius();
            if let Some(rr) = ispec.domain_radius {
                if rr < r {
                    return Err(QstError::Domain(format!(
                        "radius override {rr} is below the vertex support radius {r}"
                    )));
                }
                r = rr;
            }
            Ok(BallDomain { time: Some((a, b)), radius: r })
        })
        .collect()
}

/// Terms sharing a per-vertex (time window, radius) signature integrate over
/// the same product domain and are evaluated in one pass.
fn domain_signature(term: &Term, ispec: &IntegrationSpec) -> Result<Vec<u64>, QstError> {
    let mut sig = Vec::new();
    for d in free_domains(term, ispec)? {
        let (a, b) = d.time.expect("free vertex domains always carry a time window");
        sig.push(a.to_bits());
        sig.push(b.to_bits());
        sig.push(d.radius.to_bits());
    }
    Ok(sig)
}

/// Integrate all open terms, grouped by domain signature. Each group draws
/// the full configured sample count from its own substream.
fn integrate_open(
    terms: &[&Term],
    mode: &EvalMode,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
) -> Result<IntegralEstimate, QstError> {
    let mut groups: BTreeMap<Vec<u64>, Vec<&Term>> = BTreeMap::new();
    for term in terms {
        check_anchoring(term)?;
        groups.entry(domain_signature(term, ispec)?).or_default().push(term);
    }
    let mut total = IntegralEstimate::exact(Complex64::new(0.0, 0.0));
    for (group_index, group) in groups.values().enumerate() {
        let mut prepared = Vec::new();
        for term in group {
            if let Some(pt) = prepare_term(term, mode)? {
                prepared.push(pt);
            }
        }
        if prepared.is_empty() {
            continue;
        }
        let domains = free_domains(prepared[0].term, ispec)?;
        let est = match ispec.method {
            IntegrationMethod::MonteCarlo { samples, seed } => {
                // Fresh non-memoizing evaluator: random coordinates never
                // repeat, so memoization would only grow without bound.
                let mc_cache = PropagatorCache::without_memo(*cache.params(), *cache.spec())?;
                let group_seed = splitmix64(seed ^ splitmix64(0x77A5 + group_index as u64));
                mc_run(&domains, samples, group_seed, |pts| {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for pt in &prepared {
                        acc += term_value(pt, pts, &mc_cache, mode)?;
                    }
                    Ok(acc)
                })?
            }
            IntegrationMethod::TensorGrid { time_nodes, radial_nodes } => {
                tensor_run(&domains, &prepared, cache, mode, time_nodes, radial_nodes)?
            }
        };
        total.accumulate(&est);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Tensor grids (radial reductions)

/// Every pinned vertex must sit at the spatial origin: the reductions below
/// integrate out the rotational degrees of freedom, which is only valid when
/// the integrand depends on the free positions through radii and the mutual
/// distance alone.
fn check_radial_symmetry(prepared: &[PreparedTerm<'_>], mode: &EvalMode) -> Result<(), QstError> {
    if let EvalMode::Config(cfg) = mode {
        if !matches!(cfg, FieldConfig::Zero) {
            return Err(QstError::Domain(
                "tensor grids require the zero field configuration; use monte-carlo".into(),
            ));
        }
    }
    for pt in prepared {
        for v in &pt.term.vertices {
            if let VertexSite::Fixed(e) = &v.site {
                if e.spatial_norm() != 0.0 {
                    return Err(QstError::Domain(
                        "tensor grids require pinned vertices at the spatial origin; \
                         use monte-carlo for off-center observables"
                            .into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Gauss rule over (a, b) split at the interior `breaks`, `nodes` points per
/// segment. Retarded-type kernels vanish on one side of a pinned vertex time
/// and kink there; a plain rule across the kink converges like 1/n^2 with an
/// oscillating sign, so the axis must break at those times.
fn split_gauss(a: f64, b: f64, nodes: usize, breaks: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|c| *c > a && *c < b).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(b);
    let mut ts = Vec::new();
    let mut ws = Vec::new();
    let mut lo = a;
    for hi in cuts {
        let (t, w) = gauss_rule(nodes).mapped(lo, hi);
        ts.extend(t);
        ws.extend(w);
        lo = hi;
    }
    (ts, ws)
}

fn pinned_times(prepared: &[PreparedTerm<'_>]) -> Vec<f64> {
    let mut times = Vec::new();
    for pt in prepared {
        for v in &pt.term.vertices {
            if let VertexSite::Fixed(e) = &v.site {
                times.push(e.t);
            }
        }
    }
    times
}

fn tensor_run(
    domains: &[BallDomain],
    prepared: &[PreparedTerm<'_>],
    cache: &PropagatorCache,
    mode: &EvalMode,
    time_nodes: usize,
    radial_nodes: usize,
) -> Result<IntegralEstimate, QstError> {
    if time_nodes < 2 || radial_nodes < 2 {
        return Err(QstError::Domain(
            "tensor grids need at least 2 nodes per axis".into(),
        ));
    }
    check_radial_symmetry(prepared, mode)?;
    // Kinks along the separation of two free vertices cannot be aligned with
    // a tensor product; only the pinned times are split here.
    let breaks = pinned_times(prepared);
    let sum_terms = |points: &[Event]| -> Result<Complex64, QstError> {
        let mut acc = Complex64::new(0.0, 0.0);
        for pt in prepared {
            acc += term_value(pt, points, cache, mode)?;
        }
        Ok(acc)
    };
    match domains {
        [d] => {
            let (a, b) = d.time.expect("free vertex domain has a time window");
            let (ts, wts) = split_gauss(a, b, time_nodes, &breaks);
            let (rs, wrs) = gauss_rule(radial_nodes).mapped(0.0, d.radius);
            let mut value = Complex64::new(0.0, 0.0);
            let mut samples = 0u64;
            for (t, wt) in ts.iter().zip(&wts) {
                for (r, wr) in rs.iter().zip(&wrs) {
                    let measure = wt * wr * 4.0 * PI * r * r;
                    value += measure * sum_terms(&[Event::new(*t, [*r, 0.0, 0.0])])?;
                    samples += 1;
                }
            }
            Ok(IntegralEstimate { value, std_err: 0.0, samples })
        }
        [d1, d2] => {
            // Bipolar reduction: positions enter through r1, r2 and the
            // separation s, with measure 8 pi^2 r1 r2 s; place the first
            // point on the x-axis and the second in the xy-plane.
            let (a1, b1) = d1.time.expect("free vertex domain has a time window");
            let (a2, b2) = d2.time.expect("free vertex domain has a time window");
            let (t1s, wt1s) = split_gauss(a1, b1, time_nodes, &breaks);
            let (t2s, wt2s) = split_gauss(a2, b2, time_nodes, &breaks);
            let radial = gauss_rule(radial_nodes);
            let (r1s, wr1s) = radial.mapped(0.0, d1.radius);
            let (r2s, wr2s) = radial.mapped(0.0, d2.radius);
            let mut value = Complex64::new(0.0, 0.0);
            let mut samples = 0u64;
            for (r1, wr1) in r1s.iter().zip(&wr1s) {
                for (r2, wr2) in r2s.iter().zip(&wr2s) {
                    let (ss, wss) = radial.mapped((r1 - r2).abs(), r1 + r2);
                    for (s, ws) in ss.iter().zip(&wss) {
                        let ax = (r1 * r1 + r2 * r2 - s * s) / (2.0 * r1);
                        let bx = (r2 * r2 - ax * ax).max(0.0).sqrt();
                        let x1 = [*r1, 0.0, 0.0];
                        let x2 = [ax, bx, 0.0];
                        let geom = wr1 * wr2 * ws * 8.0 * PI * PI * r1 * r2 * s;
                        for (t1, wt1) in t1s.iter().zip(&wt1s) {
                            for (t2, wt2) in t2s.iter().zip(&wt2s) {
                                let measure = geom * wt1 * wt2;
                                value += measure
                                    * sum_terms(&[Event::new(*t1, x1), Event::new(*t2, x2)])?;
                                samples += 1;
                            }
                        }
                    }
                }
            }
            Ok(IntegralEstimate { value, std_err: 0.0, samples })
        }
        _ => Err(QstError::Domain(format!(
            "tensor grids support at most two integrated vertices, got {}; use monte-carlo",
            domains.len()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Public evaluation entry points

/// Closed-form part: no integrated vertices, value exact.
fn closed_term_sum(
    terms: &[&Term],
    mode: &EvalMode,
    cache: &PropagatorCache,
) -> Result<Complex64, QstError> {
    let mut acc = Complex64::new(0.0, 0.0);
    for term in terms {
        if let Some(pt) = prepare_term(term, mode)? {
            acc += term_value(&pt, &[], cache, mode)?;
        }
    }
    Ok(acc)
}

fn evaluate_in_mode(
    terms: &[Term],
    mode: &EvalMode,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
) -> Result<IntegralEstimate, QstError> {
    let (closed, open): (Vec<&Term>, Vec<&Term>) =
        terms.iter().partition(|t| t.free_vertex_count() == 0);
    let mut total = IntegralEstimate::exact(closed_term_sum(&closed, mode, cache)?);
    if !open.is_empty() {
        total.accumulate(&integrate_open(&open, mode, cache, ispec)?);
    }
    Ok(total)
}

/// Integrate the open remainder of a functional evaluation against its
/// stored field configuration.
pub fn integrate(
    expr: &IntegrandExpression,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
) -> Result<IntegralEstimate, QstError> {
    evaluate_in_mode(&expr.terms, &EvalMode::Config(expr.config), cache, ispec)
}

/// Expectation value of a functional in a state. Closed terms contribute
/// exactly; open terms are integrated with the requested backend.
pub fn expectation(
    f: &Functional,
    state: &StateSpec,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
) -> Result<IntegralEstimate, QstError> {
    state.validate()?;
    match state {
        StateSpec::Dressed { dressing } => {
            let b_star = dressing.adjoint();
            let denom_f = b_star.star(dressing);
            let denom = closed_term_sum(
                &denom_f.terms().iter().collect::<Vec<_>>(),
                &EvalMode::Vacuum,
                cache,
            )?;
            if denom.norm() < 1e-300 {
                return Err(QstError::Domain(
                    "dressing functional has zero vacuum norm".into(),
                ));
            }
            let numer_f = b_star.star(f).star(dressing);
            let numer = evaluate_in_mode(numer_f.terms(), &EvalMode::Vacuum, cache, ispec)?;
            Ok(IntegralEstimate {
                value: numer.value / denom,
                std_err: numer.std_err / denom.norm(),
                samples: numer.samples,
            })
        }
        _ => {
            let mode = EvalMode::for_state(state, cache)?;
            evaluate_in_mode(f.terms(), &mode, cache, ispec)
        }
    }
}

/// Expectation of the order-`k` coefficient of a series.
pub fn expectation_at_order(
    series: &FormalSeries,
    k: usize,
    state: &StateSpec,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
) -> Result<IntegralEstimate, QstError> {
    if k > series.truncation() {
        return Err(QstError::Domain(format!(
            "order {k} beyond series truncation {}",
            series.truncation()
        )));
    }
    expectation(series.order(k), state, cache, ispec)
}

/// Partial sum of order expectations through `k`, each order on its own
/// substream so standard errors add in quadrature.
pub fn expectation_through_order(
    series: &FormalSeries,
    k: usize,
    state: &StateSpec,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
) -> Result<IntegralEstimate, QstError> {
    if k > series.truncation() {
        return Err(QstError::Domain(format!(
            "order {k} beyond series truncation {}",
            series.truncation()
        )));
    }
    let mut total = IntegralEstimate::exact(Complex64::new(0.0, 0.0));
    for j in 0..=k {
        if series.order(j).is_zero() {
            continue;
        }
        let est = expectation(series.order(j), state, cache, &ispec.reseeded(j as u64))?;
        total.accumulate(&est);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Connected correlators

/// Connected (truncated) correlator of fully pinned factors, by Moebius
/// recursion over the partition lattice: the connected part of the block
/// containing the first factor times ordinary moments of the rest.
pub fn connected_correlator(
    state: &StateSpec,
    factors: &[&Functional],
    cache: &PropagatorCache,
) -> Result<Complex64, QstError> {
    let n = factors.len();
    if n == 0 || n > 6 {
        return Err(QstError::Domain(format!(
            "connected correlator supports 1 to 6 factors, got {n}"
        )));
    }
    state.validate()?;
    let mode = match state {
        StateSpec::Dressed { .. } => {
            return Err(QstError::Domain(
                "connected correlators are defined here for vacuum and thermal states only"
                    .into(),
            ))
        }
        other => EvalMode::for_state(other, cache)?,
    };
    for f in factors {
        for term in f.terms() {
            if term.free_vertex_count() > 0 {
                return Err(QstError::Domain(
                    "connected correlator factors must be fully pinned".into(),
                ));
            }
        }
    }
    let full: u32 = (1 << n) - 1;
    // Ordinary moments of every subset: star product in ascending factor
    // order, evaluated closed form.
    let mut moment = vec![Complex64::new(0.0, 0.0); (full + 1) as usize];
    moment[0] = Complex64::new(1.0, 0.0);
    for mask in 1..=full {
        let mut prod: Option<Functional> = None;
        for (i, f) in factors.iter().enumerate() {
            if mask & (1 << i) != 0 {
                prod = Some(match prod {
                    None => (*f).clone(),
                    Some(p) => p.star(f),
                });
            }
        }
        let f = prod.expect("nonempty mask");
        moment[mask as usize] =
            closed_term_sum(&f.terms().iter().collect::<Vec<_>>(), &mode, cache)?;
    }
    // Cumulants by popcount order.
    let mut cumulant = vec![Complex64::new(0.0, 0.0); (full + 1) as usize];
    let mut masks: Vec<u32> = (1..=full).collect();
    masks.sort_by_key(|m| m.count_ones());
    for &mask in &masks {
        let low = mask & mask.wrapping_neg();
        let mut value = moment[mask as usize];
        // Proper sub-blocks containing the lowest factor.
        let rest = mask ^ low;
        let mut sub = rest;
        loop {
            let block = low | sub;
            if block != mask {
                value -= cumulant[block as usize] * moment[(mask ^ block) as usize];
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        cumulant[mask as usize] = value;
    }
    Ok(cumulant[full as usize])
}

// ---------------------------------------------------------------------------
// Scans

fn relative_step(current: Complex64, previous: Complex64, tolerance: f64) -> bool {
    (current - previous).norm() <= tolerance * current.norm() + f64::MIN_POSITIVE
}

/// Expectation of the order-`k` Bogoliubov coefficient as the spatial cutoff
/// radius grows. All points share one RNG stream and a common sampling
/// domain (the largest support), so successive increments are measured with
/// common random numbers rather than independent noise.
pub fn adiabatic_scan(
    interaction: &Interaction,
    observable: &Functional,
    k: usize,
    radii: &[f64],
    state: &StateSpec,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
    tolerance: f64,
) -> Result<ScanResult, QstError> {
    if radii.is_empty() {
        return Err(QstError::Domain("adiabatic scan needs at least one radius".into()));
    }
    if !radii.windows(2).all(|w| w[0] < w[1]) {
        return Err(QstError::Domain("scan radii must be strictly increasing".into()));
    }
    if !(tolerance > 0.0) {
        return Err(QstError::Domain(format!("scan tolerance must be positive, got {tolerance}")));
    }
    let largest = interaction.cutoff.with_radius(*radii.last().unwrap()).h_support_radius();
    let mut shared = *ispec;
    shared.domain_radius = Some(shared.domain_radius.map_or(largest, |r| r.max(largest)));
    let mut points: Vec<ScanPoint> = Vec::with_capacity(radii.len());
    for &radius in radii {
        let scaled =
            Interaction::new(interaction.coupling, interaction.power, interaction.cutoff.with_radius(radius))?;
        let series = bogoliubov(&scaled.functional(), observable, k)?;
        let est = expectation_at_order(&series, k, state, cache, &shared)?;
        let converged = points
            .last()
            .map(|prev| relative_step(est.value, prev.value, tolerance))
            .unwrap_or(false);
        points.push(ScanPoint {
            parameter: radius,
            value: est.value,
            std_err: est.std_err,
            samples: est.samples,
            converged,
        });
    }
    let converged = points.len() >= 2 && points.last().unwrap().converged;
    Ok(ScanResult { points, tolerance, converged })
}

/// Thermal expectation of the order-`k` Bogoliubov coefficient as the
/// inverse temperature grows; diagnoses the beta -> infinity approach to
/// the vacuum value (the gap closes exponentially in beta m).
pub fn kms_scan(
    interaction: &Interaction,
    observable: &Functional,
    k: usize,
    betas: &[f64],
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
    tolerance: f64,
) -> Result<ScanResult, QstError> {
    if betas.is_empty() {
        return Err(QstError::Domain("KMS scan needs at least one inverse temperature".into()));
    }
    if !betas.windows(2).all(|w| w[0] < w[1]) {
        return Err(QstError::Domain(
            "scan inverse temperatures must be strictly increasing".into(),
        ));
    }
    if !(tolerance > 0.0) {
        return Err(QstError::Domain(format!("scan tolerance must be positive, got {tolerance}")));
    }
    let series = bogoliubov(&interaction.functional(), observable, k)?;
    let mut points: Vec<ScanPoint> = Vec::with_capacity(betas.len());
    for &beta in betas {
        let state = StateSpec::Thermal { beta };
        let est = expectation_at_order(&series, k, &state, cache, ispec)?;
        let converged = points
            .last()
            .map(|prev| relative_step(est.value, prev.value, tolerance))
            .unwrap_or(false);
        points.push(ScanPoint {
            parameter: beta,
            value: est.value,
            std_err: est.std_err,
            samples: est.samples,
            converged,
        });
    }
    let converged = points.len() >= 2 && points.last().unwrap().converged;
    Ok(ScanResult { points, tolerance, converged })
}

// ---------------------------------------------------------------------------
// Interacting KMS expansion

/// Order-`k` value of the interacting thermal expectation, truncated after
/// the first correction terms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KmsExpansion {
    pub value: Complex64,
    pub std_err: f64,
    pub samples: u64,
    /// The uncorrected term: thermal expectation of the order-`k`
    /// interacting observable.
    pub direct: IntegralEstimate,
    /// The two switch-on corrections (generator before / after the
    /// observable), already sign-applied.
    pub corrections: [IntegralEstimate; 2],
}

/// Truncated expansion of the interacting KMS expectation at order `k`:
/// the thermal expectation of the interacting observable minus two
/// imaginary-time integrals of connected correlations with the cocycle
/// generator,
///
///   w_int(A)[k] = w(R_k) - sum_{j+1+l=k} int_0^{b/2} dw wc(K_j(-iw) x R_l)
///                        - sum_{j+1+l=k} int_0^{b/2} dv wc(R_l(-iv) x K_j)
///
/// where the translate is applied to whichever factor the KMS condition
/// moves into the lower half-plane (joint translation invariance of the
/// thermal state brings every term to that normal form). The integrands
/// decay like exp(-m w), so the Gauss nodes are exponentially clustered
/// near w = 0.
pub fn interacting_kms(
    interaction: &Interaction,
    observable: &Functional,
    beta: f64,
    truncation: usize,
    k: usize,
    u_nodes: usize,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
) -> Result<KmsExpansion, QstError> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(QstError::Domain(format!(
            "inverse temperature must be positive, got {beta}"
        )));
    }
    if truncation > 1 {
        return Err(QstError::Domain(format!(
            "interacting KMS expansion is truncated after the first correction, got depth {truncation}"
        )));
    }
    if k > 2 {
        return Err(QstError::Domain(format!(
            "interacting KMS expansion supports orders k <= 2, got {k}"
        )));
    }
    if u_nodes < 2 {
        return Err(QstError::Domain("imaginary-time quadrature needs at least 2 nodes".into()));
    }
    let state = StateSpec::Thermal { beta };
    let series = bogoliubov(&interaction.functional(), observable, k)?;
    let direct = expectation_at_order(&series, k, &state, cache, &ispec.reseeded(0x0D1))?;

    let mut corrections = [
        IntegralEstimate::exact(Complex64::new(0.0, 0.0)),
        IntegralEstimate::exact(Complex64::new(0.0, 0.0)),
    ];
    if truncation >= 1 && k >= 1 {
        let gen = generator(interaction, k - 1)?;
        let mass = cache.params().mass;
        // Map xi in (0, 1) to w = -ln(1 - c xi)/m with c = 1 - e^{-m b/2}:
        // integrates exactly over (0, b/2) while clustering nodes near 0.
        let c = 1.0 - (-mass * beta / 2.0).exp();
        let (xis, wxs) = gauss_rule(u_nodes).mapped(0.0, 1.0);
        for j in 0..k {
            let k_j = gen.order(j);
            if k_j.is_zero() {
                continue;
            }
            let l = k - 1 - j;
            let r_l = series.order(l);
            if r_l.is_zero() {
                continue;
            }
            let salt = 0x1000 * (j as u64 + 1);
            let omega_k = expectation(k_j, &state, cache, &ispec.reseeded(salt | 1))?;
            let omega_r = expectation(r_l, &state, cache, &ispec.reseeded(salt | 2))?;
            for (q, (xi, wx)) in xis.iter().zip(&wxs).enumerate() {
                let w = -(1.0 - c * xi).ln() / mass;
                let jacobian = wx * c / (mass * (1.0 - c * xi));
                let node_salt = salt | ((q as u64 + 1) << 4);
                // Generator shifted down, observable at real time.
                let lhs = k_j.translate(0.0, w)?.star(r_l);
                let om_lhs = expectation(&lhs, &state, cache, &ispec.reseeded(node_salt | 0x8))?;
                let conn_l = om_lhs.value - omega_k.value * omega_r.value;
                corrections[0].value -= jacobian * conn_l;
                let var_l = om_lhs.std_err * om_lhs.std_err
                    + (omega_k.value.norm() * omega_r.std_err).powi(2)
                    + (omega_r.value.norm() * omega_k.std_err).powi(2);
                corrections[0].std_err =
                    (corrections[0].std_err.powi(2) + jacobian * jacobian * var_l).sqrt();
                corrections[0].samples += om_lhs.samples;
                // Observable shifted down, generator at real time.
                let rhs = r_l.translate(0.0, w)?.star(k_j);
                let om_rhs = expectation(&rhs, &state, cache, &ispec.reseeded(node_salt | 0xC))?;
                let conn_r = om_rhs.value - omega_r.value * omega_k.value;
                corrections[1].value -= jacobian * conn_r;
                let var_r = om_rhs.std_err * om_rhs.std_err
                    + (omega_k.value.norm() * omega_r.std_err).powi(2)
                    + (omega_r.value.norm() * omega_k.std_err).powi(2);
                corrections[1].std_err =
                    (corrections[1].std_err.powi(2) + jacobian * jacobian * var_r).sqrt();
                corrections[1].samples += om_rhs.samples;
            }
            corrections[0].samples += omega_k.samples + omega_r.samples;
        }
    }
    let value = direct.value + corrections[0].value + corrections[1].value;
    let std_err = (direct.std_err.powi(2)
        + corrections[0].std_err.powi(2)
        + corrections[1].std_err.powi(2))
    .sqrt();
    let samples = direct.samples + corrections[0].samples + corrections[1].samples;
    Ok(KmsExpansion { value, std_err, samples, direct, corrections })
}

// ---------------------------------------------------------------------------
// Time evolution

/// Co-moving expansion of the interaction-picture evolution: the pieces
/// whose expectation values sum to w(evolved A). Piece 0 is the observable
/// itself; order `n` contributes i^n times the time-ordered simplex integral
/// of nested commutators with the cocycle generator at negative times,
/// discretized by nested Gauss rules (outer on (0, t), inner on (0, t1)).
///
/// The expansion is taken in the frame co-moving with the free evolution:
/// for expectation values in a translation-invariant state the free motion
/// drops out, while correlation functions against a second observable must
/// translate the pieces forward by `t` (see [`clustering_fit`]).
pub fn evolution_expansion(
    interaction: &Interaction,
    observable: &Functional,
    t: f64,
    commutator_order: usize,
    k: usize,
    time_nodes: usize,
) -> Result<Vec<FormalSeries>, QstError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(QstError::Domain(format!("evolution time must be nonnegative, got {t}")));
    }
    if commutator_order > 2 {
        return Err(QstError::Domain(format!(
            "evolution expansion supports commutator depth <= 2, got {commutator_order}"
        )));
    }
    if time_nodes < 2 {
        return Err(QstError::Domain("time quadrature needs at least 2 nodes".into()));
    }
    let base = FormalSeries::single(0, observable.clone(), k);
    let mut pieces = vec![base.clone()];
    if t == 0.0 || commutator_order == 0 || k == 0 {
        return Ok(pieces);
    }
    // Generator order j carries j+1 powers of the coupling; shift it into
    // a plain series so Cauchy products grade correctly.
    let gen = generator(interaction, k - 1)?;
    let mut shifted = FormalSeries::zero(k);
    for j in 0..k {
        shifted.set_order(j + 1, gen.order(j).clone());
    }
    let i = Complex64::new(0.0, 1.0);
    let commutator = |a: &FormalSeries, b: &FormalSeries| a.star(b).sub(&b.star(a));
    let (s1s, w1s) = gauss_rule(time_nodes).mapped(0.0, t);
    for (s1, w1) in s1s.iter().zip(&w1s) {
        let k1 = shifted.translate(-s1, 0.0)?;
        pieces.push(commutator(&k1, &base).scale(i * w1));
        if commutator_order >= 2 {
            let (s2s, w2s) = gauss_rule(time_nodes).mapped(0.0, *s1);
            for (s2, w2) in s2s.iter().zip(&w2s) {
                let k2 = shifted.translate(-s2, 0.0)?;
                let inner = commutator(&k2, &base);
                pieces.push(commutator(&k1, &inner).scale(-Complex64::new(w1 * w2, 0.0)));
            }
        }
    }
    Ok(pieces)
}

/// Expectation of the evolved observable through coupling order `k`.
pub fn time_evolution_expectation(
    interaction: &Interaction,
    observable: &Functional,
    t: f64,
    commutator_order: usize,
    k: usize,
    state: &StateSpec,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
    time_nodes: usize,
) -> Result<IntegralEstimate, QstError> {
    let pieces = evolution_expansion(interaction, observable, t, commutator_order, k, time_nodes)?;
    let mut total = IntegralEstimate::exact(Complex64::new(0.0, 0.0));
    for (i, piece) in pieces.iter().enumerate() {
        if piece.is_zero() {
            continue;
        }
        let est = expectation_through_order(piece, k, state, cache, &ispec.reseeded(i as u64))?;
        total.accumulate(&est);
    }
    Ok(total)
}

/// Power-law fit of the connected equal-state correlator
/// `D(t) = w(A star evolved(B)) - w(A) w(evolved(B))` over the given times:
/// least squares on (ln t, ln |D|).
#[derive(Debug, Clone, Serialize)]
pub struct ClusteringFit {
    /// Fitted decay exponent (slope of ln |D| against ln t).
    pub exponent: f64,
    /// Fitted intercept (ln of the amplitude).
    pub amplitude_log: f64,
    /// The measured (time, |D|) pairs.
    pub points: Vec<(f64, f64)>,
}

pub fn clustering_fit(
    interaction: &Interaction,
    left: &Functional,
    right: &Functional,
    times: &[f64],
    commutator_order: usize,
    k: usize,
    state: &StateSpec,
    cache: &PropagatorCache,
    ispec: &IntegrationSpec,
    time_nodes: usize,
) -> Result<ClusteringFit, QstError> {
    if times.len() < 2 {
        return Err(QstError::Domain("clustering fit needs at least two times".into()));
    }
    if !times.iter().all(|&t| t > 0.0 && t.is_finite()) {
        return Err(QstError::Domain("clustering times must be positive".into()));
    }
    let omega_left = expectation(left, state, cache, &ispec.reseeded(0xA11))?;
    let left_series_of = |f: &FormalSeries| -> FormalSeries {
        FormalSeries::single(0, left.clone(), f.truncation()).star(f)
    };
    let mut points = Vec::with_capacity(times.len());
    for (ti, &t) in times.iter().enumerate() {
        let pieces =
            evolution_expansion(interaction, right, t, commutator_order, k, time_nodes)?;
        let mut d = Complex64::new(0.0, 0.0);
        for (pi, piece) in pieces.iter().enumerate() {
            if piece.is_zero() {
                continue;
            }
            // Leave the co-moving frame: the evolved observable sits at
            // physical time t.
            let moved = piece.translate(t, 0.0)?;
            let salt = (ti as u64) << 8 | pi as u64;
            let cross = expectation_through_order(
                &left_series_of(&moved),
                k,
                state,
                cache,
                &ispec.reseeded(salt),
            )?;
            let solo = expectation_through_order(
                &moved,
                k,
                state,
                cache,
                &ispec.reseeded(salt | 0x4000),
            )?;
            d += cross.value - omega_left.value * solo.value;
        }
        let magnitude = d.norm();
        if magnitude == 0.0 {
            return Err(QstError::Numeric(
                "connected correlator vanished; no decay exponent to fit".into(),
            ));
        }
        points.push((t, magnitude));
    }
    // Least squares on the log-log pairs.
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(t, m) in &points {
        let x = t.ln();
        let y = m.ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(QstError::Numeric("clustering times are degenerate".into()));
    }
    let exponent = (n * sxy - sx * sy) / denom;
    let amplitude_log = (sy - exponent * sx) / n;
    Ok(ClusteringFit { exponent, amplitude_log, points })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CutoffSpec, ModelParams};
    use crate::propagators::QuadratureSpec;
    use crate::functionals::Weight;
    use crate::functionals::TimeProfile;

    fn setup() -> (ModelParams, PropagatorCache) {
        let params = ModelParams::new(1.0, 0.4).unwrap();
        let cache = PropagatorCache::new(params, QuadratureSpec::default()).unwrap();
        (params, cache)
    }

    fn chi_weight(cutoff: CutoffSpec) -> Weight {
        Weight { cutoff, time: TimeProfile::Chi }
    }

    /// 1-D quadrature oracle for int chi(t) dt * int h(|x|) d^3x, integrated
    /// piecewise between the transition boundaries where the bumps are
    /// smooth (a single global rule converges poorly across the joints).
    fn weight_volume_oracle(cutoff: &CutoffSpec) -> f64 {
        let rule = gauss_rule(64);
        let piecewise = |breaks: &[f64], f: &dyn Fn(f64) -> f64| -> f64 {
            breaks
                .windows(2)
                .map(|seg| {
                    let (xs, ws) = rule.mapped(seg[0], seg[1]);
                    xs.iter().zip(&ws).map(|(x, w)| f(*x) * w).sum::<f64>()
                })
                .sum()
        };
        let e = cutoff.eps;
        let time = piecewise(
            &[-2.0 * e, -e, cutoff.t_plateau, cutoff.t_plateau + e],
            &|t| cutoff.chi(t),
        );
        let space = piecewise(&[0.0, cutoff.radius, cutoff.h_support_radius()], &|r| {
            cutoff.h(r) * 4.0 * PI * r * r
        });
        time * space
    }

    #[test]
    fn cutoff_volume_integral_matches_radial_quadrature() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.5, 2.0, 3.0, 1.0).unwrap();
        let f = Functional::smeared_power(chi_weight(cutoff), 0);
        let oracle = weight_volume_oracle(&cutoff);

        let mc = expectation(
            &f,
            &StateSpec::Vacuum,
            &cache,
            &IntegrationSpec::monte_carlo(200_000, 11),
        )
        .unwrap();
        assert!(
            (mc.value.re - oracle).abs() <= 2.0 * mc.std_err,
            "mc {} vs oracle {} (2 sigma = {})",
            mc.value.re,
            oracle,
            2.0 * mc.std_err
        );
        assert!(mc.value.im.abs() < 1e-12);

        let tensor =
            expectation(&f, &StateSpec::Vacuum, &cache, &IntegrationSpec::tensor(64, 64)).unwrap();
        assert!(tensor.std_err == 0.0);
        assert!(
            (tensor.value.re - oracle).abs() <= 1e-4 * oracle,
            "tensor {} vs oracle {}",
            tensor.value.re,
            oracle
        );
    }

    #[test]
    fn exponential_ball_integral_matches_tree_bound() {
        // int_{R^3} e^{-m|x|} d^3x = 8 pi / m^3; the sampled ball of radius
        // 40/m carries all but e^{-40} of the mass.
        let m = 1.0;
        let est = mc_ball_integral(40.0 / m, 2_000_000, 7, |x| {
            (-m * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()).exp()
        })
        .unwrap();
        let exact = 8.0 * PI / (m * m * m);
        assert!(
            (est.value.re - exact).abs() <= 3.0 * est.std_err,
            "estimate {} vs exact {} (3 sigma = {})",
            est.value.re,
            exact,
            3.0 * est.std_err
        );
        assert!(est.std_err / exact <= 0.05, "relative error {}", est.std_err / exact);
    }

    #[test]
    fn monte_carlo_is_thread_count_invariant() {
        let domains = [
            BallDomain { time: Some((-1.0, 2.0)), radius: 1.5 },
            BallDomain { time: Some((0.0, 1.0)), radius: 0.7 },
        ];
        let f = |pts: &[Event]| {
            Ok(Complex64::new(
                (pts[0].t * pts[1].x[0]).sin() + pts[0].spatial_norm(),
                pts[1].t * pts[0].x[2],
            ))
        };
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let multi = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = mc_run_in(&single, &domains, 10_000, 42, f).unwrap();
        let b = mc_run_in(&multi, &domains, 10_000, 42, f).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.std_err, b.std_err);
    }

    #[test]
    fn vacuum_expectation_contracts_star_products() {
        let (_, cache) = setup();
        let ispec = IntegrationSpec::tensor(8, 8);
        let x = Event::new(0.3, [0.1, -0.2, 0.5]);
        let y = Event::origin();
        let rel = x.relative_to(&y);
        let dp = cache
            .eval(PropagatorKind::WightmanPlus, rel.t, 0.0, rel.spatial_norm())
            .unwrap();

        let two_pt = Functional::field(x).star(&Functional::field(y));
        let w2 = expectation(&two_pt, &StateSpec::Vacuum, &cache, &ispec).unwrap();
        assert!((w2.value - dp).norm() < 1e-12);

        let sq = Functional::local_power(x, 2).star(&Functional::local_power(y, 2));
        let w4 = expectation(&sq, &StateSpec::Vacuum, &cache, &ispec).unwrap();
        assert!((w4.value - 2.0 * dp * dp).norm() < 1e-12);
    }

    #[test]
    fn thermal_two_point_function_is_the_thermal_kernel() {
        let (_, cache) = setup();
        let beta = 2.5;
        let state = StateSpec::thermal(beta);
        let ispec = IntegrationSpec::tensor(8, 8);
        let x = Event::new(0.7, [0.2, 0.0, -0.4]);
        let y = Event::new(-0.1, [0.0, 0.3, 0.1]);
        let rel = x.relative_to(&y);
        let thermal = cache
            .eval(PropagatorKind::Thermal { beta }, rel.t, 0.0, rel.spatial_norm())
            .unwrap();

        let two_pt = Functional::field(x).star(&Functional::field(y));
        let w = expectation(&two_pt, &state, &cache, &ispec).unwrap();
        assert!(
            (w.value - thermal).norm() < 1e-12,
            "state value {} vs kernel {}",
            w.value,
            thermal
        );

        // Normal-ordered square picks up exactly the mass shift.
        let m_beta = cache
            .eval(PropagatorKind::ThermalMinusVacuum { beta }, 0.0, 0.0, 0.0)
            .unwrap();
        let w_sq = expectation(&Functional::local_power(x, 2), &state, &cache, &ispec).unwrap();
        assert!((w_sq.value - m_beta).norm() < 1e-12);
    }

    #[test]
    fn thermal_moments_follow_wick_combinatorics() {
        let (_, cache) = setup();
        let beta = 1.8;
        let state = StateSpec::thermal(beta);
        let ispec = IntegrationSpec::tensor(8, 8);
        let m_beta = cache
            .eval(PropagatorKind::ThermalMinusVacuum { beta }, 0.0, 0.0, 0.0)
            .unwrap();
        let x = Event::origin();
        // (n-1)!! pairings of a single normal-ordered power.
        for (n, double_factorial) in [(2u32, 1.0), (4, 3.0), (6, 15.0)] {
            let w =
                expectation(&Functional::local_power(x, n), &state, &cache, &ispec).unwrap();
            let expected = m_beta.powu(n / 2) * double_factorial;
            assert!(
                (w.value - expected).norm() < 1e-12,
                "power {n}: {} vs {}",
                w.value,
                expected
            );
        }
        // Odd powers vanish.
        let w3 = expectation(&Functional::local_power(x, 3), &state, &cache, &ispec).unwrap();
        assert_eq!(w3.value, Complex64::new(0.0, 0.0));

        // Product of squares at separated points: m_beta^2 + 2 d^2 from the
        // surviving legs plus the 2 Delta_beta^2 and cross terms already in
        // the star product. Full oracle:
        //   w_beta(phi^2(x) star phi^2(y)) = m_beta^2 + 2 Delta_beta(x-y)^2.
        let y = Event::new(0.9, [0.0, 0.5, -0.2]);
        let rel = x.relative_to(&y);
        let thermal = cache
            .eval(PropagatorKind::Thermal { beta }, rel.t, 0.0, rel.spatial_norm())
            .unwrap();
        let f = Functional::local_power(x, 2).star(&Functional::local_power(y, 2));
        let w = expectation(&f, &state, &cache, &ispec).unwrap();
        let oracle = m_beta * m_beta + 2.0 * thermal * thermal;
        assert!(
            (w.value - oracle).norm() < 1e-12,
            "squares: {} vs oracle {}",
            w.value,
            oracle
        );
    }

    #[test]
    fn thermal_two_point_satisfies_kms_at_full_shift() {
        let (_, cache) = setup();
        let beta = 2.0;
        let state = StateSpec::thermal(beta);
        let ispec = IntegrationSpec::tensor(8, 8);
        let x = Event::new(0.45, [0.3, 0.0, 0.0]);
        let y = Event::new(-0.2, [0.0, 0.1, 0.2]);
        // w(phi(x - i beta) star phi(y)) = w(phi(y) star phi(x)).
        let lhs_f = Functional::field(x).translate(0.0, beta).unwrap().star(&Functional::field(y));
        let rhs_f = Functional::field(y).star(&Functional::field(x));
        let lhs = expectation(&lhs_f, &state, &cache, &ispec).unwrap();
        let rhs = expectation(&rhs_f, &state, &cache, &ispec).unwrap();
        assert!(
            (lhs.value - rhs.value).norm() < 1e-9,
            "KMS residual {}",
            (lhs.value - rhs.value).norm()
        );
    }

    #[test]
    fn thermal_gap_closes_exponentially_in_beta() {
        let (_, cache) = setup();
        let ispec = IntegrationSpec::tensor(8, 8);
        let x = Event::new(0.4, [0.2, 0.0, 0.0]);
        let y = Event::origin();
        let f = Functional::field(x).star(&Functional::field(y));
        let vacuum = expectation(&f, &StateSpec::Vacuum, &cache, &ispec).unwrap().value;
        let mut logs = Vec::new();
        for beta in [2.0, 3.0, 4.0, 5.0] {
            let thermal =
                expectation(&f, &StateSpec::thermal(beta), &cache, &ispec).unwrap().value;
            let gap = (thermal - vacuum).norm();
            assert!(gap > 0.0);
            logs.push((beta, gap.ln()));
        }
        // Successive gaps shrink; log-linear slope at most -0.9 m.
        let slope = (logs[3].1 - logs[0].1) / (logs[3].0 - logs[0].0);
        assert!(slope <= -0.9, "gap decay slope {slope}");
    }

    #[test]
    fn dressed_state_matches_hand_contraction() {
        let (_, cache) = setup();
        let ispec = IntegrationSpec::tensor(8, 8);
        let z = Event::new(0.6, [0.0, 0.0, 0.3]);
        let x = Event::new(-0.2, [0.1, 0.0, 0.0]);
        let dressing = Functional::field(z);
        let state = StateSpec::Dressed { dressing: dressing.clone() };
        // w_B(phi^2(x)) with B = phi(z):
        //   (2 D+(z-x) D+(x-z) + D+(0) m0) / D+(0), with m0 = w(phi^2) = 0
        //   in the vacuum-normal-ordered algebra, so the value is
        //   2 D+(z-x) D+(x-z) / D+(0).
        let rzx = z.relative_to(&x);
        let d_zx = cache.eval(PropagatorKind::WightmanPlus, rzx.t, 0.0, rzx.spatial_norm()).unwrap();
        let d_xz =
            cache.eval(PropagatorKind::WightmanPlus, -rzx.t, 0.0, rzx.spatial_norm()).unwrap();
        let d_0 = cache.eval(PropagatorKind::WightmanPlus, 0.0, 0.0, 0.0).unwrap();
        let w = expectation(&Functional::local_power(x, 2), &state, &cache, &ispec).unwrap();
        let oracle = 2.0 * d_zx * d_xz / d_0;
        assert!((w.value - oracle).norm() < 1e-12, "{} vs {}", w.value, oracle);
    }

    #[test]
    fn connected_correlator_cumulant_structure() {
        let (_, cache) = setup();
        let ispec = IntegrationSpec::tensor(8, 8);
        let a = Functional::local_power(Event::new(0.2, [0.1, 0.0, 0.0]), 2);
        let b = Functional::local_power(Event::new(-0.3, [0.0, 0.2, 0.0]), 2);

        // n = 2: moment minus product of means.
        let conn = connected_correlator(&StateSpec::Vacuum, &[&a, &b], &cache).unwrap();
        let joint = expectation(&a.star(&b), &StateSpec::Vacuum, &cache, &ispec).unwrap().value;
        let ma = expectation(&a, &StateSpec::Vacuum, &cache, &ispec).unwrap().value;
        let mb = expectation(&b, &StateSpec::Vacuum, &cache, &ispec).unwrap().value;
        assert!((conn - (joint - ma * mb)).norm() < 1e-12);

        // Quasi-free states have vanishing higher cumulants of linear
        // fields, both vacuum and thermal.
        let fields: Vec<Functional> = [0.0, 0.4, 0.9, 1.3]
            .iter()
            .enumerate()
            .map(|(i, &t)| Functional::field(Event::new(t, [0.1 * i as f64, 0.0, 0.0])))
            .collect();
        let refs3: Vec<&Functional> = fields.iter().take(3).collect();
        let refs4: Vec<&Functional> = fields.iter().collect();
        for state in [StateSpec::Vacuum, StateSpec::thermal(2.2)] {
            let c3 = connected_correlator(&state, &refs3, &cache).unwrap();
            assert!(c3.norm() < 1e-12, "third cumulant {c3}");
            let c4 = connected_correlator(&state, &refs4, &cache).unwrap();
            assert!(c4.norm() < 1e-12, "fourth cumulant {c4}");
        }

        // Guards: factor count and free vertices.
        let too_many: Vec<&Functional> = std::iter::repeat(&a).take(7).collect();
        assert!(connected_correlator(&StateSpec::Vacuum, &too_many, &cache).is_err());
        let cutoff = CutoffSpec::new(0.5, 1.0, 2.0, 0.5).unwrap();
        let open = Functional::smeared_power(chi_weight(cutoff), 2);
        assert!(connected_correlator(&StateSpec::Vacuum, &[&open], &cache).is_err());
    }

    #[test]
    fn disconnected_vacuum_clusters_are_rejected() {
        let (_, cache) = setup();
        let ispec = IntegrationSpec::tensor(8, 8);
        let cutoff = CutoffSpec::new(0.5, 1.0, 2.0, 0.5).unwrap();
        let v = Functional::smeared_power(chi_weight(cutoff), 2);
        let pinned = Functional::field(Event::origin()).star(&Functional::field(Event::new(
            0.3,
            [0.0, 0.0, 0.1],
        )));
        // (V star V) contains a fully contracted two-vertex bubble; its
        // product with the contracted part of the pinned pair yields a term
        // whose integrated component never touches a pinned vertex.
        let bubble_times_scalar = v.star(&v).star(&pinned);
        let err = expectation(&bubble_times_scalar, &StateSpec::Vacuum, &cache, &ispec);
        assert!(err.is_err(), "expected the anchoring guard to fire");

        // Control: the interacting first-order term is anchored and passes.
        let a = Functional::local_power(Event::origin(), 3);
        let series = bogoliubov(&v, &a, 1).unwrap();
        assert!(expectation_at_order(&series, 1, &StateSpec::Vacuum, &cache, &ispec).is_ok());
    }

    #[test]
    fn cubic_interaction_first_order_tensor_and_mc_agree() {
        // First-order interacting phi^3 expectation: the open integrand is
        // i coupling 6 [DF^3 - D+^3] against chi h, radially reducible.
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.2, 1.6, 0.5).unwrap();
        let interaction = Interaction::new(0.8, 3, cutoff).unwrap();
        let a = Functional::local_power(Event::origin(), 3);
        let series = bogoliubov(&interaction.functional(), &a, 1).unwrap();

        let tensor = expectation_at_order(
            &series,
            1,
            &StateSpec::Vacuum,
            &cache,
            &IntegrationSpec::tensor(24, 24),
        )
        .unwrap();
        let mc = expectation_at_order(
            &series,
            1,
            &StateSpec::Vacuum,
            &cache,
            &IntegrationSpec::monte_carlo(400_000, 137),
        )
        .unwrap();
        assert!(tensor.value.norm() > 1e-4, "signal too small to compare");
        assert!(
            (mc.value - tensor.value).norm() <= 3.0 * mc.std_err,
            "mc {} vs tensor {} (3 sigma = {})",
            mc.value,
            tensor.value,
            3.0 * mc.std_err
        );
    }

    #[test]
    fn quartic_interaction_on_square_observable_vanishes_by_parity() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.0, 1.5, 0.5).unwrap();
        let interaction = Interaction::new(0.5, 4, cutoff).unwrap();
        let a = Functional::local_power(Event::origin(), 2);
        let series = bogoliubov(&interaction.functional(), &a, 1).unwrap();
        let est = expectation_at_order(
            &series,
            1,
            &StateSpec::Vacuum,
            &cache,
            &IntegrationSpec::tensor(12, 12),
        )
        .unwrap();
        // 4 + 2 legs cannot fully pair without a self-edge; exact zero.
        assert_eq!(est.value, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn adiabatic_scan_order_zero_is_constant() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.0, 1.0, 0.4).unwrap();
        let interaction = Interaction::new(0.6, 3, cutoff).unwrap();
        let x = Event::new(0.2, [0.0, 0.0, 0.0]);
        let a = Functional::field(x).star(&Functional::field(Event::origin()));
        let scan = adiabatic_scan(
            &interaction,
            &a,
            0,
            &[2.0, 4.0, 8.0],
            &StateSpec::Vacuum,
            &cache,
            &IntegrationSpec::monte_carlo(1_000, 5),
            0.01,
        )
        .unwrap();
        assert!(scan.converged);
        let first = scan.points[0].value;
        for p in &scan.points {
            assert_eq!(p.value, first);
            assert_eq!(p.std_err, 0.0);
        }
    }

    #[test]
    fn scan_guards_reject_bad_input() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.0, 1.0, 0.4).unwrap();
        let interaction = Interaction::new(0.6, 3, cutoff).unwrap();
        let a = Functional::local_power(Event::origin(), 3);
        let ispec = IntegrationSpec::monte_carlo(100, 1);
        assert!(adiabatic_scan(
            &interaction,
            &a,
            1,
            &[],
            &StateSpec::Vacuum,
            &cache,
            &ispec,
            0.01
        )
        .is_err());
        assert!(adiabatic_scan(
            &interaction,
            &a,
            1,
            &[4.0, 2.0],
            &StateSpec::Vacuum,
            &cache,
            &ispec,
            0.01
        )
        .is_err());
        assert!(kms_scan(&interaction, &a, 0, &[2.0, 2.0], &cache, &ispec, 0.01).is_err());
    }

    #[test]
    fn interacting_kms_reduces_to_free_thermal_at_zero_coupling() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.0, 1.0, 0.4).unwrap();
        let interaction = Interaction::new(0.0, 3, cutoff).unwrap();
        let beta = 2.0;
        let x = Event::new(0.3, [0.0, 0.0, 0.0]);
        let a = Functional::field(x).star(&Functional::field(Event::origin()));
        let ispec = IntegrationSpec::tensor(8, 8);
        let kms =
            interacting_kms(&interaction, &a, beta, 1, 0, 8, &cache, &ispec).unwrap();
        let free = expectation(&a, &StateSpec::thermal(beta), &cache, &ispec).unwrap();
        assert!((kms.value - free.value).norm() < 1e-12);
        assert_eq!(kms.corrections[0].value, Complex64::new(0.0, 0.0));
        assert_eq!(kms.corrections[1].value, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn interacting_kms_direct_term_is_the_thermal_expectation() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.0, 1.0, 0.4).unwrap();
        let interaction = Interaction::new(0.7, 3, cutoff).unwrap();
        let beta = 2.0;
        let a = Functional::local_power(Event::origin(), 3);
        let ispec = IntegrationSpec::tensor(10, 10);
        let k = 1;
        let kms = interacting_kms(&interaction, &a, beta, 1, k, 6, &cache, &ispec).unwrap();
        let series = bogoliubov(&interaction.functional(), &a, k).unwrap();
        let direct =
            expectation_at_order(&series, k, &StateSpec::thermal(beta), &cache, &ispec.reseeded(0x0D1))
                .unwrap();
        assert!((kms.direct.value - direct.value).norm() < 1e-12);
        // With coupling on, the switch-on corrections are generically
        // nonzero and finite.
        let correction_norm =
            kms.corrections[0].value.norm() + kms.corrections[1].value.norm();
        assert!(correction_norm.is_finite());
    }

    #[test]
    fn time_evolution_at_zero_time_is_the_free_expectation() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.0, 1.0, 0.4).unwrap();
        let interaction = Interaction::new(0.9, 3, cutoff).unwrap();
        let x = Event::new(0.2, [0.1, 0.0, 0.0]);
        let a = Functional::field(x).star(&Functional::field(Event::origin()));
        let ispec = IntegrationSpec::tensor(8, 8);
        let evolved = time_evolution_expectation(
            &interaction,
            &a,
            0.0,
            2,
            1,
            &StateSpec::Vacuum,
            &cache,
            &ispec,
            8,
        )
        .unwrap();
        let free = expectation(&a, &StateSpec::Vacuum, &cache, &ispec).unwrap();
        assert!((evolved.value - free.value).norm() < 1e-12);
    }

    #[test]
    fn evolution_matches_cocycle_conjugation_at_first_order() {
        let (_, cache) = setup();
        // Plateau t_plateau = 1.5 covers the evolution time 0.8 so the
        // switch-on identity int_0^t K(-s) ds = -V^-(-t) holds exactly.
        let cutoff = CutoffSpec::new(0.3, 1.5, 1.0, 0.4).unwrap();
        let interaction = Interaction::new(0.8, 2, cutoff).unwrap();
        let t = 0.8;
        let a = Functional::local_power(Event::origin(), 2);
        let ispec = IntegrationSpec::tensor(48, 16);
        let k = 1;
        let evolved = time_evolution_expectation(
            &interaction,
            &a,
            t,
            1,
            k,
            &StateSpec::Vacuum,
            &cache,
            &ispec,
            32,
        )
        .unwrap();

        // Direct conjugation by the cocycle at -t.
        let u = crate::perturbation::cocycle(&interaction, -t, k).unwrap();
        let a_series = FormalSeries::single(0, a.clone(), k);
        let conjugated = u.adjoint().star(&a_series).star(&u);
        let direct =
            expectation_through_order(&conjugated, k, &StateSpec::Vacuum, &cache, &ispec)
                .unwrap();
        let scale = direct.value.norm().max(1e-12);
        assert!(
            (evolved.value - direct.value).norm() <= 1e-3 * scale,
            "evolution {} vs conjugation {}",
            evolved.value,
            direct.value
        );
    }

    #[test]
    fn free_clustering_correlator_decays_with_a_power_law() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.4, 1.0, 1.0, 0.4).unwrap();
        // Zero coupling isolates the free part: D(t) = 2 D+(t)^2 with the
        // known large-time power-law falloff.
        let interaction = Interaction::new(0.0, 3, cutoff).unwrap();
        let a = Functional::local_power(Event::origin(), 2);
        let fit = clustering_fit(
            &interaction,
            &a,
            &a,
            &[10.0, 18.0, 32.0, 56.0, 100.0],
            1,
            0,
            &StateSpec::Vacuum,
            &cache,
            &IntegrationSpec::tensor(8, 8),
            8,
        )
        .unwrap();
        assert!(
            fit.exponent <= -1.3,
            "fitted clustering exponent {} not decaying",
            fit.exponent
        );
        for w in fit.points.windows(2) {
            assert!(w[1].1 < w[0].1, "correlator not monotone: {:?}", fit.points);
        }
    }

    #[test]
    fn domain_overrides_must_cover_the_support() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.5, 1.0, 2.0, 0.5).unwrap();
        let f = Functional::smeared_power(chi_weight(cutoff), 0);
        let mut ispec = IntegrationSpec::monte_carlo(1_000, 3);
        ispec.domain_radius = Some(1.0);
        assert!(expectation(&f, &StateSpec::Vacuum, &cache, &ispec).is_err());

        // A larger domain is unbiased: compare against the un-overridden
        // tensor value.
        let mut grown = IntegrationSpec::monte_carlo(200_000, 3);
        grown.domain_radius = Some(4.0);
        let est = expectation(&f, &StateSpec::Vacuum, &cache, &grown).unwrap();
        let oracle = weight_volume_oracle(&cutoff);
        assert!((est.value.re - oracle).abs() <= 3.0 * est.std_err);
    }

    #[test]
    fn tensor_grid_guards() {
        let (_, cache) = setup();
        let cutoff = CutoffSpec::new(0.5, 1.0, 1.0, 0.5).unwrap();
        // Three free vertices exceed the grid dimension budget.
        let w = chi_weight(cutoff);
        let three = Functional::smeared_power(w, 0)
            .star(&Functional::smeared_power(w, 0))
            .star(&Functional::smeared_power(w, 0));
        let err = expectation(&three, &StateSpec::Vacuum, &cache, &IntegrationSpec::tensor(4, 4));
        assert!(err.is_err());

        // Off-center pinned vertex breaks the radial reduction.
        let v = Functional::smeared_power(w, 3);
        let off = Functional::local_power(Event::new(0.0, [1.0, 0.0, 0.0]), 3);
        let series = bogoliubov(&v, &off, 1).unwrap();
        let err = expectation_at_order(
            &series,
            1,
            &StateSpec::Vacuum,
            &cache,
            &IntegrationSpec::tensor(4, 4),
        );
        assert!(err.is_err());
    }

    #[test]
    fn expectation_order_guards() {
        let (_, cache) = setup();
        let a = Functional::field(Event::origin());
        let series = FormalSeries::single(0, a, 1);
        let ispec = IntegrationSpec::tensor(4, 4);
        assert!(expectation_at_order(&series, 2, &StateSpec::Vacuum, &cache, &ispec).is_err());
        assert!(
            expectation_through_order(&series, 2, &StateSpec::Vacuum, &cache, &ispec).is_err()
        );
        assert!(StateSpec::thermal(-1.0).validate().is_err());
        let open_dressing = StateSpec::Dressed {
            dressing: Functional::smeared_power(
                chi_weight(CutoffSpec::new(0.5, 1.0, 1.0, 0.5).unwrap()),
                1,
            ),
        };
        assert!(open_dressing.validate().is_err());
    }
}
