//! Polynomial field functionals and their deformed products.
//!
//! A [`Functional`] is a finite sum of [`Term`]s. Each term is a complex
//! coefficient times a product of field monomials at vertices, times kernel
//! factors recorded as edges between vertices:
//!
//! * a vertex is either pinned to a fixed spacetime event or integrated
//!   against an adiabatic weight (`chi h`, its switch-on derivative, or the
//!   switch-on tail difference used by cocycles);
//! * an edge `(a, b, kernel, mult)` stands for the kernel raised to `mult`,
//!   evaluated on the separation of vertices `a` and `b`. `Star` edges are
//!   directed (Wightman function from left to right operand); `Tord` and
//!   `TordBar` edges are symmetric.
//!
//! Vertices never carry self-edges: a power-`n` vertex is the pointwise
//! `n`-th power of the field, which in the deformed representation is the
//! normally ordered monomial. Products contract legs across the product
//! boundary only, with exact integer multiplicities: contracting `k_ij` legs
//! between left vertex `i` (power `n_i`) and right vertex `j` (power `m_j`)
//! counts
//!
//! ```text
//! prod_i n_i! / (n_i - k_i)!  *  prod_j m_j! / (m_j - k_j)!  /  prod_ij k_ij!
//! ```
//!
//! leg matchings (`k_i`, `k_j` are row and column sums). For a single pair
//! this is the familiar `C(n,k) C(m,k) k!`.
//!
//! After every algebraic operation, terms are brought to a canonical form
//! (vertices sorted by their attributes, edge lists minimized over
//! permutations of indistinguishable vertices) and merged; merged
//! coefficients whose magnitude is negligible against the total magnitude
//! that flowed into them are dropped, so exact cancellations survive the
//! rounding of paths like `(1/k!) * k!`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::QstError;
use crate::model::{canon_bits, smear_plane_wave, CutoffSpec, Event};
use crate::propagators::{PropagatorCache, PropagatorKind};

/// Temporal profile of an integrated vertex weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeProfile {
    /// The adiabatic cutoff `chi(s)`.
    Chi,
    /// Switch-on derivative `chi'(s) theta(-s)`, integrating to 1.
    ChiDotMinus,
    /// Tail difference `[chi(s) - chi(s - t)] theta(-s)`.
    VMinus { t: f64 },
}

/// Spacetime weight of a free vertex: a temporal profile times the spatial
/// cutoff `h(|x|)` of the same [`CutoffSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub cutoff: CutoffSpec,
    pub time: TimeProfile,
}

impl Weight {
    pub fn value(&self, position: &Event) -> f64 {
        let time = match self.time {
            TimeProfile::Chi => self.cutoff.chi(position.t),
            TimeProfile::ChiDotMinus => self.cutoff.chi_dot_minus(position.t),
            TimeProfile::VMinus { t } => self.cutoff.v_minus_weight(position.t, t),
        };
        time * self.cutoff.h(position.spatial_norm())
    }

    /// Interval outside which the temporal profile vanishes.
    pub fn time_support(&self) -> (f64, f64) {
        match self.time {
            TimeProfile::Chi => self.cutoff.chi_support(),
            TimeProfile::ChiDotMinus => self.cutoff.chi_dot_minus_support(),
            TimeProfile::VMinus { t } => (-2.0 * self.cutoff.eps + t.min(0.0), 0.0),
        }
    }

    /// Radius outside which the spatial profile vanishes.
    pub fn support_radius(&self) -> f64 {
        self.cutoff.h_support_radius()
    }

    fn bits(&self) -> Vec<u64> {
        let mut v = vec![
            self.cutoff.eps.to_bits(),
            self.cutoff.t_plateau.to_bits(),
            self.cutoff.radius.to_bits(),
            self.cutoff.delta.to_bits(),
        ];
        match self.time {
            TimeProfile::Chi => v.push(0),
            TimeProfile::ChiDotMinus => v.push(1),
            TimeProfile::VMinus { t } => {
                v.push(2);
                v.push(canon_bits(t));
            }
        }
        v
    }
}

/// Localization of a vertex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VertexSite {
    /// Pinned to a spacetime event (complex time allowed).
    Fixed(Event),
    /// Integrated against `weight`; the field argument is the integration
    /// point shifted by `shift_t - i shift_u`, while the weight always sees
    /// the unshifted point.
    Free { weight: Weight, shift_t: f64, shift_u: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub site: VertexSite,
    pub power: u32,
}

impl Vertex {
    fn attr_bits(&self) -> Vec<u64> {
        let mut v = Vec::with_capacity(8);
        match &self.site {
            VertexSite::Fixed(e) => {
                v.push(0);
                v.extend_from_slice(&e.bits());
            }
            VertexSite::Free { weight, shift_t, shift_u } => {
                v.push(1);
                v.extend(weight.bits());
                v.push(canon_bits(*shift_t));
                v.push(canon_bits(*shift_u));
            }
        }
        v.push(self.power as u64);
        v
    }
}

/// Which kernel an edge stands for; the binding to numbers happens at
/// evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeKernel {
    /// Wightman function from vertex `a` to vertex `b` (directed).
    Star,
    /// Time-ordered (Feynman) kernel; symmetric.
    Tord,
    /// Conjugate Feynman kernel; symmetric.
    TordBar,
}

impl EdgeKernel {
    fn tag(&self) -> u8 {
        match self {
            EdgeKernel::Star => 0,
            EdgeKernel::Tord => 1,
            EdgeKernel::TordBar => 2,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self, EdgeKernel::Star)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub kernel: EdgeKernel,
    pub mult: u32,
}

/// One summand: `coeff * prod(vertex monomials) * prod(edge kernels)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Term {
    pub coeff: Complex64,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

impl Term {
    pub fn total_power(&self) -> u32 {
        self.vertices.iter().map(|v| v.power).sum()
    }

    pub fn free_vertex_count(&self) -> usize {
        self.vertices.iter().filter(|v| matches!(v.site, VertexSite::Free { .. })).count()
    }

    /// Concrete events of all vertices, shifts applied; `free_positions`
    /// supplies the integration points of free vertices in order.
    pub fn events(&self, free_positions: &[Event]) -> Vec<Event> {
        let mut next = 0;
        let events: Vec<Event> = self
            .vertices
            .iter()
            .map(|v| match &v.site {
                VertexSite::Fixed(e) => *e,
                VertexSite::Free { shift_t, shift_u, .. } => {
                    let p = free_positions[next];
                    next += 1;
                    Event::with_imag(p.t + shift_t, p.u + shift_u, p.x)
                }
            })
            .collect();
        assert_eq!(next, free_positions.len(), "free position count mismatch");
        events
    }

    /// Product of the adiabatic weights of the free vertices at their
    /// (unshifted) integration points.
    pub fn weight_factor(&self, free_positions: &[Event]) -> f64 {
        let mut next = 0;
        let mut w = 1.0;
        for v in &self.vertices {
            if let VertexSite::Free { weight, .. } = &v.site {
                w *= weight.value(&free_positions[next]);
                next += 1;
            }
        }
        w
    }

    /// Product of the vacuum-bound edge kernels on the given vertex events.
    pub fn kernel_factor(
        &self,
        cache: &PropagatorCache,
        events: &[Event],
    ) -> Result<Complex64, QstError> {
        let mut acc = Complex64::new(1.0, 0.0);
        for e in &self.edges {
            let rel = events[e.a].relative_to(&events[e.b]);
            let v = edge_kernel_value(cache, e.kernel, &rel)?;
            acc *= v.powu(e.mult);
        }
        Ok(acc)
    }

    /// True when every connected component of the contraction graph touches
    /// a pinned vertex. Interacting observables built from the scattering
    /// series have this shape: integrated interaction vertices never survive
    /// as a disconnected cluster of their own.
    pub fn components_anchored(&self) -> bool {
        let n = self.vertices.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        let mut seen = vec![false; n];
        let mut queue: Vec<usize> = (0..n)
            .filter(|&i| matches!(self.vertices[i].site, VertexSite::Fixed(_)))
            .collect();
        for &i in &queue {
            seen[i] = true;
        }
        while let Some(i) = queue.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Combine duplicate edges, drop zero-mult edges, drop pinned spectator
    /// vertices (power 0, no edges; their factor is exactly 1).
    fn normalized(mut self) -> Self {
        let mut merged: HashMap<(usize, usize, EdgeKernel), u32> = HashMap::new();
        for e in &self.edges {
            assert_ne!(e.a, e.b, "self-edges are structurally excluded");
            let (a, b) = if e.kernel.is_symmetric() && e.a > e.b { (e.b, e.a) } else { (e.a, e.b) };
            if e.mult > 0 {
                *merged.entry((a, b, e.kernel)).or_insert(0) += e.mult;
            }
        }
        let mut touched = vec![false; self.vertices.len()];
        for &(a, b, _) in merged.keys() {
            touched[a] = true;
            touched[b] = true;
        }
        let keep: Vec<bool> = self
            .vertices
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.power > 0 || touched[i] || matches!(v.site, VertexSite::Free { .. })
            })
            .collect();
        if keep.iter().any(|k| !k) {
            let mut remap = vec![usize::MAX; self.vertices.len()];
            let mut out = Vec::new();
            for (i, v) in self.vertices.iter().enumerate() {
                if keep[i] {
                    remap[i] = out.len();
                    out.push(*v);
                }
            }
            self.vertices = out;
            let mut edges: Vec<Edge> = merged
                .into_iter()
                .map(|((a, b, kernel), mult)| Edge { a: remap[a], b: remap[b], kernel, mult })
                .collect();
            edges.sort_by_key(|e| (e.a, e.b, e.kernel.tag(), e.mult));
            self.edges = edges;
        } else {
            let mut edges: Vec<Edge> = merged
                .into_iter()
                .map(|((a, b, kernel), mult)| Edge { a, b, kernel, mult })
                .collect();
            edges.sort_by_key(|e| (e.a, e.b, e.kernel.tag(), e.mult));
            self.edges = edges;
        }
        self
    }
}

/// Numeric value of one edge kernel on a relative event. `Star` requires the
/// separation to point into the lower half-plane (`rel.u >= 0`); callers
/// orient products so that this holds. `Tord`/`TordBar` require real
/// separations.
pub fn edge_kernel_value(
    cache: &PropagatorCache,
    kernel: EdgeKernel,
    rel: &Event,
) -> Result<Complex64, QstError> {
    let r = rel.spatial_norm();
    match kernel {
        EdgeKernel::Star => {
            if rel.u < -1e-12 {
                return Err(QstError::Domain(format!(
                    "star edge with upward imaginary separation u = {}; orient the product",
                    rel.u
                )));
            }
            cache.eval(PropagatorKind::WightmanPlus, rel.t, rel.u.max(0.0), r)
        }
        EdgeKernel::Tord => {
            require_real_separation(rel)?;
            cache.eval(PropagatorKind::Feynman, rel.t, 0.0, r)
        }
        EdgeKernel::TordBar => {
            require_real_separation(rel)?;
            Ok(cache.eval(PropagatorKind::Feynman, rel.t, 0.0, r)?.conj())
        }
    }
}

fn require_real_separation(rel: &Event) -> Result<(), QstError> {
    if rel.u.abs() > 1e-12 {
        return Err(QstError::Domain(format!(
            "time-ordered edge with imaginary separation u = {}; translate operands jointly",
            rel.u
        )));
    }
    Ok(())
}

/// Field configuration a functional can be evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FieldConfig {
    Zero,
    /// `c e^{i k x}` with the unweighted pairing `k x = k0 t + k_vec . x_vec`;
    /// the localization map damps the amplitude by `e^{-lambda^2 <k>^2 / 2}`.
    PlaneWave { amplitude: Complex64, k: [f64; 4] },
}

impl FieldConfig {
    /// Smeared configuration value at an event with complex time `t - iu`.
    pub fn value(&self, cache: &PropagatorCache, at: &Event) -> Complex64 {
        match self {
            FieldConfig::Zero => Complex64::new(0.0, 0.0),
            FieldConfig::PlaneWave { amplitude, k } => {
                let smeared = smear_plane_wave(cache.params(), *amplitude, k);
                let phase = k[0] * at.t + k[1] * at.x[0] + k[2] * at.x[1] + k[3] * at.x[2];
                smeared * Complex64::new(0.0, phase).exp() * (k[0] * at.u).exp()
            }
        }
    }
}

/// Result of [`Functional::evaluate`]: the closed-form part from terms whose
/// vertices are all pinned, plus the residual terms that still need
/// integration over free vertex positions.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: Complex64,
    pub residual: Option<IntegrandExpression>,
}

/// Terms awaiting integration over their free vertices, with the field
/// configuration their remaining powers will be evaluated on.
#[derive(Debug, Clone, Serialize)]
pub struct IntegrandExpression {
    pub terms: Vec<Term>,
    pub config: FieldConfig,
}

/// A finite sum of terms, kept in canonical merged form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Functional {
    terms: Vec<Term>,
}

impl Functional {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn scalar(c: Complex64) -> Self {
        Self::from_terms(vec![Term { coeff: c, vertices: Vec::new(), edges: Vec::new() }])
    }

    pub fn one() -> Self {
        Self::scalar(Complex64::new(1.0, 0.0))
    }

    /// The field at a fixed event.
    pub fn field(event: Event) -> Self {
        Self::local_power(event, 1)
    }

    /// Pointwise power `phi^n` at a fixed event (`n = 0` is the unit).
    pub fn local_power(event: Event, n: u32) -> Self {
        if n == 0 {
            return Self::one();
        }
        Self::from_terms(vec![Term {
            coeff: Complex64::new(1.0, 0.0),
            vertices: vec![Vertex { site: VertexSite::Fixed(event), power: n }],
            edges: Vec::new(),
        }])
    }

    /// `int w(x) phi^n(x) dx` as a free vertex.
    pub fn smeared_power(weight: Weight, n: u32) -> Self {
        Self::from_terms(vec![Term {
            coeff: Complex64::new(1.0, 0.0),
            vertices: vec![Vertex {
                site: VertexSite::Free { weight, shift_t: 0.0, shift_u: 0.0 },
                power: n,
            }],
            edges: Vec::new(),
        }])
    }

    /// A single product term over the given vertices, no kernel factors.
    pub fn monomial(coeff: Complex64, vertices: Vec<Vertex>) -> Self {
        Self::from_terms(vec![Term { coeff, vertices, edges: Vec::new() }])
    }

    /// Canonicalize and merge an explicit term list.
    pub fn from_terms(terms: Vec<Term>) -> Self {
        Self { terms: merge_terms(terms) }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    /// Largest total field power over terms.
    pub fn degree(&self) -> u32 {
        self.terms.iter().map(Term::total_power).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Self::from_terms(terms)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        if c == Complex64::new(0.0, 0.0) {
            return Self::zero();
        }
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| Term { coeff: t.coeff * c, ..t.clone() })
                .collect(),
        }
    }

    /// Deformed product: Wightman contractions across the product boundary.
    pub fn star(&self, other: &Self) -> Self {
        self.product(other, EdgeKernel::Star)
    }

    /// Time-ordered product: Feynman contractions across the boundary.
    pub fn time_ordered(&self, other: &Self) -> Self {
        self.product(other, EdgeKernel::Tord)
    }

    fn product(&self, other: &Self, kernel: EdgeKernel) -> Self {
        let mut out = Vec::new();
        for left in &self.terms {
            for right in &other.terms {
                cross_contract(left, right, kernel, &mut out);
            }
        }
        Self::from_terms(out)
    }

    /// Star-algebra involution: conjugates coefficients, reverses the
    /// operand order of directed kernels, conjugates time-ordering and the
    /// imaginary parts of vertex times.
    pub fn adjoint(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                coeff: t.coeff.conj(),
                vertices: t
                    .vertices
                    .iter()
                    .map(|v| Vertex {
                        site: match v.site {
                            VertexSite::Fixed(e) => {
                                VertexSite::Fixed(Event::with_imag(e.t, -e.u, e.x))
                            }
                            VertexSite::Free { weight, shift_t, shift_u } => {
                                VertexSite::Free { weight, shift_t, shift_u: -shift_u }
                            }
                        },
                        power: v.power,
                    })
                    .collect(),
                edges: t
                    .edges
                    .iter()
                    .map(|e| match e.kernel {
                        EdgeKernel::Star => Edge { a: e.b, b: e.a, ..*e },
                        EdgeKernel::Tord => Edge { kernel: EdgeKernel::TordBar, ..*e },
                        EdgeKernel::TordBar => Edge { kernel: EdgeKernel::Tord, ..*e },
                    })
                    .collect(),
            })
            .collect();
        Self::from_terms(terms)
    }

    /// Shift every field argument by `t0 - i u0`; integrated weights stay
    /// put, so this is the algebra automorphism of time translation.
    /// Imaginary shifts go into the lower half-plane only (`u0 >= 0`), the
    /// side on which Wightman contractions damp.
    pub fn translate(&self, t0: f64, u0: f64) -> Result<Self, QstError> {
        if !(t0.is_finite() && u0.is_finite()) {
            return Err(QstError::domain("translation offsets must be finite"));
        }
        if u0 < 0.0 {
            return Err(QstError::domain(format!(
                "imaginary translation u = {u0} points into the upper half-plane"
            )));
        }
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                coeff: t.coeff,
                vertices: t
                    .vertices
                    .iter()
                    .map(|v| Vertex {
                        site: match v.site {
                            VertexSite::Fixed(e) => VertexSite::Fixed(Event::with_imag(
                                e.t + t0,
                                e.u + u0,
                                e.x,
                            )),
                            VertexSite::Free { weight, shift_t, shift_u } => VertexSite::Free {
                                weight,
                                shift_t: shift_t + t0,
                                shift_u: shift_u + u0,
                            },
                        },
                        power: v.power,
                    })
                    .collect(),
                edges: t.edges.clone(),
            })
            .collect();
        Ok(Self::from_terms(terms))
    }

    /// Evaluate on a field configuration. Terms whose vertices are all
    /// pinned contribute to `value`; terms with free vertices are returned
    /// for integration. With the zero configuration, any term with surviving
    /// field powers drops.
    pub fn evaluate(
        &self,
        config: &FieldConfig,
        cache: &PropagatorCache,
    ) -> Result<Evaluation, QstError> {
        let mut value = Complex64::new(0.0, 0.0);
        let mut residual = Vec::new();
        for term in &self.terms {
            let powered = term.total_power() > 0;
            if matches!(config, FieldConfig::Zero) && powered {
                continue;
            }
            if term.free_vertex_count() > 0 {
                residual.push(term.clone());
                continue;
            }
            let events = term.events(&[]);
            let mut v = term.coeff * term.kernel_factor(cache, &events)?;
            for (vertex, event) in term.vertices.iter().zip(&events) {
                if vertex.power > 0 {
                    v *= config.value(cache, event).powu(vertex.power);
                }
            }
            value += v;
        }
        let residual = if residual.is_empty() {
            None
        } else {
            Some(IntegrandExpression { terms: residual, config: *config })
        };
        Ok(Evaluation { value, residual })
    }

    /// Largest coefficient magnitude; 0 for the zero functional.
    pub fn max_coeff_norm(&self) -> f64 {
        self.terms.iter().map(|t| t.coeff.norm()).fold(0.0, f64::max)
    }

    /// Rewrite every conjugate-Feynman edge through the pointwise kernel
    /// identity `conj DF(x-y) = D+(x-y) + D+(y-x) - DF(x-y)`, leaving only
    /// Wightman and Feynman edges. Coefficient-exact, so adjoint-built series
    /// become directly comparable with recursively built inverses.
    pub fn eliminate_tordbar(&self) -> Self {
        let mut out = Vec::new();
        for term in &self.terms {
            expand_tordbar(term, &mut out);
        }
        Self::from_terms(out)
    }

    /// Normal form modulo the support identity: the advanced and retarded
    /// parts of the Feynman kernel never overlap, so on real separations
    /// `(D+(x-y) - DF)(D+(y-x) - DF) = 0`, equivalently `S_ab S_ba =
    /// T (S_ab + S_ba - T)` per vertex pair. Rewriting until each pair keeps
    /// at most one Wightman orientation yields a unique normal form in which
    /// identities that hinge on time-ordering supports hold coefficient by
    /// coefficient.
    pub fn support_reduced(&self) -> Self {
        let mut out = Vec::new();
        for term in &self.terms {
            reduce_orientations(term, &mut out);
        }
        Self::from_terms(out)
    }
}

fn reduce_orientations(term: &Term, out: &mut Vec<Term>) {
    let double = term.edges.iter().enumerate().find_map(|(ia, e)| {
        if e.kernel != EdgeKernel::Star {
            return None;
        }
        term.edges
            .iter()
            .position(|f| f.kernel == EdgeKernel::Star && f.a == e.b && f.b == e.a)
            .map(|ib| (ia, ib))
    });
    let Some((ia, ib)) = double else {
        out.push(term.clone());
        return;
    };
    let (a, b) = (term.edges[ia].a, term.edges[ia].b);
    let drop_one = |idx: usize, edges: &[Edge]| -> Vec<Edge> {
        let mut next = edges.to_vec();
        if next[idx].mult > 1 {
            next[idx].mult -= 1;
        } else {
            next.remove(idx);
        }
        next
    };
    // S_ab S_ba -> T S_ab + T S_ba - T^2, one unit at a time
    let mut variants: Vec<(f64, Vec<Edge>)> = Vec::new();
    let mut with_t = drop_one(ib, &term.edges);
    with_t.push(Edge { a, b, kernel: EdgeKernel::Tord, mult: 1 });
    variants.push((1.0, with_t));
    let mut with_t = drop_one(ia, &term.edges);
    with_t.push(Edge { a, b, kernel: EdgeKernel::Tord, mult: 1 });
    variants.push((1.0, with_t));
    let mut both_t = drop_one(ia.max(ib), &term.edges);
    both_t = drop_one(ia.min(ib), &both_t);
    both_t.push(Edge { a, b, kernel: EdgeKernel::Tord, mult: 2 });
    variants.push((-1.0, both_t));
    for (sign, edges) in variants {
        let next = Term { coeff: term.coeff * sign, vertices: term.vertices.clone(), edges };
        reduce_orientations(&next, out);
    }
}

fn expand_tordbar(term: &Term, out: &mut Vec<Term>) {
    let Some(pos) = term.edges.iter().position(|e| e.kernel == EdgeKernel::TordBar) else {
        out.push(term.clone());
        return;
    };
    let edge = term.edges[pos];
    let mut rest = term.edges.clone();
    rest.remove(pos);
    let k = edge.mult;
    for i in 0..=k {
        for j in 0..=(k - i) {
            let l = k - i - j;
            let ways = (factorial(k) / (factorial(i) * factorial(j) * factorial(l))) as f64;
            let sign = if l % 2 == 1 { -1.0 } else { 1.0 };
            let mut edges = rest.clone();
            if i > 0 {
                edges.push(Edge { a: edge.a, b: edge.b, kernel: EdgeKernel::Star, mult: i });
            }
            if j > 0 {
                edges.push(Edge { a: edge.b, b: edge.a, kernel: EdgeKernel::Star, mult: j });
            }
            if l > 0 {
                edges.push(Edge { a: edge.a, b: edge.b, kernel: EdgeKernel::Tord, mult: l });
            }
            let next = Term {
                coeff: term.coeff * (sign * ways),
                vertices: term.vertices.clone(),
                edges,
            };
            expand_tordbar(&next, out);
        }
    }
}

/// All cross-contractions of two terms under the given kernel, appended to
/// `out`.
fn cross_contract(left: &Term, right: &Term, kernel: EdgeKernel, out: &mut Vec<Term>) {
    let offset = left.vertices.len();
    let l_idx: Vec<usize> =
        (0..left.vertices.len()).filter(|&i| left.vertices[i].power > 0).collect();
    let r_idx: Vec<usize> =
        (0..right.vertices.len()).filter(|&j| right.vertices[j].power > 0).collect();
    let pairs: Vec<(usize, usize)> =
        l_idx.iter().flat_map(|&i| r_idx.iter().map(move |&j| (i, j))).collect();

    let base_coeff = left.coeff * right.coeff;
    let mut l_rem: Vec<u32> = left.vertices.iter().map(|v| v.power).collect();
    let mut r_rem: Vec<u32> = right.vertices.iter().map(|v| v.power).collect();
    let mut picks: Vec<(usize, usize, u32)> = Vec::new();

    fn emit(
        left: &Term,
        right: &Term,
        kernel: EdgeKernel,
        offset: usize,
        base_coeff: Complex64,
        l_rem: &[u32],
        r_rem: &[u32],
        picks: &[(usize, usize, u32)],
        out: &mut Vec<Term>,
    ) {
        // matching count: falling factorials per vertex over k-factorials per pair
        let mut ways: u128 = 1;
        for (idx, rem) in l_rem.iter().enumerate() {
            ways *= falling(left.vertices[idx].power, left.vertices[idx].power - rem);
        }
        for (idx, rem) in r_rem.iter().enumerate() {
            ways *= falling(right.vertices[idx].power, right.vertices[idx].power - rem);
        }
        for &(_, _, k) in picks {
            ways /= factorial(k);
        }
        let mut vertices: Vec<Vertex> = Vec::with_capacity(left.vertices.len() + right.vertices.len());
        for (idx, v) in left.vertices.iter().enumerate() {
            vertices.push(Vertex { site: v.site, power: l_rem[idx] });
        }
        for (idx, v) in right.vertices.iter().enumerate() {
            vertices.push(Vertex { site: v.site, power: r_rem[idx] });
        }
        let mut edges: Vec<Edge> = left.edges.clone();
        edges.extend(right.edges.iter().map(|e| Edge { a: e.a + offset, b: e.b + offset, ..*e }));
        edges.extend(
            picks.iter().map(|&(i, j, k)| Edge { a: i, b: offset + j, kernel, mult: k }),
        );
        out.push(
            Term { coeff: base_coeff * ways as f64, vertices, edges }.normalized(),
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        pair_pos: usize,
        pairs: &[(usize, usize)],
        left: &Term,
        right: &Term,
        kernel: EdgeKernel,
        offset: usize,
        base_coeff: Complex64,
        l_rem: &mut Vec<u32>,
        r_rem: &mut Vec<u32>,
        picks: &mut Vec<(usize, usize, u32)>,
        out: &mut Vec<Term>,
    ) {
        if pair_pos == pairs.len() {
            emit(left, right, kernel, offset, base_coeff, l_rem, r_rem, picks, out);
            return;
        }
        let (i, j) = pairs[pair_pos];
        let max_k = l_rem[i].min(r_rem[j]);
        for k in 0..=max_k {
            if k > 0 {
                l_rem[i] -= 1;
                r_rem[j] -= 1;
                if let Some(last) = picks.last_mut().filter(|p| p.0 == i && p.1 == j) {
                    last.2 += 1;
                } else {
                    picks.push((i, j, 1));
                }
            }
            recurse(
                pair_pos + 1,
                pairs,
                left,
                right,
                kernel,
                offset,
                base_coeff,
                l_rem,
                r_rem,
                picks,
                out,
            );
        }
        // restore budgets consumed by the deepest k of this pair
        if max_k > 0 {
            if let Some(last) = picks.last() {
                if last.0 == i && last.1 == j {
                    l_rem[i] += picks.last().unwrap().2;
                    r_rem[j] += picks.last().unwrap().2;
                    picks.pop();
                }
            }
        }
    }

    recurse(
        0,
        &pairs,
        left,
        right,
        kernel,
        offset,
        base_coeff,
        &mut l_rem,
        &mut r_rem,
        &mut picks,
        out,
    );
}

fn factorial(n: u32) -> u128 {
    (1..=n as u128).product()
}

/// `n! / (n - k)!`
fn falling(n: u32, k: u32) -> u128 {
    ((n - k + 1) as u128..=n as u128).product()
}

/// Relative magnitude below which a merged coefficient counts as an exact
/// cancellation.
const CANCEL_EPS: f64 = 1e-12;

/// Permutation budget for canonicalization; terms beyond it are merged by
/// their as-built form only.
const PERM_BUDGET: u128 = 40_320;

fn merge_terms(terms: Vec<Term>) -> Vec<Term> {
    let mut acc: HashMap<Vec<u64>, (Complex64, f64, Term)> = HashMap::new();
    for term in terms {
        if term.coeff == Complex64::new(0.0, 0.0) {
            continue;
        }
        let (key, canonical) = canonical_form(term.normalized());
        match acc.entry(key) {
            std::collections::hash_map::Entry::Occupied(mut o) => {
                let slot = o.get_mut();
                slot.0 += canonical.coeff;
                slot.1 += canonical.coeff.norm();
            }
            std::collections::hash_map::Entry::Vacant(v) => {
                let norm = canonical.coeff.norm();
                v.insert((canonical.coeff, norm, canonical));
            }
        }
    }
    let mut out: Vec<(Vec<u64>, Term)> = acc
        .into_iter()
        .filter_map(|(key, (coeff, abs, mut term))| {
            if coeff.norm() <= CANCEL_EPS * abs {
                None
            } else {
                term.coeff = coeff;
                Some((key, term))
            }
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out.into_iter().map(|(_, t)| t).collect()
}

/// Sort vertices by attributes, then minimize the edge list over
/// permutations of indistinguishable vertices. Returns the hash key and the
/// relabeled term.
fn canonical_form(term: Term) -> (Vec<u64>, Term) {
    let attrs: Vec<Vec<u64>> = term.vertices.iter().map(Vertex::attr_bits).collect();
    let mut order: Vec<usize> = (0..term.vertices.len()).collect();
    order.sort_by(|&a, &b| attrs[a].cmp(&attrs[b]));
    let mut pos = vec![0usize; order.len()];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    let vertices: Vec<Vertex> = order.iter().map(|&i| term.vertices[i]).collect();
    let base_edges: Vec<Edge> =
        term.edges.iter().map(|e| Edge { a: pos[e.a], b: pos[e.b], ..*e }).collect();

    // runs of equal attributes are interchangeable
    let sorted_attrs: Vec<&Vec<u64>> = order.iter().map(|&i| &attrs[i]).collect();
    let mut classes: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=vertices.len() {
        if i == vertices.len() || sorted_attrs[i] != sorted_attrs[start] {
            classes.push((start, i));
            start = i;
        }
    }
    let perm_count: u128 =
        classes.iter().map(|&(s, e)| factorial((e - s) as u32)).product();

    let canonical_edges = if perm_count <= PERM_BUDGET && !base_edges.is_empty() {
        let mut best: Option<Vec<(usize, usize, u8, u32)>> = None;
        let mut perm: Vec<usize> = (0..vertices.len()).collect();
        permute_classes(&classes, 0, &mut perm, &mut |p| {
            let mut tuples: Vec<(usize, usize, u8, u32)> = base_edges
                .iter()
                .map(|e| {
                    let (a, b) = (p[e.a], p[e.b]);
                    let (a, b) =
                        if e.kernel.is_symmetric() && a > b { (b, a) } else { (a, b) };
                    (a, b, e.kernel.tag(), e.mult)
                })
                .collect();
            tuples.sort_unstable();
            if best.as_ref().map_or(true, |b| tuples < *b) {
                best = Some(tuples);
            }
        });
        best.unwrap()
    } else {
        let mut tuples: Vec<(usize, usize, u8, u32)> = base_edges
            .iter()
            .map(|e| {
                let (a, b) = if e.kernel.is_symmetric() && e.a > e.b {
                    (e.b, e.a)
                } else {
                    (e.a, e.b)
                };
                (a, b, e.kernel.tag(), e.mult)
            })
            .collect();
        tuples.sort_unstable();
        tuples
    };

    let mut key: Vec<u64> = Vec::new();
    key.push(vertices.len() as u64);
    for v in &vertices {
        let bits = v.attr_bits();
        key.push(bits.len() as u64);
        key.extend(bits);
    }
    for &(a, b, tag, mult) in &canonical_edges {
        key.push(a as u64);
        key.push(b as u64);
        key.push(tag as u64);
        key.push(mult as u64);
    }

    let edges: Vec<Edge> = canonical_edges
        .iter()
        .map(|&(a, b, tag, mult)| Edge {
            a,
            b,
            kernel: match tag {
                0 => EdgeKernel::Star,
                1 => EdgeKernel::Tord,
                _ => EdgeKernel::TordBar,
            },
            mult,
        })
        .collect();
    (key, Term { coeff: term.coeff, vertices, edges })
}

/// Visit all products of within-class permutations. `perm` maps
/// post-canonical-sort positions to final positions.
fn permute_classes(
    classes: &[(usize, usize)],
    class_idx: usize,
    perm: &mut Vec<usize>,
    visit: &mut dyn FnMut(&[usize]),
) {
    if class_idx == classes.len() {
        visit(perm);
        return;
    }
    let (s, e) = classes[class_idx];
    fn heap(
        k: usize,
        s: usize,
        perm: &mut Vec<usize>,
        classes: &[(usize, usize)],
        class_idx: usize,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if k <= 1 {
            permute_classes(classes, class_idx + 1, perm, visit);
            return;
        }
        for i in 0..k {
            heap(k - 1, s, perm, classes, class_idx, visit);
            if k % 2 == 0 {
                perm.swap(s + i, s + k - 1);
            } else {
                perm.swap(s, s + k - 1);
            }
        }
    }
    heap(e - s, s, perm, classes, class_idx, visit);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::propagators::QuadratureSpec;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn cache() -> PropagatorCache {
        PropagatorCache::new(ModelParams::new(1.0, 0.5).unwrap(), QuadratureSpec::default())
            .unwrap()
    }

    fn ev(t: f64, x: f64) -> Event {
        Event::new(t, [x, 0.0, 0.0])
    }

    fn coeff_of(f: &Functional, pred: impl Fn(&Term) -> bool) -> Complex64 {
        f.terms()
            .iter()
            .filter(|t| pred(t))
            .map(|t| t.coeff)
            .fold(Complex64::new(0.0, 0.0), |a, b| a + b)
    }

    #[test]
    fn phi2_star_phi2_contraction_weights() {
        let a = Functional::local_power(ev(0.0, 0.0), 2);
        let b = Functional::local_power(ev(1.0, 0.5), 2);
        let p = a.star(&b);
        assert_eq!(p.term_count(), 3);
        for (k, want) in [(0u32, 1.0), (1, 4.0), (2, 2.0)] {
            let c = coeff_of(&p, |t| {
                t.edges.iter().map(|e| e.mult).sum::<u32>() == k
                    && t.total_power() == 4 - 2 * k
            });
            assert_eq!(c, Complex64::new(want, 0.0), "weight at k={k}");
        }
    }

    /// Independent brute-force oracle: enumerate every matching of left legs
    /// to right legs explicitly and count matchings per contraction pattern.
    fn brute_force_counts(
        left_powers: &[u32],
        right_powers: &[u32],
    ) -> BTreeMap<Vec<u32>, u128> {
        let mut left_legs = Vec::new();
        for (i, &p) in left_powers.iter().enumerate() {
            for _ in 0..p {
                left_legs.push(i);
            }
        }
        let mut right_legs = Vec::new();
        for (j, &p) in right_powers.iter().enumerate() {
            for _ in 0..p {
                right_legs.push(j);
            }
        }
        let mut counts = BTreeMap::new();
        let mut used = vec![false; right_legs.len()];
        // pattern flattened as a row-major k-matrix
        fn go(
            pos: usize,
            left_legs: &[usize],
            right_legs: &[usize],
            used: &mut Vec<bool>,
            pattern: &mut Vec<u32>,
            cols: usize,
            counts: &mut BTreeMap<Vec<u32>, u128>,
        ) {
            if pos == left_legs.len() {
                *counts.entry(pattern.clone()).or_insert(0) += 1;
                return;
            }
            // leave this leg unmatched
            go(pos + 1, left_legs, right_legs, used, pattern, cols, counts);
            for r in 0..right_legs.len() {
                if !used[r] {
                    used[r] = true;
                    pattern[left_legs[pos] * cols + right_legs[r]] += 1;
                    go(pos + 1, left_legs, right_legs, used, pattern, cols, counts);
                    pattern[left_legs[pos] * cols + right_legs[r]] -= 1;
                    used[r] = false;
                }
            }
        }
        let cols = right_powers.len();
        let mut pattern = vec![0u32; left_powers.len() * cols];
        go(0, &left_legs, &right_legs, &mut used, &mut pattern, cols, &mut counts);
        counts
    }

    #[test]
    fn star_matches_brute_force_leg_matching() {
        // phi^3(x) phi(y) against phi^2(z): multi-vertex left side
        let left_powers = [3u32, 1];
        let right_powers = [2u32];
        let a = Functional::monomial(
            Complex64::new(1.0, 0.0),
            vec![
                Vertex { site: VertexSite::Fixed(ev(0.0, 0.0)), power: 3 },
                Vertex { site: VertexSite::Fixed(ev(0.5, 1.0)), power: 1 },
            ],
        );
        let b = Functional::local_power(ev(1.0, 2.0), 2);
        let p = a.star(&b);
        let oracle = brute_force_counts(&left_powers, &right_powers);
        for (pattern, count) in oracle {
            // pattern[i] = contractions between left vertex i and the right vertex
            let got = coeff_of(&p, |t| {
                let mut k = [0u32; 2];
                for e in &t.edges {
                    assert!(e.a < 2 && e.b == 2);
                    k[e.a] += e.mult;
                }
                k[0] == pattern[0] && k[1] == pattern[1]
            });
            assert_eq!(
                got,
                Complex64::new(count as f64, 0.0),
                "pattern {pattern:?}"
            );
        }
    }

    #[test]
    fn star_is_associative_on_wick_powers() {
        let a = Functional::local_power(ev(0.0, 0.0), 2);
        let b = Functional::local_power(ev(0.7, 0.4), 2);
        let c = Functional::local_power(ev(-0.3, 1.1), 3);
        let lhs = a.star(&b).star(&c);
        let rhs = a.star(&b.star(&c));
        assert!(lhs.sub(&rhs).is_zero(), "associativity failed");
        let lhs_t = a.time_ordered(&b).time_ordered(&c);
        let rhs_t = a.time_ordered(&b.time_ordered(&c));
        assert!(lhs_t.sub(&rhs_t).is_zero(), "time-ordered associativity failed");
    }

    #[test]
    fn time_ordered_product_is_commutative() {
        let a = Functional::local_power(ev(0.0, 0.0), 3);
        let b = Functional::local_power(ev(0.7, 0.4), 2);
        assert!(a.time_ordered(&b).sub(&b.time_ordered(&a)).is_zero());
    }

    #[test]
    fn adjoint_reverses_star_products() {
        let a = Functional::local_power(ev(0.0, 0.0), 2).scale(Complex64::new(0.0, 1.0));
        let b = Functional::field(ev(0.7, 0.4));
        let lhs = a.star(&b).adjoint();
        let rhs = b.adjoint().star(&a.adjoint());
        assert!(lhs.sub(&rhs).is_zero());
        // involutive
        assert!(a.adjoint().adjoint().sub(&a).is_zero());
    }

    #[test]
    fn translation_is_multiplicative() {
        let a = Functional::local_power(ev(0.0, 0.0), 2);
        let b = Functional::local_power(ev(0.7, 0.4), 2);
        let lhs = a.star(&b).translate(0.3, 0.1).unwrap();
        let rhs = a.translate(0.3, 0.1).unwrap().star(&b.translate(0.3, 0.1).unwrap());
        assert!(lhs.sub(&rhs).is_zero());
    }

    #[test]
    fn field_commutator_is_commutator_kernel() {
        let cache = cache();
        let x = ev(0.4, 0.3);
        let y = ev(0.0, 0.0);
        let a = Functional::field(x);
        let b = Functional::field(y);
        let comm = a.star(&b).sub(&b.star(&a));
        let got = comm.evaluate(&FieldConfig::Zero, &cache).unwrap();
        assert!(got.residual.is_none());
        let rel = x.relative_to(&y);
        let pj = cache
            .eval(PropagatorKind::PauliJordan, rel.t, 0.0, rel.spatial_norm())
            .unwrap();
        let want = Complex64::new(0.0, -1.0) * pj;
        assert!((got.value - want).norm() < 1e-12, "{} vs {want}", got.value);
    }

    #[test]
    fn evaluate_zero_keeps_fully_contracted_terms_only() {
        let cache = cache();
        let x = ev(0.3, 0.0);
        let y = ev(0.0, 0.4);
        let p = Functional::field(x).star(&Functional::field(y));
        let got = p.evaluate(&FieldConfig::Zero, &cache).unwrap();
        let rel = x.relative_to(&y);
        let want = cache
            .eval(PropagatorKind::WightmanPlus, rel.t, 0.0, rel.spatial_norm())
            .unwrap();
        assert!((got.value - want).norm() < 1e-14);
        assert!(got.residual.is_none());
    }

    #[test]
    fn evaluate_defers_free_vertices() {
        let cache = cache();
        let w = Weight {
            cutoff: CutoffSpec::new(0.5, 2.0, 3.0, 1.0).unwrap(),
            time: TimeProfile::Chi,
        };
        let v = Functional::smeared_power(w, 2);
        let got = v.evaluate(&FieldConfig::Zero, &cache).unwrap();
        // surviving powers die on the zero configuration
        assert_eq!(got.value, Complex64::new(0.0, 0.0));
        assert!(got.residual.is_none());
        // but a fully contracted free-vertex term must be deferred
        let vv = v.star(&v);
        let got = vv.evaluate(&FieldConfig::Zero, &cache).unwrap();
        let residual = got.residual.expect("integral terms expected");
        assert!(residual.terms.iter().all(|t| t.total_power() == 0));
        assert_eq!(residual.terms.len(), 1);
        assert_eq!(residual.terms[0].edges[0].mult, 2);
    }

    #[test]
    fn plane_wave_evaluation_applies_smearing() {
        let cache = cache();
        let x = ev(0.3, 0.7);
        let k = [0.4, -0.2, 0.1, 0.0];
        let amp = Complex64::new(0.8, 0.1);
        let config = FieldConfig::PlaneWave { amplitude: amp, k };
        let f = Functional::field(x);
        let got = f.evaluate(&config, &cache).unwrap().value;
        let smeared = smear_plane_wave(cache.params(), amp, &k);
        let phase = k[0] * x.t + k[1] * x.x[0];
        let want = smeared * Complex64::new(0.0, phase).exp();
        assert!((got - want).norm() < 1e-14);
        let sq = Functional::local_power(x, 2);
        let got_sq = sq.evaluate(&config, &cache).unwrap().value;
        assert!((got_sq - want * want).norm() < 1e-14);
    }

    #[test]
    fn exact_cancellations_survive_rounded_coefficient_paths() {
        let a = Functional::local_power(ev(0.0, 0.0), 3);
        let b = Functional::local_power(ev(0.7, 0.4), 3);
        let third = Complex64::new(1.0 / 3.0, 0.0);
        let p1 = a.scale(third).star(&b).scale(Complex64::new(3.0, 0.0));
        let p2 = a.star(&b);
        assert!(p1.sub(&p2).is_zero(), "rounding ghost terms survived");
    }

    #[test]
    fn canonical_merge_identifies_isomorphic_graphs() {
        // phi(x) * phi(y) built in both orders with a symmetric kernel
        let a = Functional::field(ev(0.0, 0.0));
        let b = Functional::field(ev(1.0, 0.0));
        let ab = a.time_ordered(&b);
        let ba = b.time_ordered(&a);
        assert!(ab.sub(&ba).is_zero());
        assert_eq!(ab.term_count(), 2);
    }

    #[test]
    fn functional_serializes_to_json_and_back() {
        let w = Weight {
            cutoff: CutoffSpec::new(0.5, 2.0, 3.0, 1.0).unwrap(),
            time: TimeProfile::VMinus { t: 0.4 },
        };
        let f = Functional::smeared_power(w, 3).star(&Functional::field(ev(0.2, 0.1)));
        let json = serde_json::to_string(&f).unwrap();
        let back: Functional = serde_json::from_str(&json).unwrap();
        assert!(f.sub(&back).is_zero());
    }

    #[test]
    fn tordbar_elimination_is_pointwise_exact() {
        let cache = cache();
        let a = Functional::local_power(ev(0.0, 0.0), 2);
        let b = Functional::local_power(ev(0.8, 0.6), 2);
        let conj_t = a.time_ordered(&b).adjoint();
        let rewritten = conj_t.eliminate_tordbar();
        assert!(rewritten
            .terms()
            .iter()
            .all(|t| t.edges.iter().all(|e| e.kernel != EdgeKernel::TordBar)));
        let config = FieldConfig::PlaneWave { amplitude: Complex64::new(0.9, 0.2), k: [0.3, 0.1, -0.4, 0.2] };
        let lhs = conj_t.evaluate(&config, &cache).unwrap().value;
        let rhs = rewritten.evaluate(&config, &cache).unwrap().value;
        assert!((lhs - rhs).norm() <= 1e-12 * lhs.norm().max(1.0), "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn anchoring_detects_disconnected_interaction_clusters() {
        let w = Weight {
            cutoff: CutoffSpec::new(0.5, 2.0, 3.0, 1.0).unwrap(),
            time: TimeProfile::Chi,
        };
        let v = Functional::smeared_power(w, 2);
        let a = Functional::field(ev(0.1, 0.0));
        // (V * A): the k=1 cross contraction ties V's vertex to A's
        let tied = v.star(&a);
        for t in tied.terms() {
            let has_edge = !t.edges.is_empty();
            assert_eq!(t.components_anchored(), has_edge, "term {t:?}");
        }
        // a fully self-contracted interaction bubble times A is unanchored
        let bubble = v.star(&v);
        let product = bubble.star(&a);
        assert!(product.terms().iter().any(|t| {
            t.free_vertex_count() == 2 && t.total_power() == 1 && !t.components_anchored()
        }));
        // scalars are vacuously anchored
        assert!(Functional::one().terms().iter().all(Term::components_anchored));
    }

    #[test]
    fn upward_imaginary_translation_is_rejected() {
        let f = Functional::field(ev(0.0, 0.0));
        assert!(f.translate(0.5, 0.25).is_ok());
        assert!(matches!(f.translate(0.0, -0.1), Err(QstError::Domain(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Structural invariants of products: no self-edges, new edges cross
        /// the former product boundary, and powers balance leg counts.
        #[test]
        fn products_contract_across_the_boundary_only(
            na in 1u32..4,
            nb in 1u32..4,
            tb in -1.0f64..1.0,
        ) {
            let a = Functional::local_power(ev(0.0, 0.0), na);
            let b = Functional::local_power(ev(tb, 0.9), nb);
            let p = a.star(&b);
            let mut total = Complex64::new(0.0, 0.0);
            for t in p.terms() {
                for e in &t.edges {
                    prop_assert!(e.a != e.b);
                }
                let contracted: u32 = t.edges.iter().map(|e| 2 * e.mult).sum();
                prop_assert_eq!(t.total_power() + contracted, na + nb);
                total += t.coeff;
            }
            // sum over k of C(na,k) C(nb,k) k! = falling(na,k) falling(nb,k) / k!
            let mut want = 0.0;
            for k in 0..=na.min(nb) {
                want += (falling(na, k) * falling(nb, k) / factorial(k)) as f64;
            }
            prop_assert!((total.re - want).abs() < 1e-9 && total.im.abs() < 1e-12);
        }
    }
}
