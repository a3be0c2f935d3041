//! Scenario files: a single JSON document describing model, interaction,
//! observable, state, and integration choices, validated as a whole and
//! dispatched to the state-layer operations. Every run embeds its resolved
//! scenario back into the report, and all randomness flows from the one
//! `seed` field, so outputs are reproducible byte for byte.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::QstError;
use crate::functionals::Functional;
use crate::model::{CutoffSpec, Event, ModelParams};
use crate::perturbation::{bogoliubov, Interaction, MAX_ORDER};
use crate::propagators::{PropagatorCache, QuadratureSpec};
use crate::series::FormalSeries;
use crate::states::{
    adiabatic_scan, expectation_at_order, interacting_kms, kms_scan, time_evolution_expectation,
    IntegralEstimate, IntegrationSpec, KmsExpansion, ScanResult, StateSpec,
};

/// One pinned observable monomial: `weight * phi^power(position)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableAtom {
    pub position: Event,
    pub power: u32,
    #[serde(default = "unit_weight")]
    pub weight: Complex64,
}

fn unit_weight() -> Complex64 {
    Complex64::new(1.0, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConfig {
    pub coupling: f64,
    pub power: u32,
}

/// State selection for scenario runs; dressed states are a library-level
/// construction and deliberately absent from the file format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StateConfig {
    Vacuum,
    Thermal { beta: f64 },
}

impl StateConfig {
    pub fn to_spec(self) -> StateSpec {
        match self {
            StateConfig::Vacuum => StateSpec::Vacuum,
            StateConfig::Thermal { beta } => StateSpec::Thermal { beta },
        }
    }
}

/// Integration backend; the RNG seed is not part of this block, it comes
/// from the scenario's single `seed` field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IntegrationConfig {
    MonteCarlo { samples: u64 },
    TensorGrid { time_nodes: usize, radial_nodes: usize },
}

impl IntegrationConfig {
    fn to_spec(self, seed: u64) -> IntegrationSpec {
        match self {
            IntegrationConfig::MonteCarlo { samples } => IntegrationSpec::monte_carlo(samples, seed),
            IntegrationConfig::TensorGrid { time_nodes, radial_nodes } => {
                IntegrationSpec::tensor(time_nodes, radial_nodes)
            }
        }
    }
}

/// Parameters of a time-evolution run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    pub time: f64,
    pub commutator_order: usize,
    pub time_nodes: usize,
}

/// Parameters of the interacting-KMS expansion (the inverse temperature
/// comes from the thermal state block).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KmsConfig {
    pub truncation: usize,
    pub u_nodes: usize,
}

fn default_tolerance() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelParams,
    pub interaction: InteractionConfig,
    pub cutoffs: CutoffSpec,
    pub observable: Vec<ObservableAtom>,
    /// Perturbative order of interest.
    pub order: usize,
    pub state: StateConfig,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    pub integration: IntegrationConfig,
    /// Scan abscissas: cutoff radii (adiabatic) or inverse temperatures
    /// (KMS scans), strictly increasing.
    #[serde(default)]
    pub scan: Vec<f64>,
    /// Relative convergence tolerance for scan flags.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub evolution: Option<EvolutionConfig>,
    #[serde(default)]
    pub kms: Option<KmsConfig>,
    /// The only randomness source of the whole run.
    pub seed: u64,
}

impl ScenarioConfig {
    /// Re-check every component invariant; deserialization alone bypasses
    /// the constructors.
    pub fn validate(&self) -> Result<(), QstError> {
        ModelParams::new(self.model.mass, self.model.lambda)?;
        CutoffSpec::new(
            self.cutoffs.eps,
            self.cutoffs.t_plateau,
            self.cutoffs.radius,
            self.cutoffs.delta,
        )?;
        self.quadrature.validate()?;
        Interaction::new(self.interaction.coupling, self.interaction.power, self.cutoffs)?;
        if self.order > MAX_ORDER {
            return Err(QstError::Domain(format!(
                "order {} beyond the supported maximum {MAX_ORDER}",
                self.order
            )));
        }
        if self.observable.is_empty() {
            return Err(QstError::Domain("observable needs at least one atom".into()));
        }
        for atom in &self.observable {
            if !(atom.position.t.abs() < self.cutoffs.eps) {
                return Err(QstError::Domain(format!(
                    "observable atom at t = {} violates the slice constraint |t| < eps = {}",
                    atom.position.t, self.cutoffs.eps
                )));
            }
            if atom.position.u != 0.0 {
                return Err(QstError::Domain(
                    "observable atoms must sit at real times (u = 0)".into(),
                ));
            }
            if atom.power == 0 || atom.power > 6 {
                return Err(QstError::Domain(format!(
                    "atom power must lie in 1..=6, got {}",
                    atom.power
                )));
            }
            if !atom.weight.re.is_finite() || !atom.weight.im.is_finite() {
                return Err(QstError::Domain("atom weight must be finite".into()));
            }
        }
        self.state.to_spec().validate()?;
        match self.integration {
            IntegrationConfig::MonteCarlo { samples } => {
                if samples < 2 {
                    return Err(QstError::Domain(format!(
                        "Monte Carlo needs at least 2 samples, got {samples}"
                    )));
                }
            }
            IntegrationConfig::TensorGrid { time_nodes, radial_nodes } => {
                if time_nodes < 2 || radial_nodes < 2 {
                    return Err(QstError::Domain(
                        "tensor grids need at least 2 nodes per axis".into(),
                    ));
                }
            }
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(QstError::Domain(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if !self.scan.is_empty() && !self.scan.windows(2).all(|w| w[0] < w[1]) {
            return Err(QstError::Domain("scan values must be strictly increasing".into()));
        }
        if let Some(evo) = &self.evolution {
            if !(evo.time >= 0.0) || !evo.time.is_finite() {
                return Err(QstError::Domain(format!(
                    "evolution time must be nonnegative, got {}",
                    evo.time
                )));
            }
            if evo.commutator_order > 2 {
                return Err(QstError::Domain(format!(
                    "commutator depth must be at most 2, got {}",
                    evo.commutator_order
                )));
            }
            if evo.time_nodes < 2 {
                return Err(QstError::Domain("evolution needs at least 2 time nodes".into()));
            }
        }
        if let Some(kms) = &self.kms {
            if kms.truncation > 1 {
                return Err(QstError::Domain(format!(
                    "interacting KMS truncation must be 0 or 1, got {}",
                    kms.truncation
                )));
            }
            if kms.u_nodes < 2 {
                return Err(QstError::Domain(
                    "interacting KMS needs at least 2 imaginary-time nodes".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn observable_functional(&self) -> Functional {
        let mut f = Functional::zero();
        for atom in &self.observable {
            f = f.add(&Functional::local_power(atom.position, atom.power).scale(atom.weight));
        }
        f
    }

    pub fn interaction(&self) -> Result<Interaction, QstError> {
        Interaction::new(self.interaction.coupling, self.interaction.power, self.cutoffs)
    }

    pub fn state_spec(&self) -> StateSpec {
        self.state.to_spec()
    }

    pub fn integration_spec(&self) -> IntegrationSpec {
        self.integration.to_spec(self.seed)
    }

    pub fn cache(&self) -> Result<PropagatorCache, QstError> {
        PropagatorCache::new(self.model, self.quadrature)
    }

    /// Interacting observable series `R_V(A)` at the scenario's order.
    pub fn observable_series(&self) -> Result<FormalSeries, QstError> {
        bogoliubov(&self.interaction()?.functional(), &self.observable_functional(), self.order)
    }

    /// A ready-to-run cubic-interaction example: first-order expectation of
    /// a phi^3 atom at the origin.
    pub fn example() -> Self {
        ScenarioConfig {
            model: ModelParams { mass: 1.0, lambda: 0.4 },
            interaction: InteractionConfig { coupling: 0.8, power: 3 },
            cutoffs: CutoffSpec { eps: 0.4, t_plateau: 1.2, radius: 1.6, delta: 0.5 },
            observable: vec![ObservableAtom {
                position: Event::origin(),
                power: 3,
                weight: unit_weight(),
            }],
            order: 1,
            state: StateConfig::Vacuum,
            quadrature: QuadratureSpec::default(),
            integration: IntegrationConfig::TensorGrid { time_nodes: 24, radial_nodes: 24 },
            scan: Vec::new(),
            tolerance: 0.01,
            evolution: None,
            kms: None,
            seed: 20260816,
        }
    }
}

/// What a scenario run should compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Expect,
    AdiabaticScan,
    KmsScan,
    InteractingKms,
    Evolve,
}

impl RunMode {
    pub fn parse(name: &str) -> Result<Self, QstError> {
        match name {
            "expect" => Ok(RunMode::Expect),
            "adiabatic-scan" => Ok(RunMode::AdiabaticScan),
            "kms-scan" => Ok(RunMode::KmsScan),
            "interacting-kms" => Ok(RunMode::InteractingKms),
            "evolve" => Ok(RunMode::Evolve),
            other => Err(QstError::Parse(format!(
                "unknown run mode {other:?}; expected expect, adiabatic-scan, kms-scan, \
                 interacting-kms, or evolve"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Expect => "expect",
            RunMode::AdiabaticScan => "adiabatic-scan",
            RunMode::KmsScan => "kms-scan",
            RunMode::InteractingKms => "interacting-kms",
            RunMode::Evolve => "evolve",
        }
    }
}

/// Structured result of a scenario run.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "result", rename_all = "kebab-case")]
pub enum RunOutput {
    Estimate { order: usize, value: Complex64, std_err: f64, samples: u64 },
    Scan(ScanResult),
    Kms(KmsExpansion),
}

/// Validate and dispatch one scenario run.
pub fn execute(config: &ScenarioConfig, mode: RunMode) -> Result<RunOutput, QstError> {
    config.validate()?;
    let cache = config.cache()?;
    let ispec = config.integration_spec();
    let state = config.state_spec();
    let observable = config.observable_functional();
    let interaction = config.interaction()?;
    match mode {
        RunMode::Expect => {
            let series = config.observable_series()?;
            let est: IntegralEstimate =
                expectation_at_order(&series, config.order, &state, &cache, &ispec)?;
            Ok(RunOutput::Estimate {
                order: config.order,
                value: est.value,
                std_err: est.std_err,
                samples: est.samples,
            })
        }
        RunMode::AdiabaticScan => {
            if config.scan.is_empty() {
                return Err(QstError::Domain(
                    "adiabatic scan needs a nonempty scan list of cutoff radii".into(),
                ));
            }
            let scan = adiabatic_scan(
                &interaction,
                &observable,
                config.order,
                &config.scan,
                &state,
                &cache,
                &ispec,
                config.tolerance,
            )?;
            Ok(RunOutput::Scan(scan))
        }
        RunMode::KmsScan => {
            if config.scan.is_empty() {
                return Err(QstError::Domain(
                    "KMS scan needs a nonempty scan list of inverse temperatures".into(),
                ));
            }
            let scan = kms_scan(
                &interaction,
                &observable,
                config.order,
                &config.scan,
                &cache,
                &ispec,
                config.tolerance,
            )?;
            Ok(RunOutput::Scan(scan))
        }
        RunMode::InteractingKms => {
            let beta = match config.state {
                StateConfig::Thermal { beta } => beta,
                StateConfig::Vacuum => {
                    return Err(QstError::Domain(
                        "interacting KMS runs need a thermal state block".into(),
                    ))
                }
            };
            let kms = config.kms.ok_or_else(|| {
                QstError::Domain("interacting KMS runs need a kms config block".into())
            })?;
            let expansion = interacting_kms(
                &interaction,
                &observable,
                beta,
                kms.truncation,
                config.order,
                kms.u_nodes,
                &cache,
                &ispec,
            )?;
            Ok(RunOutput::Kms(expansion))
        }
        RunMode::Evolve => {
            let evo = config.evolution.ok_or_else(|| {
                QstError::Domain("evolve runs need an evolution config block".into())
            })?;
            let est = time_evolution_expectation(
                &interaction,
                &observable,
                evo.time,
                evo.commutator_order,
                config.order,
                &state,
                &cache,
                &ispec,
                evo.time_nodes,
            )?;
            Ok(RunOutput::Estimate {
                order: config.order,
                value: est.value,
                std_err: est.std_err,
                samples: est.samples,
            })
        }
    }
}
