//! Experiment configuration: one TOML file with flat `model`, `flow`, `solver` and
//! `experiment` sections. Every field has a default, so an empty file is valid.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use grassq::fbsde::{Integrator, SolverConfig};
use grassq::flow::{FlowConfig, NormParams};
use grassq::lattice::{Cutoffs, Geometry, LatticeSchedule};
use grassq::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable that overrides `output_dir` from the file.
pub const OUTPUT_DIR_VAR: &str = "GRASSQ_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Verify,
    Flow,
    Quantise,
    Decay,
    Kernels,
    Refine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Model,
    pub flow: FlowSection,
    pub solver: SolverSection,
    pub experiment: ExperimentSection,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: Model::default(),
            flow: FlowSection::default(),
            solver: SolverSection::default(),
            experiment: ExperimentSection::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Model {
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub eps: f64,
    pub gamma: f64,
    /// Gevrey exponent of the cutoff, also used as the stretched-exponential weight exponent.
    pub delta: f64,
    pub lambda: f64,
}

impl Default for Model {
    fn default() -> Self {
        Self {
            d: 1,
            l: 1,
            eps: 1.0,
            gamma: 0.2,
            delta: 0.5,
            lambda: 0.05,
        }
    }
}

/// Unset exponents fall back to the midpoint of the admissible region.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub kappa: Option<f64>,
    pub n: Option<usize>,
    pub step: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorName {
    Euler,
    Midpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    #[serde(rename = "M")]
    pub m: usize,
    pub integrator: IntegratorName,
    pub picard_tol: f64,
    #[serde(rename = "D")]
    pub d_norm: f64,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            m: 32,
            integrator: IntegratorName::Euler,
            picard_tol: 1e-13,
            d_norm: 4.0,
            a: None,
            b: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Experiment run when no subcommand is given.
    pub run: Option<Experiment>,
    pub verify: VerifyOptions,
    pub quantise: QuantiseOptions,
    pub decay: DecayOptions,
    pub kernels: KernelOptions,
    pub refine: RefineOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Mirror the upper triangle of the covariance Gram before the antisymmetry check.
    SymmetriseCovariance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantiseOptions {
    pub max_degree: usize,
}

impl Default for QuantiseOptions {
    fn default() -> Self {
        Self { max_degree: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecayOptions {
    /// Torus size of the decay run.
    #[serde(rename = "L")]
    pub l: usize,
    /// Sites `0..split` form the first mask, the rest the second.
    pub split: usize,
    /// Target exponent for the ε-refinement fit.
    pub theta: f64,
    /// Weight `e^{ξ dist}` in the noise-gap norm.
    pub xi: f64,
}

impl Default for DecayOptions {
    fn default() -> Self {
        Self {
            l: 8,
            split: 6,
            theta: 0.5,
            xi: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelOptions {
    #[serde(rename = "L")]
    pub l: usize,
    pub eps: f64,
    pub scales: Vec<f64>,
    /// Rate `c` of the stretched-exponential weight in the L¹ norm.
    pub weight: f64,
    /// Radius in units of `2^{-s}` excluded from the decay fit.
    pub core: f64,
    pub eps_values: Vec<f64>,
    pub eps_scales: Vec<f64>,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            l: 4,
            eps: 1.0 / 64.0,
            scales: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            weight: 0.0,
            core: 1.0,
            eps_values: vec![0.25, 0.125, 0.0625, 0.03125],
            eps_scales: vec![1.0, 2.0, 3.0, 4.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    /// Consecutive entries are compared; each ratio must be a power of two.
    pub eps: Vec<f64>,
    /// Steps of the shared pair-system grid; each step on the finest lattice composes dense elements.
    #[serde(rename = "M")]
    pub m: usize,
    /// Flow truncation of the refinement runs; the flow cost grows quickly with it on the finer lattices.
    pub n: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            eps: vec![1.0, 0.5, 0.25],
            m: 1,
            n: 2,
        }
    }
}

fn config_error<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Configuration(msg.into()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Norm exponents with defaults filled in and the admissibility constraints enforced.
    pub fn norm_params(&self) -> Result<NormParams> {
        let mut p = NormParams::default_for(self.model.gamma, self.model.d)?;
        p.alpha = self.flow.alpha.unwrap_or(p.alpha);
        p.beta = self.flow.beta.unwrap_or(p.beta);
        p.kappa = self.flow.kappa.unwrap_or(p.kappa);
        p.delta = self.model.delta;
        p.validate(self.model.gamma, self.model.d)?;
        Ok(p)
    }

    pub fn flow_config(&self, params: &NormParams) -> FlowConfig {
        let mut cfg = FlowConfig::new(
            self.model.lambda,
            self.flow.n.unwrap_or_else(|| params.truncation()),
        );
        if let Some(step) = self.flow.step {
            cfg.step = step;
        }
        cfg
    }

    pub fn solver_config(&self, params: &NormParams) -> SolverConfig {
        let base = SolverConfig::for_exponents(self.model.gamma, self.model.d, params);
        SolverConfig {
            d_norm: self.solver.d_norm,
            a: self.solver.a.unwrap_or(base.a),
            b: self.solver.b.unwrap_or(base.b),
            picard_tol: self.solver.picard_tol,
            integrator: match self.solver.integrator {
                IntegratorName::Euler => Integrator::Euler,
                IntegratorName::Midpoint => Integrator::Midpoint,
            },
            ..base
        }
    }

    pub fn cutoffs(&self) -> Result<Cutoffs> {
        Cutoffs::new(self.model.delta).map_err(|e| Error::Configuration(e.to_string()))
    }

    /// Schedule on the model torus, or on a torus of side `l` and spacing `eps` when given.
    pub fn schedule(&self, l: Option<usize>, eps: Option<f64>) -> Result<LatticeSchedule> {
        let geom = Geometry::build(
            self.model.d,
            l.unwrap_or(self.model.l),
            eps.unwrap_or(self.model.eps),
        )?;
        LatticeSchedule::new(geom, self.cutoffs()?, self.model.gamma)
    }

    /// Checks run before any computation.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(m.gamma > 0.0) {
            return config_error(format!("gamma = {} must be positive", m.gamma));
        }
        if !m.lambda.is_finite() {
            return config_error("lambda must be finite");
        }
        Geometry::build(m.d, m.l, m.eps)?;
        self.cutoffs()?;
        let params = self.norm_params()?;
        if matches!(self.flow.n, Some(0)) {
            return config_error("flow truncation n must be at least 1");
        }
        if let Some(step) = self.flow.step {
            if !(step > 0.0 && step <= 1.0) {
                return config_error(format!("flow step {step} outside (0, 1]"));
            }
        }
        let s = &self.solver;
        if s.m == 0 {
            return config_error("solver M must be at least 1");
        }
        if !(s.picard_tol > 0.0) || !(s.d_norm > 0.0) {
            return config_error("picard_tol and D must be positive");
        }
        let _ = self.flow_config(&params);
        let e = &self.experiment;
        if e.quantise.max_degree == 0 {
            return config_error("quantise max_degree must be at least 1");
        }
        if e.decay.split == 0 || e.decay.split >= e.decay.l {
            return config_error(format!(
                "decay split {} must lie strictly inside 0..{}",
                e.decay.split, e.decay.l
            ));
        }
        if e.kernels.scales.len() < 2 {
            return config_error("kernels need at least two scales");
        }
        if e.refine.eps.len() < 2 {
            return config_error("refine needs two or more eps values");
        }
        for w in e.refine.eps.windows(2) {
            let r = (w[0] / w[1]).log2();
            if !(r >= -1e-12) || (r - r.round()).abs() > 1e-12 {
                return config_error(format!(
                    "refine eps {} -> {} is not a refinement by a power of two",
                    w[0], w[1]
                ));
            }
        }
        if e.refine.m == 0 || e.refine.n == 0 {
            return config_error("refine M and n must be at least 1");
        }
        Ok(())
    }
}
