//! Experiment configuration in TOML. Parsing fills every default so that the
//! echoed text is a complete, re-parseable description of the run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::ModelError;
use crate::fields::{FieldEngine, CONJUGATE_MAX_ITER, CONJUGATE_TOL, DEFAULT_NODES};
use crate::market::{MarketModel, PayoffSpec};
use crate::sim::{OrderFlow, SimulationConfig};
use crate::utility::{build_from_risk_aversion, AgentSet, RiskAversionShape, UtilitySpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {message}{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    Parse {
        line: usize,
        message: String,
        suggestion: Option<String>,
    },
    #[error("invalid value for `{key}`: {message}")]
    Semantic { key: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentConfig {
    Exponential {
        a: f64,
        /// defaults to `max(a, 1/a)`
        #[serde(default)]
        c: Option<f64>,
    },
    RiskAversion {
        a: RiskAversionShape,
        /// defaults to the smallest bound containing the range of `a`
        #[serde(default)]
        c: Option<f64>,
        #[serde(default = "default_max_order")]
        max_order: usize,
    },
}

fn default_max_order() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub endowment: PayoffSpec,
    #[serde(default)]
    pub dividends: Vec<PayoffSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowConfig {
    Constant {
        q: Vec<f64>,
    },
    /// `q[k]` held on `[times[k], times[k+1])`
    Schedule {
        times: Vec<f64>,
        q: Vec<Vec<f64>>,
    },
    /// `q = base + 1{t >= switch_time} gain (1 + |B_t|)`, clipped to `[-bound, bound]`
    Feedback {
        base: Vec<f64>,
        gain: Vec<f64>,
        switch_time: f64,
        bound: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub v: Vec<f64>,
    #[serde(default)]
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinates {
    Log,
    Direct,
}

fn default_dt() -> f64 {
    1.0 / 256.0
}
fn default_paths() -> usize {
    100
}
fn default_nodes() -> usize {
    DEFAULT_NODES
}
fn default_coordinates() -> Coordinates {
    Coordinates::Log
}
fn default_newton_tol() -> f64 {
    CONJUGATE_TOL
}
fn default_newton_max_iter() -> usize {
    CONJUGATE_MAX_ITER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// absolute explosion threshold; absent means `1e-6 * min_m |U_0^m|`
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "default_nodes")]
    pub quadrature: usize,
    #[serde(default = "default_coordinates")]
    pub coordinates: Coordinates,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            paths: default_paths(),
            seed: 0,
            eps: None,
            quadrature: default_nodes(),
            coordinates: default_coordinates(),
            newton_tol: default_newton_tol(),
            newton_max_iter: default_newton_max_iter(),
        }
    }
}

fn default_precision() -> usize {
    12
}
fn default_path_files() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// significant digits in CSV output
    #[serde(default = "default_precision")]
    pub precision: usize,
    /// number of per-path CSV files written by `simulate`
    #[serde(default = "default_path_files")]
    pub path_files: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            precision: default_precision(),
            path_files: default_path_files(),
        }
    }
}

/// Grid of the `fields` table; the Cartesian product of all lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsSection {
    pub t: Vec<f64>,
    pub z: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    pub p: Vec<f64>,
    /// bound of the admissible sets; defaults to the flow bound plus `c`
    pub b: Option<f64>,
    pub functional_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub agents: Vec<AgentConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub fields: Option<FieldsSection>,
    #[serde(default)]
    pub check: Option<CheckSection>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn backticked(s: &str) -> Vec<String> {
    s.split('`').skip(1).step_by(2).map(str::to_string).collect()
}

// "unknown field `modell`, expected one of `agents`, `model`, ..."
fn suggest(message: &str) -> Option<String> {
    let rest = message.split("unknown field").nth(1)?;
    let names = backticked(rest);
    let (unknown, expected) = names.split_first()?;
    expected
        .iter()
        .map(|e| (strsim::jaro_winkler(unknown, e), e))
        .filter(|(score, _)| *score > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, e)| e.clone())
}

fn semantic(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Semantic {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses, validates and fills defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
            let message = e.message().trim().to_string();
            ConfigError::Parse {
                line,
                suggestion: suggest(&message),
                message,
            }
        })?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// The effective configuration as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the echoed configuration, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn m(&self) -> usize {
        self.agents.len()
    }

    pub fn j(&self) -> usize {
        self.model.dividends.len()
    }

    fn resolve(&mut self) -> Result<(), ConfigError> {
        if self.agents.is_empty() {
            return Err(semantic("agents", "at least one agent is required"));
        }
        for (i, agent) in self.agents.iter_mut().enumerate() {
            match agent {
                AgentConfig::Exponential { a, c } => {
                    if !(*a > 0.0 && a.is_finite()) {
                        return Err(semantic(&format!("agents[{i}].a"), "must be positive"));
                    }
                    c.get_or_insert(a.max(1.0 / *a));
                }
                AgentConfig::RiskAversion { a, c, max_order } => {
                    if *max_order < 2 {
                        return Err(semantic(&format!("agents[{i}].max_order"), "must be at least 2"));
                    }
                    c.get_or_insert(a.default_bound());
                }
            }
        }
        let (m, j) = (self.m(), self.j());
        for (k, p) in std::iter::once(&self.model.endowment).chain(&self.model.dividends).enumerate() {
            let key = if k == 0 {
                "model.endowment".to_string()
            } else {
                format!("model.dividends[{}]", k - 1)
            };
            if matches!(p, PayoffSpec::Custom(_)) {
                return Err(semantic(&key, "custom payoffs cannot be configured"));
            }
            p.validate().map_err(|e| semantic(&key, e.to_string()))?;
        }
        let flow = self.flow.get_or_insert(FlowConfig::Constant { q: vec![0.0; j] });
        let flow_ok = match flow {
            FlowConfig::Constant { q } => q.len() == j,
            FlowConfig::Schedule { times, q } => {
                if times.first() != Some(&0.0) || times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(semantic("flow.times", "must start at 0 and increase strictly"));
                }
                times.len() == q.len() && q.iter().all(|p| p.len() == j)
            }
            FlowConfig::Feedback {
                base,
                gain,
                switch_time,
                bound,
            } => {
                if !(*bound > 0.0) {
                    return Err(semantic("flow.bound", "must be positive"));
                }
                if !(0.0..=1.0).contains(switch_time) {
                    return Err(semantic("flow.switch_time", "must lie in [0, 1]"));
                }
                base.len() == j && gain.len() == j
            }
        };
        if !flow_ok {
            return Err(semantic("flow", format!("positions must have {j} entries, one per dividend")));
        }
        let initial = self.initial.get_or_insert(InitialConfig {
            v: vec![1.0; m],
            x: 0.0,
        });
        if initial.v.len() != m || initial.v.iter().any(|w| !(*w > 0.0)) {
            return Err(semantic("initial.v", format!("needs {m} positive weights")));
        }
        let sim = &self.sim;
        if !(sim.dt > 0.0 && sim.dt <= 1.0) {
            return Err(semantic("sim.dt", format!("must lie in (0, 1], got {}", sim.dt)));
        }
        if sim.paths == 0 {
            return Err(semantic("sim.paths", "must be positive"));
        }
        if let Some(eps) = sim.eps {
            if !(eps > 0.0) {
                return Err(semantic("sim.eps", "must be positive"));
            }
        }
        if sim.quadrature == 0 || sim.quadrature > crate::quadrature::MAX_HERMITE_NODES {
            return Err(semantic(
                "sim.quadrature",
                format!("must lie in 1..={}", crate::quadrature::MAX_HERMITE_NODES),
            ));
        }
        if !(sim.newton_tol > 0.0) || sim.newton_max_iter == 0 {
            return Err(semantic("sim.newton_tol", "tolerance and iteration cap must be positive"));
        }
        if !(1..=17).contains(&self.output.precision) {
            return Err(semantic("output.precision", "must lie in 1..=17"));
        }
        let q0 = self.initial_position();
        let v0 = self.initial.as_ref().map(|i| i.v.clone()).unwrap_or_default();
        let fields = self.fields.get_or_insert(FieldsSection {
            t: vec![0.0, 0.5],
            z: vec![-1.0, 0.0, 1.0],
            v: vec![v0],
            x: vec![0.0],
            q: vec![q0],
        });
        if fields.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(semantic("fields.t", "times must lie in [0, 1]"));
        }
        if fields.v.iter().any(|v| v.len() != m || v.iter().any(|w| !(*w > 0.0))) {
            return Err(semantic("fields.v", format!("each entry needs {m} positive weights")));
        }
        if fields.q.iter().any(|q| q.len() != j) {
            return Err(semantic("fields.q", format!("each entry needs {j} positions")));
        }
        let c = self
            .agents
            .iter()
            .map(|a| match a {
                AgentConfig::Exponential { c, .. } | AgentConfig::RiskAversion { c, .. } => c.unwrap_or(1.0),
            })
            .fold(1.0, f64::max);
        let flow_bound = self.flow_bound();
        let check = self.check.get_or_insert(CheckSection {
            p: vec![1.0, 4.0, 16.0],
            b: None,
            functional_nodes: 32,
        });
        check.b.get_or_insert(flow_bound + c);
        if check.p.is_empty() || check.p.iter().any(|p| !(*p > 0.0)) {
            return Err(semantic("check.p", "needs positive exponents"));
        }
        Ok(())
    }

    fn initial_position(&self) -> Vec<f64> {
        match self.flow.as_ref() {
            Some(FlowConfig::Constant { q }) => q.clone(),
            Some(FlowConfig::Schedule { q, .. }) => q[0].clone(),
            Some(FlowConfig::Feedback { base, .. }) => base.clone(),
            None => vec![0.0; self.j()],
        }
    }

    fn flow_bound(&self) -> f64 {
        let norm = |q: &[f64]| q.iter().map(|v| v * v).sum::<f64>().sqrt();
        match self.flow.as_ref() {
            Some(FlowConfig::Constant { q }) => norm(q),
            Some(FlowConfig::Schedule { q, .. }) => q.iter().map(|p| norm(p)).fold(0.0, f64::max),
            Some(FlowConfig::Feedback { bound, .. }) => *bound,
            None => 0.0,
        }
    }

    pub fn build_agents(&self) -> Result<AgentSet, ConfigError> {
        let specs = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                match a {
                    AgentConfig::Exponential { a, c } => UtilitySpec::exponential_with_bound(*a, c.unwrap_or(a.max(1.0 / a))),
                    AgentConfig::RiskAversion { a, c, max_order } => {
                        build_from_risk_aversion(a.clone(), c.unwrap_or(a.default_bound()), *max_order)
                    }
                }
                .map_err(|e| semantic(&format!("agents[{i}]"), e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(AgentSet::new(specs)?)
    }

    pub fn build_model(&self) -> Result<MarketModel, ConfigError> {
        Ok(MarketModel::new(self.model.endowment.clone(), self.model.dividends.clone())?)
    }

    pub fn build_flow(&self) -> Result<OrderFlow, ConfigError> {
        Ok(match self.flow.clone().unwrap_or(FlowConfig::Constant { q: vec![0.0; self.j()] }) {
            FlowConfig::Constant { q } => OrderFlow::Constant(q),
            FlowConfig::Schedule { times, q } => OrderFlow::schedule(times, q)?,
            FlowConfig::Feedback {
                base,
                gain,
                switch_time,
                bound,
            } => OrderFlow::feedback(bound, move |t, _u, b| {
                let on = if t >= switch_time { 1.0 + b.abs() } else { 0.0 };
                base.iter().zip(&gain).map(|(q, g)| q + on * g).collect()
            }),
        })
    }

    pub fn build_engine(&self) -> Result<FieldEngine, ConfigError> {
        Ok(FieldEngine::new(self.build_agents()?, self.build_model()?, self.sim.quadrature)?
            .with_newton(self.sim.newton_tol, self.sim.newton_max_iter)?)
    }

    pub fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            dt: self.sim.dt,
            n_paths: self.sim.paths,
            seed: self.sim.seed,
            explosion_eps: self.sim.eps,
            use_log_coordinates: self.sim.coordinates == Coordinates::Log,
            record_paths: true,
        }
    }

    pub fn initial(&self) -> (Vec<f64>, f64) {
        let i = self.initial.as_ref().expect("resolved on parse");
        (i.v.clone(), i.x)
    }

    pub fn start_position(&self) -> Vec<f64> {
        self.initial_position()
    }
}
