//! One-factor Brownian desk model: the endowment `Sigma_0 = g(B_1)` and the
//! dividends `psi^j = f^j(B_1)` are payoffs of the terminal Brownian state, so
//! their Malliavin derivatives are `D_t Sigma_0 = g'(B_1)` and
//! `D_t psi^j = f^j'(B_1)` for every `t`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::quadrature::Legendre;
use crate::utility::AgentSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedFunction {
    Sin,
    Cos,
    Tanh,
    Atan,
    Square,
}

impl NamedFunction {
    fn eval(self, y: f64) -> (f64, f64) {
        match self {
            NamedFunction::Sin => (y.sin(), y.cos()),
            NamedFunction::Cos => (y.cos(), -y.sin()),
            NamedFunction::Tanh => {
                let t = y.tanh();
                (t, 1.0 - t * t)
            }
            NamedFunction::Atan => (y.atan(), 1.0 / (1.0 + y * y)),
            NamedFunction::Square => (y * y, 2.0 * y),
        }
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A payoff given by closures; the derivative is optional.
#[derive(Clone)]
pub struct CustomPayoff {
    pub name: String,
    pub value: ScalarFn,
    pub derivative: Option<ScalarFn>,
}

impl fmt::Debug for CustomPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPayoff")
            .field("name", &self.name)
            .field("has_derivative", &self.derivative.is_some())
            .finish()
    }
}

impl PartialEq for CustomPayoff {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && Arc::ptr_eq(&self.value, &other.value)
            && self.derivative.is_some() == other.derivative.is_some()
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    /// `intercept + slope * z`
    Linear {
        #[serde(default)]
        intercept: f64,
        slope: f64,
    },
    /// `amplitude * function(rate * z)`
    Named {
        function: NamedFunction,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        rate: f64,
    },
    /// Linear interpolation of `values` at increasing `knots`, extended
    /// linearly by the end segments.
    PiecewiseLinear { knots: Vec<f64>, values: Vec<f64> },
    #[serde(skip)]
    Custom(CustomPayoff),
}

impl PayoffSpec {
    pub fn zero() -> Self {
        PayoffSpec::Linear {
            intercept: 0.0,
            slope: 0.0,
        }
    }

    pub fn constant(k: f64) -> Self {
        PayoffSpec::Linear {
            intercept: k,
            slope: 0.0,
        }
    }

    pub fn linear(intercept: f64, slope: f64) -> Self {
        PayoffSpec::Linear { intercept, slope }
    }

    pub fn validate(&self) -> Result<()> {
        if let PayoffSpec::PiecewiseLinear { knots, values } = self {
            if knots.len() < 2 || knots.len() != values.len() {
                return Err(ModelError::InvalidParameter(
                    "piecewise-linear payoff needs at least two knots and one value per knot".into(),
                ));
            }
            if knots.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(ModelError::InvalidParameter(
                    "piecewise-linear knots must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    // segment index whose slope applies at z; knots take the left slope
    fn segment(knots: &[f64], z: f64) -> usize {
        let n = knots.len();
        knots[1..n - 1].iter().take_while(|k| z > **k).count()
    }

    pub fn value(&self, z: f64) -> f64 {
        match self {
            PayoffSpec::Linear { intercept, slope } => intercept + slope * z,
            PayoffSpec::Named {
                function,
                amplitude,
                rate,
            } => amplitude * function.eval(rate * z).0,
            PayoffSpec::PiecewiseLinear { knots, values } => {
                let i = Self::segment(knots, z);
                let s = (values[i + 1] - values[i]) / (knots[i + 1] - knots[i]);
                values[i] + s * (z - knots[i])
            }
            PayoffSpec::Custom(c) => (c.value)(z),
        }
    }

    pub fn derivative(&self, z: f64) -> Result<f64> {
        Ok(match self {
            PayoffSpec::Linear { slope, .. } => *slope,
            PayoffSpec::Named {
                function,
                amplitude,
                rate,
            } => amplitude * rate * function.eval(rate * z).1,
            PayoffSpec::PiecewiseLinear { knots, values } => {
                let i = Self::segment(knots, z);
                (values[i + 1] - values[i]) / (knots[i + 1] - knots[i])
            }
            PayoffSpec::Custom(c) => match &c.derivative {
                Some(d) => d(z),
                None => return Err(ModelError::UnsupportedPayoff(c.name.clone())),
            },
        })
    }

    pub fn has_derivative(&self) -> bool {
        !matches!(self, PayoffSpec::Custom(c) if c.derivative.is_none())
    }

    /// Points where the payoff is not differentiable.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            PayoffSpec::PiecewiseLinear { knots, .. } => knots.clone(),
            _ => Vec::new(),
        }
    }

    /// Lipschitz constant on `[-radius, radius]` (grid supremum of `|g'|`).
    pub fn lipschitz_on(&self, radius: f64) -> Result<f64> {
        let n = 4000;
        let mut sup = 0.0_f64;
        for i in 0..=n {
            let z = -radius + 2.0 * radius * i as f64 / n as f64;
            sup = sup.max(self.derivative(z)?.abs());
        }
        for k in self.kinks() {
            if k.abs() <= radius {
                sup = sup.max(self.derivative(k)?.abs());
                sup = sup.max(self.derivative(k + 1e-12)?.abs());
            }
        }
        Ok(sup)
    }

    pub fn linear_coefficients(&self) -> Option<(f64, f64)> {
        match self {
            PayoffSpec::Linear { intercept, slope } => Some((*intercept, *slope)),
            _ => None,
        }
    }

    /// Whether the payoff is bounded on the whole line.
    pub fn is_bounded(&self) -> bool {
        match self {
            PayoffSpec::Linear { slope, .. } => *slope == 0.0,
            PayoffSpec::Named { function, .. } => !matches!(function, NamedFunction::Square),
            PayoffSpec::PiecewiseLinear { values, .. } => {
                let n = values.len();
                values[1] == values[0] && values[n - 1] == values[n - 2]
            }
            PayoffSpec::Custom(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    pub endowment: PayoffSpec,
    pub dividends: Vec<PayoffSpec>,
}

impl MarketModel {
    pub fn new(endowment: PayoffSpec, dividends: Vec<PayoffSpec>) -> Result<Self> {
        endowment.validate()?;
        for d in &dividends {
            d.validate()?;
        }
        Ok(Self {
            endowment,
            dividends,
        })
    }

    pub fn n_stocks(&self) -> usize {
        self.dividends.len()
    }

    /// Number of Brownian factors; numerics are implemented for one.
    pub fn factors(&self) -> usize {
        1
    }

    fn check_position(&self, q: &[f64]) {
        debug_assert_eq!(q.len(), self.dividends.len(), "position has wrong dimension");
    }

    /// `Sigma(x, q) = x + g(z) + <q, f(z)>` at terminal state `B_1 = z`.
    pub fn sigma_total(&self, x: f64, q: &[f64], z: f64) -> f64 {
        self.check_position(q);
        x + self.endowment.value(z)
            + q.iter()
                .zip(&self.dividends)
                .map(|(qj, f)| qj * f.value(z))
                .sum::<f64>()
    }

    /// `(g'(z), f'(z))`, the constant-in-time Malliavin derivatives.
    pub fn malliavin_derivative(&self, z: f64) -> Result<(f64, Vec<f64>)> {
        let dg = self.endowment.derivative(z)?;
        let df = self
            .dividends
            .iter()
            .map(|f| f.derivative(z))
            .collect::<Result<Vec<_>>>()?;
        Ok((dg, df))
    }

    /// `D_t Sigma_0 + <q, D_t psi>` at `B_1 = z`.
    pub fn exposure(&self, q: &[f64], z: f64) -> Result<f64> {
        let mut e = self.endowment.derivative(z)?;
        for (qj, f) in q.iter().zip(&self.dividends) {
            e += qj * f.derivative(z)?;
        }
        Ok(e)
    }

    /// Slope `sigma_0 + <q, beta>` of `Sigma(x, q)` in `z` when all payoffs are linear.
    pub fn linear_exposure(&self, q: &[f64]) -> Option<f64> {
        let (_, s0) = self.endowment.linear_coefficients()?;
        let mut k = s0;
        for (qj, f) in q.iter().zip(&self.dividends) {
            k += qj * f.linear_coefficients()?.1;
        }
        Some(k)
    }

    pub fn is_deterministic(&self) -> bool {
        self.endowment.is_constant() && self.dividends.iter().all(|f| f.is_constant())
    }

    pub fn kinks(&self) -> Vec<f64> {
        let mut k = self.endowment.kinks();
        for f in &self.dividends {
            k.extend(f.kinks());
        }
        k
    }

    pub fn all_derivatives_available(&self) -> bool {
        self.endowment.has_derivative() && self.dividends.iter().all(|f| f.has_derivative())
    }

    /// Euclidean norm `|psi|` at `B_1 = z`.
    pub fn dividend_norm(&self, z: f64) -> f64 {
        self.dividends
            .iter()
            .map(|f| f.value(z).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

impl PayoffSpec {
    pub fn is_constant(&self) -> bool {
        match self {
            PayoffSpec::Linear { slope, .. } => *slope == 0.0,
            PayoffSpec::Named { amplitude, rate, .. } => *amplitude == 0.0 || *rate == 0.0,
            PayoffSpec::PiecewiseLinear { values, .. } => values.windows(2).all(|w| w[0] == w[1]),
            PayoffSpec::Custom(_) => false,
        }
    }
}

/// Truncation radii of the nested estimates of `E[h(B_1)]`.
pub const INTEGRABILITY_RADII: [f64; 6] = [8.0, 16.0, 24.0, 32.0, 48.0, 64.0];
pub const STABILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// Heuristic: the nested estimates did not stabilize.
    Divergent,
    NotApplicable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Divergent => "DIVERGENT (heuristic)",
            Verdict::NotApplicable => "N/A",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedEstimate {
    /// `(radius, estimate of int_{-R}^{R} h(z) phi(z) dz)`
    pub estimates: Vec<(f64, f64)>,
    pub verdict: Verdict,
}

impl NestedEstimate {
    pub fn value(&self) -> f64 {
        self.estimates.last().map(|e| e.1).unwrap_or(f64::NAN)
    }
}

/// Nested estimates of `E[exp(log_h(Z))]`, `Z ~ N(0,1)`, over growing truncation radii.
/// Panels are split at `breaks` so kinks in the integrand do not spoil accuracy.
pub fn gaussian_exp_moment<F: Fn(f64) -> f64>(log_h: F, breaks: &[f64]) -> NestedEstimate {
    let gl = Legendre::new(12);
    let panel = 1.0 / 32.0;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let density = |z: f64| (log_h(z) - 0.5 * z * z + log_norm).exp();
    let mut cuts = breaks.to_vec();
    cuts.push(0.0);
    let mut total = 0.0;
    let mut inner = 0.0;
    let mut estimates = Vec::with_capacity(INTEGRABILITY_RADII.len());
    for &radius in &INTEGRABILITY_RADII {
        total += gl.composite(-radius, -inner, panel, &cuts, density);
        total += gl.composite(inner, radius, panel, &cuts, density);
        inner = radius;
        estimates.push((radius, total));
    }
    let n = estimates.len();
    let (last, prev) = (estimates[n - 1].1, estimates[n - 2].1);
    let stable = last.is_finite() && ((last - prev).abs() <= STABILITY_TOL * last.abs());
    NestedEstimate {
        estimates,
        verdict: if stable { Verdict::Pass } else { Verdict::Divergent },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrabilityMode {
    /// `E[exp(c (Sigma_0^- + p|psi|) / M)] < inf`, which bounds `E[r(v, Sigma(x, q))]` for `|q| <= p`
    Eq6Proxy,
    /// `E[exp(p|psi| + c Sigma_0^- / M)] < inf`
    Eq7,
    /// `E[exp(-a Sigma_0 + p|psi|)] < inf` for exponential agents
    Eq15,
    /// `E[exp(p|psi| + 2c Sigma_0^- / M)] < inf`
    Eq17,
}

impl fmt::Display for IntegrabilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntegrabilityMode::Eq6Proxy => "expected-utility proxy",
            IntegrabilityMode::Eq7 => "exp(p|psi| + c Sigma0^-/M)",
            IntegrabilityMode::Eq15 => "exp(-a Sigma0 + p|psi|)",
            IntegrabilityMode::Eq17 => "exp(p|psi| + 2c Sigma0^-/M)",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrabilityEntry {
    pub p: f64,
    pub estimate: NestedEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrabilityReport {
    pub mode: IntegrabilityMode,
    pub entries: Vec<IntegrabilityEntry>,
    pub verdict: Verdict,
}

pub fn check_integrability(
    model: &MarketModel,
    agents: &AgentSet,
    p_list: &[f64],
    mode: IntegrabilityMode,
) -> IntegrabilityReport {
    let c = agents.c();
    let m = agents.len() as f64;
    let harmonic = agents.aggregate_exponential();
    if mode == IntegrabilityMode::Eq15 && harmonic.is_none() {
        return IntegrabilityReport {
            mode,
            entries: Vec::new(),
            verdict: Verdict::NotApplicable,
        };
    }
    let breaks = model.kinks();
    let entries: Vec<IntegrabilityEntry> = p_list
        .iter()
        .map(|&p| {
            let log_h = |z: f64| {
                let s0 = model.endowment.value(z);
                let neg = (-s0).max(0.0);
                let psi = model.dividend_norm(z);
                match mode {
                    IntegrabilityMode::Eq6Proxy => c * (neg + p * psi) / m,
                    IntegrabilityMode::Eq7 => p * psi + c * neg / m,
                    IntegrabilityMode::Eq15 => -harmonic.unwrap_or(0.0) * s0 + p * psi,
                    IntegrabilityMode::Eq17 => p * psi + 2.0 * c * neg / m,
                }
            };
            IntegrabilityEntry {
                p,
                estimate: gaussian_exp_moment(log_h, &breaks),
            }
        })
        .collect();
    let verdict = if entries.iter().all(|e| e.estimate.verdict == Verdict::Pass) {
        Verdict::Pass
    } else {
        Verdict::Divergent
    };
    IntegrabilityReport {
        mode,
        entries,
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_total_examples() {
        let m = MarketModel::new(PayoffSpec::zero(), vec![PayoffSpec::linear(0.0, 1.0)]).unwrap();
        assert_eq!(m.sigma_total(1.0, &[2.0], 3.0), 7.0);
        let m = MarketModel::new(PayoffSpec::linear(0.0, 0.3), vec![PayoffSpec::linear(0.0, 1.0)]).unwrap();
        assert_eq!(m.sigma_total(0.5, &[0.0], 2.0), 0.5 + 0.6);
        assert!((m.sigma_total(0.0, &[0.7], 2.0) - (0.3 + 0.7) * 2.0).abs() < 1e-15);
        assert_eq!(m.linear_exposure(&[0.7]), Some(1.0));
    }

    #[test]
    fn malliavin_derivatives() {
        let m = MarketModel::new(
            PayoffSpec::linear(1.0, 0.4),
            vec![PayoffSpec::Named {
                function: NamedFunction::Sin,
                amplitude: 1.0,
                rate: 1.0,
            }],
        )
        .unwrap();
        let (dg, df) = m.malliavin_derivative(0.0).unwrap();
        assert_eq!(dg, 0.4);
        assert_eq!(df, vec![1.0]);
        let (dg, _) = m.malliavin_derivative(-3.0).unwrap();
        assert_eq!(dg, 0.4);
    }

    #[test]
    fn piecewise_linear_left_slope_and_fd() {
        let p = PayoffSpec::PiecewiseLinear {
            knots: vec![-1.0, 0.0, 2.0],
            values: vec![1.0, 0.0, 1.0],
        };
        p.validate().unwrap();
        assert_eq!(p.derivative(0.0).unwrap(), -1.0);
        assert_eq!(p.derivative(0.0 + 1e-9).unwrap(), 0.5);
        assert_eq!(p.value(3.0), 1.5);
        for z in [-2.3, -0.5, 0.7, 1.9, 4.0] {
            let h = 1e-6;
            let fd = (p.value(z + h) - p.value(z - h)) / (2.0 * h);
            assert!((fd - p.derivative(z).unwrap()).abs() < 1e-6);
        }
        assert_eq!(p.lipschitz_on(5.0).unwrap(), 1.0);
    }

    #[test]
    fn missing_derivative_is_an_error() {
        let p = PayoffSpec::Custom(CustomPayoff {
            name: "digital".into(),
            value: Arc::new(|z| if z > 0.0 { 1.0 } else { 0.0 }),
            derivative: None,
        });
        assert!(matches!(p.derivative(0.3), Err(ModelError::UnsupportedPayoff(_))));
        let m = MarketModel::new(p, vec![]).unwrap();
        assert!(m.malliavin_derivative(0.0).is_err());
    }

    #[test]
    fn gaussian_mgf() {
        let est = gaussian_exp_moment(|z| z, &[]);
        assert_eq!(est.verdict, Verdict::Pass);
        assert!((est.value() / 0.5f64.exp() - 1.0).abs() < 1e-8);
        let est = gaussian_exp_moment(|z| 2.0 * z.abs(), &[]);
        assert_eq!(est.verdict, Verdict::Pass);
        // E[e^{2|Z|}] = 2 e^2 Phi(2)
        let exact = 2.0 * 2f64.exp() * 0.977_249_868_051_820_8;
        assert!((est.value() / exact - 1.0).abs() < 1e-9);
    }

    #[test]
    fn integrability_verdicts() {
        let agents = AgentSet::exponential(&[2.0, 2.0]).unwrap();
        let linear = MarketModel::new(PayoffSpec::linear(0.0, -1.0), vec![]).unwrap();
        let rep = check_integrability(&linear, &agents, &[1.0], IntegrabilityMode::Eq15);
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!((rep.entries[0].estimate.value() / 0.5f64.exp() - 1.0).abs() < 1e-8);

        let bounded = MarketModel::new(
            PayoffSpec::Named {
                function: NamedFunction::Tanh,
                amplitude: 3.0,
                rate: 1.0,
            },
            vec![PayoffSpec::Named {
                function: NamedFunction::Sin,
                amplitude: 1.0,
                rate: 2.0,
            }],
        )
        .unwrap();
        for mode in [
            IntegrabilityMode::Eq6Proxy,
            IntegrabilityMode::Eq7,
            IntegrabilityMode::Eq15,
            IntegrabilityMode::Eq17,
        ] {
            let rep = check_integrability(&bounded, &agents, &[1.0, 5.0, 20.0], mode);
            assert_eq!(rep.verdict, Verdict::Pass, "{mode}");
        }

        // Sigma_0 = -z^2 with 2c/M = 2 >= 1/2
        let square = MarketModel::new(
            PayoffSpec::Named {
                function: NamedFunction::Square,
                amplitude: -1.0,
                rate: 1.0,
            },
            vec![],
        )
        .unwrap();
        let rep = check_integrability(&square, &agents, &[1.0], IntegrabilityMode::Eq17);
        assert_eq!(rep.verdict, Verdict::Divergent);
        let tanh_agents = AgentSet::new(vec![crate::utility::build_from_risk_aversion(
            crate::utility::RiskAversionShape::Constant { level: 1.0 },
            1.0,
            4,
        )
        .unwrap()])
        .unwrap();
        let rep = check_integrability(&square, &tanh_agents, &[1.0], IntegrabilityMode::Eq15);
        assert_eq!(rep.verdict, Verdict::NotApplicable);
    }
}
