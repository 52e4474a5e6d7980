//! Market makers' utilities: exponential utilities in closed form and
//! utilities generated from a prescribed bounded absolute risk aversion.
//!
//! A risk-aversion-defined utility is normalized by `u'(0) = 1` and
//! `u(x) -> 0` as `x -> infinity`:
//!
//! ```text
//! u'(x) = exp(-A(x)),   A(x) = int_0^x a(s) ds,
//! u(x)  = -int_x^inf u'(s) ds = -exp(-A(x)) * omega(x),
//! ```
//!
//! where `omega(x) = -u(x)/u'(x)` lies in `[1/c, c]`. `A` and `log(-u)` are
//! tabulated on `[-TABLE_HALF_WIDTH, TABLE_HALF_WIDTH]` and interpolated by
//! quintic Hermite polynomials built from exact node derivatives; outside the
//! table both are integrated on demand.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::quadrature::Legendre;
use crate::taylor::Jet;

/// Highest derivative order of `u` that can be evaluated.
pub const MAX_ORDER: usize = 10;
pub const TABLE_HALF_WIDTH: f64 = 40.0;
pub const TABLE_STEP: f64 = 1.0 / 64.0;
/// Radii of the nested grids used by the smoothness diagnostics.
pub const SMOOTHNESS_RADII: [f64; 3] = [10.0, 20.0, 40.0];
pub const SMOOTHNESS_SPACING: f64 = 1e-3;

// e^{-46} ~ 1e-20: contributions beyond this decay are dropped from tail integrals.
const TAIL_DECAY: f64 = 46.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum RiskAversionShape {
    /// `a(x) = level`
    Constant { level: f64 },
    /// `a(x) = level + amplitude * tanh(rate * x)`
    Tanh {
        level: f64,
        amplitude: f64,
        #[serde(default = "default_rate")]
        rate: f64,
    },
    /// `a(x) = level + amplitude * sin(x^2)`; bounded but with unbounded `a'`.
    SinSquare { level: f64, amplitude: f64 },
}

fn default_rate() -> f64 {
    1.0
}

impl RiskAversionShape {
    pub fn jet(&self, x: f64) -> Jet {
        match *self {
            RiskAversionShape::Constant { level } => Jet::constant(level),
            RiskAversionShape::Tanh {
                level,
                amplitude,
                rate,
            } => Jet::variable(x)
                .scale(rate)
                .tanh()
                .scale(amplitude)
                .add_constant(level),
            RiskAversionShape::SinSquare { level, amplitude } => {
                let x = Jet::variable(x);
                x.mul(&x).sin_cos().0.scale(amplitude).add_constant(level)
            }
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match *self {
            RiskAversionShape::Constant { level } => level,
            RiskAversionShape::Tanh {
                level,
                amplitude,
                rate,
            } => level + amplitude * (rate * x).tanh(),
            RiskAversionShape::SinSquare { level, amplitude } => level + amplitude * (x * x).sin(),
        }
    }

    pub fn value_and_slope(&self, x: f64) -> (f64, f64) {
        match *self {
            RiskAversionShape::Constant { level } => (level, 0.0),
            RiskAversionShape::Tanh {
                level,
                amplitude,
                rate,
            } => {
                let th = (rate * x).tanh();
                (level + amplitude * th, amplitude * rate * (1.0 - th * th))
            }
            RiskAversionShape::SinSquare { level, amplitude } => {
                let (s, c) = (x * x).sin_cos();
                (level + amplitude * s, 2.0 * amplitude * x * c)
            }
        }
    }

    /// Closed range `[inf a, sup a]` over the real line.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            RiskAversionShape::Constant { level } => (level, level),
            RiskAversionShape::Tanh {
                level, amplitude, ..
            }
            | RiskAversionShape::SinSquare { level, amplitude } => {
                (level - amplitude.abs(), level + amplitude.abs())
            }
        }
    }

    /// Smallest `c >= 1` with `a(x)` in `[1/c, c]` for all `x`.
    pub fn default_bound(&self) -> f64 {
        let (lo, hi) = self.range();
        hi.max(1.0 / lo).max(1.0)
    }

    /// Whether every derivative of `a` is analytically known to be bounded on the line.
    pub fn derivatives_bounded(&self) -> bool {
        !matches!(self, RiskAversionShape::SinSquare { amplitude, .. } if *amplitude != 0.0)
    }

    pub fn name(&self) -> &'static str {
        match self {
            RiskAversionShape::Constant { .. } => "constant",
            RiskAversionShape::Tanh { .. } => "tanh",
            RiskAversionShape::SinSquare { .. } => "sin_square",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UtilityFamily {
    /// `u(x) = -exp(-a x) / a`
    Exponential { a: f64 },
    RiskAversion(RiskAversionShape),
}

#[derive(Debug, Clone, Copy, Default)]
struct Node {
    cum: f64,
    a: f64,
    da: f64,
    w: f64,
    dw: f64,
    d2w: f64,
}

#[derive(Debug)]
struct MarginalTable {
    shape: RiskAversionShape,
    lo: f64,
    hi: f64,
    h: f64,
    nodes: Vec<Node>,
    gl: Legendre,
    gl_inner: Legendre,
}

#[derive(Debug, Clone)]
pub struct UtilitySpec {
    family: UtilityFamily,
    c_bound: f64,
    max_derivative_order: usize,
    table: Option<Arc<MarginalTable>>,
}

impl PartialEq for UtilitySpec {
    fn eq(&self, other: &Self) -> bool {
        self.family == other.family
            && self.c_bound == other.c_bound
            && self.max_derivative_order == other.max_derivative_order
    }
}

impl UtilitySpec {
    pub fn exponential(a: f64) -> Result<Self> {
        Self::exponential_with_bound(a, a.max(1.0 / a))
    }

    pub fn exponential_with_bound(a: f64, c_bound: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "exponential coefficient must be positive, got {a}"
            )));
        }
        if !(c_bound * a >= 1.0 - 1e-15 && a <= c_bound * (1.0 + 1e-15)) {
            return Err(ModelError::InvalidRiskAversion {
                x: 0.0,
                value: a,
                c: c_bound,
            });
        }
        Ok(Self {
            family: UtilityFamily::Exponential { a },
            c_bound,
            max_derivative_order: MAX_ORDER,
            table: None,
        })
    }

    pub fn family(&self) -> &UtilityFamily {
        &self.family
    }

    pub fn c_bound(&self) -> f64 {
        self.c_bound
    }

    pub fn max_derivative_order(&self) -> usize {
        self.max_derivative_order
    }

    pub fn exponential_coefficient(&self) -> Option<f64> {
        match self.family {
            UtilityFamily::Exponential { a } => Some(a),
            UtilityFamily::RiskAversion(_) => None,
        }
    }

    /// `A(x) = -log u'(x)` and its slope `a(x)`; the slope is the exact
    /// derivative of the interpolant used for `A`.
    #[inline]
    pub fn cumulative_risk_aversion(&self, x: f64) -> (f64, f64) {
        match (&self.family, &self.table) {
            (UtilityFamily::Exponential { a }, _) => (a * x, *a),
            (_, Some(t)) => t.cumulative(x),
            _ => unreachable!("risk-aversion utilities always carry a table"),
        }
    }

    #[inline]
    pub fn marginal(&self, x: f64) -> f64 {
        (-self.cumulative_risk_aversion(x).0).exp()
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match (&self.family, &self.table) {
            (UtilityFamily::Exponential { a }, _) => -(-a * x).exp() / a,
            (_, Some(t)) => -t.log_neg_value(x).exp(),
            _ => unreachable!(),
        }
    }

    /// Absolute risk aversion `a(x) = -u''(x)/u'(x)`.
    #[inline]
    pub fn risk_aversion_value(&self, x: f64) -> f64 {
        match &self.family {
            UtilityFamily::Exponential { a } => *a,
            UtilityFamily::RiskAversion(s) => s.value(x),
        }
    }

    /// `(a(x), a'(x))`.
    #[inline]
    pub fn risk_aversion_and_slope(&self, x: f64) -> (f64, f64) {
        match &self.family {
            UtilityFamily::Exponential { a } => (*a, 0.0),
            UtilityFamily::RiskAversion(s) => s.value_and_slope(x),
        }
    }

    fn risk_aversion_jet(&self, x: f64) -> Jet {
        match &self.family {
            UtilityFamily::Exponential { a } => Jet::constant(*a),
            UtilityFamily::RiskAversion(s) => s.jet(x),
        }
    }

    /// `(a, a', ..., a^(order))` at `x`.
    pub fn risk_aversion(&self, x: f64, order: usize) -> Result<Vec<f64>> {
        let max = self.max_derivative_order - 2;
        if order > max {
            return Err(ModelError::UnsupportedOrder {
                requested: order,
                max,
            });
        }
        Ok(self.risk_aversion_jet(x).derivatives(order))
    }

    /// `(t, t', ..., t^(order))` for the risk tolerance `t = 1/a`.
    pub fn risk_tolerance(&self, x: f64, order: usize) -> Result<Vec<f64>> {
        let max = self.max_derivative_order - 2;
        if order > max {
            return Err(ModelError::UnsupportedOrder {
                requested: order,
                max,
            });
        }
        Ok(self.risk_aversion_jet(x).recip().derivatives(order))
    }

    /// `(u, u', ..., u^(order))` at `x`.
    pub fn eval_utility(&self, x: f64, order: usize) -> Result<Vec<f64>> {
        if order > self.max_derivative_order {
            return Err(ModelError::UnsupportedOrder {
                requested: order,
                max: self.max_derivative_order,
            });
        }
        let mut out = Vec::with_capacity(order + 1);
        out.push(self.value(x));
        if order == 0 {
            return Ok(out);
        }
        let marginal = self.marginal(x);
        // u'(x + h) / u'(x) = exp(-int_0^h a(x + s) ds)
        let ratio = self.risk_aversion_jet(x).integrate().scale(-1.0).exp();
        for k in 0..order {
            out.push(marginal * ratio.derivative(k));
        }
        Ok(out)
    }

    /// Solves `A(x) = s`, i.e. `u'(x) = exp(-s)`, starting from `guess`.
    pub fn marginal_inverse_log(&self, s: f64, guess: Option<f64>) -> Result<f64> {
        if let UtilityFamily::Exponential { a } = self.family {
            return Ok(s / a);
        }
        let c = self.c_bound;
        // A(0) = 0 and a in [1/c, c] bracket the root.
        let (mut lo, mut hi) = if s >= 0.0 { (s / c, s * c) } else { (s * c, s / c) };
        lo -= 1e-12 * (1.0 + lo.abs());
        hi += 1e-12 * (1.0 + hi.abs());
        let mut x = guess.filter(|g| *g > lo && *g < hi).unwrap_or(0.5 * (lo + hi));
        for _ in 0..200 {
            let (cum, slope) = self.cumulative_risk_aversion(x);
            let f = cum - s;
            if f.abs() <= 4.0 * f64::EPSILON * s.abs().max(1.0) {
                return Ok(x);
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let mut next = x - f / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 2.0 * f64::EPSILON * x.abs().max(1.0) {
                return Ok(next);
            }
            x = next;
        }
        Err(ModelError::NumericFailure(format!(
            "inverse marginal utility did not converge for log-level {s}"
        )))
    }

    /// Checks the pointwise invariants at every point of `grid`.
    pub fn validate_on_grid(&self, grid: &[f64]) -> Result<()> {
        let c = self.c_bound;
        let mut prev: Option<(f64, f64)> = None;
        for &x in grid {
            let d = self.eval_utility(x, 2)?;
            let (u, du, d2u) = (d[0], d[1], d[2]);
            let a = -d2u / du;
            let tol = 1e-12;
            let bad = !(u < 0.0 && du > 0.0 && d2u < 0.0)
                || a < 1.0 / c - tol
                || a > c + tol
                || du > -c * u * (1.0 + 1e-9)
                || du < -u / c * (1.0 - 1e-9);
            if bad {
                return Err(ModelError::InvalidRiskAversion { x, value: a, c });
            }
            if let Some((px, pu)) = prev {
                if x > px && u < pu {
                    return Err(ModelError::NumericFailure(format!(
                        "utility not increasing between {px} and {x}"
                    )));
                }
            }
            prev = Some((x, u));
        }
        Ok(())
    }
}

/// Builds the utility with absolute risk aversion `shape`, normalized by
/// `u'(0) = 1` and `u(+inf) = 0`.
pub fn build_from_risk_aversion(
    shape: RiskAversionShape,
    c_bound: f64,
    max_order: usize,
) -> Result<UtilitySpec> {
    if !(c_bound >= 1.0 && c_bound.is_finite()) {
        return Err(ModelError::InvalidParameter(format!(
            "risk-aversion bound c must be finite and >= 1, got {c_bound}"
        )));
    }
    if !(2..=MAX_ORDER).contains(&max_order) {
        return Err(ModelError::UnsupportedOrder {
            requested: max_order,
            max: MAX_ORDER,
        });
    }
    let table = MarginalTable::build(shape.clone(), c_bound)?;
    Ok(UtilitySpec {
        family: UtilityFamily::RiskAversion(shape),
        c_bound,
        max_derivative_order: max_order,
        table: Some(Arc::new(table)),
    })
}

#[inline]
fn quintic_basis(t: f64) -> [f64; 6] {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let t5 = t4 * t;
    [
        1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
        t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
        0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5,
        10.0 * t3 - 15.0 * t4 + 6.0 * t5,
        -4.0 * t3 + 7.0 * t4 - 3.0 * t5,
        0.5 * t3 - t4 + 0.5 * t5,
    ]
}

#[inline]
fn quintic_basis_slope(t: f64) -> [f64; 6] {
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    [
        -30.0 * t2 + 60.0 * t3 - 30.0 * t4,
        1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4,
        t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4,
        30.0 * t2 - 60.0 * t3 + 30.0 * t4,
        -12.0 * t2 + 28.0 * t3 - 15.0 * t4,
        1.5 * t2 - 4.0 * t3 + 2.5 * t4,
    ]
}

impl MarginalTable {
    fn build(shape: RiskAversionShape, c: f64) -> Result<Self> {
        let h = TABLE_STEP;
        let n_cells = (2.0 * TABLE_HALF_WIDTH / h).round() as usize;
        let lo = -TABLE_HALF_WIDTH;
        let hi = TABLE_HALF_WIDTH;
        let mut table = MarginalTable {
            shape,
            lo,
            hi,
            h,
            nodes: vec![Node::default(); n_cells + 1],
            gl: Legendre::new(12),
            gl_inner: Legendre::new(8),
        };
        let xs: Vec<f64> = (0..=n_cells).map(|i| lo + i as f64 * h).collect();
        for (node, &x) in table.nodes.iter_mut().zip(&xs) {
            let (a, da) = table.shape.value_and_slope(x);
            if !(a >= 1.0 / c - 1e-15 && a <= c + 1e-15) {
                return Err(ModelError::InvalidRiskAversion { x, value: a, c });
            }
            node.a = a;
            node.da = da;
        }
        // A(x) with A(0) = 0; x = 0 is the middle node.
        let mid = n_cells / 2;
        for i in mid..n_cells {
            let cell = table.gl.integrate(xs[i], xs[i + 1], |s| table.shape.value(s));
            table.nodes[i + 1].cum = table.nodes[i].cum + cell;
        }
        for i in (0..mid).rev() {
            let cell = table.gl.integrate(xs[i], xs[i + 1], |s| table.shape.value(s));
            table.nodes[i].cum = table.nodes[i + 1].cum - cell;
        }
        // omega_i = int_{x_i}^inf exp(-(A(s) - A_i)) ds, accumulated right to left.
        let mut omega = table.tail_omega(hi);
        let set_w = |node: &mut Node, omega: f64| {
            node.w = -node.cum + omega.ln();
            node.dw = -1.0 / omega;
            node.d2w = -node.a * node.dw - node.dw * node.dw;
        };
        set_w(&mut table.nodes[n_cells], omega);
        for i in (0..n_cells).rev() {
            let base = table.nodes[i].cum;
            let cell = table.gl.integrate(xs[i], xs[i + 1], |s| {
                (-(table.cumulative_in_cell(i, s).0 - base)).exp()
            });
            omega = cell + (-(table.nodes[i + 1].cum - base)).exp() * omega;
            set_w(&mut table.nodes[i], omega);
        }
        Ok(table)
    }

    #[inline]
    fn cumulative_in_cell(&self, i: usize, x: f64) -> (f64, f64) {
        let (n0, n1) = (&self.nodes[i], &self.nodes[i + 1]);
        let h = self.h;
        let t = (x - (self.lo + i as f64 * h)) / h;
        let b = quintic_basis(t);
        let db = quintic_basis_slope(t);
        let val = n0.cum * b[0]
            + h * n0.a * b[1]
            + h * h * n0.da * b[2]
            + n1.cum * b[3]
            + h * n1.a * b[4]
            + h * h * n1.da * b[5];
        let slope = (n0.cum * db[0]
            + h * n0.a * db[1]
            + h * h * n0.da * db[2]
            + n1.cum * db[3]
            + h * n1.a * db[4]
            + h * h * n1.da * db[5])
            / h;
        (val, slope)
    }

    #[inline]
    fn cell_index(&self, x: f64) -> usize {
        let i = ((x - self.lo) / self.h).floor() as isize;
        i.clamp(0, self.nodes.len() as isize - 2) as usize
    }

    fn cumulative(&self, x: f64) -> (f64, f64) {
        if x >= self.lo && x <= self.hi {
            self.cumulative_in_cell(self.cell_index(x), x)
        } else if x > self.hi {
            let last = self.nodes[self.nodes.len() - 1].cum;
            (last + self.integrate_a(self.hi, x), self.shape.value(x))
        } else {
            let first = self.nodes[0].cum;
            (first - self.integrate_a(x, self.lo), self.shape.value(x))
        }
    }

    fn log_neg_value(&self, x: f64) -> f64 {
        if x >= self.lo && x <= self.hi {
            let i = self.cell_index(x);
            let (n0, n1) = (&self.nodes[i], &self.nodes[i + 1]);
            let h = self.h;
            let t = (x - (self.lo + i as f64 * h)) / h;
            let b = quintic_basis(t);
            n0.w * b[0]
                + h * n0.dw * b[1]
                + h * h * n0.d2w * b[2]
                + n1.w * b[3]
                + h * n1.dw * b[4]
                + h * h * n1.d2w * b[5]
        } else if x > self.hi {
            let cum = self.cumulative(x).0;
            -cum + self.tail_omega(x).ln()
        } else {
            // omega(x) = int_x^lo e^{-(A(s)-A(x))} ds + e^{-(A(lo)-A(x))} omega(lo)
            let first = &self.nodes[0];
            let omega_lo = (first.w + first.cum).exp();
            let (seg, rise, _) = self.omega_segment(x, self.lo, f64::INFINITY);
            let cum = first.cum - rise;
            -cum + (seg + (-rise).exp() * omega_lo).ln()
        }
    }

    fn integrate_a(&self, x0: f64, x1: f64) -> f64 {
        self.gl.composite(x0, x1, 0.125, &[], |s| self.shape.value(s))
    }

    /// `(int_{x0}^{x1} exp(-(A(s) - A(x0))) ds, A(end) - A(x0), end)`, stopping
    /// early at `end < x1` once the integrand has decayed below `exp(-stop_rise)`.
    fn omega_segment(&self, x0: f64, x1: f64, stop_rise: f64) -> (f64, f64, f64) {
        let panel = 1.0 / 16.0;
        let mut total = 0.0;
        let mut rise = 0.0;
        let mut p = x0;
        while p < x1 && rise < stop_rise {
            let q = (p + panel).min(x1);
            total += self.gl.integrate(p, q, |s| {
                let inner = self.gl_inner.integrate(p, s, |y| self.shape.value(y));
                (-(rise + inner)).exp()
            });
            rise += self.gl.integrate(p, q, |s| self.shape.value(s));
            p = q;
        }
        (total, rise, p)
    }

    fn tail_omega(&self, x: f64) -> f64 {
        let (seg, rise, end) = self.omega_segment(x, f64::INFINITY, TAIL_DECAY);
        // one-term exponential completion of the remaining tail
        seg + (-rise).exp() / self.shape.value(end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSet {
    agents: Vec<UtilitySpec>,
    c: f64,
    exponential: Option<Vec<f64>>,
}

impl AgentSet {
    pub fn new(agents: Vec<UtilitySpec>) -> Result<Self> {
        if agents.is_empty() {
            return Err(ModelError::InvalidParameter(
                "at least one market maker is required".into(),
            ));
        }
        let c = agents.iter().map(|a| a.c_bound).fold(1.0, f64::max);
        let exponential = agents.iter().map(|a| a.exponential_coefficient()).collect();
        Ok(Self {
            agents,
            c,
            exponential,
        })
    }

    pub fn exponential(coefficients: &[f64]) -> Result<Self> {
        Self::new(
            coefficients
                .iter()
                .map(|&a| UtilitySpec::exponential(a))
                .collect::<Result<_>>()?,
        )
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn agents(&self) -> &[UtilitySpec] {
        &self.agents
    }

    pub fn get(&self, m: usize) -> &UtilitySpec {
        &self.agents[m]
    }

    /// Coefficients `(a_m)` when every agent has exponential utility.
    pub fn exponential_coefficients(&self) -> Option<Vec<f64>> {
        self.exponential.clone()
    }

    pub fn exponential_slice(&self) -> Option<&[f64]> {
        self.exponential.as_deref()
    }

    /// Harmonic aggregate `a` with `1/a = sum 1/a_m`, for exponential agents.
    pub fn aggregate_exponential(&self) -> Option<f64> {
        self.exponential
            .as_ref()
            .map(|a| 1.0 / a.iter().map(|v| 1.0 / v).sum::<f64>())
    }
}

/// Grid suprema of one derivative over the nested radii.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeSup {
    pub k: usize,
    pub suprema: [f64; 3],
    pub growth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSmoothness {
    pub index: usize,
    pub declared_order: usize,
    pub order_sufficient: bool,
    /// `sup |a^(k)|`, k = 1..=l
    pub risk_aversion: Vec<DerivativeSup>,
    /// `sup |t^(k)|`, k = 0..=l, for the risk tolerance `t = 1/a`
    pub risk_tolerance: Vec<DerivativeSup>,
    /// `Some(false)` when the family is a known counterexample with unbounded derivatives.
    pub analytic_bounded: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessReport {
    pub l: usize,
    pub radii: [f64; 3],
    pub agents: Vec<AgentSmoothness>,
}

impl SmoothnessReport {
    pub fn growth_flagged(&self) -> bool {
        self.agents
            .iter()
            .any(|a| a.risk_aversion.iter().chain(&a.risk_tolerance).any(|d| d.growth))
    }

    pub fn orders_sufficient(&self) -> bool {
        self.agents.iter().all(|a| a.order_sufficient)
    }

    pub fn pass(&self) -> bool {
        self.orders_sufficient() && !self.growth_flagged()
    }
}

fn nested_suprema<F: Fn(f64) -> Jet>(jet: F, orders: &[usize], reciprocal: bool) -> Vec<[f64; 3]> {
    let mut sups = vec![[0.0; 3]; orders.len()];
    let n_max = (SMOOTHNESS_RADII[2] / SMOOTHNESS_SPACING).round() as i64;
    for i in -n_max..=n_max {
        let x = i as f64 * SMOOTHNESS_SPACING;
        let mut j = jet(x);
        if reciprocal {
            j = j.recip();
        }
        for (s, &k) in sups.iter_mut().zip(orders) {
            let v = j.derivative(k).abs();
            for (r, radius) in SMOOTHNESS_RADII.iter().enumerate() {
                if x.abs() <= *radius + 1e-12 && v > s[r] {
                    s[r] = v;
                }
            }
        }
    }
    sups
}

fn flag_growth(s: &[f64; 3]) -> bool {
    let tol = 1e-6;
    s[2] > s[1] * (1.0 + tol) + 1e-12 || s[1] > s[0] * (1.0 + tol) + 1e-12
}

/// Grid suprema of `|a_m^(k)|`, k = 1..=l, and of the risk-tolerance
/// derivatives `|t_m^(k)|`, k = 0..=l, on the nested radii.
pub fn check_smoothness(agents: &AgentSet, l: usize) -> SmoothnessReport {
    let per_agent = agents
        .agents()
        .iter()
        .enumerate()
        .map(|(index, spec)| {
            let declared = spec.max_derivative_order();
            let order_sufficient = declared >= l + 2;
            let usable = l.min(crate::taylor::JET_LEN - 1);
            let a_orders: Vec<usize> = (1..=usable).collect();
            let t_orders: Vec<usize> = (0..=usable).collect();
            let (ra, rt, analytic) = match spec.family() {
                UtilityFamily::Exponential { a } => (
                    a_orders.iter().map(|_| [0.0; 3]).collect::<Vec<_>>(),
                    t_orders
                        .iter()
                        .map(|&k| if k == 0 { [1.0 / a; 3] } else { [0.0; 3] })
                        .collect::<Vec<_>>(),
                    Some(true),
                ),
                UtilityFamily::RiskAversion(shape) => (
                    nested_suprema(|x| shape.jet(x), &a_orders, false),
                    nested_suprema(|x| shape.jet(x), &t_orders, true),
                    Some(shape.derivatives_bounded()),
                ),
            };
            let wrap = |orders: &[usize], sups: Vec<[f64; 3]>| {
                orders
                    .iter()
                    .zip(sups)
                    .map(|(&k, s)| DerivativeSup {
                        k,
                        growth: flag_growth(&s),
                        suprema: s,
                    })
                    .collect::<Vec<_>>()
            };
            AgentSmoothness {
                index,
                declared_order: declared,
                order_sufficient,
                risk_aversion: wrap(&a_orders, ra),
                risk_tolerance: wrap(&t_orders, rt),
                analytic_bounded: analytic,
            }
        })
        .collect();
    SmoothnessReport {
        l,
        radii: SMOOTHNESS_RADII,
        agents: per_agent,
    }
}
