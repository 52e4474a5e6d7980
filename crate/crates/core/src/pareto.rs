//! The `v`-weighted sup-convolution
//!
//! ```text
//! r(v, x) = max { sum_m v^m u_m(x^m) : x^1 + ... + x^M = x }
//! ```
//!
//! solved through its first-order conditions `v^m u_m'(x^m) = lambda`. The
//! multiplier is found in `log lambda`, where the aggregate allocation
//! `sum_m (u_m')^{-1}(lambda / v^m)` is monotone with slope `-sum_m t_m`
//! bounded by the risk-tolerance bounds. Higher partials follow from implicit
//! differentiation of the first-order conditions.

use crate::error::{ModelError, Result};
use crate::utility::AgentSet;

/// Largest admissible ratio between Pareto weights.
pub const MAX_WEIGHT_RATIO: f64 = 1e12;
const MAX_BRACKET_DOUBLINGS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub allocation: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub v: Vec<f64>,
    pub x: f64,
    pub allocation: Vec<f64>,
    /// `dr/dx`
    pub lambda: f64,
    pub r: f64,
    pub r_v: Vec<f64>,
    pub r_xx: f64,
    pub r_xv: Vec<f64>,
    pub r_vv: Vec<Vec<f64>>,
    pub r_xxx: f64,
    /// `d^3 r / dx^2 dv^m`
    pub r_xxv: Vec<f64>,
}

impl ParetoPoint {
    pub fn r_x(&self) -> f64 {
        self.lambda
    }
}

pub fn check_weights(v: &[f64], m: usize) -> Result<()> {
    if v.len() != m {
        return Err(ModelError::InvalidParameter(format!(
            "expected {m} Pareto weights, got {}",
            v.len()
        )));
    }
    if v.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(ModelError::InvalidParameter(format!(
            "Pareto weights must be positive and finite: {v:?}"
        )));
    }
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), w| (lo.min(*w), hi.max(*w)));
    if hi / lo > MAX_WEIGHT_RATIO {
        return Err(ModelError::DegenerateWeights {
            ratio: hi / lo,
            limit: MAX_WEIGHT_RATIO,
        });
    }
    Ok(())
}

/// Reusable solver state; keeps the last solution as a warm start.
#[derive(Debug, Clone)]
pub(crate) struct ParetoCore {
    pub log_lambda: f64,
    pub alloc: Vec<f64>,
    /// risk tolerances `t_m` at the allocation
    pub tol: Vec<f64>,
    /// `u_m` at the allocation
    pub util: Vec<f64>,
    pub tol_total: f64,
    warm: bool,
}

impl ParetoCore {
    pub fn new(m: usize) -> Self {
        Self {
            log_lambda: 0.0,
            alloc: vec![0.0; m],
            tol: vec![0.0; m],
            util: vec![0.0; m],
            tol_total: 0.0,
            warm: false,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    /// Solves the first-order conditions at `(v, x)` given `log_v = ln v`, then
    /// fills `util`, `tol` and `tol_total`.
    pub fn solve(&mut self, agents: &AgentSet, log_v: &[f64], x: f64) -> Result<()> {
        if let Some(coeffs) = agents.exponential_slice() {
            let agg = agents.aggregate_exponential().unwrap_or(1.0);
            let s: f64 = log_v.iter().zip(coeffs).map(|(lv, a)| lv / a).sum();
            self.log_lambda = agg * (s - x);
            self.tol_total = 0.0;
            for (m, a) in coeffs.iter().enumerate() {
                self.alloc[m] = (log_v[m] - self.log_lambda) / a;
                self.tol[m] = 1.0 / a;
                self.tol_total += self.tol[m];
                // u = -u'/a with u' = lambda / v
                self.util[m] = -(self.log_lambda - log_v[m]).exp() / a;
            }
            self.warm = true;
            return Ok(());
        }
        self.solve_general(agents, log_v, x)?;
        self.tol_total = 0.0;
        for (m, spec) in agents.agents().iter().enumerate() {
            self.tol[m] = 1.0 / spec.risk_aversion_value(self.alloc[m]);
            self.tol_total += self.tol[m];
            self.util[m] = spec.value(self.alloc[m]);
        }
        Ok(())
    }

    fn aggregate(&mut self, agents: &AgentSet, log_v: &[f64], ell: f64) -> Result<(f64, f64)> {
        let mut sum = 0.0;
        let mut tsum = 0.0;
        for (m, spec) in agents.agents().iter().enumerate() {
            let guess = self.warm.then_some(self.alloc[m]);
            let xm = spec.marginal_inverse_log(log_v[m] - ell, guess)?;
            self.alloc[m] = xm;
            sum += xm;
            tsum += 1.0 / spec.cumulative_risk_aversion(xm).1;
        }
        Ok((sum, tsum))
    }

    fn solve_general(&mut self, agents: &AgentSet, log_v: &[f64], x: f64) -> Result<()> {
        let c = agents.c();
        let m = agents.len() as f64;
        let mut ell = if self.warm {
            self.log_lambda
        } else {
            // constant-risk-aversion guess with a_m frozen at x/M
            let mut s = 0.0;
            let mut inv = 0.0;
            for (spec, lv) in agents.agents().iter().zip(log_v) {
                let a = spec.risk_aversion_value(x / m);
                s += lv / a;
                inv += 1.0 / a;
            }
            (s - x) / inv
        };
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut expansions = 0;
        let scale = 1e-14 * (1.0 + x.abs());
        for _ in 0..400 {
            let (sum, tsum) = self.aggregate(agents, log_v, ell)?;
            self.warm = true;
            let f = sum - x;
            if f.abs() <= scale {
                self.log_lambda = ell;
                self.polish(agents, f, tsum);
                return Ok(());
            }
            // the aggregate allocation decreases in log lambda
            if f > 0.0 {
                lo = ell;
            } else {
                hi = ell;
            }
            let mut next = ell + f / tsum;
            if lo.is_finite() && hi.is_finite() {
                if !(next > lo && next < hi) {
                    next = 0.5 * (lo + hi);
                }
            } else {
                // one-sided: the slope bounds limit how far the root can be
                let reach = f.abs() * c / m;
                if (next - ell).abs() > 2.0 * reach {
                    next = ell + 2.0 * reach * f.signum();
                }
                expansions += 1;
                if expansions > MAX_BRACKET_DOUBLINGS {
                    break;
                }
            }
            if (next - ell).abs() <= 4.0 * f64::EPSILON * (1.0 + ell.abs()) {
                self.log_lambda = next;
                let (sum, tsum) = self.aggregate(agents, log_v, next)?;
                self.polish(agents, sum - x, tsum);
                return Ok(());
            }
            ell = next;
        }
        Err(ModelError::NumericFailure(format!(
            "Pareto multiplier search failed at x = {x}"
        )))
    }

    // removes the residual `f` of sum(alloc) - x to first order
    fn polish(&mut self, agents: &AgentSet, f: f64, tsum: f64) {
        if f == 0.0 {
            return;
        }
        self.log_lambda += f / tsum;
        for (m, spec) in agents.agents().iter().enumerate() {
            let t = 1.0 / spec.cumulative_risk_aversion(self.alloc[m]).1;
            self.alloc[m] -= f * t / tsum;
        }
    }

    pub fn to_point(&self, v: &[f64], x: f64, agents: &AgentSet) -> ParetoPoint {
        let m = v.len();
        let lambda = self.lambda();
        let total = self.tol_total;
        let r = v.iter().zip(&self.util).map(|(w, u)| w * u).sum();
        let r_xv = (0..m).map(|i| lambda * self.tol[i] / (v[i] * total)).collect();
        let r_vv = (0..m)
            .map(|i| {
                (0..m)
                    .map(|k| {
                        let delta = if i == k { 1.0 } else { 0.0 };
                        lambda * self.tol[i] * (delta - self.tol[k] / total) / (v[i] * v[k])
                    })
                    .collect()
            })
            .collect();
        // t'_m = -a'_m / a_m^2
        let dtol: Vec<f64> = agents
            .agents()
            .iter()
            .zip(&self.alloc)
            .map(|(spec, xm)| {
                let (a, da) = spec.risk_aversion_and_slope(*xm);
                -da / (a * a)
            })
            .collect();
        let s: f64 = dtol.iter().zip(&self.tol).map(|(d, t)| d * t).sum();
        let t2 = total * total;
        let r_xxx = lambda / t2 + lambda * s / (t2 * total);
        let r_xxv = (0..m)
            .map(|i| {
                let t = self.tol[i];
                (-lambda * t + lambda * t * (dtol[i] - s / total)) / (v[i] * t2)
            })
            .collect();
        ParetoPoint {
            v: v.to_vec(),
            x,
            allocation: self.alloc.clone(),
            lambda,
            r,
            r_v: self.util.clone(),
            r_xx: -lambda / total,
            r_xv,
            r_vv,
            r_xxx,
            r_xxv,
        }
    }
}

/// The maximizer of the sup-convolution and its multiplier `lambda = dr/dx`.
pub fn solve_allocation(agents: &AgentSet, v: &[f64], x: f64) -> Result<Allocation> {
    check_weights(v, agents.len())?;
    let log_v: Vec<f64> = v.iter().map(|w| w.ln()).collect();
    let mut core = ParetoCore::new(agents.len());
    core.solve(agents, &log_v, x)?;
    Ok(Allocation {
        allocation: core.alloc.clone(),
        lambda: core.lambda(),
    })
}

/// `r(v, x)` with partial derivatives up to the third order terms used by the field engine.
pub fn r_eval(agents: &AgentSet, v: &[f64], x: f64) -> Result<ParetoPoint> {
    check_weights(v, agents.len())?;
    let log_v: Vec<f64> = v.iter().map(|w| w.ln()).collect();
    let mut core = ParetoCore::new(agents.len());
    core.solve(agents, &log_v, x)?;
    Ok(core.to_point(v, x, agents))
}

/// Harmonic aggregate `a` of exponential coefficients: `1/a = sum_m 1/a_m`.
pub fn harmonic_aggregate(a: &[f64]) -> f64 {
    1.0 / a.iter().map(|v| 1.0 / v).sum::<f64>()
}

/// Closed form for exponential utilities `u_m(x) = -exp(-a_m x)/a_m`:
/// `r(v, x) = -(1/a) exp(-a x) prod_m (v^m)^(a/a_m)`.
pub fn exponential_closed_form(a: &[f64], v: &[f64], x: f64) -> ParetoPoint {
    let agg = harmonic_aggregate(a);
    let m = a.len();
    let share: Vec<f64> = a.iter().map(|am| agg / am).collect();
    let log_prod: f64 = v.iter().zip(&share).map(|(w, s)| s * w.ln()).sum();
    let r = -(-agg * x + log_prod).exp() / agg;
    let lambda = -agg * r;
    let allocation = (0..m)
        .map(|i| (v[i].ln() - lambda.ln()) / a[i])
        .collect();
    let r_v = (0..m).map(|i| share[i] * r / v[i]).collect();
    let r_xv = (0..m).map(|i| -agg * share[i] * r / v[i]).collect();
    let r_vv = (0..m)
        .map(|i| {
            (0..m)
                .map(|k| {
                    let diag = if i == k { share[i] * r / (v[i] * v[i]) } else { 0.0 };
                    share[i] * share[k] * r / (v[i] * v[k]) - diag
                })
                .collect()
        })
        .collect();
    let r_xxv = (0..m).map(|i| agg * agg * share[i] * r / v[i]).collect();
    ParetoPoint {
        v: v.to_vec(),
        x,
        allocation,
        lambda,
        r,
        r_v,
        r_xx: agg * agg * r,
        r_xv,
        r_vv,
        r_xxx: -agg * agg * agg * r,
        r_xxv,
    }
}

/// A two-sided inequality `lower <= value <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: &'static str,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

impl BoundCheck {
    /// Holds up to a relative slack `rel_tol`; equality cases occur at the extremes of `c`.
    pub fn holds(&self, rel_tol: f64) -> bool {
        let slack = rel_tol * self.value.abs().max(self.lower.abs()).max(self.upper.abs());
        self.lower - slack <= self.value && self.value <= self.upper + slack
    }
}

/// The pointwise inequalities implied by the risk-aversion bound `c`:
/// `r_x/c <= -M r_xx <= c r_x`, `-r/c <= M r_x <= -c r`,
/// `r_x/c <= -v^m r_v^m <= c r_x` and `1/(M c^2) <= v^m r_xv^m / r_x <= c^2/M`.
pub fn structural_bounds(p: &ParetoPoint, c: f64) -> Vec<BoundCheck> {
    let m = p.v.len() as f64;
    let rx = p.lambda;
    let mut out = vec![
        BoundCheck {
            name: "concavity",
            lower: rx / c,
            value: -m * p.r_xx,
            upper: c * rx,
        },
        BoundCheck {
            name: "level",
            lower: -p.r / c,
            value: m * rx,
            upper: -c * p.r,
        },
    ];
    for k in 0..p.v.len() {
        out.push(BoundCheck {
            name: "weight",
            lower: rx / c,
            value: -p.v[k] * p.r_v[k],
            upper: c * rx,
        });
        out.push(BoundCheck {
            name: "mixed",
            lower: 1.0 / (m * c * c),
            value: p.v[k] * p.r_xv[k] / rx,
            upper: c * c / m,
        });
    }
    out
}

/// Growth of the marginal: with `s = r_x(v, x + y) / r_x(v, x)`,
/// `exp(-y+ c/M + y-/(cM)) <= s <= exp(-y+/(cM) + y- c/M)`.
pub fn growth_bound(agents: &AgentSet, v: &[f64], x: f64, y: f64) -> Result<BoundCheck> {
    let c = agents.c();
    let m = agents.len() as f64;
    let base = solve_allocation(agents, v, x)?.lambda;
    let moved = solve_allocation(agents, v, x + y)?.lambda;
    let (pos, neg) = (y.max(0.0), (-y).max(0.0));
    Ok(BoundCheck {
        name: "growth",
        lower: (-pos * c / m + neg / (c * m)).exp(),
        value: moved / base,
        upper: (-pos / (c * m) + neg * c / m).exp(),
    })
}
