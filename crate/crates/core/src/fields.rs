//! Stochastic fields of the desk model evaluated by Gauss-Hermite quadrature
//! over the terminal Brownian state, the Clark-Ocone integrand, and the
//! conjugate inversion that turns utility levels back into weights and cash.

use nalgebra::{DMatrix, DVector};

use crate::error::{ModelError, Result};
use crate::market::MarketModel;
use crate::pareto::{check_weights, ParetoCore};
use crate::quadrature::QuadratureRule;
use crate::utility::AgentSet;

pub const DEFAULT_NODES: usize = 64;
pub const ADAPTIVE_TOL: f64 = 1e-9;
pub const CONJUGATE_MAX_ITER: usize = 100;
/// Newton stops once every log-residual is below this.
pub const CONJUGATE_TOL: f64 = 1e-12;
// accepted when the line search stalls at roundoff level
const CONJUGATE_STALL_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 40;
const MAX_LOG_STEP: f64 = 4.0;

/// `F` and its partials in `(v, x)` up to second order.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValues {
    pub f: f64,
    pub f_x: f64,
    pub f_v: Vec<f64>,
    pub f_xx: f64,
    pub f_xv: Vec<f64>,
    pub f_vv: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldPoint {
    pub t: f64,
    pub z: f64,
    pub v: Vec<f64>,
    pub x: f64,
    pub q: Vec<f64>,
    pub values: FieldValues,
    pub h: f64,
    pub h_v: Vec<f64>,
    /// `K(u, q)` at `u = F_v`, when requested.
    pub k: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePoint {
    pub t: f64,
    pub z: f64,
    pub u: Vec<f64>,
    pub y: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub x: f64,
    /// `G(u, y, q) = x y`
    pub g: f64,
    pub iterations: usize,
    /// max-norm of the log-residuals at the solution
    pub residual: f64,
}

impl ConjugatePoint {
    /// `dG/du = v`
    pub fn grad_u(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Order {
    Value,
    First,
    Second,
}

#[derive(Debug, Clone)]
struct Sums {
    f: f64,
    fx: f64,
    fv: Vec<f64>,
    fxx: f64,
    fxv: Vec<f64>,
    fvv: Vec<f64>,
    h: f64,
    hv: Vec<f64>,
}

impl Sums {
    fn new(m: usize) -> Self {
        Self {
            f: 0.0,
            fx: 0.0,
            fv: vec![0.0; m],
            fxx: 0.0,
            fxv: vec![0.0; m],
            fvv: vec![0.0; m * m],
            h: 0.0,
            hv: vec![0.0; m],
        }
    }

    fn values(&self) -> FieldValues {
        let m = self.fv.len();
        FieldValues {
            f: self.f,
            f_x: self.fx,
            f_v: self.fv.clone(),
            f_xx: self.fxx,
            f_xv: self.fxv.clone(),
            f_vv: (0..m).map(|i| self.fvv[i * m..(i + 1) * m].to_vec()).collect(),
        }
    }
}

/// Immutable quadrature engine; every method is a pure function of its inputs.
#[derive(Debug, Clone)]
pub struct FieldEngine {
    agents: AgentSet,
    model: MarketModel,
    /// Rules of increasing size; more than one enables adaptive doubling.
    rules: Vec<QuadratureRule>,
    tol: f64,
    newton_tol: f64,
    newton_max_iter: usize,
}

impl FieldEngine {
    pub fn new(agents: AgentSet, model: MarketModel, nodes: usize) -> Result<Self> {
        Ok(Self {
            agents,
            model,
            rules: vec![QuadratureRule::gauss_hermite(nodes)?],
            tol: ADAPTIVE_TOL,
            newton_tol: CONJUGATE_TOL,
            newton_max_iter: CONJUGATE_MAX_ITER,
        })
    }

    /// Doubles the node count from `nodes` up to `max_nodes` until the relative
    /// change in `F` is at most `tol`.
    pub fn adaptive(
        agents: AgentSet,
        model: MarketModel,
        nodes: usize,
        max_nodes: usize,
        tol: f64,
    ) -> Result<Self> {
        let mut rules = vec![QuadratureRule::gauss_hermite(nodes)?];
        let mut n = nodes * 2;
        while n <= max_nodes {
            rules.push(QuadratureRule::gauss_hermite(n)?);
            n *= 2;
        }
        Ok(Self {
            agents,
            model,
            rules,
            tol,
            newton_tol: CONJUGATE_TOL,
            newton_max_iter: CONJUGATE_MAX_ITER,
        })
    }

    /// Overrides the conjugate Newton tolerance on the log-residuals and its iteration cap.
    pub fn with_newton(mut self, tol: f64, max_iter: usize) -> Result<Self> {
        if !(tol > 0.0) || max_iter == 0 {
            return Err(ModelError::InvalidParameter(
                "Newton tolerance must be positive and the iteration cap nonzero".into(),
            ));
        }
        self.newton_tol = tol;
        self.newton_max_iter = max_iter;
        Ok(self)
    }

    pub fn agents(&self) -> &AgentSet {
        &self.agents
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn nodes(&self) -> usize {
        self.rules[0].len()
    }

    fn check_inputs(&self, v: &[f64], q: &[f64]) -> Result<()> {
        check_weights(v, self.agents.len())?;
        if q.len() != self.model.n_stocks() {
            return Err(ModelError::InvalidParameter(format!(
                "position has {} entries but the model has {} stocks",
                q.len(),
                self.model.n_stocks()
            )));
        }
        Ok(())
    }

    fn sweep(
        &self,
        t: f64,
        z: f64,
        v: &[f64],
        log_v: &[f64],
        x: f64,
        q: &[f64],
        order: Order,
        integrand: bool,
    ) -> Result<Sums> {
        let mut last: Option<Sums> = None;
        for rule in &self.rules {
            let sums = self.sweep_rule(rule, t, z, v, log_v, x, q, order, integrand)?;
            if t >= 1.0 {
                return Ok(sums);
            }
            if let Some(prev) = &last {
                if (sums.f - prev.f).abs() <= self.tol * sums.f.abs() {
                    return Ok(sums);
                }
            }
            last = Some(sums);
        }
        Ok(last.expect("at least one rule"))
    }

    #[allow(clippy::too_many_arguments)]
    fn sweep_rule(
        &self,
        rule: &QuadratureRule,
        t: f64,
        z: f64,
        v: &[f64],
        log_v: &[f64],
        x: f64,
        q: &[f64],
        order: Order,
        integrand: bool,
    ) -> Result<Sums> {
        let m = v.len();
        let mut sums = Sums::new(m);
        let mut core = ParetoCore::new(m);
        let terminal = t >= 1.0;
        let s = if terminal { 0.0 } else { (1.0 - t).sqrt() };
        let (nodes, weights): (&[f64], &[f64]) = if terminal {
            (&[0.0], &[1.0])
        } else {
            (&rule.nodes, &rule.weights)
        };
        for (xi, w) in nodes.iter().zip(weights) {
            let zi = z + s * xi;
            let sigma = self.model.sigma_total(x, q, zi);
            core.solve(&self.agents, log_v, sigma)?;
            let lambda = core.lambda();
            let total = core.tol_total;
            for (k, vk) in v.iter().enumerate() {
                sums.f += w * vk * core.util[k];
            }
            if order == Order::Value && !integrand {
                continue;
            }
            sums.fx += w * lambda;
            for k in 0..m {
                sums.fv[k] += w * core.util[k];
            }
            let exposure = if integrand {
                let e = self.model.exposure(q, zi)?;
                sums.h += w * lambda * e;
                e
            } else {
                0.0
            };
            if order == Order::Second || integrand {
                for i in 0..m {
                    let rxv = lambda * core.tol[i] / (v[i] * total);
                    sums.fxv[i] += w * rxv;
                    sums.hv[i] += w * rxv * exposure;
                }
            }
            if order == Order::Second {
                sums.fxx -= w * lambda / total;
                for i in 0..m {
                    for k in 0..m {
                        let delta = if i == k { 1.0 } else { 0.0 };
                        sums.fvv[i * m + k] +=
                            w * lambda * core.tol[i] * (delta - core.tol[k] / total) / (v[i] * v[k]);
                    }
                }
            }
        }
        let finite = sums.f.is_finite()
            && sums.fx.is_finite()
            && sums.fxx.is_finite()
            && sums.h.is_finite()
            && sums.fv.iter().chain(&sums.fxv).chain(&sums.fvv).chain(&sums.hv).all(|v| v.is_finite());
        let signs = order == Order::Value && !integrand
            || sums.fx > 0.0 && sums.fv.iter().all(|u| *u < 0.0);
        let ok = finite && sums.f < 0.0 && signs;
        if !ok {
            return Err(ModelError::Range {
                t,
                z,
                detail: format!(
                    "quadrature of r left the representable range (F = {:e}, F_x = {:e})",
                    sums.f, sums.fx
                ),
            });
        }
        Ok(sums)
    }

    /// `F_t(v, x, q)` at `B_t = z` with partials up to `order` (0, 1 or 2);
    /// partials above `order` are returned as zeros.
    pub fn eval_f(&self, t: f64, z: f64, v: &[f64], x: f64, q: &[f64], order: usize) -> Result<FieldValues> {
        self.check_inputs(v, q)?;
        let order = match order {
            0 => Order::Value,
            1 => Order::First,
            2 => Order::Second,
            other => {
                return Err(ModelError::UnsupportedOrder {
                    requested: other,
                    max: 2,
                })
            }
        };
        let log_v: Vec<f64> = v.iter().map(|w| w.ln()).collect();
        Ok(self.sweep(t, z, v, &log_v, x, q, order, false)?.values())
    }

    /// Clark-Ocone integrand `H` and its `v`-gradient.
    pub fn eval_h(&self, t: f64, z: f64, v: &[f64], x: f64, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(v, q)?;
        let log_v: Vec<f64> = v.iter().map(|w| w.ln()).collect();
        let sums = self.sweep(t, z, v, &log_v, x, q, Order::First, true)?;
        Ok((sums.h, sums.hv))
    }

    /// `F` with second partials together with `H` and `H_v` from one sweep.
    pub fn eval_point(&self, t: f64, z: f64, v: &[f64], x: f64, q: &[f64]) -> Result<FieldPoint> {
        self.check_inputs(v, q)?;
        let log_v: Vec<f64> = v.iter().map(|w| w.ln()).collect();
        let sums = self.sweep(t, z, v, &log_v, x, q, Order::Second, true)?;
        Ok(FieldPoint {
            t,
            z,
            v: v.to_vec(),
            x,
            q: q.to_vec(),
            values: sums.values(),
            h: sums.h,
            h_v: sums.hv,
            k: None,
        })
    }

    /// `v / F_x(v, x, q)`, the representative of `v` on the slice `F_x = 1`.
    pub fn normalize_weights(&self, t: f64, z: f64, v: &[f64], x: f64, q: &[f64]) -> Result<Vec<f64>> {
        let fx = self.eval_f(t, z, v, x, q, 1)?.f_x;
        Ok(v.iter().map(|w| w / fx).collect())
    }

    // log-residuals and their Jacobian in (log v, x)
    fn newton_system(
        &self,
        t: f64,
        z: f64,
        log_v: &[f64],
        x: f64,
        q: &[f64],
        log_neg_u: &[f64],
        log_y: f64,
        integrand: bool,
    ) -> Result<(DVector<f64>, DMatrix<f64>, Sums)> {
        let m = log_v.len();
        let v: Vec<f64> = log_v.iter().map(|l| l.exp()).collect();
        let s = self.sweep(t, z, &v, log_v, x, q, Order::Second, integrand)?;
        let mut res = DVector::zeros(m + 1);
        let mut jac = DMatrix::zeros(m + 1, m + 1);
        for i in 0..m {
            res[i] = (-s.fv[i]).ln() - log_neg_u[i];
            for k in 0..m {
                jac[(i, k)] = s.fvv[i * m + k] * v[k] / s.fv[i];
            }
            jac[(i, m)] = s.fxv[i] / s.fv[i];
            jac[(m, i)] = s.fxv[i] * v[i] / s.fx;
        }
        res[m] = s.fx.ln() - log_y;
        jac[(m, m)] = s.fxx / s.fx;
        Ok((res, jac, s))
    }

    /// Jacobian of the conjugate system at `(v, x)` in `(log v, x)` coordinates.
    pub fn conjugate_jacobian(&self, t: f64, z: f64, v: &[f64], x: f64, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_inputs(v, q)?;
        let log_v: Vec<f64> = v.iter().map(|w| w.ln()).collect();
        let zeros = vec![0.0; v.len()];
        Ok(self.newton_system(t, z, &log_v, x, q, &zeros, 0.0, false)?.1)
    }

    fn initial_guess(&self, t: f64, z: f64, u: &[f64], y: f64, q: &[f64]) -> (Vec<f64>, f64) {
        // exact for exponential agents: F_v^m = -F_x / (a_m v^m)
        let log_v: Vec<f64> = self
            .agents
            .agents()
            .iter()
            .zip(u)
            .map(|(spec, um)| (y / (spec.risk_aversion_value(0.0) * -um)).ln())
            .collect();
        let v: Vec<f64> = log_v.iter().map(|l| l.exp()).collect();
        let log_y = y.ln();
        let mut x = 0.0;
        for _ in 0..self.newton_max_iter {
            let Ok(s) = self.sweep(t, z, &v, &log_v, x, q, Order::Second, false) else {
                break;
            };
            let r = s.fx.ln() - log_y;
            if r.abs() <= self.newton_tol {
                break;
            }
            let step = (-r * s.fx / s.fxx).clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
            x += step;
        }
        (log_v, x)
    }

    fn solve_inner(
        &self,
        t: f64,
        z: f64,
        u: &[f64],
        y: f64,
        q: &[f64],
        warm: Option<(&[f64], f64)>,
        integrand: bool,
    ) -> Result<(ConjugatePoint, Sums)> {
        let m = self.agents.len();
        if u.len() != m || u.iter().any(|ui| !(*ui < 0.0) || !ui.is_finite()) {
            return Err(ModelError::InvalidParameter(
                "conjugate point needs one negative utility level per agent".into(),
            ));
        }
        if !(y > 0.0 && y.is_finite()) {
            return Err(ModelError::InvalidParameter(format!("y must be positive, got {y}")));
        }
        if q.len() != self.model.n_stocks() {
            return Err(ModelError::InvalidParameter("position has the wrong dimension".into()));
        }
        let log_neg_u: Vec<f64> = u.iter().map(|ui| (-ui).ln()).collect();
        let log_y = y.ln();
        let (mut log_v, mut x) = match warm {
            Some((v, x)) if v.len() == m && v.iter().all(|w| *w > 0.0) => {
                (v.iter().map(|w| w.ln()).collect::<Vec<_>>(), x)
            }
            _ => self.initial_guess(t, z, u, y, q),
        };
        let infeasible = |iterations: usize, residual: f64| ModelError::ConjugateInfeasible {
            iterations,
            residual,
        };
        let (mut res, mut jac, mut sums) = self
            .newton_system(t, z, &log_v, x, q, &log_neg_u, log_y, integrand)
            .map_err(|_| infeasible(0, f64::INFINITY))?;
        let mut norm = res.norm();
        for it in 0..=self.newton_max_iter {
            let max_res = res.amax();
            if max_res <= self.newton_tol {
                return Ok((self.conjugate_point(t, z, u, y, q, &log_v, x, it, max_res), sums));
            }
            if it == self.newton_max_iter {
                return Err(infeasible(it, max_res));
            }
            let Some(mut step) = jac.clone().lu().solve(&(-&res)) else {
                return Err(infeasible(it, max_res));
            };
            let biggest = step.amax();
            if biggest > MAX_LOG_STEP {
                step *= MAX_LOG_STEP / biggest;
            }
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let trial_v: Vec<f64> = (0..m).map(|i| log_v[i] + scale * step[i]).collect();
                let trial_x = x + scale * step[m];
                if let Ok((r, j, s)) =
                    self.newton_system(t, z, &trial_v, trial_x, q, &log_neg_u, log_y, integrand)
                {
                    let n = r.norm();
                    if n.is_finite() && n < norm {
                        log_v = trial_v;
                        x = trial_x;
                        res = r;
                        jac = j;
                        sums = s;
                        norm = n;
                        accepted = true;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                if max_res <= CONJUGATE_STALL_TOL.max(self.newton_tol) {
                    return Ok((self.conjugate_point(t, z, u, y, q, &log_v, x, it, max_res), sums));
                }
                return Err(infeasible(it, max_res));
            }
        }
        unreachable!("the loop returns on its last iteration")
    }

    #[allow(clippy::too_many_arguments)]
    fn conjugate_point(
        &self,
        t: f64,
        z: f64,
        u: &[f64],
        y: f64,
        q: &[f64],
        log_v: &[f64],
        x: f64,
        iterations: usize,
        residual: f64,
    ) -> ConjugatePoint {
        ConjugatePoint {
            t,
            z,
            u: u.to_vec(),
            y,
            q: q.to_vec(),
            v: log_v.iter().map(|l| l.exp()).collect(),
            x,
            g: x * y,
            iterations,
            residual,
        }
    }

    /// Solves `F_v(v, x, q) = u`, `F_x(v, x, q) = y` for `(v, x)`.
    /// `warm` is a previous solution `(v, x)` used as the starting point.
    pub fn solve_conjugate(
        &self,
        t: f64,
        z: f64,
        u: &[f64],
        y: f64,
        q: &[f64],
        warm: Option<(&[f64], f64)>,
    ) -> Result<ConjugatePoint> {
        Ok(self.solve_inner(t, z, u, y, q, warm, false)?.0)
    }

    /// `K(u, q) = H_v(dG/du(u, 1, q), G(u, 1, q), q)` with the conjugate point it used.
    pub fn eval_k(
        &self,
        t: f64,
        z: f64,
        u: &[f64],
        q: &[f64],
        warm: Option<(&[f64], f64)>,
    ) -> Result<(Vec<f64>, ConjugatePoint)> {
        let (point, sums) = self.solve_inner(t, z, u, 1.0, q, warm, true)?;
        Ok((sums.hv, point))
    }

    /// `eval_point` plus `K` at `u = F_v(v, x, q)`.
    pub fn eval_point_with_k(&self, t: f64, z: f64, v: &[f64], x: f64, q: &[f64]) -> Result<FieldPoint> {
        let mut point = self.eval_point(t, z, v, x, q)?;
        let fx = point.values.f_x;
        let warm: Vec<f64> = v.iter().map(|w| w / fx).collect();
        let (k, _) = self.eval_k(t, z, &point.values.f_v, q, Some((&warm, x)))?;
        point.k = Some(k);
        Ok(point)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{NamedFunction, PayoffSpec};
    use crate::utility::{build_from_risk_aversion, RiskAversionShape};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn linear_model(sigma0: f64) -> MarketModel {
        MarketModel::new(PayoffSpec::linear(0.0, sigma0), vec![PayoffSpec::linear(0.0, 1.0)]).unwrap()
    }

    fn tanh_agents() -> AgentSet {
        let a = build_from_risk_aversion(
            RiskAversionShape::Tanh {
                level: 2.0,
                amplitude: 0.5,
                rate: 1.0,
            },
            2.5,
            4,
        )
        .unwrap();
        let b = build_from_risk_aversion(
            RiskAversionShape::Tanh {
                level: 1.0,
                amplitude: -0.3,
                rate: 2.0,
            },
            2.5,
            4,
        )
        .unwrap();
        AgentSet::new(vec![a, b]).unwrap()
    }

    fn nonlinear_model() -> MarketModel {
        MarketModel::new(
            PayoffSpec::Named {
                function: NamedFunction::Tanh,
                amplitude: 0.6,
                rate: 1.0,
            },
            vec![PayoffSpec::Named {
                function: NamedFunction::Sin,
                amplitude: 1.0,
                rate: 0.8,
            }],
        )
        .unwrap()
    }

    #[test]
    fn exponential_factorization() {
        let (sigma0, q) = (0.3, 0.7);
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), linear_model(sigma0), 64).unwrap();
        let (a, k): (f64, f64) = (1.0, sigma0 + q);
        for (t, z) in [(0.0, 0.0), (0.3, -0.8), (0.9, 1.4)] {
            let v = [0.7, 1.3];
            let x = 0.4;
            // r(v, x) = -(1/a) e^{-a x} prod v^{a/a_m}
            let r: f64 = -(-a * x).exp() * (0.7f64 * 1.3).sqrt() / a;
            let tilde = (-a * k * z + a * a * k * k * (1.0 - t) / 2.0).exp();
            let p = engine.eval_point(t, z, &v, x, &[q]).unwrap();
            assert!(rel(p.values.f, r * tilde) < 1e-8);
            assert!(rel(p.h, -a * k * r * tilde) < 1e-8);
            for m in 0..2 {
                assert!(rel(p.h_v[m], -a * k * p.values.f_v[m]) < 1e-8);
            }
            assert!(rel(p.values.f_x, -a * p.values.f) < 1e-10);
        }
    }

    #[test]
    fn deterministic_payoffs() {
        let model = MarketModel::new(PayoffSpec::constant(0.5), vec![PayoffSpec::zero()]).unwrap();
        let agents = tanh_agents();
        let engine = FieldEngine::new(agents.clone(), model, 32).unwrap();
        let r = crate::pareto::r_eval(&agents, &[1.0, 2.0], 1.5).unwrap();
        for (t, z) in [(0.0, 0.0), (0.5, 3.0), (1.0, -2.0)] {
            let p = engine.eval_point(t, z, &[1.0, 2.0], 1.0, &[0.4]).unwrap();
            assert!(rel(p.values.f, r.r) < 1e-12);
            assert_eq!(p.h, 0.0);
            assert!(p.h_v.iter().all(|h| *h == 0.0));
        }
    }

    #[test]
    fn terminal_condition() {
        let agents = tanh_agents();
        let model = nonlinear_model();
        let engine = FieldEngine::new(agents.clone(), model.clone(), 64).unwrap();
        let sigma = model.sigma_total(0.2, &[0.5], 0.9);
        let r = crate::pareto::r_eval(&agents, &[1.0, 1.5], sigma).unwrap();
        let f = engine.eval_f(1.0, 0.9, &[1.0, 1.5], 0.2, &[0.5], 0).unwrap();
        assert!(rel(f.f, r.r) < 1e-13);
        let near = engine.eval_f(1.0 - 1e-12, 0.9, &[1.0, 1.5], 0.2, &[0.5], 0).unwrap();
        assert!(rel(near.f, r.r) < 1e-6);
    }

    #[test]
    fn homogeneity_and_euler_identity() {
        let engine = FieldEngine::new(tanh_agents(), nonlinear_model(), 64).unwrap();
        let (v, x, q) = ([0.8, 1.7], -0.3, [1.2]);
        let p = engine.eval_point(0.4, 0.5, &v, x, &q).unwrap();
        let euler: f64 = v.iter().zip(&p.values.f_v).map(|(a, b)| a * b).sum();
        assert!(rel(euler, p.values.f) < 1e-10);
        assert!(p.values.f < 0.0 && p.values.f_x > 0.0 && p.values.f_xx < 0.0);
        for b in [0.5, 2.0] {
            let scaled = [v[0] * b, v[1] * b];
            let s = engine.eval_point(0.4, 0.5, &scaled, x, &q).unwrap();
            assert!(rel(s.values.f, b * p.values.f) < 1e-10);
            assert!(rel(s.h, b * p.h) < 1e-10);
            for m in 0..2 {
                assert!(rel(s.values.f_v[m], p.values.f_v[m]) < 1e-10);
            }
        }
    }

    #[test]
    fn integrand_is_spatial_derivative() {
        let engine = FieldEngine::new(tanh_agents(), nonlinear_model(), 64).unwrap();
        let (v, x, q) = ([0.8, 1.7], 0.2, [0.6]);
        let (h, h_v) = engine.eval_h(0.3, 0.1, &v, x, &q).unwrap();
        let d = 1e-5;
        let up = engine.eval_f(0.3, 0.1 + d, &v, x, &q, 1).unwrap();
        let dn = engine.eval_f(0.3, 0.1 - d, &v, x, &q, 1).unwrap();
        assert!(rel(h, (up.f - dn.f) / (2.0 * d)) < 1e-7);
        for m in 0..2 {
            assert!(rel(h_v[m], (up.f_v[m] - dn.f_v[m]) / (2.0 * d)) < 1e-6);
        }
    }

    #[test]
    fn second_partials_match_finite_differences() {
        let engine = FieldEngine::new(tanh_agents(), nonlinear_model(), 64).unwrap();
        let (v, x, q) = ([0.8, 1.7], 0.2, [0.6]);
        let p = engine.eval_f(0.3, 0.1, &v, x, &q, 2).unwrap();
        let d = 1e-5;
        let xp = engine.eval_f(0.3, 0.1, &v, x + d, &q, 1).unwrap();
        let xm = engine.eval_f(0.3, 0.1, &v, x - d, &q, 1).unwrap();
        assert!(rel(p.f_xx, (xp.f_x - xm.f_x) / (2.0 * d)) < 1e-6);
        for m in 0..2 {
            assert!(rel(p.f_xv[m], (xp.f_v[m] - xm.f_v[m]) / (2.0 * d)) < 1e-6);
            let mut vp = v;
            let mut vm = v;
            vp[m] += d;
            vm[m] -= d;
            let a = engine.eval_f(0.3, 0.1, &vp, x, &q, 1).unwrap();
            let b = engine.eval_f(0.3, 0.1, &vm, x, &q, 1).unwrap();
            for i in 0..2 {
                let fd = (a.f_v[i] - b.f_v[i]) / (2.0 * d);
                assert!((p.f_vv[i][m] - fd).abs() < 1e-6 * p.f_vv[i][i].abs());
            }
        }
        assert!(engine.eval_f(0.3, 0.1, &v, x, &q, 3).is_err());
    }

    #[test]
    fn tower_property() {
        let engine = FieldEngine::new(tanh_agents(), nonlinear_model(), 64).unwrap();
        let (v, x, q) = ([0.8, 1.7], 0.2, [0.6]);
        let (t, tp, z) = (0.2, 0.6, -0.4);
        let rule = QuadratureRule::gauss_hermite(64).unwrap();
        let mut avg = 0.0;
        for (xi, w) in rule.nodes.iter().zip(&rule.weights) {
            avg += w * engine.eval_f(tp, z + (tp - t).sqrt() * xi, &v, x, &q, 0).unwrap().f;
        }
        let direct = engine.eval_f(t, z, &v, x, &q, 0).unwrap().f;
        assert!(rel(avg, direct) < 1e-7);
    }

    #[test]
    fn normalization() {
        let engine = FieldEngine::new(tanh_agents(), nonlinear_model(), 64).unwrap();
        let (v, x, q) = ([0.8, 1.7], 0.2, [0.6]);
        let n1 = engine.normalize_weights(0.5, 0.3, &v, x, &q).unwrap();
        let fx = engine.eval_f(0.5, 0.3, &n1, x, &q, 1).unwrap().f_x;
        assert!(rel(fx, 1.0) < 1e-10);
        let n2 = engine.normalize_weights(0.5, 0.3, &n1, x, &q).unwrap();
        for m in 0..2 {
            assert!(rel(n2[m], n1[m]) < 1e-12);
        }
        let expo = FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), linear_model(0.3), 64).unwrap();
        let f = expo.eval_f(0.5, 0.3, &v, x, &q, 0).unwrap().f;
        let n = expo.normalize_weights(0.5, 0.3, &v, x, &q).unwrap();
        for m in 0..2 {
            assert!(rel(n[m], v[m] / (-f)) < 1e-10);
        }
    }

    #[test]
    fn conjugate_terminal_example() {
        let model = MarketModel::new(PayoffSpec::zero(), vec![PayoffSpec::zero()]).unwrap();
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), model, 16).unwrap();
        let c = engine.solve_conjugate(1.0, 0.0, &[-1.0, -1.0], 1.0, &[0.0], None).unwrap();
        for m in 0..2 {
            assert!(rel(c.v[m], 0.5) < 1e-10);
        }
        let ln2 = 2f64.ln();
        assert!(rel(c.x, -ln2) < 1e-10);
        assert!(rel(c.g, -ln2) < 1e-10);
        // doubling y doubles v; x solves e^{-x}/2 * 2 = 2
        let d = engine.solve_conjugate(1.0, 0.0, &[-1.0, -1.0], 2.0, &[0.0], None).unwrap();
        for m in 0..2 {
            assert!(rel(d.v[m], 1.0) < 1e-10);
        }
        assert!(rel(d.x, -ln2) < 1e-10);
        assert!(rel(d.g, 2.0 * c.g) < 1e-10);
    }

    #[test]
    fn conjugate_round_trip_general() {
        let engine = FieldEngine::new(tanh_agents(), nonlinear_model(), 64).unwrap();
        let (v0, x0, q) = ([0.8, 1.7], 0.2, [0.6]);
        for (t, z) in [(0.0, 0.0), (0.5, 0.7), (0.9, -1.1)] {
            let f = engine.eval_f(t, z, &v0, x0, &q, 1).unwrap();
            let c = engine.solve_conjugate(t, z, &f.f_v, f.f_x, &q, None).unwrap();
            for m in 0..2 {
                assert!(rel(c.v[m], v0[m]) < 1e-8, "{t} {z} {:?}", c.v);
            }
            assert!((c.x - x0).abs() < 1e-8);
            let back = engine.eval_f(t, z, &c.v, c.x, &q, 1).unwrap();
            for m in 0..2 {
                assert!(rel(back.f_v[m], f.f_v[m]) < 1e-9);
            }
            assert!(rel(back.f_x, f.f_x) < 1e-9);
        }
    }

    #[test]
    fn conjugate_rejects_bad_inputs_and_unreachable_levels() {
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), linear_model(0.3), 16).unwrap();
        assert!(engine.solve_conjugate(0.0, 0.0, &[-1.0, 1.0], 1.0, &[0.0], None).is_err());
        assert!(engine.solve_conjugate(0.0, 0.0, &[-1.0, -1.0], -1.0, &[0.0], None).is_err());
        // u^m beyond the representable range of F_v
        let err = engine
            .solve_conjugate(0.0, 0.0, &[-1e-300, -1e300], 1.0, &[0.0], None)
            .unwrap_err();
        assert!(matches!(err, ModelError::ConjugateInfeasible { .. }));
    }

    #[test]
    fn k_closed_form_and_hedged_book() {
        let sigma0 = 0.3;
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), linear_model(sigma0), 64).unwrap();
        let u = [-0.4, -0.9];
        for q in [0.7, -1.5] {
            let (k, c) = engine.eval_k(0.3, 0.2, &u, &[q], None).unwrap();
            assert!((c.y - 1.0).abs() == 0.0);
            for m in 0..2 {
                assert!(rel(k[m], -(sigma0 + q) * u[m]) < 1e-8);
            }
        }
        let (k, _) = engine.eval_k(0.3, 0.2, &u, &[-sigma0], None).unwrap();
        assert!(k.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn jacobian_is_well_conditioned() {
        let engine = FieldEngine::new(tanh_agents(), nonlinear_model(), 64).unwrap();
        for x in [-2.0, 0.0, 2.0] {
            for v1 in [0.2, 1.0, 5.0] {
                let jac = engine.conjugate_jacobian(0.5, 0.0, &[1.0, v1], x, &[0.3]).unwrap();
                let sv = jac.singular_values();
                let cond = sv.max() / sv.min();
                assert!(cond.is_finite() && cond < 1e8, "cond {cond}");
            }
        }
    }

    #[test]
    fn adaptive_rule_converges() {
        let engine = FieldEngine::adaptive(tanh_agents(), nonlinear_model(), 16, 256, 1e-9).unwrap();
        let fixed = FieldEngine::new(tanh_agents(), nonlinear_model(), 256).unwrap();
        let a = engine.eval_f(0.0, 0.0, &[1.0, 1.0], 0.0, &[0.5], 0).unwrap().f;
        let b = fixed.eval_f(0.0, 0.0, &[1.0, 1.0], 0.0, &[0.5], 0).unwrap().f;
        assert!(rel(a, b) < 1e-8);
    }
}
