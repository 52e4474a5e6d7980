//! Hypothesis checks for the existence results and the diagnostic functionals
//! `L`, `M`, `M~` and `N` on grids.

use std::fmt;

use rayon::prelude::*;

use crate::error::Result;
use crate::fields::FieldEngine;
use crate::market::{
    check_integrability, gaussian_exp_moment, IntegrabilityMode, IntegrabilityReport, MarketModel, Verdict,
};
use crate::pareto::r_eval;
use crate::utility::{check_smoothness, AgentSet, SmoothnessReport};

/// Smallest integer strictly above `(m + j) / 2`.
pub fn theorem_index_l(m: usize, j: usize) -> usize {
    (m + j) / 2 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubCheck {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// exponents `p` tried in the integrability conditions
    pub p_list: Vec<f64>,
    /// bound `b` of the admissible sets
    pub b: f64,
    /// evaluate functional samples with this many quadrature nodes; 0 skips them
    pub functional_nodes: usize,
    pub functional_times: Vec<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            p_list: vec![1.0, 4.0, 16.0],
            b: 2.0,
            functional_nodes: 32,
            functional_times: vec![0.0, 0.5, 0.9],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub theorem: u8,
    pub l: usize,
    pub smoothness: Option<SmoothnessReport>,
    pub integrability: Vec<IntegrabilityReport>,
    pub checks: Vec<SubCheck>,
    pub functionals: Option<FunctionalLattice>,
    pub verdict: Status,
}

fn combine(checks: &[SubCheck]) -> Status {
    if checks.iter().any(|c| c.status == Status::Fail) {
        Status::Fail
    } else if checks.iter().any(|c| c.status == Status::Inconclusive) {
        Status::Inconclusive
    } else {
        Status::Pass
    }
}

fn smoothness_check(name: &str, report: &SmoothnessReport, needed_order: usize) -> Vec<SubCheck> {
    let mut out = Vec::new();
    let short: Vec<String> = report
        .agents
        .iter()
        .filter(|a| a.declared_order < needed_order)
        .map(|a| format!("agent {} declares order {}", a.index + 1, a.declared_order))
        .collect();
    out.push(SubCheck {
        name: "differentiability order".into(),
        status: if short.is_empty() { Status::Pass } else { Status::Fail },
        detail: if short.is_empty() {
            format!("all agents declare order >= {needed_order}")
        } else {
            format!("need order {needed_order}: {}", short.join(", "))
        },
    });
    let mut status = Status::Pass;
    let mut details = Vec::new();
    for agent in &report.agents {
        let grown: Vec<&crate::utility::DerivativeSup> =
            agent.risk_aversion.iter().filter(|d| d.growth).collect();
        let worst = agent
            .risk_aversion
            .iter()
            .map(|d| format!("k={}: {:.6e}", d.k, d.suprema[2]))
            .collect::<Vec<_>>()
            .join(", ");
        let agent_status = match (grown.is_empty(), agent.analytic_bounded) {
            (_, Some(false)) => Status::Fail,
            (false, _) => Status::Inconclusive,
            (true, _) => Status::Pass,
        };
        let flag = if grown.is_empty() { "" } else { " [growth flag]" };
        details.push(format!("agent {}: sup|a^(k)| {worst}{flag}", agent.index + 1));
        status = match (status, agent_status) {
            (Status::Fail, _) | (_, Status::Fail) => Status::Fail,
            (Status::Inconclusive, _) | (_, Status::Inconclusive) => Status::Inconclusive,
            _ => Status::Pass,
        };
    }
    out.push(SubCheck {
        name: name.into(),
        status,
        detail: details.join("; "),
    });
    out
}

fn integrability_check(name: &str, report: &IntegrabilityReport) -> SubCheck {
    let status = match report.verdict {
        Verdict::Pass => Status::Pass,
        Verdict::Divergent => Status::Fail,
        Verdict::NotApplicable => Status::Fail,
    };
    let detail = if report.entries.is_empty() {
        "not applicable to these agents".to_string()
    } else {
        report
            .entries
            .iter()
            .map(|e| format!("p={}: {:.6e} ({})", e.p, e.estimate.value(), e.estimate.verdict))
            .collect::<Vec<_>>()
            .join(", ")
    };
    SubCheck {
        name: format!("{name}: E[{}] < inf", report.mode),
        status,
        detail,
    }
}

// E[Sigma_0^2] + E[g'^2] and likewise for every dividend
fn sobolev_check(model: &MarketModel) -> SubCheck {
    if !model.all_derivatives_available() {
        return SubCheck {
            name: "payoffs in D^{1,2}".into(),
            status: Status::Fail,
            detail: "a payoff has no derivative".into(),
        };
    }
    let payoffs: Vec<&crate::market::PayoffSpec> =
        std::iter::once(&model.endowment).chain(&model.dividends).collect();
    let breaks = model.kinks();
    let mut status = Status::Pass;
    let mut norms = Vec::new();
    for p in payoffs {
        let value = gaussian_exp_moment(|z| 2.0 * p.value(z).abs().ln(), &breaks);
        let slope = gaussian_exp_moment(|z| 2.0 * p.derivative(z).map(f64::abs).unwrap_or(f64::NAN).ln(), &breaks);
        if value.verdict != Verdict::Pass || slope.verdict != Verdict::Pass {
            status = Status::Fail;
        }
        norms.push(format!("{:.6e}", (value.value() + slope.value()).sqrt()));
    }
    SubCheck {
        name: "payoffs in D^{1,2}".into(),
        status,
        detail: format!("norms {}", norms.join(", ")),
    }
}

pub fn check_theorem(agents: &AgentSet, model: &MarketModel, which: u8, opts: &CheckOptions) -> ConditionReport {
    let l = theorem_index_l(agents.len(), model.n_stocks());
    let mut checks = Vec::new();
    let mut integrability = Vec::new();
    let mut smoothness = None;
    match which {
        1 => {
            let report = check_smoothness(agents, l);
            checks.extend(smoothness_check("bounded risk-aversion derivatives k<=l", &report, l + 2));
            smoothness = Some(report);
            let rep = check_integrability(model, agents, &opts.p_list, IntegrabilityMode::Eq7);
            checks.push(integrability_check("integrability", &rep));
            integrability.push(rep);
        }
        2 => {
            let expo = agents.exponential_slice().is_some();
            checks.push(SubCheck {
                name: "exponential utilities".into(),
                status: if expo { Status::Pass } else { Status::Fail },
                detail: match agents.exponential_slice() {
                    Some(a) => format!("coefficients {a:?}, harmonic aggregate {:.6}", agents.aggregate_exponential().unwrap_or(f64::NAN)),
                    None => "some agent is not exponential".into(),
                },
            });
            let rep = check_integrability(model, agents, &opts.p_list, IntegrabilityMode::Eq15);
            checks.push(integrability_check("integrability", &rep));
            integrability.push(rep);
        }
        3 => {
            let report = check_smoothness(agents, 1);
            checks.extend(smoothness_check("bounded risk-aversion slope", &report, 3));
            smoothness = Some(report);
            checks.push(sobolev_check(model));
            let rep = check_integrability(model, agents, &opts.p_list, IntegrabilityMode::Eq17);
            checks.push(integrability_check("integrability", &rep));
            integrability.push(rep);
        }
        other => checks.push(SubCheck {
            name: "theorem id".into(),
            status: Status::Fail,
            detail: format!("unknown theorem {other}; expected 1, 2 or 3"),
        }),
    }
    let functionals = if opts.functional_nodes > 0 && model.all_derivatives_available() {
        FieldEngine::new(agents.clone(), model.clone(), opts.functional_nodes)
            .ok()
            .map(|engine| {
                let grid = FunctionalGrid::default_for(agents.len(), model.n_stocks(), opts.b);
                functional_lattice(&engine, &opts.functional_times, 0.0, &grid, opts.b)
            })
    } else {
        None
    };
    let verdict = combine(&checks);
    ConditionReport {
        theorem: which,
        l,
        smoothness,
        integrability,
        checks,
        functionals,
        verdict,
    }
}

impl fmt::Display for ConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "theorem: {}", self.theorem)?;
        writeln!(f, "l: {}", self.l)?;
        for c in &self.checks {
            writeln!(f, "check: {} = {}", c.name, c.status)?;
            writeln!(f, "  {}", c.detail)?;
        }
        if let Some(lat) = &self.functionals {
            writeln!(f, "functionals (grid suprema; advisory):")?;
            for (i, t) in lat.times.iter().enumerate() {
                writeln!(
                    f,
                    "  t={t}: L={:.6e} M={:.6e} M~={:.6e} N={:.6e}",
                    lat.sup_l[i], lat.sup_m[i], lat.sup_m_tilde[i], lat.sup_n[i]
                )?;
            }
            writeln!(
                f,
                "  trapezoid: L={:.6e} M={:.6e} M~={:.6e} N={:.6e}",
                lat.integrals[0], lat.integrals[1], lat.integrals[2], lat.integrals[3]
            )?;
        }
        writeln!(f, "verdict: {}", self.verdict)
    }
}

/// Grid points for the functionals: `(u, q)` pairs for `L`, `(v, x, q)` triples for the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalGrid {
    pub u_points: Vec<(Vec<f64>, Vec<f64>)>,
    pub a_points: Vec<(Vec<f64>, f64, Vec<f64>)>,
}

fn cartesian(levels: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|p| {
                levels.iter().map(move |l| {
                    let mut q = p.clone();
                    q.push(*l);
                    q
                })
            })
            .collect();
    }
    out
}

impl FunctionalGrid {
    pub fn default_for(m: usize, j: usize, b: f64) -> Self {
        let mut positions = vec![vec![0.0; j]];
        for k in 0..j {
            for s in [-1.0, 1.0] {
                let mut q = vec![0.0; j];
                q[k] = s * b;
                positions.push(q);
            }
        }
        let u_levels: Vec<f64> = [1.0, 0.3, 0.1, 1e-2, 1e-3].iter().map(|s| -b * s).collect();
        let mut u_points = Vec::new();
        for u in cartesian(&u_levels, m) {
            for q in &positions {
                u_points.push((u.clone(), q.clone()));
            }
        }
        let mut a_points = Vec::new();
        for v in cartesian(&[0.25, 1.0, 4.0], m) {
            for x in [-2.0, 0.0, 2.0] {
                for q in &positions {
                    a_points.push((v.clone(), x, q.clone()));
                }
            }
        }
        Self { u_points, a_points }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalSamples {
    pub t: f64,
    pub z: f64,
    /// `None` marks a point outside the admissible set or where evaluation failed
    pub l: Vec<Option<f64>>,
    pub m: Vec<Option<f64>>,
    pub m_tilde: Vec<Option<f64>>,
    pub n: Vec<Option<f64>>,
    pub skipped_l: usize,
    pub skipped_m: usize,
    pub skipped_m_tilde: usize,
    pub skipped_n: usize,
    pub failed: usize,
}

fn sup(values: &[Option<f64>]) -> f64 {
    values.iter().flatten().fold(0.0, |a, b| a.max(*b))
}

impl FunctionalSamples {
    pub fn sup_l(&self) -> f64 {
        sup(&self.l)
    }
    pub fn sup_m(&self) -> f64 {
        sup(&self.m)
    }
    pub fn sup_m_tilde(&self) -> f64 {
        sup(&self.m_tilde)
    }
    pub fn sup_n(&self) -> f64 {
        sup(&self.n)
    }
}

fn q_norm(q: &[f64]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `L(u, q) = sum_m |K^m/u^m|^2 / (1 + sum_m |log(-u^m)|)`.
pub fn functional_l(engine: &FieldEngine, t: f64, z: f64, u: &[f64], q: &[f64]) -> Result<f64> {
    let (k, _) = engine.eval_k(t, z, u, q, None)?;
    let num: f64 = k.iter().zip(u).map(|(k, u)| (k / u).powi(2)).sum();
    let den = 1.0 + u.iter().map(|u| (-u).ln().abs()).sum::<f64>();
    Ok(num / den)
}

/// Samples of the functionals at `(t, z)`, skipping points outside the admissible
/// sets of bound `b`: `-b <= u < 0` for `L`, `F_v >= -b` for `M`, `F_x <= b v` for
/// `M~`, `r_x <= b v` for `N`, and `|q| <= b` throughout.
pub fn eval_functionals(engine: &FieldEngine, t: f64, z: f64, grid: &FunctionalGrid, b: f64) -> FunctionalSamples {
    let l_results: Vec<Option<Result<f64>>> = grid
        .u_points
        .par_iter()
        .map(|(u, q)| {
            let inside = q_norm(q) <= b && u.iter().all(|x| *x >= -b && *x < 0.0);
            inside.then(|| functional_l(engine, t, z, u, q))
        })
        .collect();
    type Triple = (Option<f64>, Option<f64>, Option<f64>);
    let a_results: Vec<Result<Triple>> = grid
        .a_points
        .par_iter()
        .map(|(v, x, q)| {
            if q_norm(q) > b {
                return Ok((None, None, None));
            }
            let p = engine.eval_point(t, z, v, *x, q)?;
            let scale = 1.0 + x.abs();
            let fv = &p.values.f_v;
            let m = fv
                .iter()
                .all(|f| *f >= -b)
                .then(|| p.h_v.iter().zip(fv).map(|(h, f)| (h / f).powi(2)).sum::<f64>() / scale);
            let weighted: f64 = p.h_v.iter().zip(v).map(|(h, w)| (w * h).powi(2)).sum();
            let fx = p.values.f_x;
            let m_tilde = v
                .iter()
                .all(|w| fx <= b * w)
                .then(|| weighted / (scale * fx * fx));
            let rx = r_eval(engine.agents(), v, *x)?.lambda;
            let n = v.iter().all(|w| rx <= b * w).then(|| weighted / (scale * rx * rx));
            Ok((m, m_tilde, n))
        })
        .collect();
    let mut out = FunctionalSamples {
        t,
        z,
        l: Vec::new(),
        m: Vec::new(),
        m_tilde: Vec::new(),
        n: Vec::new(),
        skipped_l: 0,
        skipped_m: 0,
        skipped_m_tilde: 0,
        skipped_n: 0,
        failed: 0,
    };
    for r in l_results {
        match r {
            Some(Ok(v)) => out.l.push(Some(v)),
            Some(Err(_)) => {
                out.failed += 1;
                out.l.push(None);
            }
            None => {
                out.skipped_l += 1;
                out.l.push(None);
            }
        }
    }
    for r in a_results {
        match r {
            Ok((m, mt, n)) => {
                out.skipped_m += m.is_none() as usize;
                out.skipped_m_tilde += mt.is_none() as usize;
                out.skipped_n += n.is_none() as usize;
                out.m.push(m);
                out.m_tilde.push(mt);
                out.n.push(n);
            }
            Err(_) => {
                out.failed += 1;
                out.m.push(None);
                out.m_tilde.push(None);
                out.n.push(None);
            }
        }
    }
    out
}

/// Grid suprema on a lattice of times with trapezoid aggregates over `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalLattice {
    pub times: Vec<f64>,
    pub sup_l: Vec<f64>,
    pub sup_m: Vec<f64>,
    pub sup_m_tilde: Vec<f64>,
    pub sup_n: Vec<f64>,
    /// trapezoid integrals over `times` of the four suprema, in the order L, M, M~, N
    pub integrals: [f64; 4],
    pub samples: Vec<FunctionalSamples>,
}

fn trapezoid(t: &[f64], y: &[f64]) -> f64 {
    t.windows(2)
        .zip(y.windows(2))
        .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
        .sum()
}

pub fn functional_lattice(engine: &FieldEngine, times: &[f64], z: f64, grid: &FunctionalGrid, b: f64) -> FunctionalLattice {
    let samples: Vec<FunctionalSamples> = times.iter().map(|t| eval_functionals(engine, *t, z, grid, b)).collect();
    let pick = |f: fn(&FunctionalSamples) -> f64| samples.iter().map(f).collect::<Vec<_>>();
    let sup_l = pick(FunctionalSamples::sup_l);
    let sup_m = pick(FunctionalSamples::sup_m);
    let sup_m_tilde = pick(FunctionalSamples::sup_m_tilde);
    let sup_n = pick(FunctionalSamples::sup_n);
    let integrals = [
        trapezoid(times, &sup_l),
        trapezoid(times, &sup_m),
        trapezoid(times, &sup_m_tilde),
        trapezoid(times, &sup_n),
    ];
    FunctionalLattice {
        times: times.to_vec(),
        sup_l,
        sup_m,
        sup_m_tilde,
        sup_n,
        integrals,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{NamedFunction, PayoffSpec};
    use crate::utility::{build_from_risk_aversion, RiskAversionShape, UtilitySpec};

    fn linear(sigma0: f64) -> MarketModel {
        MarketModel::new(PayoffSpec::linear(0.0, sigma0), vec![PayoffSpec::linear(0.0, 1.0)]).unwrap()
    }

    #[test]
    fn index_table() {
        assert_eq!(theorem_index_l(1, 1), 2);
        assert_eq!(theorem_index_l(2, 1), 2);
        assert_eq!(theorem_index_l(2, 2), 3);
        assert_eq!(theorem_index_l(3, 3), 4);
    }

    #[test]
    fn exponential_linear_passes_everything() {
        let agents = AgentSet::exponential(&[2.0, 2.0]).unwrap();
        let opts = CheckOptions {
            functional_nodes: 0,
            ..CheckOptions::default()
        };
        for th in 1..=3 {
            let rep = check_theorem(&agents, &linear(0.3), th, &opts);
            assert_eq!(rep.verdict, Status::Pass, "{rep}");
        }
    }

    #[test]
    fn sin_square_fails_slope_check() {
        let spec = build_from_risk_aversion(
            RiskAversionShape::SinSquare {
                level: 2.0,
                amplitude: 0.5,
            },
            2.5,
            4,
        )
        .unwrap();
        let agents = AgentSet::new(vec![spec, UtilitySpec::exponential(2.0).unwrap()]).unwrap();
        let opts = CheckOptions {
            functional_nodes: 0,
            ..CheckOptions::default()
        };
        let rep = check_theorem(&agents, &linear(0.3), 3, &opts);
        assert_eq!(rep.verdict, Status::Fail);
        assert!(rep.smoothness.as_ref().unwrap().growth_flagged());
        let rep2 = check_theorem(&agents, &linear(0.3), 2, &opts);
        assert_eq!(rep2.verdict, Status::Fail);
    }

    #[test]
    fn divergent_endowment_fails_integrability() {
        let agents = AgentSet::exponential(&[2.0, 2.0]).unwrap();
        let model = MarketModel::new(
            PayoffSpec::Named {
                function: NamedFunction::Square,
                amplitude: -1.0,
                rate: 1.0,
            },
            vec![PayoffSpec::linear(0.0, 1.0)],
        )
        .unwrap();
        let opts = CheckOptions {
            functional_nodes: 0,
            ..CheckOptions::default()
        };
        assert_eq!(check_theorem(&agents, &model, 3, &opts).verdict, Status::Fail);
        assert_eq!(check_theorem(&agents, &model, 1, &opts).verdict, Status::Fail);
    }

    #[test]
    fn functionals_vanish_without_risk() {
        let model = MarketModel::new(PayoffSpec::constant(0.2), vec![PayoffSpec::zero()]).unwrap();
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 1.0]).unwrap(), model, 16).unwrap();
        let grid = FunctionalGrid::default_for(2, 1, 2.0);
        let s = eval_functionals(&engine, 0.3, 0.0, &grid, 2.0);
        assert_eq!(s.failed, 0);
        assert_eq!(s.sup_l(), 0.0);
        assert_eq!(s.sup_m(), 0.0);
        assert_eq!(s.sup_n(), 0.0);
        assert!(s.l.iter().flatten().count() > 0);
    }

    #[test]
    fn exponential_functionals_closed_form() {
        let sigma0 = 0.4;
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), linear(sigma0), 32).unwrap();
        for (u, q) in [([-0.5, -1.5], 0.5), ([-1e-3, -2.0], -1.0)] {
            let l = functional_l(&engine, 0.2, 0.1, &u, &[q]).unwrap();
            let k: f64 = sigma0 + q;
            let expected = 2.0 * k * k / (1.0 + u.iter().map(|x: &f64| (-x).ln().abs()).sum::<f64>());
            assert!((l / expected - 1.0).abs() < 1e-8);
        }
        // N = (H~^2 / a^2) sum_m (a/a_m)^2 / (1 + |x|) with H~ = -a k F~ and a = 1
        let (t, z, x, q) = (0.3, 0.2, 0.7, 0.5);
        let k: f64 = sigma0 + q;
        let tilde = (-k * z + k * k * (1.0 - t) / 2.0).exp();
        let h_tilde = -k * tilde;
        let expected = h_tilde * h_tilde * 2.0 * 0.25 / (1.0 + x);
        let grid = FunctionalGrid {
            u_points: vec![],
            a_points: vec![(vec![0.6, 1.4], x, vec![q])],
        };
        let s = eval_functionals(&engine, t, z, &grid, 100.0);
        assert!((s.n[0].unwrap() / expected - 1.0).abs() < 1e-8);
        assert!(s.m[0].unwrap() >= 0.0 && s.m_tilde[0].unwrap() >= 0.0);
        // outside the set: q too large
        let s = eval_functionals(&engine, t, z, &grid, 0.1);
        assert_eq!(s.skipped_n, 1);
    }

    #[test]
    fn l_supremum_stabilizes_toward_the_boundary() {
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), linear(0.4), 32).unwrap();
        let mut sups = Vec::new();
        for depth in [2, 4, 8] {
            let mut best = 0.0_f64;
            for e in 0..=depth {
                let u = -(10f64).powi(-(e as i32));
                best = best.max(functional_l(&engine, 0.0, 0.0, &[u, -1.0], &[0.5]).unwrap());
            }
            sups.push(best);
        }
        assert!((sups[2] - sups[1]).abs() <= 1e-12 * sups[1]);
    }
}
