//! Euler simulation of the market makers' utility processes `dU = K(U, Q) dB`
//! with stopping at the explosion threshold.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::fields::FieldEngine;

/// Environment variable holding the number of simulation workers.
pub const WORKERS_ENV: &str = "IMPACT_SDE_WORKERS";
/// Default explosion threshold relative to `min_m |U_0^m|`.
pub const DEFAULT_EPS_FACTOR: f64 = 1e-6;

type FeedbackFn = Arc<dyn Fn(f64, &[f64], f64) -> Vec<f64> + Send + Sync>;

/// Predictable order flow; feedback rules see the left-endpoint state.
#[derive(Clone)]
pub enum OrderFlow {
    Constant(Vec<f64>),
    /// `positions[k]` is held on `[times[k], times[k+1])`.
    Schedule {
        times: Vec<f64>,
        positions: Vec<Vec<f64>>,
    },
    /// `q = rule(t, U_t, B_t)` clipped componentwise to `[-bound, bound]`.
    Feedback { rule: FeedbackFn, bound: f64 },
}

impl fmt::Debug for OrderFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderFlow::Constant(q) => f.debug_tuple("Constant").field(q).finish(),
            OrderFlow::Schedule { times, positions } => f
                .debug_struct("Schedule")
                .field("times", times)
                .field("positions", positions)
                .finish(),
            OrderFlow::Feedback { bound, .. } => {
                f.debug_struct("Feedback").field("bound", bound).finish_non_exhaustive()
            }
        }
    }
}

impl OrderFlow {
    pub fn schedule(times: Vec<f64>, positions: Vec<Vec<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != positions.len() {
            return Err(ModelError::InvalidParameter(
                "schedule needs one position per switching time".into(),
            ));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::InvalidParameter(
                "schedule times must start at 0 and increase strictly".into(),
            ));
        }
        Ok(OrderFlow::Schedule { times, positions })
    }

    pub fn feedback<F>(bound: f64, rule: F) -> Self
    where
        F: Fn(f64, &[f64], f64) -> Vec<f64> + Send + Sync + 'static,
    {
        OrderFlow::Feedback {
            rule: Arc::new(rule),
            bound,
        }
    }

    /// Position held over `[t, t + dt)` given the state at `t`.
    pub fn position(&self, t: f64, u: &[f64], b: f64) -> Vec<f64> {
        match self {
            OrderFlow::Constant(q) => q.clone(),
            OrderFlow::Schedule { times, positions } => {
                let k = times.iter().take_while(|s| **s <= t).count().max(1) - 1;
                positions[k].clone()
            }
            OrderFlow::Feedback { rule, bound } => rule(t, u, b)
                .into_iter()
                .map(|q| q.clamp(-bound, *bound))
                .collect(),
        }
    }

    /// Supremum of `|q|` over the flow, when known.
    pub fn bound(&self) -> f64 {
        let norm = |q: &Vec<f64>| q.iter().map(|v| v * v).sum::<f64>().sqrt();
        match self {
            OrderFlow::Constant(q) => norm(q),
            OrderFlow::Schedule { positions, .. } => positions.iter().map(norm).fold(0.0, f64::max),
            OrderFlow::Feedback { bound, .. } => *bound,
        }
    }

    pub fn constant_position(&self) -> Option<&[f64]> {
        match self {
            OrderFlow::Constant(q) => Some(q),
            _ => None,
        }
    }

    pub fn dimension_matches(&self, j: usize) -> bool {
        match self {
            OrderFlow::Constant(q) => q.len() == j,
            OrderFlow::Schedule { positions, .. } => positions.iter().all(|q| q.len() == j),
            OrderFlow::Feedback { .. } => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// `None` means `1e-6 * min_m |U_0^m|`.
    pub explosion_eps: Option<f64>,
    pub use_log_coordinates: bool,
    /// Keep every step in the path record rather than the end points only.
    pub record_paths: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 256.0,
            n_paths: 1000,
            seed: 0,
            explosion_eps: None,
            use_log_coordinates: true,
            record_paths: true,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(ModelError::InvalidParameter(format!("dt must lie in (0, 1], got {}", self.dt)));
        }
        if let Some(eps) = self.explosion_eps {
            if !(eps > 0.0) {
                return Err(ModelError::InvalidParameter(format!(
                    "explosion threshold must be positive, got {eps}"
                )));
            }
        }
        Ok(())
    }

    pub fn eps_for(&self, u0: &[f64]) -> f64 {
        self.explosion_eps.unwrap_or_else(|| {
            DEFAULT_EPS_FACTOR * u0.iter().map(|u| u.abs()).fold(f64::INFINITY, f64::min)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    Explosion,
    ConjugateInfeasible,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Completed => "completed",
            StopReason::Explosion => "explosion",
            StopReason::ConjugateInfeasible => "conjugate_infeasible",
        })
    }
}

/// Brownian increments on a time grid starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
}

impl BrownianPath {
    /// Number of steps of size `dt` covering `[0, 1]`; the last may be shorter.
    pub fn steps(dt: f64) -> usize {
        ((1.0 / dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn grid(dt: f64) -> Vec<f64> {
        let n = Self::steps(dt);
        (0..=n).map(|k| (k as f64 * dt).min(1.0)).collect()
    }

    /// Increments for path `path` of the ensemble keyed by `seed`; the path index
    /// selects an independent ChaCha stream, so paths do not depend on each other.
    pub fn generate(seed: u64, path: u64, dt: f64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(path);
        let times = Self::grid(dt);
        let increments = times
            .windows(2)
            .map(|w| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (w[1] - w[0]).sqrt() * z
            })
            .collect();
        Self { times, increments }
    }

    /// Sums consecutive groups of `factor` increments.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let n = self.increments.len();
        if factor == 0 || n % factor != 0 {
            return Err(ModelError::InvalidParameter(format!(
                "cannot coarsen {n} steps by a factor of {factor}"
            )));
        }
        Ok(Self {
            times: self.times.iter().step_by(factor).copied().collect(),
            increments: self.increments.chunks(factor).map(|c| c.iter().sum()).collect(),
        })
    }

    /// `B` at every grid time.
    pub fn values(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.times.len());
        let mut acc = 0.0;
        b.push(0.0);
        for d in &self.increments {
            acc += d;
            b.push(acc);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub index: u64,
    pub times: Vec<f64>,
    pub b: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    /// normalized weights `dG/du(U, 1, Q)`
    pub v: Vec<Vec<f64>>,
    /// `G(U, 1, Q)`
    pub cash: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub stopped: bool,
    pub tau: Option<f64>,
    pub stop_reason: StopReason,
}

impl PathResult {
    pub fn terminal_u(&self) -> &[f64] {
        self.u.last().expect("path has at least one row")
    }

    pub fn terminal_b(&self) -> f64 {
        *self.b.last().expect("path has at least one row")
    }

    /// The record reduced to its last row.
    pub fn terminal_record(&self) -> PathResult {
        let last = |v: &Vec<f64>| vec![*v.last().expect("path has at least one row")];
        let last_row = |v: &Vec<Vec<f64>>| vec![v.last().expect("path has at least one row").clone()];
        PathResult {
            index: self.index,
            times: last(&self.times),
            b: last(&self.b),
            u: last_row(&self.u),
            v: last_row(&self.v),
            cash: last(&self.cash),
            q: last_row(&self.q),
            stopped: self.stopped,
            tau: self.tau,
            stop_reason: self.stop_reason,
        }
    }
}

struct Recorder {
    full: bool,
    out: PathResult,
}

impl Recorder {
    fn push(&mut self, t: f64, b: f64, u: &[f64], v: Vec<f64>, cash: f64, q: Vec<f64>) {
        if !self.full && !self.out.times.is_empty() {
            self.out.times.clear();
            self.out.b.clear();
            self.out.u.clear();
            self.out.v.clear();
            self.out.cash.clear();
            self.out.q.clear();
        }
        self.out.times.push(t);
        self.out.b.push(b);
        self.out.u.push(u.to_vec());
        self.out.v.push(v);
        self.out.cash.push(cash);
        self.out.q.push(q);
    }
}

/// `U_0 = F_v(0, 0, v, x_0, q_0)` with `v` normalized so that `F_x = 1`;
/// also returns the normalized weights.
pub fn initial_state(engine: &FieldEngine, v0: &[f64], x0: f64, q0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let v = engine.normalize_weights(0.0, 0.0, v0, x0, q0)?;
    let f = engine.eval_f(0.0, 0.0, &v, x0, q0, 1)?;
    Ok((f.f_v, v))
}

/// One Euler path of `dU = K(U, Q) dB` along `path`. `warm` seeds the first conjugate solve.
pub fn simulate_path(
    engine: &FieldEngine,
    flow: &OrderFlow,
    cfg: &SimulationConfig,
    u0: &[f64],
    path: &BrownianPath,
    index: u64,
    warm: Option<(&[f64], f64)>,
) -> PathResult {
    let m = u0.len();
    let eps = cfg.eps_for(u0);
    let mut rec = Recorder {
        full: cfg.record_paths,
        out: PathResult {
            index,
            times: Vec::new(),
            b: Vec::new(),
            u: Vec::new(),
            v: Vec::new(),
            cash: Vec::new(),
            q: Vec::new(),
            stopped: false,
            tau: None,
            stop_reason: StopReason::Completed,
        },
    };
    let mut u = u0.to_vec();
    let mut z: Vec<f64> = u.iter().map(|x| (-x).ln()).collect();
    let mut b = 0.0;
    let mut warm_v: Option<Vec<f64>> = warm.map(|(v, _)| v.to_vec());
    let mut warm_x = warm.map(|(_, x)| x).unwrap_or(0.0);
    let n = path.increments.len();
    let nan_row = || vec![f64::NAN; m];
    for step in 0..=n {
        let t = path.times[step];
        let q = flow.position(t, &u, b);
        let seed = warm_v.as_deref().map(|v| (v, warm_x));
        if step == n {
            // terminal row: the conjugate point only, no further step
            match engine.solve_conjugate(t, b, &u, 1.0, &q, seed) {
                Ok(c) => rec.push(t, b, &u, c.v, c.x, q),
                Err(_) => {
                    rec.push(t, b, &u, nan_row(), f64::NAN, q);
                    rec.out.stopped = true;
                    rec.out.tau = Some(t);
                    rec.out.stop_reason = StopReason::ConjugateInfeasible;
                }
            }
            break;
        }
        let (k, conj) = match engine.eval_k(t, b, &u, &q, seed) {
            Ok(r) => r,
            Err(_) => {
                rec.push(t, b, &u, nan_row(), f64::NAN, q);
                rec.out.stopped = true;
                rec.out.tau = Some(t);
                rec.out.stop_reason = StopReason::ConjugateInfeasible;
                break;
            }
        };
        warm_x = conj.x;
        rec.push(t, b, &u, conj.v.clone(), conj.x, q);
        warm_v = Some(conj.v);
        let db = path.increments[step];
        let h = path.times[step + 1] - t;
        let mut tau = path.times[step + 1];
        if cfg.use_log_coordinates {
            for i in 0..m {
                // A^m = -e^{-Z^m} K^m = K^m / U^m
                let a = k[i] / u[i];
                z[i] += a * db - 0.5 * a * a * h;
                u[i] = -z[i].exp();
            }
        } else {
            let next: Vec<f64> = (0..m).map(|i| u[i] + k[i] * db).collect();
            if next.iter().any(|x| *x >= 0.0) {
                // first crossing of -eps along the Euler segment
                let theta = (0..m)
                    .filter(|&i| next[i] > -eps)
                    .map(|i| (-eps - u[i]) / (next[i] - u[i]))
                    .fold(1.0_f64, f64::min)
                    .max(0.0);
                for i in 0..m {
                    u[i] += theta * (next[i] - u[i]);
                }
                tau = t + theta * h;
            } else {
                u = next;
            }
            for i in 0..m {
                z[i] = (-u[i]).ln();
            }
        }
        b += db;
        if u.iter().any(|x| *x > -eps) {
            let q = flow.position(tau, &u, b);
            let (v, cash) = match engine.solve_conjugate(tau, b, &u, 1.0, &q, warm_v.as_deref().map(|v| (v, warm_x))) {
                Ok(c) => (c.v, c.x),
                Err(_) => (nan_row(), f64::NAN),
            };
            rec.push(tau, b, &u, v, cash, q);
            rec.out.stopped = true;
            rec.out.tau = Some(tau);
            rec.out.stop_reason = StopReason::Explosion;
            break;
        }
    }
    rec.out
}

/// `U_t = F_v(t, B_t, v, x, q)` along `path` for a constant position `q`.
pub fn static_oracle(engine: &FieldEngine, v: &[f64], x: f64, q: &[f64], path: &BrownianPath) -> Result<Vec<Vec<f64>>> {
    path.times
        .iter()
        .zip(path.values())
        .map(|(t, b)| Ok(engine.eval_f(*t, b, v, x, q, 1)?.f_v))
        .collect()
}

/// Volatility `a (sigma_0 + <q, beta>)` of the geometric Brownian closed form, when
/// agents are exponential, payoffs linear and the flow constant.
pub fn closed_form_volatility(engine: &FieldEngine, flow: &OrderFlow) -> Option<f64> {
    let a = engine.agents().aggregate_exponential()?;
    let q = flow.constant_position()?;
    let k = engine.model().linear_exposure(q)?;
    Some(a * k)
}

/// `U_t = U_0 exp(-s B_t - s^2 t / 2)` with volatility `s`.
pub fn gbm_value(u0: &[f64], vol: f64, t: f64, b: f64) -> Vec<f64> {
    let factor = (-vol * b - 0.5 * vol * vol * t).exp();
    u0.iter().map(|u| u * factor).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    pub t: f64,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub n_paths: usize,
    pub completed: usize,
    pub explosions: usize,
    pub conjugate_failures: usize,
    pub u0: Vec<f64>,
    /// mean and standard error of `U_1` over completed paths
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// means of the stopped process at quarter times over all paths
    pub checkpoints: Vec<TimeSlice>,
    /// mean `|U_1 - U_1^gbm|` (max over agents) when the closed form applies
    pub oracle_error: Option<f64>,
}

impl EnsembleSummary {
    pub fn fraction_stopped(&self) -> f64 {
        (self.n_paths - self.completed) as f64 / self.n_paths.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub summary: EnsembleSummary,
    /// full records of the first `keep` paths
    pub paths: Vec<PathResult>,
    /// last row of every path, in path order
    pub terminals: Vec<PathResult>,
}

/// Worker count from the environment, defaulting to the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn mean_and_stderr(rows: &[&[f64]], m: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; m];
    let mut stderr = vec![0.0; m];
    if rows.is_empty() {
        return (vec![f64::NAN; m], vec![f64::NAN; m]);
    }
    for i in 0..m {
        mean[i] = rows.iter().map(|r| r[i]).sum::<f64>() / n;
        if rows.len() > 1 {
            let var = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0);
            stderr[i] = (var / n).sqrt();
        }
    }
    (mean, stderr)
}

/// Runs `cfg.n_paths` independent paths on `workers` threads. Results depend only on
/// `(cfg, u0)` and are merged by path index.
pub fn run_ensemble_with_workers(
    engine: &FieldEngine,
    flow: &OrderFlow,
    cfg: &SimulationConfig,
    u0: &[f64],
    warm: Option<(&[f64], f64)>,
    keep: usize,
    workers: usize,
) -> Result<Ensemble> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ModelError::NumericFailure(format!("worker pool: {e}")))?;
    let checkpoint_times = [0.25, 0.5, 0.75, 1.0];
    let grid = BrownianPath::grid(cfg.dt);
    let slots: Vec<usize> = checkpoint_times
        .iter()
        .map(|c| grid.iter().position(|t| *t >= c - 1e-12).unwrap_or(grid.len() - 1))
        .collect();
    let vol = closed_form_volatility(engine, flow);
    let results: Vec<(PathResult, Vec<Vec<f64>>, Option<PathResult>)> = pool.install(|| {
        (0..cfg.n_paths)
            .into_par_iter()
            .map(|i| {
                let path = BrownianPath::generate(cfg.seed, i as u64, cfg.dt);
                let mut local = cfg.clone();
                local.record_paths = true;
                let full = simulate_path(engine, flow, &local, u0, &path, i as u64, warm);
                // the stopped process stays at its last value
                let snaps = slots
                    .iter()
                    .map(|s| full.u[(*s).min(full.u.len() - 1)].clone())
                    .collect();
                let terminal = full.terminal_record();
                (terminal, snaps, (i < keep).then_some(full))
            })
            .collect()
    });
    let m = u0.len();
    let completed: Vec<&[f64]> = results
        .iter()
        .filter(|(p, _, _)| !p.stopped)
        .map(|(p, _, _)| p.terminal_u())
        .collect();
    let (mean, stderr) = mean_and_stderr(&completed, m);
    let checkpoints = checkpoint_times
        .iter()
        .enumerate()
        .map(|(c, t)| {
            let rows: Vec<&[f64]> = results.iter().map(|(_, s, _)| s[c].as_slice()).collect();
            let (mean, stderr) = mean_and_stderr(&rows, m);
            TimeSlice { t: *t, mean, stderr }
        })
        .collect();
    let oracle_error = vol.map(|s| {
        let errs: Vec<f64> = results
            .iter()
            .filter(|(p, _, _)| !p.stopped)
            .map(|(p, _, _)| {
                let exact = gbm_value(u0, s, 1.0, p.terminal_b());
                exact
                    .iter()
                    .zip(p.terminal_u())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        errs.iter().sum::<f64>() / errs.len().max(1) as f64
    });
    let count = |r: StopReason| results.iter().filter(|(p, _, _)| p.stop_reason == r).count();
    let summary = EnsembleSummary {
        n_paths: cfg.n_paths,
        completed: completed.len(),
        explosions: count(StopReason::Explosion),
        conjugate_failures: count(StopReason::ConjugateInfeasible),
        u0: u0.to_vec(),
        mean,
        stderr,
        checkpoints,
        oracle_error,
    };
    let mut paths = Vec::with_capacity(keep.min(results.len()));
    let mut terminals = Vec::with_capacity(results.len());
    for (terminal, _, full) in results {
        terminals.push(terminal);
        paths.extend(full);
    }
    Ok(Ensemble {
        summary,
        paths,
        terminals,
    })
}

pub fn run_ensemble(
    engine: &FieldEngine,
    flow: &OrderFlow,
    cfg: &SimulationConfig,
    u0: &[f64],
    warm: Option<(&[f64], f64)>,
    keep: usize,
) -> Result<Ensemble> {
    run_ensemble_with_workers(engine, flow, cfg, u0, warm, keep, worker_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{MarketModel, PayoffSpec};
    use crate::utility::AgentSet;

    fn gbm_engine(sigma0: f64) -> FieldEngine {
        let model = MarketModel::new(PayoffSpec::linear(0.0, sigma0), vec![PayoffSpec::linear(0.0, 1.0)]).unwrap();
        FieldEngine::new(AgentSet::exponential(&[2.0, 2.0]).unwrap(), model, 32).unwrap()
    }

    #[test]
    fn brownian_paths_are_reproducible_and_coarsen() {
        let a = BrownianPath::generate(7, 3, 1.0 / 64.0);
        let b = BrownianPath::generate(7, 3, 1.0 / 64.0);
        let c = BrownianPath::generate(7, 4, 1.0 / 64.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.increments.len(), 64);
        let coarse = a.coarsen(4).unwrap();
        assert_eq!(coarse.increments.len(), 16);
        assert!((coarse.values()[16] - a.values()[64]).abs() < 1e-12);
        assert_eq!(coarse.times[1], 1.0 / 16.0);
        assert!(a.coarsen(5).is_err());
        let odd = BrownianPath::grid(0.3);
        assert_eq!(odd.len(), 5);
        assert_eq!(*odd.last().unwrap(), 1.0);
    }

    #[test]
    fn schedule_is_left_closed() {
        let flow = OrderFlow::schedule(vec![0.0, 0.5], vec![vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(flow.position(0.49, &[], 0.0), vec![1.0]);
        assert_eq!(flow.position(0.5, &[], 0.0), vec![2.0]);
        assert!(OrderFlow::schedule(vec![0.1], vec![vec![1.0]]).is_err());
        let fb = OrderFlow::feedback(3.0, |t, _, b| vec![t * 100.0 + b]);
        assert_eq!(fb.position(1.0, &[], 0.0), vec![3.0]);
    }

    #[test]
    fn deterministic_payoffs_keep_u_constant() {
        let model = MarketModel::new(PayoffSpec::constant(0.3), vec![PayoffSpec::zero()]).unwrap();
        let engine = FieldEngine::new(AgentSet::exponential(&[2.0, 1.0]).unwrap(), model, 16).unwrap();
        let (u0, v) = initial_state(&engine, &[1.0, 1.0], 0.0, &[0.0]).unwrap();
        let cfg = SimulationConfig {
            dt: 1.0 / 32.0,
            ..SimulationConfig::default()
        };
        let path = BrownianPath::generate(1, 0, cfg.dt);
        let res = simulate_path(&engine, &OrderFlow::Constant(vec![1.0]), &cfg, &u0, &path, 0, Some((&v, 0.0)));
        assert!(!res.stopped);
        for row in &res.u {
            assert_eq!(row, &u0);
        }
        for c in &res.cash {
            assert!(c.abs() < 1e-10);
        }
    }

    #[test]
    fn initial_state_round_trip_and_scale_invariance() {
        let engine = gbm_engine(0.3);
        let (u0, v) = initial_state(&engine, &[1.0, 1.0], 0.5, &[0.2]).unwrap();
        let f = engine.eval_f(0.0, 0.0, &v, 0.5, &[0.2], 1).unwrap();
        assert!((f.f_x - 1.0).abs() < 1e-10);
        for m in 0..2 {
            assert!((f.f_v[m] / u0[m] - 1.0).abs() < 1e-10);
        }
        let (u1, _) = initial_state(&engine, &[10.0, 10.0], 0.5, &[0.2]).unwrap();
        for m in 0..2 {
            assert!((u1[m] / u0[m] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_scheme_is_exact_for_gbm() {
        let (sigma0, q) = (0.5, 0.5);
        let engine = gbm_engine(sigma0);
        let (u0, v) = initial_state(&engine, &[1.0, 1.0], 1.0, &[q]).unwrap();
        let cfg = SimulationConfig {
            dt: 1.0 / 64.0,
            ..SimulationConfig::default()
        };
        let path = BrownianPath::generate(3, 0, cfg.dt);
        let res = simulate_path(&engine, &OrderFlow::Constant(vec![q]), &cfg, &u0, &path, 0, Some((&v, 1.0)));
        assert!(!res.stopped);
        for (k, row) in res.u.iter().enumerate() {
            let exact = gbm_value(&u0, 1.0, res.times[k], res.b[k]);
            for m in 0..2 {
                assert!((row[m] / exact[m] - 1.0).abs() < 1e-8);
            }
        }
        // cash stays at x0 along the static solution
        for c in &res.cash {
            assert!((c - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn direct_scheme_converges_at_half_order() {
        let (sigma0, q) = (0.5, 0.5);
        let engine = gbm_engine(sigma0);
        let (u0, v) = initial_state(&engine, &[1.0, 1.0], 1.0, &[q]).unwrap();
        let flow = OrderFlow::Constant(vec![q]);
        let mut diffs = Vec::new();
        for dt in [1.0 / 64.0, 1.0 / 256.0] {
            let mut acc = 0.0;
            for i in 0..40 {
                let path = BrownianPath::generate(9, i, dt);
                let mut out = Vec::new();
                for log in [true, false] {
                    let cfg = SimulationConfig {
                        dt,
                        use_log_coordinates: log,
                        ..SimulationConfig::default()
                    };
                    out.push(simulate_path(&engine, &flow, &cfg, &u0, &path, i, Some((&v, 1.0))).terminal_u()[0]);
                }
                acc += (out[0] - out[1]).abs();
            }
            diffs.push(acc / 40.0);
        }
        for (d, dt) in diffs.iter().zip([1.0 / 64.0, 1.0 / 256.0f64]) {
            assert!(*d < dt.sqrt() * u0[0].abs(), "{diffs:?}");
        }
        // a quarter of the step halves the difference: order sqrt(dt), not dt
        let ratio = diffs[0] / diffs[1];
        assert!((1.4..3.0).contains(&ratio), "{diffs:?}");
    }

    #[test]
    fn feedback_flow_explodes() {
        let engine = gbm_engine(0.0);
        let (u0, v) = initial_state(&engine, &[1.0, 1.0], 0.0, &[0.0]).unwrap();
        let flow = OrderFlow::feedback(50.0, |t, _, _| vec![if t >= 0.5 { 50.0 } else { 0.0 }]);
        for log in [true, false] {
            let cfg = SimulationConfig {
                dt: 1.0 / 256.0,
                explosion_eps: Some(1e-3),
                use_log_coordinates: log,
                ..SimulationConfig::default()
            };
            let path = BrownianPath::generate(5, 0, cfg.dt);
            let res = simulate_path(&engine, &flow, &cfg, &u0, &path, 0, Some((&v, 0.0)));
            assert!(res.stopped);
            assert_eq!(res.stop_reason, StopReason::Explosion);
            let last = res.terminal_u();
            assert!(last.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= -1e-3);
            assert!(res.u.iter().all(|row| row.iter().all(|x| *x < 0.0)));
            assert!(res.tau.unwrap() >= 0.5);
        }
    }

    #[test]
    fn ensemble_is_independent_of_workers() {
        let engine = gbm_engine(0.5);
        let (u0, v) = initial_state(&engine, &[1.0, 1.0], 1.0, &[0.5]).unwrap();
        let cfg = SimulationConfig {
            dt: 1.0 / 16.0,
            n_paths: 40,
            seed: 11,
            ..SimulationConfig::default()
        };
        let flow = OrderFlow::Constant(vec![0.5]);
        let a = run_ensemble_with_workers(&engine, &flow, &cfg, &u0, Some((&v, 1.0)), 3, 1).unwrap();
        let b = run_ensemble_with_workers(&engine, &flow, &cfg, &u0, Some((&v, 1.0)), 3, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.paths.len(), 3);
        assert_eq!(a.summary.completed, 40);
        assert!(a.summary.oracle_error.unwrap() < 1e-8);
    }
}
