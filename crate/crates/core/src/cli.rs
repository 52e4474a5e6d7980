//! Command-line front end: `check`, `fields`, `simulate` and `oracle`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::conditions::{check_theorem, CheckOptions, Status};
use crate::config::{ConfigError, ExperimentConfig};
use crate::error::ModelError;
use crate::sim::{closed_form_volatility, gbm_value, initial_state, run_ensemble, Ensemble, PathResult};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "impact-sde", version, about = "Price-impact fields and utility-process simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the hypotheses of the existence theorems.
    Check(CheckArgs),
    /// Tabulate F, H and K over the configured grid.
    Fields(CommonArgs),
    /// Simulate an ensemble of utility paths.
    Simulate(CommonArgs),
    /// Compare terminal simulated utilities with an exact oracle.
    Oracle(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "output")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub quadrature: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Check a single theorem (1, 2 or 3) instead of all three.
    #[arg(long)]
    pub theorem: Option<u8>,
}

/// Loads the config and applies the command-line overrides.
pub fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(&args.config).map_err(|source| CliError::Io {
        path: args.config.clone(),
        source,
    })?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = args.seed {
        cfg.sim.seed = seed;
    }
    if let Some(paths) = args.paths {
        cfg.sim.paths = paths;
    }
    if let Some(dt) = args.dt {
        cfg.sim.dt = dt;
    }
    if let Some(n) = args.quadrature {
        cfg.sim.quadrature = n;
    }
    if let Some(eps) = args.eps {
        cfg.sim.eps = Some(eps);
    }
    // overrides go through the same validation as the file
    Ok(ExperimentConfig::parse(&cfg.echo())?)
}

/// Fixed-width scientific notation with `digits` significant digits.
pub fn format_number(x: f64, digits: usize) -> String {
    format!("{:.*e}", digits.saturating_sub(1), x)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn header(cfg: &ExperimentConfig) -> String {
    format!("# config_sha256={}\n", cfg.hash())
}

fn csv_row(values: &[f64], digits: usize) -> String {
    values
        .iter()
        .map(|v| format_number(*v, digits))
        .collect::<Vec<_>>()
        .join(",")
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Per-path CSV: `t,B,U1..UM,cash,v1..vM,Q1..QJ,stopped`.
pub fn path_csv(cfg: &ExperimentConfig, path: &PathResult) -> String {
    let digits = cfg.output.precision;
    let (m, j) = (cfg.m(), cfg.j());
    let mut out = header(cfg);
    let mut cols = vec!["t".to_string(), "B".to_string()];
    cols.extend(numbered("U", m));
    cols.push("cash".into());
    cols.extend(numbered("v", m));
    cols.extend(numbered("Q", j));
    cols.push("stopped".into());
    out.push_str(&cols.join(","));
    out.push('\n');
    let rows = path.times.len();
    for k in 0..rows {
        let mut vals = vec![path.times[k], path.b[k]];
        vals.extend(&path.u[k]);
        vals.push(path.cash[k]);
        vals.extend(&path.v[k]);
        vals.extend(&path.q[k]);
        let stopped = path.stopped && k + 1 == rows;
        let _ = writeln!(out, "{},{}", csv_row(&vals, digits), u8::from(stopped));
    }
    out
}

fn summary_text(cfg: &ExperimentConfig, ens: &Ensemble) -> String {
    let digits = cfg.output.precision;
    let s = &ens.summary;
    let mut out = header(cfg);
    let _ = writeln!(out, "paths={}", s.n_paths);
    let _ = writeln!(out, "completed={}", s.completed);
    let _ = writeln!(out, "explosions={}", s.explosions);
    let _ = writeln!(out, "conjugate_failures={}", s.conjugate_failures);
    let _ = writeln!(out, "fraction_stopped={}", format_number(s.fraction_stopped(), digits));
    for m in 0..s.u0.len() {
        let _ = writeln!(out, "U0_{}={}", m + 1, format_number(s.u0[m], digits));
        let _ = writeln!(out, "mean_U1_{}={}", m + 1, format_number(s.mean[m], digits));
        let _ = writeln!(out, "stderr_U1_{}={}", m + 1, format_number(s.stderr[m], digits));
    }
    for slice in &s.checkpoints {
        for m in 0..slice.mean.len() {
            let _ = writeln!(
                out,
                "mean_U{}_t{}={}",
                m + 1,
                slice.t,
                format_number(slice.mean[m], digits)
            );
        }
    }
    if let Some(e) = s.oracle_error {
        let _ = writeln!(out, "gbm_mean_abs_error={}", format_number(e, digits));
    }
    out
}

fn simulate(cfg: &ExperimentConfig, keep: usize) -> Result<(Ensemble, Vec<f64>, Vec<f64>), CliError> {
    let engine = cfg.build_engine()?;
    let flow = cfg.build_flow()?;
    let (v0, x0) = cfg.initial();
    let (u0, v) = initial_state(&engine, &v0, x0, &cfg.start_position())?;
    let ens = run_ensemble(&engine, &flow, &cfg.simulation(), &u0, Some((&v, x0)), keep)?;
    Ok((ens, u0, v))
}

fn run_simulate(args: &CommonArgs) -> Result<i32, CliError> {
    let cfg = load_config(args)?;
    let keep = cfg.output.path_files.min(cfg.sim.paths);
    let (ens, _, _) = simulate(&cfg, keep)?;
    for p in &ens.paths {
        write_file(&args.out, &format!("path_{:05}.csv", p.index), &path_csv(&cfg, p))?;
    }
    let summary = summary_text(&cfg, &ens);
    write_file(&args.out, "summary.txt", &summary)?;
    write_file(&args.out, "config.toml", &cfg.echo())?;
    print!("{summary}");
    Ok(0)
}

fn run_oracle(args: &CommonArgs) -> Result<i32, CliError> {
    let cfg = load_config(args)?;
    let flow = cfg.build_flow()?;
    let Some(q) = flow.constant_position().map(<[f64]>::to_vec) else {
        return Err(CliError::Usage("the oracle needs a constant order flow".into()));
    };
    let (ens, u0, v) = simulate(&cfg, 0)?;
    let engine = cfg.build_engine()?;
    let (_, x0) = cfg.initial();
    let vol = closed_form_volatility(&engine, &flow);
    let digits = cfg.output.precision;
    let m = cfg.m();
    let mut out = header(&cfg);
    let mut cols = vec!["path".to_string(), "B1".to_string()];
    cols.extend(numbered("U", m));
    cols.extend(numbered("oracle", m));
    cols.push("abs_err".into());
    cols.push("stopped".into());
    out.push_str(&cols.join(","));
    out.push('\n');
    let mut errors = Vec::new();
    for p in &ens.terminals {
        let b1 = p.terminal_b();
        let exact = match vol {
            Some(s) => gbm_value(&u0, s, 1.0, b1),
            None => engine.eval_f(1.0, b1, &v, x0, &q, 1)?.f_v,
        };
        let err = exact
            .iter()
            .zip(p.terminal_u())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !p.stopped {
            errors.push(err);
        }
        let mut vals = vec![b1];
        vals.extend(p.terminal_u());
        vals.extend(&exact);
        vals.push(err);
        let _ = writeln!(out, "{},{},{}", p.index, csv_row(&vals, digits), u8::from(p.stopped));
    }
    write_file(&args.out, "oracle.csv", &out)?;
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let mut summary = header(&cfg);
    let _ = writeln!(summary, "oracle={}", if vol.is_some() { "gbm" } else { "static" });
    let _ = writeln!(summary, "dt={}", cfg.sim.dt);
    let _ = writeln!(summary, "compared_paths={}", errors.len());
    let _ = writeln!(summary, "mean_abs_error={}", format_number(mean, digits));
    let _ = writeln!(summary, "max_abs_error={}", format_number(max, digits));
    write_file(&args.out, "oracle_summary.txt", &summary)?;
    print!("{summary}");
    Ok(0)
}

fn run_fields(args: &CommonArgs) -> Result<i32, CliError> {
    let cfg = load_config(args)?;
    let engine = cfg.build_engine()?;
    let grid = cfg.fields.clone().expect("resolved on parse");
    let digits = cfg.output.precision;
    let (m, j) = (cfg.m(), cfg.j());
    let mut out = header(&cfg);
    let mut cols = vec!["t".to_string(), "z".to_string()];
    cols.extend(numbered("v", m));
    cols.push("x".into());
    cols.extend(numbered("q", j));
    cols.push("F".into());
    cols.push("Fx".into());
    cols.extend(numbered("Fv", m));
    cols.push("H".into());
    cols.extend(numbered("Hv", m));
    cols.extend(numbered("K", m));
    out.push_str(&cols.join(","));
    out.push('\n');
    for &t in &grid.t {
        for &z in &grid.z {
            for v in &grid.v {
                for &x in &grid.x {
                    for q in &grid.q {
                        let p = engine.eval_point(t, z, v, x, q)?;
                        let k = engine
                            .eval_point_with_k(t, z, v, x, q)
                            .ok()
                            .and_then(|p| p.k)
                            .unwrap_or_else(|| vec![f64::NAN; m]);
                        let mut vals = vec![t, z];
                        vals.extend(v);
                        vals.push(x);
                        vals.extend(q);
                        vals.push(p.values.f);
                        vals.push(p.values.f_x);
                        vals.extend(&p.values.f_v);
                        vals.push(p.h);
                        vals.extend(&p.h_v);
                        vals.extend(&k);
                        out.push_str(&csv_row(&vals, digits));
                        out.push('\n');
                    }
                }
            }
        }
    }
    write_file(&args.out, "fields.csv", &out)?;
    Ok(0)
}

fn run_check(args: &CheckArgs) -> Result<i32, CliError> {
    let cfg = load_config(&args.common)?;
    let agents = cfg.build_agents()?;
    let model = cfg.build_model()?;
    let section = cfg.check.clone().expect("resolved on parse");
    let opts = CheckOptions {
        p_list: section.p,
        b: section.b.unwrap_or(2.0),
        functional_nodes: section.functional_nodes,
        ..CheckOptions::default()
    };
    let theorems: Vec<u8> = match args.theorem {
        Some(t @ 1..=3) => vec![t],
        Some(t) => return Err(CliError::Usage(format!("unknown theorem {t}; expected 1, 2 or 3"))),
        None => vec![1, 2, 3],
    };
    let mut text = header(&cfg);
    let mut verdicts = Vec::new();
    for th in theorems {
        let report = check_theorem(&agents, &model, th, &opts);
        let _ = writeln!(text, "{report}");
        verdicts.push(report.verdict);
    }
    write_file(&args.common.out, "check.txt", &text)?;
    print!("{text}");
    // a single requested theorem must not fail; otherwise at least one regime must apply
    let failed = if args.theorem.is_some() {
        verdicts.contains(&Status::Fail)
    } else {
        !verdicts.contains(&Status::Pass)
    };
    Ok(i32::from(failed))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Check(args) => run_check(args),
        Command::Fields(args) => run_fields(args),
        Command::Simulate(args) => run_simulate(args),
        Command::Oracle(args) => run_oracle(args),
    }
}
