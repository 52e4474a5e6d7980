//! Numerical toolkit for the market makers' expected-utility SDE of a
//! large-investor price impact model.
//!
//! The layers build on each other:
//! - [`utility`]: utilities with bounded absolute risk aversion,
//! - [`pareto`]: the weighted sup-convolution `r(v, x)` and its partials,
//! - [`market`]: endowment and dividend payoffs of the terminal Brownian state,
//! - [`fields`]: conditional expectations `F`, Clark–Ocone integrands `H`,
//!   the conjugate field `G` and the SDE coefficient `K`,
//! - [`sim`]: Euler–Maruyama simulation of the utility process with explosion detection,
//! - [`conditions`]: checks of the existence and uniqueness hypotheses,
//! - [`config`] and [`cli`]: experiment files and the command line front end.

pub mod cli;
pub mod conditions;
pub mod config;
pub mod error;
pub mod fields;
pub mod market;
pub mod pareto;
pub mod quadrature;
pub mod sim;
pub mod taylor;
pub mod utility;

pub use error::{ModelError, Result};
