#![allow(dead_code)]

use impact_sde::fields::FieldEngine;
use impact_sde::market::{MarketModel, NamedFunction, PayoffSpec};
use impact_sde::utility::{build_from_risk_aversion, AgentSet, RiskAversionShape};

pub fn tanh_agents(levels: &[f64]) -> AgentSet {
    let specs = levels
        .iter()
        .map(|&level| {
            let shape = RiskAversionShape::Tanh {
                level,
                amplitude: 0.5,
                rate: 1.0,
            };
            let c = shape.default_bound();
            build_from_risk_aversion(shape, c, 4).unwrap()
        })
        .collect();
    AgentSet::new(specs).unwrap()
}

pub fn linear_model(sigma0: f64) -> MarketModel {
    MarketModel::new(PayoffSpec::linear(0.0, sigma0), vec![PayoffSpec::linear(0.0, 1.0)]).unwrap()
}

pub fn sine_model() -> MarketModel {
    let g = PayoffSpec::Named {
        function: NamedFunction::Sin,
        amplitude: 0.3,
        rate: 1.0,
    };
    MarketModel::new(g, vec![PayoffSpec::linear(0.0, 1.0)]).unwrap()
}

pub fn exponential_engine(a: &[f64], sigma0: f64, nodes: usize) -> FieldEngine {
    FieldEngine::new(AgentSet::exponential(a).unwrap(), linear_model(sigma0), nodes).unwrap()
}

pub fn tanh_engine(levels: &[f64], nodes: usize) -> FieldEngine {
    FieldEngine::new(tanh_agents(levels), sine_model(), nodes).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
