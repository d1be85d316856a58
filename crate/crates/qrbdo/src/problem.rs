//! Problem definition: cost, soft constraints, expensive performance
//! models with quantile thresholds, and the input probabilistic model.

use std::cell::Cell;

use crate::distributions::ProbabilisticModel;
use crate::error::{QrbdoError, Result};

pub type ResponseFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A hard constraint `Q_alpha(M_k) <= threshold` on one response channel.
#[derive(Debug, Clone)]
pub struct HardConstraint {
    pub name: String,
    /// Upper threshold `g_bar` on the response quantile.
    pub threshold: f64,
    /// Quantile level `alpha = 1 - target failure probability`.
    pub alpha: f64,
}

/// Published solution a benchmark is validated against.
#[derive(Debug, Clone)]
pub struct Reference {
    pub design: Vec<f64>,
    pub cost: f64,
    /// Published range of true-model calls, when reported.
    pub calls: Option<(usize, usize)>,
    pub citation: String,
}

/// An optimization problem under input uncertainty.
///
/// `responses` evaluates every hard-constraint response at one input point
/// `w = (x, z)`; a single invocation is one "true model call" (the
/// expensive simulation returns all outputs at once).
pub struct Problem {
    pub name: String,
    pub model: ProbabilisticModel,
    pub cost: ScalarFn,
    /// Cheap analytical constraints `f_j(d) <= 0` on the design only.
    pub soft: Vec<(String, ScalarFn)>,
    pub responses: ResponseFn,
    pub constraints: Vec<HardConstraint>,
    pub initial_design: Vec<f64>,
    pub reference: Option<Reference>,
}

impl Problem {
    pub fn n_hard(&self) -> usize {
        self.constraints.len()
    }

    pub fn s_d(&self) -> usize {
        self.model.s_d()
    }

    pub fn cost_of(&self, d: &[f64]) -> f64 {
        (self.cost)(d)
    }

    /// Values of the soft constraints at `d` (feasible when all <= 0).
    pub fn soft_values(&self, d: &[f64]) -> Vec<f64> {
        self.soft.iter().map(|(_, f)| f(d)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.constraints.is_empty() {
            return Err(QrbdoError::Config(format!(
                "problem {} has no hard constraints",
                self.name
            )));
        }
        for c in &self.constraints {
            if !(c.alpha > 0.0 && c.alpha < 1.0) {
                return Err(QrbdoError::Config(format!(
                    "constraint {} has level {} outside (0,1)",
                    c.name, c.alpha
                )));
            }
        }
        if self.initial_design.len() != self.model.s_d() {
            return Err(QrbdoError::Config(format!(
                "initial design dimension {} does not match the model ({})",
                self.initial_design.len(),
                self.model.s_d()
            )));
        }
        Ok(())
    }
}

/// Counting wrapper around a problem's expensive responses.
pub struct Evaluator<'a> {
    problem: &'a Problem,
    calls: Cell<usize>,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        Evaluator {
            problem,
            calls: Cell::new(0),
        }
    }

    /// One true model call: all hard-constraint responses at `w`.
    pub fn evaluate(&self, w: &[f64]) -> Vec<f64> {
        self.calls.set(self.calls.get() + 1);
        (self.problem.responses)(w)
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DesignVariable;

    fn toy() -> Problem {
        Problem {
            name: "toy".into(),
            model: ProbabilisticModel::new(
                vec![DesignVariable::deterministic("d", 0.0, 1.0)],
                vec![],
            )
            .unwrap(),
            cost: Box::new(|d| d[0]),
            soft: vec![("box".into(), Box::new(|d: &[f64]| -d[0]))],
            responses: Box::new(|w| vec![w[0] * 2.0]),
            constraints: vec![HardConstraint {
                name: "g1".into(),
                threshold: 1.0,
                alpha: 0.95,
            }],
            initial_design: vec![0.5],
            reference: None,
        }
    }

    #[test]
    fn evaluator_counts_each_call_once() {
        let p = toy();
        let ev = Evaluator::new(&p);
        assert_eq!(ev.calls(), 0);
        assert_eq!(ev.evaluate(&[0.25]), vec![0.5]);
        ev.evaluate(&[0.5]);
        assert_eq!(ev.calls(), 2);
    }

    #[test]
    fn validation_catches_bad_levels() {
        let mut p = toy();
        p.constraints[0].alpha = 1.0;
        assert!(p.validate().is_err());
        let mut p = toy();
        p.constraints.clear();
        assert!(p.validate().is_err());
    }
}
