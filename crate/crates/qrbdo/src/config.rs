//! Run configuration: every knob of the procedure, serializable so that a
//! result file's config echo replays bit-identically.

use serde::{Deserialize, Serialize};

use crate::cma::CmaSettings;
use crate::error::{QrbdoError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Initial DoE size.
    pub doe0: usize,
    /// Restarts of the discrepancy-optimized LHS for the initial DoE.
    pub doe_restarts: usize,
    /// Global-stage stop level on the low-confidence design fraction.
    pub eta_bar: f64,
    /// Local-accuracy thresholds, switched at equal fractions of the
    /// optimization budget (non-increasing).
    pub eta_q_schedule: Vec<f64>,
    /// Points added per global-stage iteration.
    pub k_global: usize,
    /// Points added per local-stage enrichment (Algorithm parameter K).
    pub k_local: usize,
    /// Monte Carlo size for quantile estimation in the optimization loop.
    pub n_mc: usize,
    /// Monte Carlo size per candidate design in the global stage.
    pub n_mc_global: usize,
    /// Candidate designs per global-stage iteration; 0 means 100 * s_d.
    pub m_candidates: usize,
    /// Optimization iteration budget.
    pub budget: usize,
    pub stagnation_iters: usize,
    pub stagnation_tol: f64,
    /// Deviation-number confidence level for the global stage.
    pub u_stop: f64,
    /// Outside-sampling probability per design dimension of the augmented
    /// space.
    pub alpha_d: f64,
    /// Same per environmental dimension.
    pub alpha_z: f64,
    pub max_global_iters: usize,
    /// Cap on local enrichment rounds per optimizer iteration.
    pub max_local_rounds: usize,
    pub fit_starts: usize,
    pub refit_starts: usize,
    pub theta_lower: f64,
    pub theta_upper: f64,
    /// Initial CMA step size relative to the design box widths.
    pub sigma0_rel: f64,
    /// Only enrich locally around designs improving the current best.
    pub enrich_only_on_improvement: bool,
    /// Gradient-free local refinement on the final surrogate.
    pub refine: bool,
    pub refine_max_evals: usize,
    /// Skip the surrogate entirely: quantiles by Monte Carlo on the true
    /// models (the brute-force reference mode).
    pub brute_force: bool,
    pub replications: usize,
    pub cma: CmaSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            doe0: 10,
            doe_restarts: 5,
            eta_bar: 0.3,
            eta_q_schedule: vec![1.0, 0.5, 0.1],
            k_global: 1,
            k_local: 1,
            n_mc: 10_000,
            n_mc_global: 10_000,
            m_candidates: 0,
            budget: 150,
            stagnation_iters: 30,
            stagnation_tol: 1e-6,
            u_stop: 2.0,
            alpha_d: 2.7e-3,
            alpha_z: 2.7e-3,
            max_global_iters: 25,
            max_local_rounds: 10,
            fit_starts: 10,
            refit_starts: 4,
            theta_lower: 1e-3,
            theta_upper: 10.0,
            sigma0_rel: 0.3,
            enrich_only_on_improvement: false,
            refine: true,
            refine_max_evals: 240,
            brute_force: false,
            replications: 1,
            cma: CmaSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta_bar", self.eta_bar),
            ("u_stop", self.u_stop),
            ("sigma0_rel", self.sigma0_rel),
            ("stagnation_tol", self.stagnation_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(QrbdoError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.eta_q_schedule.is_empty() {
            return Err(QrbdoError::Config("eta_q_schedule must not be empty".into()));
        }
        if self.eta_q_schedule.iter().any(|&t| !(t > 0.0)) {
            return Err(QrbdoError::Config(
                "eta_q_schedule thresholds must be > 0".into(),
            ));
        }
        if self
            .eta_q_schedule
            .windows(2)
            .any(|w| w[1] > w[0])
        {
            return Err(QrbdoError::Config(
                "eta_q_schedule must be non-increasing".into(),
            ));
        }
        if self.replications < 1 {
            return Err(QrbdoError::Config("replications must be >= 1".into()));
        }
        if self.doe0 < 2 {
            return Err(QrbdoError::Config("doe0 must be >= 2".into()));
        }
        if self.budget < 1 {
            return Err(QrbdoError::Config("budget must be >= 1".into()));
        }
        if self.n_mc < 2 || self.n_mc_global < 2 {
            return Err(QrbdoError::Config("Monte Carlo sizes must be >= 2".into()));
        }
        for (name, a) in [("alpha_d", self.alpha_d), ("alpha_z", self.alpha_z)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(QrbdoError::Config(format!("{name} must be in (0,1)")));
            }
        }
        if !(self.theta_lower > 0.0 && self.theta_upper > self.theta_lower) {
            return Err(QrbdoError::Config("theta bounds must satisfy 0 < lo < hi".into()));
        }
        if self.k_global < 1 || self.k_local < 1 {
            return Err(QrbdoError::Config("k_global and k_local must be >= 1".into()));
        }
        Ok(())
    }

    /// Candidate count for the global stage at design dimension `s_d`.
    pub fn m_for(&self, s_d: usize) -> usize {
        if self.m_candidates > 0 {
            self.m_candidates
        } else {
            100 * s_d
        }
    }

    /// Local-accuracy threshold for iteration `i` of `budget`: the
    /// schedule levels switch at equal fractions of the budget.
    pub fn eta_q_threshold(&self, iteration: usize) -> f64 {
        let levels = self.eta_q_schedule.len();
        let span = self.budget.max(1);
        let ix = (iteration * levels) / span;
        self.eta_q_schedule[ix.min(levels - 1)]
    }
}

/// Merges a JSON override object into a base config. Unknown keys are
/// rejected with the offending key named.
pub fn apply_json_overrides(base: &RunConfig, overrides: &serde_json::Value) -> Result<RunConfig> {
    let mut merged = serde_json::to_value(base)?;
    deep_merge(&mut merged, overrides);
    let cfg: RunConfig = serde_json::from_value(merged)
        .map_err(|e| QrbdoError::Config(format!("bad config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn deep_merge(base: &mut serde_json::Value, other: &serde_json::Value) {
    match (base, other) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Declarative marginal from a configuration file: `kind` plus either
/// `mean`/`cov` or explicit `lower`/`upper` for uniforms.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    pub kind: String,
    #[serde(default)]
    pub mean: Option<f64>,
    #[serde(default)]
    pub cov: Option<f64>,
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

impl MarginalSpec {
    pub fn build(&self) -> Result<crate::distributions::Marginal> {
        use crate::distributions::{Marginal, MarginalKind};
        let kind = match self.kind.as_str() {
            "normal" => MarginalKind::Normal,
            "lognormal" => MarginalKind::Lognormal,
            "gumbel" => MarginalKind::Gumbel,
            "weibull" => MarginalKind::Weibull,
            "uniform" => {
                if let (Some(lo), Some(hi)) = (self.lower, self.upper) {
                    return Marginal::uniform(lo, hi);
                }
                MarginalKind::Uniform
            }
            other => {
                return Err(QrbdoError::Config(format!(
                    "env: unknown marginal kind '{other}'"
                )))
            }
        };
        match (self.mean, self.cov) {
            (Some(mean), Some(cov)) => Marginal::from_moments(kind, mean, cov),
            _ => Err(QrbdoError::Config(format!(
                "env: marginal '{}' needs mean and cov (or lower/upper for uniform)",
                self.kind
            ))),
        }
    }
}

/// Problem-level overrides a configuration file may apply on top of a
/// named problem.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemOverrides {
    /// Hard-constraint thresholds, one per constraint.
    pub thresholds: Option<Vec<f64>>,
    /// Quantile levels, one per constraint (alternative: target_pf).
    pub alphas: Option<Vec<f64>>,
    /// Target failure probabilities; alphas = 1 - target_pf.
    pub target_pf: Option<Vec<f64>>,
    pub initial_design: Option<Vec<f64>>,
    /// Replacement environmental marginals, in model order.
    pub env: Option<Vec<MarginalSpec>>,
}

/// Applies file-level problem overrides in place.
pub fn apply_problem_overrides(
    problem: &mut crate::problem::Problem,
    o: &ProblemOverrides,
) -> Result<()> {
    let n_h = problem.constraints.len();
    if let Some(ts) = &o.thresholds {
        if ts.len() != n_h {
            return Err(QrbdoError::Config(format!(
                "thresholds: expected {n_h} entries, got {}",
                ts.len()
            )));
        }
        for (c, &t) in problem.constraints.iter_mut().zip(ts) {
            c.threshold = t;
        }
    }
    if o.alphas.is_some() && o.target_pf.is_some() {
        return Err(QrbdoError::Config(
            "alphas and target_pf are mutually exclusive".into(),
        ));
    }
    let alphas = match (&o.alphas, &o.target_pf) {
        (Some(a), None) => Some(a.clone()),
        (None, Some(p)) => Some(p.iter().map(|pf| 1.0 - pf).collect()),
        _ => None,
    };
    if let Some(al) = alphas {
        if al.len() != n_h {
            return Err(QrbdoError::Config(format!(
                "alphas: expected {n_h} entries, got {}",
                al.len()
            )));
        }
        for (c, &a) in problem.constraints.iter_mut().zip(&al) {
            c.alpha = a;
        }
    }
    if let Some(d0) = &o.initial_design {
        if d0.len() != problem.model.s_d() {
            return Err(QrbdoError::Config(format!(
                "initial_design: expected {} entries, got {}",
                problem.model.s_d(),
                d0.len()
            )));
        }
        problem.initial_design = d0.clone();
    }
    if let Some(env) = &o.env {
        let marginals: Result<Vec<_>> = env.iter().map(MarginalSpec::build).collect();
        problem.model.replace_env_marginals(marginals?)?;
    }
    problem.validate()
}
