//! Constrained (1+1)-CMA-ES (Arnold & Hansen 2012): single parent, single
//! offspring, smoothed 1/5th-success step-size control, Cholesky-factor
//! rank-one covariance updates, and exponentially fading constraint
//! direction vectors that shrink the sampling distribution away from
//! infeasible directions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QrbdoError, Result};
use crate::rng::uniform_open01;
use crate::special::std_normal_inv_cdf;

/// Strategy constants; `None` entries resolve to the dimension-dependent
/// defaults of the reference algorithm.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CmaSettings {
    /// Target smoothed success rate (default 2/11).
    pub p_target: f64,
    /// Success-rate smoothing (default 1/12).
    pub c_p: f64,
    /// Success threshold above which the search path is left out of the
    /// covariance update (default 0.44).
    pub p_thresh: f64,
    /// Step-size damping; default 1 + n/2.
    pub damping: Option<f64>,
    /// Search-path fading; default 2/(n+2).
    pub c_path: Option<f64>,
    /// Rank-one covariance learning rate; default 2/(n^2+6).
    pub c_cov: Option<f64>,
    /// Constraint-vector fading; default 1/(n+2).
    pub c_constraint: Option<f64>,
    /// Constraint covariance shrink rate; default 0.1/(n+2).
    pub beta_constraint: Option<f64>,
}

impl Default for CmaSettings {
    fn default() -> Self {
        CmaSettings {
            p_target: 2.0 / 11.0,
            c_p: 1.0 / 12.0,
            p_thresh: 0.44,
            damping: None,
            c_path: None,
            c_cov: None,
            c_constraint: None,
            beta_constraint: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CmaConstants {
    pub p_target: f64,
    pub c_p: f64,
    pub p_thresh: f64,
    pub damping: f64,
    pub c_path: f64,
    pub c_cov: f64,
    pub c_constraint: f64,
    pub beta_constraint: f64,
}

impl CmaConstants {
    pub fn for_dim(n: usize, s: &CmaSettings) -> Self {
        let nf = n as f64;
        CmaConstants {
            p_target: s.p_target,
            c_p: s.c_p,
            p_thresh: s.p_thresh,
            damping: s.damping.unwrap_or(1.0 + nf / 2.0),
            c_path: s.c_path.unwrap_or(2.0 / (nf + 2.0)),
            c_cov: s.c_cov.unwrap_or(2.0 / (nf * nf + 6.0)),
            c_constraint: s.c_constraint.unwrap_or(1.0 / (nf + 2.0)),
            beta_constraint: s.beta_constraint.unwrap_or(0.1 / (nf + 2.0)),
        }
    }
}

/// What the evaluator reports for one offspring.
#[derive(Debug, Clone)]
pub enum OffspringEval {
    /// A cheap soft constraint is violated; no cost or quantiles computed.
    SoftInfeasible { violated: Vec<usize> },
    /// Full evaluation. `hard_violated` indexes the violated hard
    /// constraints; `violation` is a normalized total violation used to
    /// rank infeasible designs while no feasible parent is known.
    Evaluated {
        cost: f64,
        hard_violated: Vec<usize>,
        violation: f64,
    },
}

/// Search state. The covariance factor `a` satisfies `C = a a^T`; `a z`
/// with `z ~ N(0, I)` samples the adapted metric.
#[derive(Debug, Clone)]
pub struct CmaState {
    pub current: DVector<f64>,
    pub current_cost: f64,
    pub current_feasible: bool,
    pub current_violation: f64,
    pub sigma: f64,
    pub a: DMatrix<f64>,
    pub p_succ: f64,
    pub s_path: DVector<f64>,
    /// Fading direction vectors, one per constraint (soft first, then
    /// hard).
    pub v_constraints: Vec<DVector<f64>>,
    pub iteration: usize,
    sigma_floor: f64,
    sigma_cap: f64,
}

/// Outcome of one (1+1) iteration.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub offspring: Vec<f64>,
    /// True when the offspring replaced the parent.
    pub accepted: bool,
    /// True when cost/quantiles were computed (soft-feasible offspring).
    pub evaluated: bool,
    pub feasible: bool,
    pub cost: f64,
}

impl CmaState {
    /// `scales` sets the initial per-dimension sampling spread
    /// (`sigma * scales[i]` is the initial std in dimension i).
    pub fn new(
        start: DVector<f64>,
        start_cost: f64,
        start_feasible: bool,
        start_violation: f64,
        sigma: f64,
        scales: &[f64],
        n_constraints: usize,
        consts: &CmaConstants,
    ) -> Result<Self> {
        if sigma <= 0.0 || scales.iter().any(|&s| s <= 0.0) {
            return Err(QrbdoError::Config(
                "cma needs positive initial step size and scales".into(),
            ));
        }
        let n = start.len();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = scales[i];
        }
        Ok(CmaState {
            current: start,
            current_cost: start_cost,
            current_feasible: start_feasible,
            current_violation: start_violation,
            sigma,
            a,
            p_succ: consts.p_target,
            s_path: DVector::zeros(n),
            v_constraints: vec![DVector::zeros(n); n_constraints],
            iteration: 0,
            sigma_floor: sigma * 1e-12,
            sigma_cap: sigma * 1e4,
        })
    }

    fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| std_normal_inv_cdf(uniform_open01(rng))))
    }

    // A' with C' = a0sq * C + c1 * s s^T, keeping C = A A^T.
    fn rank_one_update(&mut self, s: DVector<f64>, a0sq: f64, c1: f64) {
        let a0 = a0sq.sqrt();
        let w = match self.a.clone().lu().solve(&s) {
            Some(w) => w,
            None => return,
        };
        let w2 = w.norm_squared();
        if w2 <= 0.0 {
            self.a *= a0;
            return;
        }
        let b = (a0 / w2) * ((1.0 + (c1 / a0sq) * w2).sqrt() - 1.0);
        let outer = &s * w.transpose();
        self.a = &self.a * a0 + outer * b;
    }
}

/// Runs one iteration: sample an offspring, evaluate it through
/// `evaluate`, and update the state. Constraint-violating offspring fade
/// the sampling distribution away from their violated directions;
/// feasible offspring drive the success rule and the covariance path.
pub fn cma_step<R, F>(
    state: &mut CmaState,
    consts: &CmaConstants,
    mut evaluate: F,
    rng: &mut R,
) -> Result<StepReport>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64]) -> Result<OffspringEval>,
{
    let n = state.current.len();
    let z = CmaState::standard_normal(n, rng);
    let az = &state.a * &z;
    let offspring = &state.current + &az * state.sigma;
    let off_slice: Vec<f64> = offspring.iter().copied().collect();

    state.iteration += 1;
    let eval = evaluate(&off_slice)?;

    let mut report = StepReport {
        offspring: off_slice,
        accepted: false,
        evaluated: false,
        feasible: false,
        cost: f64::NAN,
    };

    let violated: Vec<usize> = match &eval {
        OffspringEval::SoftInfeasible { violated } => violated.clone(),
        OffspringEval::Evaluated { hard_violated, .. } => hard_violated.clone(),
    };

    if !violated.is_empty() {
        // Fade the violated constraint vectors toward the step direction
        // and shrink the factor away from them.
        if violated.iter().any(|&j| j >= state.v_constraints.len()) {
            return Err(QrbdoError::Config(
                "constraint index out of range in cma step".into(),
            ));
        }
        for &j in &violated {
            state.v_constraints[j] =
                &state.v_constraints[j] * (1.0 - consts.c_constraint) + &az * consts.c_constraint;
        }
        let lu = state.a.clone().lu();
        let mut shrink = DMatrix::zeros(n, n);
        let mut used = 0usize;
        for &j in &violated {
            let v = &state.v_constraints[j];
            if let Some(w) = lu.solve(v) {
                let w2 = w.norm_squared();
                if w2 > 0.0 {
                    shrink += v * w.transpose() / w2;
                    used += 1;
                }
            }
        }
        if used > 0 {
            state.a -= shrink * (consts.beta_constraint / used as f64);
        }
        if let OffspringEval::Evaluated {
            cost, violation, ..
        } = eval
        {
            report.evaluated = true;
            report.cost = cost;
            // While no feasible parent exists, descend on total violation.
            if !state.current_feasible && violation < state.current_violation {
                state.current = offspring;
                state.current_cost = cost;
                state.current_violation = violation;
                report.accepted = true;
            }
        }
        return Ok(report);
    }

    // Feasible offspring: smoothed success rule.
    let (cost, _violation) = match eval {
        OffspringEval::Evaluated {
            cost, violation, ..
        } => (cost, violation),
        OffspringEval::SoftInfeasible { .. } => unreachable!("handled above"),
    };
    report.evaluated = true;
    report.feasible = true;
    report.cost = cost;

    let success = !state.current_feasible || cost <= state.current_cost;
    state.p_succ = (1.0 - consts.c_p) * state.p_succ + consts.c_p * f64::from(success as u8);
    state.sigma *= ((state.p_succ - consts.p_target) / (consts.damping * (1.0 - consts.p_target)))
        .exp();
    state.sigma = state.sigma.clamp(state.sigma_floor, state.sigma_cap);

    if success {
        let c = consts.c_path;
        if state.p_succ < consts.p_thresh {
            state.s_path = &state.s_path * (1.0 - c) + &az * (c * (2.0 - c)).sqrt();
            state.rank_one_update(state.s_path.clone(), 1.0 - consts.c_cov, consts.c_cov);
        } else {
            state.s_path *= 1.0 - c;
            state.rank_one_update(
                state.s_path.clone(),
                1.0 - consts.c_cov + consts.c_cov * c * (2.0 - c),
                consts.c_cov,
            );
        }
        state.current = offspring;
        state.current_cost = cost;
        state.current_feasible = true;
        state.current_violation = 0.0;
        report.accepted = true;
    }
    Ok(report)
}
