//! The full optimization procedure: initial DoE, global enrichment,
//! constrained (1+1)-CMA-ES with per-iteration quantile estimation and
//! local-accuracy gating, and optional local refinement on the final
//! surrogate.
//!
//! A `brute_force` run takes the same path with the surrogate replaced by
//! direct Monte Carlo on the true models (the reference "no surrogate"
//! mode); every response evaluation is counted.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::cma::{cma_step, CmaConstants, CmaState, OffspringEval};
use crate::config::RunConfig;
use crate::doe::optimize_lhs;
use crate::enrichment::{
    global_stage, local_stage_step, GlobalStageConfig, Stage, SurrogateSettings,
    Surrogates,
};
use crate::error::{QrbdoError, Result};
use crate::problem::{Evaluator, Problem};
use crate::quantile::{
    draw_mc_sample, eta_ratio, prediction_std, quantile_from_prediction, quantile_index,
    QuantileEstimate,
};
use crate::rng::{stream_rng, uniform_open01, Stream};
use crate::space::{build_augmented, AugmentedSpace};

/// Per-constraint quantile numbers logged per iteration and reported at
/// the final design.
#[derive(Debug, Clone, Serialize)]
pub struct QuantileSnapshot {
    pub constraint: String,
    pub q: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub eta_q: f64,
}

/// One optimizer iteration in the run log (iteration 0 is the initial
/// parent evaluation).
#[derive(Debug, Clone)]
pub struct IterationRow {
    pub iter: usize,
    pub design: Vec<f64>,
    pub cost: f64,
    /// Quantiles were computed (soft-feasible offspring).
    pub evaluated: bool,
    pub accepted: bool,
    pub feasible: bool,
    /// DoE points added by local enrichment during this iteration.
    pub enriched: usize,
    /// Cumulative true-model calls after the iteration.
    pub calls: usize,
    pub quantiles: Vec<QuantileSnapshot>,
}

/// A DoE point for the standalone DoE export.
#[derive(Debug, Clone)]
pub struct DoeRecord {
    pub stage: String,
    pub iteration: usize,
    pub phys: Vec<f64>,
    pub responses: Vec<f64>,
}

/// Fitted-surrogate summary for run metadata.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub constraint: String,
    pub theta: Vec<f64>,
    pub beta_hat: f64,
    pub sigma2: f64,
    pub nugget: f64,
    pub n: usize,
}

/// Outcome of a run.
#[derive(Debug)]
pub struct RbdoResult {
    pub problem: String,
    pub d_star: Vec<f64>,
    pub cost: f64,
    pub feasible: bool,
    pub quantiles: Vec<QuantileSnapshot>,
    pub true_model_calls: usize,
    pub initial_doe: usize,
    pub global_added: usize,
    pub local_added: usize,
    pub iterations: usize,
    pub stop_reason: String,
    pub global_eta_final: f64,
    pub global_converged: bool,
    pub refined: bool,
    pub d_before_refine: Vec<f64>,
    pub history: Vec<IterationRow>,
    pub doe_records: Vec<DoeRecord>,
    pub enrichment_events: Vec<EnrichmentSummary>,
    pub model_summaries: Vec<ModelSummary>,
    pub space_lower: Vec<f64>,
    pub space_upper: Vec<f64>,
    pub config: RunConfig,
}

/// Enrichment event without the bulky point payload (points live in the
/// DoE records).
#[derive(Debug, Clone, Serialize)]
pub struct EnrichmentSummary {
    pub stage: Stage,
    pub iteration: usize,
    pub added: usize,
    pub u_min: f64,
    pub eta: f64,
}

struct EvalDetail {
    feasible: bool,
    snapshots: Vec<QuantileSnapshot>,
    enriched: usize,
}

struct Engine<'a> {
    problem: &'a Problem,
    config: &'a RunConfig,
    space: AugmentedSpace,
    evaluator: Evaluator<'a>,
    surrogates: Option<Surrogates>,
    doe_records: Vec<DoeRecord>,
    enrichment_events: Vec<EnrichmentSummary>,
    local_added: usize,
    best_cost: f64,
    bounds: Vec<(f64, f64)>,
    // eta_q denominators (|g_bar|, or the box-wide prediction std for
    // zero thresholds), cached per refit generation.
    eta_scales: Vec<f64>,
    eta_scales_generation: Option<u64>,
}

impl Engine<'_> {
    fn seed(&self) -> u64 {
        self.config.seed
    }

    // Indices of violated cheap constraints: per-dimension box bounds
    // first (2 per dimension), then the problem's soft constraints.
    fn soft_violations(&self, d: &[f64]) -> Vec<usize> {
        let mut out = Vec::new();
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if d[j] < lo {
                out.push(2 * j);
            }
            if d[j] > hi {
                out.push(2 * j + 1);
            }
        }
        let base = 2 * self.bounds.len();
        for (j, v) in self.problem.soft_values(d).iter().enumerate() {
            if *v > 0.0 {
                out.push(base + j);
            }
        }
        out
    }

    fn n_soft(&self) -> usize {
        2 * self.bounds.len() + self.problem.soft.len()
    }

    // Refreshes the per-constraint eta_q scales: the threshold magnitude,
    // or for zero thresholds the prediction spread over a large LHS sample
    // of the augmented box (recomputed after every refit).
    fn refresh_eta_scales(&mut self) {
        let surr = self.surrogates.as_ref().expect("surrogate mode");
        let generation = surr.fit_events();
        if self.eta_scales_generation == Some(generation) {
            return;
        }
        let n_box = self.config.n_mc_global.max(2_000);
        self.eta_scales = self
            .problem
            .constraints
            .iter()
            .enumerate()
            .map(|(l, c)| {
                if c.threshold != 0.0 {
                    c.threshold.abs()
                } else {
                    let mut rng =
                        stream_rng(self.config.seed, Stream::BoxScale, &[l as u64, generation]);
                    crate::quantile::prediction_std_over_box(&surr.models[l], n_box, &mut rng)
                }
            })
            .collect();
        self.eta_scales_generation = Some(generation);
    }

    // Quantile estimates at `d` with local-accuracy gating and enrichment
    // (surrogate mode) or direct true-model Monte Carlo (brute force).
    // Returns the per-constraint estimates with eta filled, plus the
    // violation scales.
    fn estimate(
        &mut self,
        d: &[f64],
        iter: usize,
        stream: Stream,
        allow_enrichment: bool,
    ) -> Result<(Vec<QuantileEstimate>, Vec<f64>, usize)> {
        if self.config.brute_force {
            let (ests, scales) = self.brute_estimate(d, iter, stream)?;
            return Ok((ests, scales, 0));
        }
        let thresholds: Vec<f64> = self
            .problem
            .constraints
            .iter()
            .map(|c| c.threshold)
            .collect();
        self.refresh_eta_scales();
        let eta_q_bar = self.config.eta_q_threshold(iter.saturating_sub(1));
        let gate = allow_enrichment
            && (!self.config.enrich_only_on_improvement
                || self.problem.cost_of(d) < self.best_cost);
        let mut enriched = 0usize;
        let mut round: u64 = 0;
        let seed = self.seed();
        loop {
            let mut rng = stream_rng(seed, stream, &[iter as u64, round]);
            let sample =
                draw_mc_sample(&self.problem.model, &self.space, d, self.config.n_mc, &mut rng)?;
            let Engine {
                surrogates,
                evaluator,
                problem,
                config,
                eta_scales,
                ..
            } = self;
            let surr = surrogates.as_mut().expect("surrogate mode");
            let preds = surr.predict_sample(&sample.unit);
            let mut ests = Vec::with_capacity(preds.len());
            for (l, pred) in preds.iter().enumerate() {
                let mut est =
                    quantile_from_prediction(&sample, pred, problem.constraints[l].alpha)?;
                est.eta_q = eta_ratio(&est, thresholds[l], eta_scales[l])?;
                ests.push(est);
            }
            if !gate || round as usize >= config.max_local_rounds {
                let scales = eta_scales.clone();
                return Ok((ests, scales, enriched));
            }
            let event = local_stage_step(
                surr,
                evaluator,
                &sample,
                &preds,
                &ests,
                config.k_local,
                eta_q_bar,
                iter,
                (seed, round),
            )?;
            match event {
                None => {
                    let scales = eta_scales.clone();
                    return Ok((ests, scales, enriched));
                }
                Some(ev) => {
                    enriched += ev.added.len();
                    self.local_added += ev.added.len();
                    for p in &ev.added {
                        self.doe_records.push(DoeRecord {
                            stage: "local".into(),
                            iteration: iter,
                            phys: p.phys.clone(),
                            responses: p.responses.clone(),
                        });
                    }
                    self.enrichment_events.push(EnrichmentSummary {
                        stage: Stage::Local,
                        iteration: iter,
                        added: ev.added.len(),
                        u_min: ev.u_min,
                        eta: ev.eta,
                    });
                    self.refresh_eta_scales();
                    round += 1;
                }
            }
        }
    }

    // Quantiles straight from the true models over one Monte Carlo set.
    fn brute_estimate(
        &mut self,
        d: &[f64],
        iter: usize,
        stream: Stream,
    ) -> Result<(Vec<QuantileEstimate>, Vec<f64>)> {
        let n = self.config.n_mc;
        let mut rng = stream_rng(self.seed(), stream, &[iter as u64, 0]);
        let sample = draw_mc_sample(&self.problem.model, &self.space, d, n, &mut rng)?;
        let n_h = self.problem.n_hard();
        let mut ys: Vec<Vec<f64>> = vec![Vec::with_capacity(n); n_h];
        let mut row = vec![0.0; sample.phys.ncols()];
        for i in 0..n {
            for (k, rk) in row.iter_mut().enumerate() {
                *rk = sample.phys[(i, k)];
            }
            let resp = self.evaluator.evaluate(&row);
            for l in 0..n_h {
                ys[l].push(resp[l]);
            }
        }
        let mut ests = Vec::with_capacity(n_h);
        let mut scales = Vec::with_capacity(n_h);
        for (l, y) in ys.iter().enumerate() {
            let alpha = self.problem.constraints[l].alpha;
            let k = quantile_index(n, alpha)?;
            let mut tagged: Vec<(f64, u32)> =
                y.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
            let (_, kth, _) = tagged
                .select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (q, ix) = (kth.0, kth.1 as usize);
            ests.push(QuantileEstimate {
                q,
                q_lo: q,
                q_hi: q,
                realizing_point: sample.phys_row(ix),
                realizing_index: ix,
                eta_q: 0.0,
                n,
                alpha,
            });
            let g_bar = self.problem.constraints[l].threshold;
            scales.push(if g_bar != 0.0 {
                g_bar.abs()
            } else {
                prediction_std(y)
            });
        }
        Ok((ests, scales))
    }

    // Full offspring evaluation for the optimizer: cheap constraints
    // first, then gated quantiles.
    fn evaluate_design(
        &mut self,
        d: &[f64],
        iter: usize,
    ) -> Result<(OffspringEval, Option<EvalDetail>)> {
        let soft = self.soft_violations(d);
        if !soft.is_empty() {
            return Ok((OffspringEval::SoftInfeasible { violated: soft }, None));
        }
        let (ests, scales, enriched) = self.estimate(d, iter, Stream::IterMc, true)?;
        let n_soft = self.n_soft();
        let mut hard_violated = Vec::new();
        let mut violation = 0.0;
        for (l, est) in ests.iter().enumerate() {
            let g_bar = self.problem.constraints[l].threshold;
            if est.q > g_bar {
                hard_violated.push(n_soft + l);
                violation += (est.q - g_bar) / scales[l].max(1e-300);
            }
        }
        let cost = self.problem.cost_of(d);
        let detail = EvalDetail {
            feasible: hard_violated.is_empty(),
            snapshots: self.snapshots(&ests),
            enriched,
        };
        Ok((
            OffspringEval::Evaluated {
                cost,
                hard_violated,
                violation,
            },
            Some(detail),
        ))
    }

    fn snapshots(&self, ests: &[QuantileEstimate]) -> Vec<QuantileSnapshot> {
        ests.iter()
            .zip(&self.problem.constraints)
            .map(|(e, c)| QuantileSnapshot {
                constraint: c.name.clone(),
                q: e.q,
                q_lo: e.q_lo,
                q_hi: e.q_hi,
                eta_q: e.eta_q,
            })
            .collect()
    }

    // Local refinement: finite-difference gradient descent on the cost
    // with the gradient projected onto the tangent cone of the active
    // quantile constraints, under frozen Monte Carlo noise. Only feasible
    // cost-improving points are ever accepted, so the result never
    // worsens the start.
    fn refine(&mut self, d_start: &[f64]) -> Result<(Vec<f64>, Option<Vec<QuantileSnapshot>>)> {
        if !self.config.brute_force {
            self.refresh_eta_scales();
        }
        let dim = self.problem.model.dim();
        let mut rng = stream_rng(self.seed(), Stream::Refine, &[]);
        let n = self.config.n_mc;
        let u = DMatrix::from_fn(n, dim, |_, _| uniform_open01(&mut rng));

        type Measured = (Vec<f64>, Vec<QuantileSnapshot>, Option<Vec<f64>>);
        let measure = |engine: &mut Self, d: &[f64]| -> Result<Option<Measured>> {
            if !engine.soft_violations(d).is_empty() {
                return Ok(None);
            }
            let phys = engine.problem.model.sample_joint_from_uniforms(d, &u)?;
            let unit = engine.space.to_unit_rows(&phys);
            let n_h = engine.problem.n_hard();
            let mut snaps = Vec::with_capacity(n_h);
            let mut qs = Vec::with_capacity(n_h);
            let mut brute_scales = None;
            if engine.config.brute_force {
                let mut row = vec![0.0; dim];
                let mut ys: Vec<Vec<f64>> = vec![Vec::with_capacity(n); n_h];
                for i in 0..n {
                    for (k, rk) in row.iter_mut().enumerate() {
                        *rk = phys[(i, k)];
                    }
                    let resp = engine.evaluator.evaluate(&row);
                    for l in 0..n_h {
                        ys[l].push(resp[l]);
                    }
                }
                let mut scales = Vec::with_capacity(n_h);
                for (l, y) in ys.iter().enumerate() {
                    let c = &engine.problem.constraints[l];
                    let k = quantile_index(n, c.alpha)?;
                    let mut v = y.clone();
                    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
                    let q = *kth;
                    qs.push(q);
                    scales.push(if c.threshold != 0.0 {
                        c.threshold.abs()
                    } else {
                        prediction_std(y)
                    });
                    snaps.push(QuantileSnapshot {
                        constraint: c.name.clone(),
                        q,
                        q_lo: q,
                        q_hi: q,
                        eta_q: 0.0,
                    });
                }
                brute_scales = Some(scales);
            } else {
                let surr = self_surrogates(engine)?;
                let sample = crate::quantile::McSample { phys, unit };
                for l in 0..n_h {
                    let c = &engine.problem.constraints[l];
                    let pred = surr.models[l].predict_batch(&sample.unit);
                    let mut est = quantile_from_prediction(&sample, &pred, c.alpha)?;
                    est.eta_q = eta_ratio(&est, c.threshold, engine.eta_scales[l])?;
                    qs.push(est.q);
                    snaps.push(QuantileSnapshot {
                        constraint: c.name.clone(),
                        q: est.q,
                        q_lo: est.q_lo,
                        q_hi: est.q_hi,
                        eta_q: est.eta_q,
                    });
                }
            }
            Ok(Some((qs, snaps, brute_scales)))
        };

        let thresholds: Vec<f64> = self
            .problem
            .constraints
            .iter()
            .map(|c| c.threshold)
            .collect();
        let feasible =
            |q: &[f64]| q.iter().zip(&thresholds).all(|(qi, t)| qi <= t);

        let Some((q0, snaps0, brute_scales)) = measure(self, d_start)? else {
            return Ok((d_start.to_vec(), None));
        };
        let _ = brute_scales;
        let bounds = self.bounds.clone();
        let s_d = bounds.len();
        let widths: Vec<f64> = bounds.iter().map(|&(lo, hi)| hi - lo).collect();
        let lows: Vec<f64> = bounds.iter().map(|&(lo, _)| lo).collect();
        // Work in box-scaled coordinates.
        let to_d = move |y: &[f64]| -> Vec<f64> {
            (0..s_d)
                .map(|j| (lows[j] + y[j] * widths[j]).clamp(bounds[j].0, bounds[j].1))
                .collect()
        };
        let clamp01 = |y: &mut Vec<f64>| {
            for v in y.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        };

        let mut cur_y: Vec<f64> = (0..s_d)
            .map(|j| (d_start[j] - self.bounds[j].0) / (self.bounds[j].1 - self.bounds[j].0))
            .collect();
        let mut cur_q = q0;
        let mut cur_snaps = snaps0;
        let mut cur_cost = self.problem.cost_of(d_start);
        let mut evals = 1usize;
        let budget = self.config.refine_max_evals;
        let fd_h = 1e-3;
        let mut step = 0.04;
        let n_h = thresholds.len();

        // An acceptance-time estimate can disagree with the frozen sample
        // at the margin; pull the start back inside before descending.
        if !feasible(&cur_q) {
            let mut restored = false;
            'restore: for _ in 0..3 {
                let mut normals: Vec<Vec<f64>> = vec![vec![0.0; s_d]; n_h];
                for j in 0..s_d {
                    let mut yp = cur_y.clone();
                    let up = cur_y[j] + fd_h <= 1.0;
                    yp[j] = if up { cur_y[j] + fd_h } else { cur_y[j] - fd_h };
                    let dh = yp[j] - cur_y[j];
                    evals += 1;
                    if let Some((qp, _, _)) = measure(self, &to_d(&yp))? {
                        for (k, norm_k) in normals.iter_mut().enumerate() {
                            norm_k[j] = (qp[k] - cur_q[k]) / dh;
                        }
                    }
                }
                let mut ry = cur_y.clone();
                for (k, norm_k) in normals.iter().enumerate() {
                    let viol = cur_q[k] - thresholds[k];
                    if viol > 0.0 {
                        let gg: f64 = norm_k.iter().map(|v| v * v).sum();
                        if gg > 0.0 {
                            // Slight overshoot into the feasible side.
                            for (yj, gj) in ry.iter_mut().zip(norm_k) {
                                *yj -= 1.2 * viol / gg * gj;
                            }
                        }
                    }
                }
                clamp01(&mut ry);
                evals += 1;
                if let Some((q, snaps, _)) = measure(self, &to_d(&ry))? {
                    cur_cost = self.problem.cost_of(&to_d(&ry));
                    cur_y = ry;
                    cur_q = q;
                    cur_snaps = snaps;
                    if feasible(&cur_q) {
                        restored = true;
                        break 'restore;
                    }
                } else {
                    break 'restore;
                }
            }
            if !restored {
                return Ok((d_start.to_vec(), None));
            }
        }

        for _outer in 0..60 {
            if evals + s_d + 2 > budget || step < 2e-4 {
                break;
            }
            // Cost gradient (cheap analytic closure, finite differences).
            let mut grad_c = vec![0.0; s_d];
            for j in 0..s_d {
                let mut yp = cur_y.clone();
                let mut ym = cur_y.clone();
                yp[j] = (yp[j] + fd_h).min(1.0);
                ym[j] = (ym[j] - fd_h).max(0.0);
                let dh = yp[j] - ym[j];
                if dh > 0.0 {
                    grad_c[j] =
                        (self.problem.cost_of(&to_d(&yp)) - self.problem.cost_of(&to_d(&ym))) / dh;
                }
            }
            // One probe per dimension gives every constraint's gradient.
            let mut normals: Vec<Vec<f64>> = vec![vec![0.0; s_d]; n_h];
            for j in 0..s_d {
                let mut yp = cur_y.clone();
                let up = cur_y[j] + fd_h <= 1.0;
                yp[j] = if up { cur_y[j] + fd_h } else { cur_y[j] - fd_h };
                let dh = yp[j] - cur_y[j];
                evals += 1;
                if let Some((qp, _, _)) = measure(self, &to_d(&yp))? {
                    for (k, norm_k) in normals.iter_mut().enumerate() {
                        norm_k[j] = (qp[k] - cur_q[k]) / dh;
                    }
                }
            }
            // Active set: constraints a step of the current size along the
            // (repeatedly re-projected) descent direction would cross.
            let mut p: Vec<f64> = grad_c.iter().map(|g| -g).collect();
            let mut active = vec![false; n_h];
            for _pass in 0..=n_h {
                let mut crossed = None;
                let mut worst = 0.0;
                for k in 0..n_h {
                    if active[k] {
                        continue;
                    }
                    let along: f64 = p.iter().zip(&normals[k]).map(|(a, b)| a * b).sum();
                    let predicted = cur_q[k] + step * along - thresholds[k];
                    if along > 0.0 && predicted > worst {
                        worst = predicted;
                        crossed = Some(k);
                    }
                }
                let Some(k) = crossed else { break };
                active[k] = true;
                // Re-project the raw descent direction onto the working
                // set (two sweeps handle the 2-3 constraint case fine).
                p = grad_c.iter().map(|g| -g).collect();
                for _ in 0..2 {
                    for (k, norm_k) in normals.iter().enumerate() {
                        if !active[k] {
                            continue;
                        }
                        let gg: f64 = norm_k.iter().map(|v| v * v).sum();
                        if gg <= 0.0 {
                            continue;
                        }
                        let dot: f64 = p.iter().zip(norm_k).map(|(a, b)| a * b).sum();
                        if dot > 0.0 {
                            for (pj, gj) in p.iter_mut().zip(norm_k) {
                                *pj -= dot / gg * gj;
                            }
                        }
                    }
                }
            }
            let pn: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            let gn: f64 = grad_c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if std::env::var("QRBDO_DEBUG").is_ok() {
                eprintln!("  outer: y={cur_y:?} q={cur_q:?} active={active:?} p={p:?} pn={pn:.3e} step={step:.4}");
            }
            if pn <= 1e-6 * gn.max(1e-300) {
                break;
            }
            for v in p.iter_mut() {
                *v /= pn;
            }

            // Backtracking line search with a first-order feasibility
            // restoration pullback along the violated normals.
            let mut accepted = false;
            let mut s_try = step;
            for _ in 0..5 {
                if evals + 2 > budget {
                    break;
                }
                let mut cand_y: Vec<f64> =
                    cur_y.iter().zip(&p).map(|(y, pj)| y + s_try * pj).collect();
                clamp01(&mut cand_y);
                let cand_d = to_d(&cand_y);
                evals += 1;
                if let Some((q, snaps, _)) = measure(self, &cand_d)? {
                    let c = self.problem.cost_of(&cand_d);
                    if std::env::var("QRBDO_DEBUG").is_ok() {
                        eprintln!("    try s={s_try:.4} d={cand_d:?} q={q:?} c={c:.4} cur={cur_cost:.4}");
                    }
                    if feasible(&q) && c < cur_cost {
                        cur_y = cand_y;
                        cur_q = q;
                        cur_snaps = snaps;
                        cur_cost = c;
                        accepted = true;
                        break;
                    }
                    if !feasible(&q) {
                        let mut ry = cand_y.clone();
                        for (k, norm_k) in normals.iter().enumerate() {
                            let viol = q[k] - thresholds[k];
                            if viol > 0.0 {
                                let gg: f64 = norm_k.iter().map(|v| v * v).sum();
                                if gg > 0.0 {
                                    for (yj, gj) in ry.iter_mut().zip(norm_k) {
                                        *yj -= viol / gg * gj;
                                    }
                                }
                            }
                        }
                        clamp01(&mut ry);
                        let rd = to_d(&ry);
                        evals += 1;
                        if let Some((q2, snaps2, _)) = measure(self, &rd)? {
                            let c2 = self.problem.cost_of(&rd);
                            if feasible(&q2) && c2 < cur_cost {
                                cur_y = ry;
                                cur_q = q2;
                                cur_snaps = snaps2;
                                cur_cost = c2;
                                accepted = true;
                                break;
                            }
                        }
                    }
                }
                s_try *= 0.5;
            }
            if accepted {
                step = (s_try * 2.0).min(0.04);
            } else {
                step *= 0.25;
            }
        }
        Ok((to_d(&cur_y), Some(cur_snaps)))
    }
}

// Workaround for borrowing the surrogates immutably while the engine is
// otherwise borrowed by the closure.
fn self_surrogates<'e>(engine: &'e Engine<'_>) -> Result<&'e Surrogates> {
    engine
        .surrogates
        .as_ref()
        .ok_or_else(|| QrbdoError::Config("surrogate mode without fitted surrogates".into()))
}

/// Runs the whole procedure on `problem` under `config`.
pub fn run_qrbdo(problem: &Problem, config: &RunConfig) -> Result<RbdoResult> {
    problem.validate()?;
    config.validate()?;
    let space = build_augmented(&problem.model, config.alpha_d, config.alpha_z)?;
    let seed = config.seed;
    let bounds = problem.model.design_bounds();
    let s_d = problem.s_d();

    let mut engine = Engine {
        problem,
        config,
        space,
        evaluator: Evaluator::new(problem),
        surrogates: None,
        doe_records: Vec::new(),
        enrichment_events: Vec::new(),
        local_added: 0,
        best_cost: f64::INFINITY,
        bounds: bounds.clone(),
        eta_scales: Vec::new(),
        eta_scales_generation: None,
    };

    let mut initial_doe = 0usize;
    let mut global_added = 0usize;
    let mut global_eta_final = f64::NAN;
    let mut global_converged = true;

    if !config.brute_force {
        // Initial space-filling DoE over the augmented space.
        let mut doe_rng = stream_rng(seed, Stream::InitialDoe, &[]);
        let plan = optimize_lhs(config.doe0, engine.space.dim(), config.doe_restarts, &mut doe_rng);
        let mut responses = Vec::with_capacity(config.doe0);
        for i in 0..config.doe0 {
            let unit: Vec<f64> = (0..engine.space.dim()).map(|k| plan.points[(i, k)]).collect();
            let phys = engine.space.from_unit_vec(&unit);
            let resp = engine.evaluator.evaluate(&phys);
            engine.doe_records.push(DoeRecord {
                stage: "initial".into(),
                iteration: 0,
                phys,
                responses: resp.clone(),
            });
            responses.push(resp);
        }
        initial_doe = config.doe0;
        let settings = SurrogateSettings {
            theta_bounds: (config.theta_lower, config.theta_upper),
            initial_starts: config.fit_starts,
            refit_starts: config.refit_starts,
        };
        let mut surr = Surrogates::fit(&plan.points, &responses, settings, seed)?;

        let gcfg = GlobalStageConfig {
            m_candidates: config.m_for(s_d),
            n_mc: config.n_mc_global,
            eta_bar: config.eta_bar,
            k: config.k_global,
            max_iters: config.max_global_iters,
            u_stop: config.u_stop,
        };
        let outcome = global_stage(&mut surr, problem, &engine.evaluator, &engine.space, &gcfg, seed)?;
        for ev in &outcome.events {
            global_added += ev.added.len();
            for p in &ev.added {
                engine.doe_records.push(DoeRecord {
                    stage: "global".into(),
                    iteration: ev.iteration,
                    phys: p.phys.clone(),
                    responses: p.responses.clone(),
                });
            }
            engine.enrichment_events.push(EnrichmentSummary {
                stage: Stage::Global,
                iteration: ev.iteration,
                added: ev.added.len(),
                u_min: ev.u_min,
                eta: ev.eta,
            });
        }
        global_eta_final = outcome.eta_final;
        global_converged = outcome.converged;
        engine.surrogates = Some(surr);
    }

    // Initial parent, projected into the design box.
    let mut d0 = problem.initial_design.clone();
    for (j, dj) in d0.iter_mut().enumerate() {
        *dj = dj.clamp(bounds[j].0, bounds[j].1);
    }
    let (eval0, detail0) = engine.evaluate_design(&d0, 0)?;
    let (cost0, feas0, viol0, snaps0, enriched0) = match (eval0, detail0) {
        (
            OffspringEval::Evaluated {
                cost, violation, ..
            },
            Some(detail),
        ) => (cost, detail.feasible, violation, detail.snapshots, detail.enriched),
        _ => {
            return Err(QrbdoError::Config(
                "initial design violates the soft constraints".into(),
            ))
        }
    };
    if feas0 {
        engine.best_cost = cost0;
    }

    let consts = CmaConstants::for_dim(s_d, &config.cma);
    let widths: Vec<f64> = bounds.iter().map(|&(lo, hi)| hi - lo).collect();
    let mut state = CmaState::new(
        nalgebra::DVector::from_row_slice(&d0),
        cost0,
        feas0,
        viol0,
        config.sigma0_rel,
        &widths,
        engine.n_soft() + problem.n_hard(),
        &consts,
    )?;

    let mut history = vec![IterationRow {
        iter: 0,
        design: d0.clone(),
        cost: cost0,
        evaluated: true,
        accepted: true,
        feasible: feas0,
        enriched: enriched0,
        calls: engine.evaluator.calls(),
        quantiles: snaps0,
    }];
    let mut best_trace = vec![if feas0 { cost0 } else { f64::INFINITY }];

    let mut cma_rng = stream_rng(seed, Stream::CmaSample, &[]);
    let mut stop_reason = "budget".to_string();
    let mut iterations = 0usize;
    let mut last_improvement: Option<usize> = None;
    for iter in 1..=config.budget {
        iterations = iter;
        let mut detail: Option<EvalDetail> = None;
        let report = {
            let engine_ref = &mut engine;
            let detail_ref = &mut detail;
            cma_step(
                &mut state,
                &consts,
                |d| {
                    let (eval, det) = engine_ref.evaluate_design(d, iter)?;
                    *detail_ref = det;
                    Ok(eval)
                },
                &mut cma_rng,
            )?
        };
        if state.current_feasible {
            engine.best_cost = engine.best_cost.min(state.current_cost);
        }
        let (snapshots, enriched, det_feasible) = match &detail {
            Some(d) => (d.snapshots.clone(), d.enriched, d.feasible),
            None => (Vec::new(), 0, false),
        };
        history.push(IterationRow {
            iter,
            design: report.offspring.clone(),
            cost: report.cost,
            evaluated: report.evaluated,
            accepted: report.accepted,
            feasible: det_feasible,
            enriched,
            calls: engine.evaluator.calls(),
            quantiles: snapshots,
        });
        let now = if state.current_feasible {
            state.current_cost
        } else {
            f64::INFINITY
        };
        let prev = *best_trace.last().expect("nonempty");
        if now.is_finite() && prev - now > config.stagnation_tol * now.abs().max(1.0) {
            last_improvement = Some(iter);
        }
        best_trace.push(now);

        // Stagnation: only during the exploitation phase (final third of
        // the budget, where the accuracy schedule has tightened), stop
        // once a full trailing window has passed without improvement.
        if iter >= 2 * config.budget / 3 {
            if let Some(t) = last_improvement {
                if iter - t >= config.stagnation_iters {
                    stop_reason = "stagnation".to_string();
                    break;
                }
            }
        }
    }

    let d_before_refine: Vec<f64> = state.current.iter().copied().collect();
    let mut d_star = d_before_refine.clone();
    let mut refined = false;
    let mut final_snaps: Option<Vec<QuantileSnapshot>> = None;
    if config.refine && state.current_feasible {
        // Refinement alternates with the accuracy gate: slide along the
        // surrogate boundary, then verify the local accuracy threshold at
        // the refined design and enrich there if it fails, repeating on
        // the sharpened surrogate.
        for cycle in 0..3u64 {
            let (d_ref, snaps) = engine.refine(&d_star)?;
            if std::env::var("QRBDO_DEBUG").is_ok() {
                eprintln!("polish cycle {cycle}: {d_star:?} -> {d_ref:?} snaps={}", snaps.is_some());
            }
            if let Some(snaps) = snaps {
                refined = refined || d_ref != d_star;
                d_star = d_ref;
                final_snaps = Some(snaps);
            }
            if config.brute_force {
                break;
            }
            let before = engine.local_added;
            let _ = engine.estimate(&d_star, config.budget + cycle as usize, Stream::Final, true)?;
            if engine.local_added == before {
                break;
            }
            final_snaps = None;
        }
    }

    // Final measurement: the refinement's frozen-sample numbers when it
    // ran (the feasibility it enforced), a fresh stream otherwise.
    let (final_snapshots, final_feasible) = match final_snaps {
        Some(snaps) => (snaps, true),
        None => {
            let (ests, _, _) = engine.estimate(&d_star, 0, Stream::Final, false)?;
            let feas = state.current_feasible
                && ests
                    .iter()
                    .zip(&problem.constraints)
                    .all(|(e, c)| e.q <= c.threshold);
            (engine.snapshots(&ests), feas)
        }
    };

    Ok(RbdoResult {
        problem: problem.name.clone(),
        cost: problem.cost_of(&d_star),
        d_star,
        feasible: final_feasible,
        quantiles: final_snapshots,
        true_model_calls: engine.evaluator.calls(),
        initial_doe,
        global_added,
        local_added: engine.local_added,
        iterations,
        stop_reason,
        global_eta_final,
        global_converged,
        refined,
        d_before_refine,
        history,
        doe_records: engine.doe_records,
        enrichment_events: engine.enrichment_events,
        model_summaries: engine
            .surrogates
            .as_ref()
            .map(|s| {
                s.models
                    .iter()
                    .zip(&problem.constraints)
                    .map(|(m, c)| ModelSummary {
                        constraint: c.name.clone(),
                        theta: m.theta().to_vec(),
                        beta_hat: m.beta_hat(),
                        sigma2: m.sigma2(),
                        nugget: m.nugget(),
                        n: m.doe().n(),
                    })
                    .collect()
            })
            .unwrap_or_default(),
        space_lower: engine.space.lower().to_vec(),
        space_upper: engine.space.upper().to_vec(),
        config: config.clone(),
    })
}

/// Local refinement on the final surrogate, exposed for direct use:
/// derivative-free descent of the cost under frozen-noise surrogate
/// quantile feasibility, starting from a feasible design.
pub fn refine_local(
    problem: &Problem,
    surrogates: Surrogates,
    space: AugmentedSpace,
    config: &RunConfig,
    d_start: &[f64],
) -> Result<Vec<f64>> {
    let bounds = problem.model.design_bounds();
    let mut engine = Engine {
        problem,
        config,
        space,
        evaluator: Evaluator::new(problem),
        surrogates: Some(surrogates),
        doe_records: Vec::new(),
        enrichment_events: Vec::new(),
        local_added: 0,
        best_cost: f64::INFINITY,
        bounds,
        eta_scales: Vec::new(),
        eta_scales_generation: None,
    };
    let (d, _) = engine.refine(d_start)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks;

    // A cheap linear problem: cost d, response d + 0.2 z, threshold 1 at
    // the 95% level. True optimum: d* + 0.2 * 1.6449 * 0.5 = 1, i.e.
    // d* = 1 - 0.16449/2*... computed in the test body.
    fn linear_problem() -> crate::problem::Problem {
        use crate::distributions::*;
        crate::problem::Problem {
            name: "linear".into(),
            model: ProbabilisticModel::new(
                vec![DesignVariable::deterministic("d", 0.0, 2.0)],
                vec![EnvVariable::new("z", Marginal::normal(0.0, 0.5))],
            )
            .unwrap(),
            cost: Box::new(|d| -d[0]),
            soft: vec![],
            responses: Box::new(|w| vec![w[0] + 0.2 * w[1]]),
            constraints: vec![crate::problem::HardConstraint {
                name: "g".into(),
                threshold: 1.0,
                alpha: 0.95,
            }],
            initial_design: vec![0.5],
            reference: None,
        }
    }

    fn small_config(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            doe0: 8,
            n_mc: 4_000,
            n_mc_global: 2_000,
            m_candidates: 60,
            budget: 60,
            eta_bar: 0.3,
            fit_starts: 4,
            refit_starts: 2,
            refine_max_evals: 80,
            ..RunConfig::default()
        }
    }

    #[test]
    fn linear_problem_converges_to_quantile_boundary() {
        let problem = linear_problem();
        let config = small_config(3);
        let res = run_qrbdo(&problem, &config).unwrap();
        // Maximize d subject to Q95(d + 0.2 z) <= 1 with z ~ N(0, 0.5):
        // boundary at d = 1 - 0.2*0.5*1.6449 = 0.83551.
        let target = 1.0 - 0.2 * 0.5 * 1.6448536269514722;
        assert!(res.feasible);
        assert!(
            (res.d_star[0] - target).abs() < 0.02,
            "d* = {} vs {}",
            res.d_star[0],
            target
        );
        // Call accounting is exact.
        assert_eq!(
            res.true_model_calls,
            res.initial_doe + res.global_added + res.local_added
        );
        // Accepted costs are monotone.
        let mut best = f64::INFINITY;
        for row in &res.history {
            if row.accepted && row.feasible {
                assert!(row.cost <= best + 1e-12);
                best = row.cost;
            }
        }
    }

    #[test]
    fn determinism_same_seed_same_result() {
        let problem = linear_problem();
        let config = small_config(7);
        let a = run_qrbdo(&problem, &config).unwrap();
        let b = run_qrbdo(&problem, &config).unwrap();
        assert_eq!(a.d_star, b.d_star);
        assert_eq!(a.true_model_calls, b.true_model_calls);
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.design, rb.design);
            assert_eq!(ra.calls, rb.calls);
        }
    }

    #[test]
    fn different_seed_changes_the_path() {
        let problem = linear_problem();
        let a = run_qrbdo(&problem, &small_config(1)).unwrap();
        let b = run_qrbdo(&problem, &small_config(2)).unwrap();
        assert_ne!(
            a.history.iter().map(|r| r.calls).collect::<Vec<_>>(),
            b.history.iter().map(|r| r.calls).collect::<Vec<_>>()
        );
    }

    #[test]
    fn brute_force_mode_counts_every_response() {
        let problem = linear_problem();
        let mut config = small_config(5);
        config.brute_force = true;
        config.budget = 10;
        config.n_mc = 500;
        config.refine = false;
        config.stagnation_iters = 100;
        let res = run_qrbdo(&problem, &config).unwrap();
        // Iteration 0 plus soft-feasible offspring, 500 calls each; the
        // final measurement adds one more batch.
        let evaluated_iters = res.history.iter().filter(|r| r.evaluated).count();
        assert_eq!(res.true_model_calls, 500 * (evaluated_iters + 1));
        assert!(res.feasible);
    }

    #[test]
    fn column_benchmark_single_seed_smoke() {
        let bench = benchmarks::column_problem();
        let mut config = bench.config.clone();
        config.seed = 11;
        config.budget = 120;
        let res = run_qrbdo(&bench.problem, &config).unwrap();
        assert!(res.feasible, "column run infeasible");
        let b = res.d_star[0];
        assert!(
            (b - 238.45).abs() / 238.45 < 0.02,
            "column d* = {:?}",
            res.d_star
        );
        assert!(res.true_model_calls <= 60, "calls = {}", res.true_model_calls);
        // Scale sanity on the soft constraint: sections stay square-ish.
        assert!((res.d_star[0] - res.d_star[1]).abs() < 5.0);
    }
}
