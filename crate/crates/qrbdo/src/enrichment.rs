//! Two-stage adaptive enrichment of the surrogate design of experiments.
//!
//! The *global* stage sweeps candidate designs over the design space,
//! computes each design's quantile-realizing point in the augmented space
//! and its deviation number, and adds points until the fraction of
//! low-confidence designs drops under a threshold. The *local* stage runs
//! inside the optimization loop: when the quantile bounds at the current
//! design are too wide, points minimizing the quantile deviation number
//! are added from the current Monte Carlo set.
//!
//! Batches of K > 1 points are picked by weighted K-means over the
//! candidates with weights `phi(-U)`, each cluster snapped to its
//! highest-weight member so evaluations stay on sampled locations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::doe::lhs;
use crate::error::{QrbdoError, Result};
use crate::kriging::{BatchPrediction, Doe, KrigingModel};
use crate::problem::{Evaluator, Problem};
use crate::quantile::{draw_mc_sample, quantile_from_prediction, McSample, QuantileEstimate};
use crate::rng::{stream_rng, Stream};
use crate::space::AugmentedSpace;

/// Unit-cube max-norm distance under which an enrichment candidate is
/// treated as a duplicate of an existing DoE point and skipped.
pub const ENRICH_DUPLICATE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Global,
    Local,
}

/// A point added to the DoE, with its true-model responses.
#[derive(Debug, Clone)]
pub struct AddedPoint {
    pub phys: Vec<f64>,
    pub unit: Vec<f64>,
    pub responses: Vec<f64>,
}

/// One enrichment event (a batch of added points plus the diagnostics
/// that triggered it).
#[derive(Debug, Clone)]
pub struct EnrichmentEvent {
    pub stage: Stage,
    pub iteration: usize,
    pub added: Vec<AddedPoint>,
    pub u_min: f64,
    /// Global-stage coverage ratio at the time of the event (NaN for
    /// local events).
    pub eta: f64,
}

/// Deviation number `|target - mu| / sigma`, with the conventions
/// `+inf` when `sigma = 0` and the numerator is nonzero, `0` when both
/// vanish.
#[inline]
pub fn u_value(target: f64, mu: f64, sigma: f64) -> f64 {
    let num = (target - mu).abs();
    if sigma > 0.0 {
        num / sigma
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Deviation number of the surrogate against the constraint threshold at
/// a unit-cube point.
pub fn u_function(model: &KrigingModel, point: &[f64], g_bar: f64) -> f64 {
    let (mu, sigma) = model.predict(point);
    u_value(g_bar, mu, sigma)
}

/// Composite local deviation number over a Monte Carlo sample:
/// `U_l(x) = |q_alpha_l - mu_l(x)| / sigma_l(x)` minimized across
/// constraints, per point.
pub fn local_deviation(preds: &[BatchPrediction], q_alphas: &[f64]) -> Vec<f64> {
    let n = preds[0].mu.len();
    let mut out = vec![f64::INFINITY; n];
    for (l, pred) in preds.iter().enumerate() {
        for i in 0..n {
            let u = u_value(q_alphas[l], pred.mu[i], pred.sigma[i]);
            if u < out[i] {
                out[i] = u;
            }
        }
    }
    out
}

/// Selection weights `phi(-U)` rescaled by the minimum finite U so the
/// weights stay representable; ratios between candidates are preserved
/// and the argmin-U candidate always carries the largest weight.
pub fn weights_from_u(us: &[f64]) -> Vec<f64> {
    let u_min = us.iter().copied().filter(|u| u.is_finite()).fold(f64::INFINITY, f64::min);
    if !u_min.is_finite() {
        // Degenerate: every candidate is at an interpolated point.
        let mut w = vec![0.0; us.len()];
        if !us.is_empty() {
            w[0] = 1.0;
        }
        return w;
    }
    us.iter()
        .map(|&u| {
            if u.is_finite() {
                (0.5 * (u_min * u_min - u * u)).exp()
            } else {
                0.0
            }
        })
        .collect()
}

fn weighted_choice<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = crate::rng::uniform_open01(rng) * total;
    for (i, &w) in weights.iter().enumerate() {
        t -= w;
        if t <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted K-means over candidate points (k-means++ seeding, Lloyd
/// iterations), snapped to the highest-weight member of each cluster.
/// Returns the selected candidate indices; fewer than `k` when the
/// candidate set is smaller or clusters collapse.
pub fn weighted_kmeans<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if points.is_empty() || points.len() != weights.len() {
        return Err(QrbdoError::Config(
            "weighted k-means needs matching non-empty points and weights".into(),
        ));
    }
    if weights.iter().any(|&w| w < 0.0) || weights.iter().all(|&w| w == 0.0) {
        return Err(QrbdoError::Config(
            "weighted k-means needs nonnegative, not-all-zero weights".into(),
        ));
    }
    let k = k.min(points.len()).max(1);

    // k-means++ seeding, weight-proportional.
    let mut centers: Vec<Vec<f64>> = vec![points[weighted_choice(weights, rng)].clone()];
    while centers.len() < k {
        let probs: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(p, &w)| {
                let d2 = centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min);
                w * d2
            })
            .collect();
        if probs.iter().sum::<f64>() <= 0.0 {
            break;
        }
        centers.push(points[weighted_choice(&probs, rng)].clone());
    }
    let k = centers.len();

    let mut assign = vec![0usize; points.len()];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..50 {
        // Assignment.
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
            inertia += weights[i] * best_d;
        }
        if inertia >= prev_inertia {
            break;
        }
        prev_inertia = inertia;
        // Weighted centroid update; empty clusters keep their center.
        let dim = points[0].len();
        for (c, center) in centers.iter_mut().enumerate() {
            let mut acc = vec![0.0; dim];
            let mut wsum = 0.0;
            for (i, p) in points.iter().enumerate() {
                if assign[i] == c {
                    for (a, &pv) in acc.iter_mut().zip(p) {
                        *a += weights[i] * pv;
                    }
                    wsum += weights[i];
                }
            }
            if wsum > 0.0 {
                for (cv, a) in center.iter_mut().zip(acc) {
                    *cv = a / wsum;
                }
            }
        }
    }

    // Snap: highest-weight member per cluster, ties to the lowest index.
    let mut selected = Vec::new();
    for c in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if assign[i] == c && best.map_or(true, |b| weights[i] > weights[b]) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            if !selected.contains(&i) {
                selected.push(i);
            }
        }
    }
    // Fill shortfall with the heaviest unselected candidates.
    if selected.len() < k {
        let mut rest: Vec<usize> = (0..points.len()).filter(|i| !selected.contains(i)).collect();
        rest.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        for i in rest {
            if selected.len() >= k {
                break;
            }
            selected.push(i);
        }
    }
    Ok(selected)
}

/// Settings for hyperparameter fits and refits.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateSettings {
    pub theta_bounds: (f64, f64),
    pub initial_starts: usize,
    pub refit_starts: usize,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        SurrogateSettings {
            theta_bounds: (1e-3, 10.0),
            initial_starts: 10,
            refit_starts: 4,
        }
    }
}

/// One Kriging model per hard constraint, sharing the same input rows.
pub struct Surrogates {
    pub models: Vec<KrigingModel>,
    settings: SurrogateSettings,
    base_seed: u64,
    fit_events: u64,
}

impl Surrogates {
    /// Fits one model per response column on a shared unit-cube design.
    pub fn fit(
        x_unit: &DMatrix<f64>,
        responses: &[Vec<f64>],
        settings: SurrogateSettings,
        base_seed: u64,
    ) -> Result<Self> {
        let n_h = responses
            .first()
            .map(Vec::len)
            .ok_or_else(|| QrbdoError::Config("empty initial doe".into()))?;
        let mut models = Vec::with_capacity(n_h);
        for l in 0..n_h {
            let y = DVector::from_iterator(responses.len(), responses.iter().map(|r| r[l]));
            let doe = Doe::new(x_unit.clone(), y)?;
            let mut rng = stream_rng(base_seed, Stream::Fit, &[l as u64, 0]);
            models.push(KrigingModel::fit(
                doe,
                settings.theta_bounds,
                settings.initial_starts,
                None,
                &mut rng,
            )?);
        }
        Ok(Surrogates {
            models,
            settings,
            base_seed,
            fit_events: 0,
        })
    }

    pub fn n_constraints(&self) -> usize {
        self.models.len()
    }

    /// Number of refit events so far (used to invalidate caches keyed on
    /// the model state).
    pub fn fit_events(&self) -> u64 {
        self.fit_events
    }

    pub fn doe_size(&self) -> usize {
        self.models[0].doe().n()
    }

    /// Max-norm distance from a unit point to the current DoE.
    pub fn nearest(&self, unit: &[f64]) -> f64 {
        self.models[0].doe().nearest_max_norm(unit)
    }

    /// Predictions of every model over a unit-cube sample.
    pub fn predict_sample(&self, unit: &DMatrix<f64>) -> Vec<BatchPrediction> {
        self.models.iter().map(|m| m.predict_batch(unit)).collect()
    }

    /// Appends evaluated points to every model's DoE and refits, warm
    /// starting from the previous length-scales.
    pub fn enrich(&mut self, added: &[AddedPoint]) -> Result<()> {
        if added.is_empty() {
            return Ok(());
        }
        self.fit_events += 1;
        let mut refitted = Vec::with_capacity(self.models.len());
        for (l, model) in self.models.iter().enumerate() {
            let mut doe = model.doe().clone();
            for p in added {
                doe.push(&p.unit, p.responses[l])?;
            }
            let warm = model.theta().to_vec();
            let mut rng = stream_rng(self.base_seed, Stream::Fit, &[l as u64, self.fit_events]);
            refitted.push(KrigingModel::fit(
                doe,
                self.settings.theta_bounds,
                self.settings.refit_starts,
                Some(&warm),
                &mut rng,
            )?);
        }
        self.models = refitted;
        Ok(())
    }
}

/// Global-stage configuration.
#[derive(Debug, Clone)]
pub struct GlobalStageConfig {
    /// Candidate designs per iteration (m).
    pub m_candidates: usize,
    /// Monte Carlo size per candidate design.
    pub n_mc: usize,
    /// Stop when the low-confidence fraction eta falls to this level.
    pub eta_bar: f64,
    /// Points added per iteration.
    pub k: usize,
    pub max_iters: usize,
    /// Deviation-number confidence level (a design counts as
    /// low-confidence when its U is at or under this).
    pub u_stop: f64,
}

/// Result of the global stage.
#[derive(Debug)]
pub struct GlobalStageOutcome {
    pub events: Vec<EnrichmentEvent>,
    pub eta_final: f64,
    /// False when the iteration cap was hit before eta <= eta_bar.
    pub converged: bool,
}

/// Runs the global contour-targeting enrichment stage.
pub fn global_stage(
    surrogates: &mut Surrogates,
    problem: &Problem,
    evaluator: &Evaluator,
    space: &AugmentedSpace,
    cfg: &GlobalStageConfig,
    base_seed: u64,
) -> Result<GlobalStageOutcome> {
    let s_d = problem.s_d();
    let bounds = problem.model.design_bounds();
    let mut events = Vec::new();
    let mut eta_final = f64::NAN;

    for it in 0..cfg.max_iters {
        // Candidate designs (LHS over the design box, fresh per iteration).
        let mut cand_rng = stream_rng(base_seed, Stream::GlobalCandidates, &[it as u64]);
        let plan = lhs(cfg.m_candidates, s_d, &mut cand_rng);
        let mut u_comp = Vec::with_capacity(cfg.m_candidates);
        let mut realized_unit: Vec<Vec<f64>> = Vec::with_capacity(cfg.m_candidates);
        let mut realized_phys: Vec<Vec<f64>> = Vec::with_capacity(cfg.m_candidates);

        for i in 0..cfg.m_candidates {
            let d: Vec<f64> = (0..s_d)
                .map(|j| bounds[j].0 + plan.points[(i, j)] * (bounds[j].1 - bounds[j].0))
                .collect();
            let mut mc_rng = stream_rng(base_seed, Stream::GlobalMc, &[it as u64, i as u64]);
            let sample = draw_mc_sample(&problem.model, space, &d, cfg.n_mc, &mut mc_rng)?;
            let mut best_u = f64::INFINITY;
            let mut best_ix = 0usize;
            for (l, model) in surrogates.models.iter().enumerate() {
                let pred = model.predict_batch(&sample.unit);
                let est = quantile_from_prediction(&sample, &pred, problem.constraints[l].alpha)?;
                let u = u_value(
                    problem.constraints[l].threshold,
                    est.q,
                    pred.sigma[est.realizing_index],
                );
                if u < best_u {
                    best_u = u;
                    best_ix = est.realizing_index;
                }
            }
            u_comp.push(best_u);
            realized_unit.push(sample.unit_row(best_ix));
            realized_phys.push(sample.phys_row(best_ix));
        }

        let u_min = u_comp.iter().copied().fold(f64::INFINITY, f64::min);
        let eta = u_comp.iter().filter(|&&u| u <= cfg.u_stop).count() as f64
            / cfg.m_candidates as f64;
        eta_final = eta;
        if eta <= cfg.eta_bar {
            return Ok(GlobalStageOutcome {
                events,
                eta_final,
                converged: true,
            });
        }

        let mut select_rng = stream_rng(base_seed, Stream::GlobalSelect, &[it as u64]);
        let order = select_candidates(&realized_unit, &u_comp, cfg.k, surrogates, &mut select_rng)?;
        let added: Vec<AddedPoint> = order
            .iter()
            .map(|&i| AddedPoint {
                phys: realized_phys[i].clone(),
                unit: realized_unit[i].clone(),
                responses: evaluator.evaluate(&realized_phys[i]),
            })
            .collect();
        if added.is_empty() {
            // Every candidate duplicates the DoE; nothing more to learn here.
            return Ok(GlobalStageOutcome {
                events,
                eta_final,
                converged: false,
            });
        }
        surrogates.enrich(&added)?;
        events.push(EnrichmentEvent {
            stage: Stage::Global,
            iteration: it,
            added,
            u_min,
            eta,
        });
    }
    Ok(GlobalStageOutcome {
        events,
        eta_final,
        converged: false,
    })
}

// Picks up to k candidate indices (argmin U for k = 1, weighted K-means
// otherwise), skipping near-duplicates of the DoE and of one another.
fn select_candidates<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    u_comp: &[f64],
    k: usize,
    surrogates: &Surrogates,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let fresh = |i: usize, chosen: &[usize]| {
        surrogates.nearest(&points[i]) > ENRICH_DUPLICATE_TOL
            && chosen
                .iter()
                .all(|&c| points[c] != points[i])
    };
    if k == 1 {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| u_comp[a].total_cmp(&u_comp[b]).then(a.cmp(&b)));
        for i in order {
            if fresh(i, &[]) {
                return Ok(vec![i]);
            }
        }
        return Ok(vec![]);
    }
    let weights = weights_from_u(u_comp);
    let picked = weighted_kmeans(points, &weights, k, rng)?;
    let mut out: Vec<usize> = Vec::new();
    for i in picked {
        if fresh(i, &out) {
            out.push(i);
        }
    }
    // Replace duplicates with the next-heaviest fresh candidates.
    if out.len() < k {
        let mut rest: Vec<usize> = (0..points.len()).filter(|i| !out.contains(i)).collect();
        rest.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        for i in rest {
            if out.len() >= k {
                break;
            }
            if fresh(i, &out) {
                out.push(i);
            }
        }
    }
    Ok(out)
}

/// One local-stage check-and-enrich step over the current design's Monte
/// Carlo sample. No-op (returns `None`) when every constraint's eta_q is
/// within `eta_q_bar`; otherwise adds `k` points minimizing the composite
/// quantile deviation number and refits.
#[allow(clippy::too_many_arguments)]
pub fn local_stage_step(
    surrogates: &mut Surrogates,
    evaluator: &Evaluator,
    sample: &McSample,
    preds: &[BatchPrediction],
    ests: &[QuantileEstimate],
    k: usize,
    eta_q_bar: f64,
    iteration: usize,
    select_seed: (u64, u64),
) -> Result<Option<EnrichmentEvent>> {
    let worst_eta = ests.iter().map(|e| e.eta_q).fold(f64::NEG_INFINITY, f64::max);
    if worst_eta <= eta_q_bar {
        return Ok(None);
    }
    let q_alphas: Vec<f64> = ests.iter().map(|e| e.q).collect();
    let u_comp = local_deviation(preds, &q_alphas);
    let points: Vec<Vec<f64>> = (0..sample.n()).map(|i| sample.unit_row(i)).collect();
    let mut rng = stream_rng(select_seed.0, Stream::LocalSelect, &[select_seed.1, iteration as u64]);
    let order = select_candidates(&points, &u_comp, k, surrogates, &mut rng)?;
    if order.is_empty() {
        return Ok(None);
    }
    let u_min = u_comp.iter().copied().fold(f64::INFINITY, f64::min);
    let added: Vec<AddedPoint> = order
        .iter()
        .map(|&i| AddedPoint {
            phys: sample.phys_row(i),
            unit: sample.unit_row(i),
            responses: evaluator.evaluate(&sample.phys_row(i)),
        })
        .collect();
    surrogates.enrich(&added)?;
    Ok(Some(EnrichmentEvent {
        stage: Stage::Local,
        iteration,
        added,
        u_min,
        eta: f64::NAN,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{DesignVariable, EnvVariable, Marginal, ProbabilisticModel};
    use crate::problem::HardConstraint;
    use crate::space::build_augmented;

    #[test]
    fn u_value_conventions() {
        assert_eq!(u_value(1.0, 1.0, 0.5), 0.0);
        assert_eq!(u_value(1.0, 1.0 + 2.0 * 0.5, 0.5), 2.0);
        assert_eq!(u_value(1.0, 1.0 - 2.0 * 0.5, 0.5), 2.0);
        assert_eq!(u_value(1.0, 2.0, 0.0), f64::INFINITY);
        assert_eq!(u_value(1.0, 1.0, 0.0), 0.0);
    }

    #[test]
    fn local_deviation_takes_min_across_constraints() {
        let p1 = BatchPrediction {
            mu: vec![2.0, 5.0],
            sigma: vec![1.0, 1.0],
            outside_unit_cube: 0,
        };
        let p2 = BatchPrediction {
            mu: vec![4.0, 5.0],
            sigma: vec![1.0, 2.0],
            outside_unit_cube: 0,
        };
        // q_alphas = (5, 3): U1 = (3, 0), U2 = (1, 1), min = (1, 0).
        let u = local_deviation(&[p1.clone(), p2.clone()], &[5.0, 3.0]);
        assert_eq!(u, vec![1.0, 0.0]);
        // Single constraint: composite equals that constraint.
        let u1 = local_deviation(&[p1], &[5.0]);
        assert_eq!(u1, vec![3.0, 0.0]);
        // min(3, 1) = 1 style check.
        let u2 = local_deviation(&[p2], &[3.0]);
        assert_eq!(u2[1], 1.0);
    }

    #[test]
    fn weights_decrease_in_u_and_peak_at_argmin() {
        let us = [0.4, 1.3, 0.2, 7.0, f64::INFINITY];
        let w = weights_from_u(&us);
        assert!(w.iter().all(|&wi| wi >= 0.0));
        assert_eq!(w[4], 0.0);
        let argmin = 2;
        for (i, wi) in w.iter().enumerate() {
            if i != argmin {
                assert!(*wi < w[argmin]);
            }
        }
        // Ratios match phi(-u)/phi(-u_min).
        let phi = |u: f64| (-0.5 * u * u).exp();
        assert!((w[0] / w[2] - phi(0.4) / phi(0.2)).abs() < 1e-12);
    }

    #[test]
    fn kmeans_single_cluster_selects_min_u() {
        let points: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0, 0.3]).collect();
        let us: Vec<f64> = (0..10).map(|i| (i as f64 - 6.0).abs() * 0.5 + 0.1).collect();
        let w = weights_from_u(&us);
        let mut rng = stream_rng(3, Stream::Scratch, &[0]);
        let sel = weighted_kmeans(&points, &w, 1, &mut rng).unwrap();
        assert_eq!(sel, vec![6]);
    }

    #[test]
    fn kmeans_two_blobs_one_selection_each() {
        // Two well-separated blobs of 6 points; oracle = exhaustive
        // 2-partition by weighted inertia.
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for i in 0..6 {
            points.push(vec![0.1 + 0.01 * i as f64, 0.1]);
            weights.push(1.0 + i as f64 * 0.1);
        }
        for i in 0..6 {
            points.push(vec![0.8 + 0.01 * i as f64, 0.9]);
            weights.push(2.0 - i as f64 * 0.1);
        }
        let mut rng = stream_rng(4, Stream::Scratch, &[1]);
        let mut sel = weighted_kmeans(&points, &weights, 2, &mut rng).unwrap();
        sel.sort_unstable();
        // Max-weight member of the left blob is index 5, of the right 6.
        assert_eq!(sel, vec![5, 6]);

        // Brute-force bipartition oracle: the optimal split separates the
        // blobs.
        let inertia = |mask: u32| -> f64 {
            let mut total = 0.0;
            for side in 0..2u32 {
                let members: Vec<usize> = (0..12)
                    .filter(|&i| ((mask >> i) & 1) == side)
                    .collect();
                if members.is_empty() {
                    return f64::INFINITY;
                }
                let wsum: f64 = members.iter().map(|&i| weights[i]).sum();
                let mut c = vec![0.0; 2];
                for &i in &members {
                    for k in 0..2 {
                        c[k] += weights[i] * points[i][k];
                    }
                }
                for ck in c.iter_mut() {
                    *ck /= wsum;
                }
                for &i in &members {
                    total += weights[i] * sq_dist(&points[i], &c);
                }
            }
            total
        };
        let mut best_mask = 0u32;
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << 12) - 1 {
            let v = inertia(mask);
            if v < best {
                best = v;
                best_mask = mask;
            }
        }
        let left: Vec<usize> = (0..12).filter(|&i| ((best_mask >> i) & 1) == 0).collect();
        assert!(left == (0..6).collect::<Vec<_>>() || left == (6..12).collect::<Vec<_>>());
    }

    #[test]
    fn kmeans_k_equals_count_selects_everything() {
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.2]).collect();
        let weights = vec![1.0; 5];
        let mut rng = stream_rng(5, Stream::Scratch, &[2]);
        let mut sel = weighted_kmeans(&points, &weights, 5, &mut rng).unwrap();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2, 3, 4]);
        // k beyond the candidate count is reduced.
        let sel = weighted_kmeans(&points, &weights, 9, &mut rng).unwrap();
        assert_eq!(sel.len(), 5);
    }

    #[test]
    fn kmeans_rejects_degenerate_weights() {
        let points = vec![vec![0.0], vec![1.0]];
        let mut rng = stream_rng(6, Stream::Scratch, &[3]);
        assert!(weighted_kmeans(&points, &[0.0, 0.0], 1, &mut rng).is_err());
        assert!(weighted_kmeans(&points, &[1.0, -1.0], 1, &mut rng).is_err());
    }

    fn ramp_problem() -> Problem {
        // f(d, z) = d + 0.1 z on d in [0,1]: response range well under the
        // threshold below, so every design is confidently safe.
        Problem {
            name: "ramp".into(),
            model: ProbabilisticModel::new(
                vec![DesignVariable::deterministic("d", 0.0, 1.0)],
                vec![EnvVariable::new("z", Marginal::normal(0.0, 1.0))],
            )
            .unwrap(),
            cost: Box::new(|d| d[0]),
            soft: vec![],
            responses: Box::new(|w| vec![w[0] + 0.1 * w[1]]),
            constraints: vec![HardConstraint {
                name: "g1".into(),
                threshold: 50.0,
                alpha: 0.95,
            }],
            initial_design: vec![0.5],
            reference: None,
        }
    }

    #[test]
    fn global_stage_stops_immediately_when_all_confident() {
        let problem = ramp_problem();
        let space = build_augmented(&problem.model, 2.7e-3, 2.7e-3).unwrap();
        let evaluator = Evaluator::new(&problem);
        let mut g = stream_rng(7, Stream::Scratch, &[4]);
        let plan = lhs(12, 2, &mut g);
        let responses: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let u = [plan.points[(i, 0)], plan.points[(i, 1)]];
                (problem.responses)(&space.from_unit_vec(&u))
            })
            .collect();
        let mut surrogates =
            Surrogates::fit(&plan.points, &responses, SurrogateSettings::default(), 7).unwrap();
        let cfg = GlobalStageConfig {
            m_candidates: 50,
            n_mc: 500,
            eta_bar: 0.15,
            k: 1,
            max_iters: 5,
            u_stop: 2.0,
        };
        let out = global_stage(&mut surrogates, &problem, &evaluator, &space, &cfg, 7).unwrap();
        assert!(out.events.is_empty(), "eta_final = {}", out.eta_final);
        assert!(out.converged);
        assert_eq!(evaluator.calls(), 0);
    }

    fn surface_problem() -> Problem {
        // The curved polynomial surface: a scarce DoE cannot resolve the
        // quantile contour, so the global stage must add points.
        Problem {
            name: "surface".into(),
            model: ProbabilisticModel::new(
                vec![DesignVariable::random(
                    "d",
                    -1.0,
                    1.0,
                    crate::distributions::MarginalKind::Normal,
                    crate::distributions::Spread::Std(0.05),
                )],
                vec![EnvVariable::new("z", Marginal::normal(0.5, 0.05))],
            )
            .unwrap(),
            cost: Box::new(|d| d[0]),
            soft: vec![],
            responses: Box::new(|w| {
                let (d, z) = (w[0], w[1]);
                vec![(z.powi(4) / 3.0 - 2.1 * z * z + 4.0) * z * z
                    + d * z
                    + 4.0 * d * d * (d * d - 1.0)]
            }),
            constraints: vec![HardConstraint {
                name: "g1".into(),
                threshold: 0.5,
                alpha: 0.95,
            }],
            initial_design: vec![0.0],
            reference: None,
        }
    }

    #[test]
    fn added_points_come_from_sample_and_become_interpolated() {
        let problem = surface_problem();
        let space = build_augmented(&problem.model, 2.7e-3, 2.7e-3).unwrap();
        let evaluator = Evaluator::new(&problem);
        let mut g = stream_rng(8, Stream::Scratch, &[5]);
        let plan = lhs(8, 2, &mut g);
        let responses: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let u = [plan.points[(i, 0)], plan.points[(i, 1)]];
                (problem.responses)(&space.from_unit_vec(&u))
            })
            .collect();
        let mut surrogates =
            Surrogates::fit(&plan.points, &responses, SurrogateSettings::default(), 8).unwrap();
        let cfg = GlobalStageConfig {
            m_candidates: 40,
            n_mc: 400,
            eta_bar: 0.0,
            k: 1,
            max_iters: 2,
            u_stop: 2.0,
        };
        let out = global_stage(&mut surrogates, &problem, &evaluator, &space, &cfg, 8).unwrap();
        assert!(!out.events.is_empty());
        let mut calls = 0;
        for ev in &out.events {
            calls += ev.added.len();
            for p in &ev.added {
                // True-model evaluations happened exactly at sampled points.
                assert_eq!(p.responses, (problem.responses)(&p.phys));
                // After refit the surrogate interpolates the added point,
                // so its deviation number is enormous unless the response
                // sits exactly on the threshold.
                let u = u_function(&surrogates.models[0], &p.unit, 0.5);
                assert!(u > 100.0, "u = {u}");
            }
        }
        assert_eq!(evaluator.calls(), calls);
        assert_eq!(surrogates.doe_size(), 8 + calls);
    }

    #[test]
    fn local_step_noop_under_threshold() {
        let problem = ramp_problem();
        let space = build_augmented(&problem.model, 2.7e-3, 2.7e-3).unwrap();
        let evaluator = Evaluator::new(&problem);
        let mut g = stream_rng(9, Stream::Scratch, &[6]);
        let plan = lhs(8, 2, &mut g);
        let responses: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let u = [plan.points[(i, 0)], plan.points[(i, 1)]];
                (problem.responses)(&space.from_unit_vec(&u))
            })
            .collect();
        let mut surrogates =
            Surrogates::fit(&plan.points, &responses, SurrogateSettings::default(), 9).unwrap();
        let sample = draw_mc_sample(&problem.model, &space, &[0.5], 200, &mut g).unwrap();
        let preds = surrogates.predict_sample(&sample.unit);
        let mut est = quantile_from_prediction(&sample, &preds[0], 0.95).unwrap();
        est.eta_q = 0.05;
        let out = local_stage_step(
            &mut surrogates,
            &evaluator,
            &sample,
            &preds,
            &[est.clone()],
            1,
            0.1,
            0,
            (9, 0),
        )
        .unwrap();
        assert!(out.is_none());
        assert_eq!(evaluator.calls(), 0);

        // Over the threshold: exactly one point, the argmin of the local
        // deviation number.
        est.eta_q = 0.5;
        let q_alphas = [est.q];
        let u_comp = local_deviation(&preds, &q_alphas);
        let mut expect = 0;
        for (i, &u) in u_comp.iter().enumerate() {
            if u < u_comp[expect] {
                expect = i;
            }
        }
        let out = local_stage_step(
            &mut surrogates,
            &evaluator,
            &sample,
            &preds,
            &[est],
            1,
            0.1,
            0,
            (9, 0),
        )
        .unwrap()
        .unwrap();
        assert_eq!(out.added.len(), 1);
        assert_eq!(evaluator.calls(), 1);
        assert_eq!(out.added[0].unit, sample.unit_row(expect));
    }
}
