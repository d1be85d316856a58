//! Monte Carlo quantile estimation on a surrogate, with Kriging-variance
//! quantile bounds and the local accuracy ratio eta_q.
//!
//! The estimate at level alpha is the `floor(N*alpha)`-th ascending order
//! statistic (1-based) of the predicted means over the Monte Carlo set;
//! the lower/upper bounds take the same order statistic of the
//! `mu -/+ 2 sigma` populations, each sorted independently.

use nalgebra::DMatrix;
use rand::Rng;

use crate::distributions::ProbabilisticModel;
use crate::doe::lhs;
use crate::error::{QrbdoError, Result};
use crate::kriging::{BatchPrediction, KrigingModel};
use crate::space::AugmentedSpace;

/// Quantile estimate with its Kriging-variance bounds.
#[derive(Debug, Clone)]
pub struct QuantileEstimate {
    pub q: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    /// Physical-coordinate sample realizing the mean quantile.
    pub realizing_point: Vec<f64>,
    /// Row of the Monte Carlo set realizing the mean quantile.
    pub realizing_index: usize,
    /// Local accuracy ratio; NaN until filled by [`eta_ratio`].
    pub eta_q: f64,
    pub n: usize,
    pub alpha: f64,
}

/// 1-based ascending order-statistic index `floor(n*alpha)`.
///
/// The product is evaluated with a one-ulp-scale guard so that levels
/// written in decimal (0.95, 0.99865, ...) floor the way exact arithmetic
/// would.
pub fn quantile_index(n: usize, alpha: f64) -> Result<usize> {
    if n == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(QrbdoError::Domain(format!(
            "quantile index needs n >= 1 and alpha in (0,1), got n={n}, alpha={alpha}"
        )));
    }
    let t = n as f64 * alpha;
    let mut k = t.floor();
    if t - k >= 1.0 - 1e-9 {
        k += 1.0;
    }
    let k = k as usize;
    if k < 1 || k > n {
        return Err(QrbdoError::Domain(format!(
            "order statistic {k} outside 1..={n} (alpha too small for this sample size)"
        )));
    }
    Ok(k)
}

// k-th (1-based) smallest of `values`; deterministic under ties by taking
// the first occurrence in (value, index) order.
fn kth_with_index(values: &[f64], k: usize) -> (f64, usize) {
    let mut tagged: Vec<(f64, u32)> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i as u32))
        .collect();
    let (_, kth, _) =
        tagged.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    (kth.0, kth.1 as usize)
}

fn kth_value(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// A Monte Carlo set in both physical and unit-cube coordinates.
#[derive(Debug, Clone)]
pub struct McSample {
    pub phys: DMatrix<f64>,
    pub unit: DMatrix<f64>,
}

impl McSample {
    pub fn n(&self) -> usize {
        self.phys.nrows()
    }

    pub fn phys_row(&self, i: usize) -> Vec<f64> {
        self.phys.row(i).iter().copied().collect()
    }

    pub fn unit_row(&self, i: usize) -> Vec<f64> {
        self.unit.row(i).iter().copied().collect()
    }
}

/// Draws the Monte Carlo set for design `d` and maps it to the unit cube.
pub fn draw_mc_sample<R: Rng + ?Sized>(
    pm: &ProbabilisticModel,
    space: &AugmentedSpace,
    d: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<McSample> {
    let phys = pm.sample_joint(d, n, rng)?;
    let unit = space.to_unit_rows(&phys);
    Ok(McSample { phys, unit })
}

/// Builds the quantile estimate from surrogate predictions over a sample.
pub fn quantile_from_prediction(
    sample: &McSample,
    pred: &BatchPrediction,
    alpha: f64,
) -> Result<QuantileEstimate> {
    let n = sample.n();
    if pred.mu.len() != n {
        return Err(QrbdoError::Config(
            "prediction length does not match the sample".into(),
        ));
    }
    let k = quantile_index(n, alpha)?;
    let (q, realizing_index) = kth_with_index(&pred.mu, k);
    let lo: Vec<f64> = (0..n).map(|i| pred.mu[i] - 2.0 * pred.sigma[i]).collect();
    let hi: Vec<f64> = (0..n).map(|i| pred.mu[i] + 2.0 * pred.sigma[i]).collect();
    Ok(QuantileEstimate {
        q,
        q_lo: kth_value(&lo, k),
        q_hi: kth_value(&hi, k),
        realizing_point: sample.phys_row(realizing_index),
        realizing_index,
        eta_q: f64::NAN,
        n,
        alpha,
    })
}

/// Monte Carlo quantile of the surrogate response at design `d`.
pub fn mc_quantile<R: Rng + ?Sized>(
    model: &KrigingModel,
    space: &AugmentedSpace,
    pm: &ProbabilisticModel,
    d: &[f64],
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<QuantileEstimate> {
    let sample = draw_mc_sample(pm, space, d, n, rng)?;
    let pred = model.predict_batch(&sample.unit);
    quantile_from_prediction(&sample, &pred, alpha)
}

/// Monte Carlo quantile of a true (non-surrogate) response at design `d`.
/// `f` maps one physical input row to the response.
pub fn true_quantile<R: Rng + ?Sized>(
    f: impl Fn(&[f64]) -> f64,
    pm: &ProbabilisticModel,
    d: &[f64],
    alpha: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let phys = pm.sample_joint(d, n, rng)?;
    let dim = phys.ncols();
    let mut row = vec![0.0; dim];
    let ys: Vec<f64> = (0..n)
        .map(|i| {
            for (k, rk) in row.iter_mut().enumerate() {
                *rk = phys[(i, k)];
            }
            f(&row)
        })
        .collect();
    let k = quantile_index(n, alpha)?;
    Ok(kth_value(&ys, k))
}

/// Local accuracy ratio `(q_hi - q_lo) / |g_bar|`, falling back to
/// `(q_hi - q_lo) / fallback_scale` when the threshold is zero. The
/// fallback scale is the standard deviation of the surrogate predictions
/// over a large Monte Carlo set in the augmented space.
pub fn eta_ratio(est: &QuantileEstimate, g_bar: f64, fallback_scale: f64) -> Result<f64> {
    let gap = est.q_hi - est.q_lo;
    if gap == 0.0 {
        return Ok(0.0);
    }
    if g_bar != 0.0 {
        Ok(gap / g_bar.abs())
    } else if fallback_scale > 0.0 {
        Ok(gap / fallback_scale)
    } else {
        Err(QrbdoError::Config(
            "eta_q needs a nonzero threshold or a positive fallback scale".into(),
        ))
    }
}

/// Population standard deviation of a prediction vector (the eta_q
/// fallback scale over a Monte Carlo population).
pub fn prediction_std(mu: &[f64]) -> f64 {
    let n = mu.len() as f64;
    let mean = mu.iter().sum::<f64>() / n;
    (mu.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Standard deviation of surrogate predictions over an LHS sample of the
/// unit cube (a box-uniform variant of the eta_q fallback scale).
pub fn prediction_std_over_box<R: Rng + ?Sized>(
    model: &KrigingModel,
    n: usize,
    rng: &mut R,
) -> f64 {
    let plan = lhs(n, model.doe().dim(), rng);
    let pred = model.predict_batch(&plan.points);
    prediction_std(&pred.mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{DesignVariable, EnvVariable, Marginal, ProbabilisticModel};
    use crate::kriging::Doe;
    use crate::rng::{stream_rng, Stream};
    use crate::space::build_augmented;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rng(ix: u64) -> ChaCha12Rng {
        stream_rng(4242, Stream::Scratch, &[ix])
    }

    #[test]
    fn index_examples() {
        assert_eq!(quantile_index(10_000, 0.95).unwrap(), 9_500);
        assert_eq!(quantile_index(10, 0.95).unwrap(), 9);
        assert_eq!(quantile_index(10_000, 0.99865).unwrap(), 9_986);
        assert_eq!(quantile_index(3, 0.5).unwrap(), 1);
        assert!(quantile_index(10, 0.05).is_err());
        assert!(quantile_index(0, 0.5).is_err());
    }

    // One deterministic design var, one standard normal z.
    fn z_model() -> (ProbabilisticModel, AugmentedSpace) {
        let pm = ProbabilisticModel::new(
            vec![DesignVariable::deterministic("d", 0.0, 1.0)],
            vec![EnvVariable::new("z", Marginal::normal(0.0, 1.0))],
        )
        .unwrap();
        let space = build_augmented(&pm, 2.7e-3, 2.7e-3).unwrap();
        (pm, space)
    }

    // Surrogate trained on f(d,z) = z over the augmented box.
    fn z_surrogate(space: &AugmentedSpace) -> KrigingModel {
        let mut g = rng(1);
        let plan = lhs(24, 2, &mut g);
        let ys: Vec<f64> = (0..24)
            .map(|i| {
                let u = [plan.points[(i, 0)], plan.points[(i, 1)]];
                space.from_unit_vec(&u)[1]
            })
            .collect();
        let doe = Doe::new(plan.points.clone(), DVector::from_row_slice(&ys)).unwrap();
        KrigingModel::fit(doe, (1e-3, 10.0), 8, None, &mut rng(2)).unwrap()
    }

    #[test]
    fn degenerate_flat_surrogate_collapses_bounds() {
        let (pm, space) = z_model();
        let mut g = rng(3);
        let plan = lhs(8, 2, &mut g);
        let doe = Doe::new(plan.points.clone(), DVector::from_element(8, 4.0)).unwrap();
        let model = KrigingModel::fit(doe, (1e-3, 10.0), 4, None, &mut rng(4)).unwrap();
        let est = mc_quantile(&model, &space, &pm, &[0.5], 0.95, 1000, &mut rng(5)).unwrap();
        assert_eq!(est.q, 4.0);
        assert_eq!(est.q_lo, 4.0);
        assert_eq!(est.q_hi, 4.0);
        assert!((eta_ratio(&est, 0.0, 0.0).unwrap() - 0.0).abs() < 1e-300);
    }

    #[test]
    fn linear_normal_quantile_matches_analytic() {
        let (pm, space) = z_model();
        let model = z_surrogate(&space);
        let est = mc_quantile(&model, &space, &pm, &[0.5], 0.95, 1_000_000, &mut rng(6)).unwrap();
        assert!(
            (est.q - 1.6449).abs() < 0.01,
            "q = {} vs analytic 1.6449",
            est.q
        );
        // The realizing point's own prediction equals the quantile.
        let u = space.to_unit_vec(&est.realizing_point);
        assert_eq!(model.predict(&u).0, est.q);
    }

    #[test]
    fn true_quantile_linear_normal() {
        let (pm, _) = z_model();
        let q = true_quantile(|w| w[1], &pm, &[0.5], 0.95, 1_000_000, &mut rng(7)).unwrap();
        assert!((q - 1.6449).abs() < 0.01);
    }

    #[test]
    fn quantile_equals_full_sort_oracle() {
        let (pm, space) = z_model();
        let model = z_surrogate(&space);
        for n in [100usize, 1_000, 10_000] {
            let mut g = rng(100 + n as u64);
            let sample = draw_mc_sample(&pm, &space, &[0.5], n, &mut g).unwrap();
            let pred = model.predict_batch(&sample.unit);
            let est = quantile_from_prediction(&sample, &pred, 0.95).unwrap();
            // Brute-force oracle: full stable sort.
            let mut tagged: Vec<(f64, usize)> = pred.mu.iter().copied().zip(0..n).collect();
            tagged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let k = quantile_index(n, 0.95).unwrap();
            assert_eq!(est.q, tagged[k - 1].0);
            assert_eq!(est.realizing_index, tagged[k - 1].1);
            let mut lo: Vec<f64> = (0..n).map(|i| pred.mu[i] - 2.0 * pred.sigma[i]).collect();
            lo.sort_by(f64::total_cmp);
            assert_eq!(est.q_lo, lo[k - 1]);
        }
    }

    #[test]
    fn monotone_in_alpha_on_same_sample() {
        let (pm, space) = z_model();
        let model = z_surrogate(&space);
        let mut g = rng(8);
        let sample = draw_mc_sample(&pm, &space, &[0.5], 5_000, &mut g).unwrap();
        let pred = model.predict_batch(&sample.unit);
        let mut prev = f64::NEG_INFINITY;
        for alpha in [0.05, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99] {
            let est = quantile_from_prediction(&sample, &pred, alpha).unwrap();
            assert!(est.q >= prev);
            prev = est.q;
        }
    }

    #[test]
    fn convergence_rate_linear_normal() {
        let (pm, space) = z_model();
        let model = z_surrogate(&space);
        let target = 1.6448536269514722;
        let mut errs = Vec::new();
        for (i, n) in [1_000usize, 10_000, 100_000, 1_000_000].iter().enumerate() {
            let mut acc = 0.0;
            for s in 0..5 {
                let est = mc_quantile(
                    &model,
                    &space,
                    &pm,
                    &[0.5],
                    0.95,
                    *n,
                    &mut rng(200 + 10 * i as u64 + s),
                )
                .unwrap();
                acc += (est.q - target).abs();
            }
            errs.push(acc / 5.0);
        }
        // n^-1/2 predicts a ~31.6x reduction from n=1e3 to 1e6; allow
        // slack for the surrogate bias floor.
        assert!(errs[3] < errs[0] / 8.0, "errors did not shrink: {errs:?}");
    }

    #[test]
    fn eta_ratio_paths() {
        let est = QuantileEstimate {
            q: 100.0,
            q_lo: 95.0,
            q_hi: 112.0,
            realizing_point: vec![0.0],
            realizing_index: 0,
            eta_q: f64::NAN,
            n: 100,
            alpha: 0.95,
        };
        // (112 - 95)/170 = 0.1.
        assert!((eta_ratio(&est, 170.0, 0.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((eta_ratio(&est, -170.0, 0.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((eta_ratio(&est, 0.0, 34.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(eta_ratio(&est, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_threshold_fallback_is_finite_positive() {
        let (pm, space) = z_model();
        let model = z_surrogate(&space);
        let mut est = mc_quantile(&model, &space, &pm, &[0.5], 0.95, 10_000, &mut rng(9)).unwrap();
        let scale = prediction_std_over_box(&model, 10_000, &mut rng(10));
        assert!(scale > 0.0);
        let eta = eta_ratio(&est, 0.0, scale).unwrap();
        assert!(eta.is_finite() && eta >= 0.0);
        est.eta_q = eta;
        assert!(est.eta_q.is_finite());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn sandwich_always_holds(seed in 0u64..100_000) {
            // Random prediction populations; the sandwich must hold for
            // every draw and level.
            let mut g = stream_rng(seed, Stream::Scratch, &[55]);
            let n = 20 + (seed % 200) as usize;
            let alpha = 0.05 + 0.9 * (seed % 97) as f64 / 97.0;
            let mu: Vec<f64> = (0..n).map(|_| 10.0 * g.random::<f64>() - 5.0).collect();
            let sigma: Vec<f64> = (0..n).map(|_| 2.0 * g.random::<f64>()).collect();
            let pred = BatchPrediction { mu, sigma, outside_unit_cube: 0 };
            let phys = DMatrix::zeros(n, 1);
            let sample = McSample { phys: phys.clone(), unit: phys };
            if let Ok(est) = quantile_from_prediction(&sample, &pred, alpha) {
                prop_assert!(est.q_lo <= est.q && est.q <= est.q_hi);
            }
        }
    }
}
