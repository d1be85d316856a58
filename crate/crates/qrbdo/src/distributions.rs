//! Marginal probability distributions and the joint probabilistic model.
//!
//! Marginals are parameterized the way the problems state them: a mean and
//! a coefficient of variation (std/mean), from which the native parameters
//! are recovered by moment matching. Sampling is inverse-transform from a
//! counter-based uniform stream so that every draw is replayable from the
//! run seed.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{QrbdoError, Result};
use crate::rng::uniform_open01;
use crate::special::{std_normal_cdf, std_normal_inv_cdf, EULER_GAMMA};

/// Supported marginal families. `Point` is the degenerate point mass used
/// for deterministic design variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalKind {
    Normal,
    Lognormal,
    /// Max-type (largest-extreme-value) Gumbel.
    Gumbel,
    Weibull,
    Uniform,
    Point,
}

/// A one-dimensional marginal with its moment-matched native parameters.
///
/// Native parameter meaning by kind:
/// - Normal: `(mean, std)`
/// - Lognormal: `(lambda, zeta)` with `zeta = sqrt(ln(1+cov^2))`,
///   `lambda = ln(mean) - zeta^2/2`
/// - Gumbel: `(location, scale)` with `scale = std*sqrt(6)/pi`,
///   `location = mean - gamma_E*scale`
/// - Weibull: `(scale, shape)` with the shape solved from
///   `cov^2 = Gamma(1+2/k)/Gamma(1+1/k)^2 - 1`
/// - Uniform: `(lower, upper)`
/// - Point: `(value, 0)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marginal {
    kind: MarginalKind,
    mean: f64,
    std: f64,
    p1: f64,
    p2: f64,
}

impl Marginal {
    /// Builds a marginal from `(kind, mean, cov)` by moment matching.
    ///
    /// For `Uniform` the bounds are recovered from the moments
    /// (`half-width = sqrt(3)*std`); use [`Marginal::uniform`] to state
    /// bounds directly.
    pub fn from_moments(kind: MarginalKind, mean: f64, cov: f64) -> Result<Self> {
        if !mean.is_finite() || !cov.is_finite() || cov <= 0.0 {
            return Err(QrbdoError::Parameterization(format!(
                "marginal needs finite mean and cov > 0, got mean={mean}, cov={cov}"
            )));
        }
        match kind {
            MarginalKind::Normal => {
                if mean <= 0.0 {
                    return Err(QrbdoError::Parameterization(
                        "cov parameterization of a normal needs mean > 0; use normal() with an explicit std".into(),
                    ));
                }
                Ok(Self::normal(mean, cov * mean))
            }
            MarginalKind::Lognormal => {
                if mean <= 0.0 {
                    return Err(QrbdoError::Parameterization(
                        "lognormal needs mean > 0".into(),
                    ));
                }
                let zeta = (1.0 + cov * cov).ln().sqrt();
                let lambda = mean.ln() - 0.5 * zeta * zeta;
                Ok(Marginal {
                    kind,
                    mean,
                    std: cov * mean,
                    p1: lambda,
                    p2: zeta,
                })
            }
            MarginalKind::Gumbel => {
                if mean <= 0.0 {
                    return Err(QrbdoError::Parameterization("gumbel needs mean > 0".into()));
                }
                let std = cov * mean;
                let scale = std * 6.0_f64.sqrt() / std::f64::consts::PI;
                let loc = mean - EULER_GAMMA * scale;
                Ok(Marginal {
                    kind,
                    mean,
                    std,
                    p1: loc,
                    p2: scale,
                })
            }
            MarginalKind::Weibull => {
                if mean <= 0.0 {
                    return Err(QrbdoError::Parameterization(
                        "weibull needs mean > 0".into(),
                    ));
                }
                let shape = weibull_shape_from_cov(cov)?;
                let scale = mean / gamma(1.0 + 1.0 / shape);
                Ok(Marginal {
                    kind,
                    mean,
                    std: cov * mean,
                    p1: scale,
                    p2: shape,
                })
            }
            MarginalKind::Uniform => {
                let half = 3.0_f64.sqrt() * cov * mean.abs();
                Marginal::uniform(mean - half, mean + half)
            }
            MarginalKind::Point => Err(QrbdoError::Parameterization(
                "a point mass has no cov; use Marginal::point".into(),
            )),
        }
    }

    pub fn normal(mean: f64, std: f64) -> Self {
        Marginal {
            kind: MarginalKind::Normal,
            mean,
            std,
            p1: mean,
            p2: std,
        }
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(QrbdoError::Parameterization(format!(
                "uniform needs lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Marginal {
            kind: MarginalKind::Uniform,
            mean: 0.5 * (lower + upper),
            std: (upper - lower) / 12.0_f64.sqrt(),
            p1: lower,
            p2: upper,
        })
    }

    /// Degenerate point mass at `value`.
    pub fn point(value: f64) -> Self {
        Marginal {
            kind: MarginalKind::Point,
            mean: value,
            std: 0.0,
            p1: value,
            p2: 0.0,
        }
    }

    pub fn kind(&self) -> MarginalKind {
        self.kind
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    /// Native parameter pair (see type docs for the per-kind meaning).
    pub fn params(&self) -> (f64, f64) {
        (self.p1, self.p2)
    }

    /// Inverse CDF at `p`, strictly increasing in `p` for non-degenerate
    /// kinds. `p` must lie strictly inside (0, 1).
    pub fn inv_cdf(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(QrbdoError::Domain(format!(
                "inverse CDF needs p in (0,1), got {p}"
            )));
        }
        Ok(self.inv_cdf_unchecked(p))
    }

    fn inv_cdf_unchecked(&self, p: f64) -> f64 {
        match self.kind {
            MarginalKind::Normal => self.p1 + self.p2 * std_normal_inv_cdf(p),
            MarginalKind::Lognormal => (self.p1 + self.p2 * std_normal_inv_cdf(p)).exp(),
            MarginalKind::Gumbel => self.p1 - self.p2 * (-(p.ln())).ln(),
            MarginalKind::Weibull => self.p1 * (-(1.0 - p).ln()).powf(1.0 / self.p2),
            MarginalKind::Uniform => self.p1 + p * (self.p2 - self.p1),
            MarginalKind::Point => self.p1,
        }
    }

    /// CDF at `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        match self.kind {
            MarginalKind::Normal => std_normal_cdf((x - self.p1) / self.p2),
            MarginalKind::Lognormal => {
                if x <= 0.0 {
                    0.0
                } else {
                    std_normal_cdf((x.ln() - self.p1) / self.p2)
                }
            }
            MarginalKind::Gumbel => (-(-(x - self.p1) / self.p2).exp()).exp(),
            MarginalKind::Weibull => {
                if x <= 0.0 {
                    0.0
                } else {
                    1.0 - (-(x / self.p1).powf(self.p2)).exp()
                }
            }
            MarginalKind::Uniform => ((x - self.p1) / (self.p2 - self.p1)).clamp(0.0, 1.0),
            MarginalKind::Point => {
                if x < self.p1 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Draws one value by inverse transform.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.inv_cdf_unchecked(uniform_open01(rng))
    }

    /// Draws `n` values by inverse transform; reproducible given the stream.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

/// Solves the Weibull shape from the coefficient of variation by
/// safeguarded bisection on k in [0.2, 50] (cov^2 is monotone decreasing
/// in k on that range), to 1e-10 on k.
fn weibull_shape_from_cov(cov: f64) -> Result<f64> {
    let cov2_of = |k: f64| gamma(1.0 + 2.0 / k) / gamma(1.0 + 1.0 / k).powi(2) - 1.0;
    let target = cov * cov;
    let (mut lo, mut hi) = (0.2_f64, 50.0_f64);
    if target > cov2_of(lo) || target < cov2_of(hi) {
        return Err(QrbdoError::Numeric(format!(
            "weibull cov {cov} outside the representable range for shape in [0.2, 50]"
        )));
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if cov2_of(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Dispersion specification of a random design variable around its nominal
/// value: either a coefficient of variation (std scales with the nominal)
/// or an absolute standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spread {
    Cov(f64),
    Std(f64),
}

/// A design variable: nominal bounds plus the uncertainty model of the
/// realized variable `X_i | d_i`. `uncertainty = None` means deterministic
/// (the conditioned marginal degenerates to a point mass at `d_i`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignVariable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub uncertainty: Option<(MarginalKind, Spread)>,
}

impl DesignVariable {
    pub fn deterministic(name: &str, lower: f64, upper: f64) -> Self {
        DesignVariable {
            name: name.into(),
            lower,
            upper,
            uncertainty: None,
        }
    }

    pub fn random(name: &str, lower: f64, upper: f64, kind: MarginalKind, spread: Spread) -> Self {
        DesignVariable {
            name: name.into(),
            lower,
            upper,
            uncertainty: Some((kind, spread)),
        }
    }

    /// Marginal of `X_i | d_i` at the nominal value `d`.
    pub fn conditioned(&self, d: f64) -> Result<Marginal> {
        match self.uncertainty {
            None => Ok(Marginal::point(d)),
            Some((MarginalKind::Normal, Spread::Std(s))) => Ok(Marginal::normal(d, s)),
            Some((kind, Spread::Std(s))) => {
                if d <= 0.0 {
                    return Err(QrbdoError::Parameterization(format!(
                        "absolute-std {kind:?} design marginal needs d > 0, got {d}"
                    )));
                }
                Marginal::from_moments(kind, d, s / d)
            }
            Some((MarginalKind::Normal, Spread::Cov(c))) => Ok(Marginal::normal(d, c * d)),
            Some((kind, Spread::Cov(c))) => Marginal::from_moments(kind, d, c),
        }
    }
}

/// Named environmental variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvVariable {
    pub name: String,
    pub marginal: Marginal,
}

impl EnvVariable {
    pub fn new(name: &str, marginal: Marginal) -> Self {
        EnvVariable {
            name: name.into(),
            marginal,
        }
    }
}

/// Joint input model: design-conditioned marginals `X | d` followed by
/// environmental marginals `Z`, all mutually independent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbabilisticModel {
    design: Vec<DesignVariable>,
    env: Vec<EnvVariable>,
}

impl ProbabilisticModel {
    pub fn new(design: Vec<DesignVariable>, env: Vec<EnvVariable>) -> Result<Self> {
        if design.is_empty() {
            return Err(QrbdoError::Config("need at least one design variable".into()));
        }
        for v in &design {
            if !(v.lower < v.upper) || !v.lower.is_finite() || !v.upper.is_finite() {
                return Err(QrbdoError::Config(format!(
                    "design variable {} needs finite lower < upper, got [{}, {}]",
                    v.name, v.lower, v.upper
                )));
            }
        }
        Ok(ProbabilisticModel { design, env })
    }

    pub fn design(&self) -> &[DesignVariable] {
        &self.design
    }

    pub fn env(&self) -> &[EnvVariable] {
        &self.env
    }

    pub fn s_d(&self) -> usize {
        self.design.len()
    }

    pub fn s_z(&self) -> usize {
        self.env.len()
    }

    /// Total input dimension `s_d + s_z`.
    pub fn dim(&self) -> usize {
        self.s_d() + self.s_z()
    }

    pub fn design_bounds(&self) -> Vec<(f64, f64)> {
        self.design.iter().map(|v| (v.lower, v.upper)).collect()
    }

    pub fn check_design(&self, d: &[f64]) -> Result<()> {
        if d.len() != self.s_d() {
            return Err(QrbdoError::Domain(format!(
                "design has {} components, model has {}",
                d.len(),
                self.s_d()
            )));
        }
        for (v, &di) in self.design.iter().zip(d) {
            if di < v.lower || di > v.upper {
                return Err(QrbdoError::Domain(format!(
                    "design variable {} = {di} outside [{}, {}]",
                    v.name, v.lower, v.upper
                )));
            }
        }
        Ok(())
    }

    /// Design marginals conditioned at `d` (without bound checks).
    pub fn conditioned(&self, d: &[f64]) -> Result<Vec<Marginal>> {
        self.design
            .iter()
            .zip(d)
            .map(|(v, &di)| v.conditioned(di))
            .collect()
    }

    /// Draws the Monte Carlo set for design `d`: an `n x (s_d+s_z)` matrix
    /// whose first `s_d` columns follow `X | d` and remaining columns
    /// follow `Z`.
    pub fn sample_joint<R: Rng + ?Sized>(
        &self,
        d: &[f64],
        n: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        self.check_design(d)?;
        let marginals = self.joint_marginals(d)?;
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            for (j, m) in marginals.iter().enumerate() {
                out[(i, j)] = m.draw(rng);
            }
        }
        Ok(out)
    }

    /// Transforms a frozen matrix of uniforms (one row per sample, one
    /// column per input dimension) through the inverse CDFs at design `d`.
    /// Reusing the same uniforms across designs gives common random numbers
    /// for local refinement.
    pub fn sample_joint_from_uniforms(&self, d: &[f64], u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_design(d)?;
        if u.ncols() != self.dim() {
            return Err(QrbdoError::Domain(format!(
                "uniform matrix has {} columns, model dimension is {}",
                u.ncols(),
                self.dim()
            )));
        }
        let marginals = self.joint_marginals(d)?;
        let mut out = DMatrix::zeros(u.nrows(), u.ncols());
        for i in 0..u.nrows() {
            for (j, m) in marginals.iter().enumerate() {
                out[(i, j)] = m.inv_cdf_unchecked(u[(i, j)]);
            }
        }
        Ok(out)
    }

    fn joint_marginals(&self, d: &[f64]) -> Result<Vec<Marginal>> {
        let mut ms = self.conditioned(d)?;
        ms.extend(self.env.iter().map(|e| e.marginal));
        Ok(ms)
    }

    /// Replaces the environmental marginals (names kept), e.g. from a
    /// problem configuration file.
    pub fn replace_env_marginals(&mut self, marginals: Vec<Marginal>) -> Result<()> {
        if marginals.len() != self.env.len() {
            return Err(QrbdoError::Config(format!(
                "env: expected {} marginals, got {}",
                self.env.len(),
                marginals.len()
            )));
        }
        for (e, m) in self.env.iter_mut().zip(marginals) {
            e.marginal = m;
        }
        Ok(())
    }

    /// Input variable names in column order.
    pub fn names(&self) -> Vec<String> {
        self.design
            .iter()
            .map(|v| v.name.clone())
            .chain(self.env.iter().map(|e| e.name.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn scratch(ix: u64) -> impl Rng {
        stream_rng(1234, Stream::Scratch, &[ix])
    }

    #[test]
    fn lognormal_moment_matching_column_k() {
        // k ~ Lognormal(0.6, 10%)
        let m = Marginal::from_moments(MarginalKind::Lognormal, 0.6, 0.10).unwrap();
        let (lambda, zeta) = m.params();
        assert!((zeta - (1.0_f64 + 0.01).ln().sqrt()).abs() < 1e-15);
        assert!((zeta - 0.09975).abs() < 5e-6);
        assert!((lambda - (0.6_f64.ln() - 0.5 * zeta * zeta)).abs() < 1e-15);
    }

    #[test]
    fn normal_cov_gives_std() {
        let m = Marginal::from_moments(MarginalKind::Normal, 5.0, 0.05).unwrap();
        assert_eq!(m.std(), 0.25);
    }

    #[test]
    fn weibull_shape_solves_cov_equation() {
        let m = Marginal::from_moments(MarginalKind::Weibull, 7860.0, 0.10).unwrap();
        let (_, k) = m.params();
        let ratio = gamma(1.0 + 2.0 / k) / gamma(1.0 + 1.0 / k).powi(2);
        assert!((ratio - 1.01).abs() < 1e-9, "ratio={ratio}");
        // Sampled moments against the targets (1e6 draws, 1% relative).
        let mut rng = scratch(1);
        let xs = m.sample(1_000_000, &mut rng);
        let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((mean - 7860.0).abs() / 7860.0 < 0.01);
        assert!((var.sqrt() - 786.0).abs() / 786.0 < 0.01);
    }

    #[test]
    fn inverse_cdf_examples() {
        let n = Marginal::normal(5.0, 0.25);
        assert!((n.inv_cdf(0.5).unwrap() - 5.0).abs() < 1e-12);

        let ln = Marginal::from_moments(MarginalKind::Lognormal, 0.6, 0.1).unwrap();
        // Closed-form median exp(lambda) = 0.6/sqrt(1.01); cross-checked by
        // bisection on the CDF.
        let median = 0.6 / 1.01_f64.sqrt();
        assert!((ln.inv_cdf(0.5).unwrap() - median).abs() < 1e-12);
        let (mut lo, mut hi) = (0.1, 2.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if ln.cdf(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((ln.inv_cdf(0.5).unwrap() - 0.5 * (lo + hi)).abs() < 1e-10);

        let std = Marginal::normal(0.0, 1.0);
        assert!((std.inv_cdf(0.05).unwrap() + 1.6449).abs() < 1e-4);
    }

    #[test]
    fn inv_cdf_rejects_bad_levels() {
        let m = Marginal::normal(0.0, 1.0);
        assert!(m.inv_cdf(0.0).is_err());
        assert!(m.inv_cdf(1.0).is_err());
        assert!(m.inv_cdf(-0.5).is_err());
    }

    #[test]
    fn cdf_inv_cdf_round_trip_all_kinds() {
        let kinds = [
            Marginal::normal(3.0, 0.7),
            Marginal::from_moments(MarginalKind::Lognormal, 10_000.0, 0.05).unwrap(),
            Marginal::from_moments(MarginalKind::Gumbel, 100.0, 0.15).unwrap(),
            Marginal::from_moments(MarginalKind::Weibull, 7860.0, 0.10).unwrap(),
            Marginal::uniform(34.0, 35.0).unwrap(),
        ];
        for m in kinds {
            for i in 1..200 {
                let p = i as f64 / 200.0;
                let x = m.inv_cdf(p).unwrap();
                assert!(
                    (m.cdf(x) - p).abs() < 1e-12,
                    "{:?}: p={p}, F(F^-1(p))={}",
                    m.kind(),
                    m.cdf(x)
                );
            }
        }
    }

    #[test]
    fn sampling_support_and_point_mass() {
        let u = Marginal::uniform(34.0, 35.0).unwrap();
        let mut rng = stream_rng(7, Stream::Scratch, &[0]);
        let xs = u.sample(3, &mut rng);
        assert_eq!(xs.len(), 3);
        assert!(xs.iter().all(|&x| (34.0..=35.0).contains(&x)));

        let p = Marginal::point(238.0);
        let mut rng = scratch(2);
        assert_eq!(p.sample(5, &mut rng), vec![238.0; 5]);
    }

    #[test]
    fn standard_normal_sample_mean_clt() {
        let m = Marginal::normal(0.0, 1.0);
        let mut rng = scratch(3);
        let xs = m.sample(1_000_000, &mut rng);
        let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.004, "mean={mean}");
    }

    #[test]
    fn moment_matching_within_one_percent_all_kinds() {
        let cases = [
            (MarginalKind::Normal, 5.0, 0.05),
            (MarginalKind::Lognormal, 0.6, 0.10),
            (MarginalKind::Gumbel, 100.0, 0.15),
            (MarginalKind::Weibull, 7860.0, 0.10),
            (MarginalKind::Uniform, 10.0, 0.20),
        ];
        for (ix, (kind, mean, cov)) in cases.into_iter().enumerate() {
            let m = Marginal::from_moments(kind, mean, cov).unwrap();
            let mut rng = scratch(10 + ix as u64);
            let xs = m.sample(1_000_000, &mut rng);
            let mu: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd =
                (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
            assert!((mu - mean).abs() / mean < 0.01, "{kind:?} mean {mu}");
            assert!((sd - cov * mean).abs() / (cov * mean) < 0.01, "{kind:?} std {sd}");
        }
    }

    #[test]
    fn kolmogorov_smirnov_under_one_percent() {
        let cases = [
            Marginal::normal(0.0, 1.0),
            Marginal::from_moments(MarginalKind::Lognormal, 3000.0, 0.01).unwrap(),
            Marginal::from_moments(MarginalKind::Gumbel, 200.0, 0.08).unwrap(),
            Marginal::from_moments(MarginalKind::Weibull, 7860.0, 0.10).unwrap(),
            Marginal::uniform(-1.0, 2.0).unwrap(),
        ];
        for (ix, m) in cases.into_iter().enumerate() {
            let mut rng = scratch(20 + ix as u64);
            let mut xs = m.sample(100_000, &mut rng);
            xs.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let mut ks = 0.0_f64;
            for (i, &x) in xs.iter().enumerate() {
                let f = m.cdf(x);
                ks = ks.max((f - i as f64 / n).abs());
                ks = ks.max(((i + 1) as f64 / n - f).abs());
            }
            assert!(ks < 0.01, "{:?}: KS={ks}", m.kind());
        }
    }

    #[test]
    fn weibull_cov_out_of_range_is_numeric_error() {
        assert!(matches!(
            Marginal::from_moments(MarginalKind::Weibull, 1.0, 20.0),
            Err(QrbdoError::Numeric(_))
        ));
    }

    #[test]
    fn joint_sampling_column_layout() {
        // Deterministic design (b, h) plus lognormal (k, E, L): rows must
        // carry the point masses in the first two columns.
        let pm = ProbabilisticModel::new(
            vec![
                DesignVariable::deterministic("b", 150.0, 350.0),
                DesignVariable::deterministic("h", 150.0, 350.0),
            ],
            vec![
                EnvVariable::new(
                    "k",
                    Marginal::from_moments(MarginalKind::Lognormal, 0.6, 0.10).unwrap(),
                ),
                EnvVariable::new(
                    "E",
                    Marginal::from_moments(MarginalKind::Lognormal, 10_000.0, 0.05).unwrap(),
                ),
                EnvVariable::new(
                    "L",
                    Marginal::from_moments(MarginalKind::Lognormal, 3000.0, 0.01).unwrap(),
                ),
            ],
        )
        .unwrap();
        let mut rng = scratch(31);
        let s = pm.sample_joint(&[238.0, 238.0], 4, &mut rng).unwrap();
        assert_eq!(s.shape(), (4, 5));
        for i in 0..4 {
            assert_eq!(s[(i, 0)], 238.0);
            assert_eq!(s[(i, 1)], 238.0);
            assert!(s[(i, 2)] > 0.0 && s[(i, 3)] > 0.0 && s[(i, 4)] > 0.0);
        }
    }

    #[test]
    fn joint_sampling_clt_on_random_design_vars() {
        let pm = ProbabilisticModel::new(
            vec![
                DesignVariable::random("d1", 0.0, 10.0, MarginalKind::Normal, Spread::Std(0.3)),
                DesignVariable::random("d2", 0.0, 10.0, MarginalKind::Normal, Spread::Std(0.3)),
            ],
            vec![],
        )
        .unwrap();
        let n = 1_000_000;
        let mut rng = scratch(32);
        let s = pm.sample_joint(&[3.44, 3.29], n, &mut rng).unwrap();
        let bound = 3.0 * 0.3 / (n as f64).sqrt();
        for (j, target) in [3.44, 3.29].iter().enumerate() {
            let mean = s.column(j).sum() / n as f64;
            assert!((mean - target).abs() < bound, "col {j}: {mean}");
        }
    }

    #[test]
    fn joint_sampling_rejects_out_of_bounds_design() {
        let pm = ProbabilisticModel::new(
            vec![DesignVariable::deterministic("d", 0.0, 1.0)],
            vec![],
        )
        .unwrap();
        let mut rng = scratch(33);
        assert!(matches!(
            pm.sample_joint(&[2.0], 1, &mut rng),
            Err(QrbdoError::Domain(_))
        ));
    }
}
